use dendrite_core::geom::{BinaryMap, Point};
use dendrite_core::hsr::refine_with;
use dendrite_core::nn::Shape;
use dendrite_core::pipeline::*;
use dendrite_core::Tensor;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn seeded(cases: u32, seed: u64) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn map_strategy(max: usize) -> impl Strategy<Value = BinaryMap> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u8..=1, h * w).prop_map(move |d| BinaryMap::from_vec(h, w, d).unwrap())
    })
}

fn sparse_map(h: usize, w: usize, density: f64) -> impl Strategy<Value = BinaryMap> {
    proptest::collection::vec(0.0..1.0f64, h * w).prop_map(move |v| {
        BinaryMap::from_vec(h, w, v.into_iter().map(|x| u8::from(x < density)).collect()).unwrap()
    })
}

fn raw_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        // Mix uniform values with values sitting exactly on the interesting thresholds.
        let cell = prop_oneof![
            3 => 0.0..=1.0f64,
            1 => Just(0.4),
            1 => Just(0.41),
            1 => Just(0.1),
        ];
        proptest::collection::vec(cell, h * w)
            .prop_map(move |d| Tensor::from_vec(Shape::new(1, 1, h, w), d).unwrap())
    })
}

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(0.0..1.0f64, 3 * h * w)
        .prop_map(move |d| Tensor::from_vec(Shape::new(1, 3, h, w), d).unwrap())
}

fn fill_strategy() -> impl Strategy<Value = FillMode> {
    prop_oneof![
        (0.0..=1.0f64).prop_map(FillMode::Constant),
        Just(FillMode::Gaussian),
        Just(FillMode::ConstantPlusBoundaryGaussian),
    ]
}

fn in_some_square(r: usize, c: usize, dets: &[Point], s: usize) -> bool {
    dets.iter().any(|p| {
        (r as isize) >= p.row as isize - s as isize
            && r < p.row + s
            && (c as isize) >= p.col as isize - s as isize
            && c < p.col + s
    })
}

/// Union-find over 8-neighbours, independent of the flood fill under test.
fn union_find_peaks(map: &BinaryMap) -> Vec<Point> {
    let (h, w) = map.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if !map.get(r, c) {
                continue;
            }
            for (dr, dc) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < h as isize && nc >= 0 && nc < w as isize && map.get(nr as usize, nc as usize) {
                    let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, nr as usize * w + nc as usize));
                    parent[a] = b;
                }
            }
        }
    }
    let mut sums: std::collections::BTreeMap<usize, (usize, usize, usize)> = Default::default();
    for p in map.ones() {
        let root = find(&mut parent, p.row * w + p.col);
        let e = sums.entry(root).or_default();
        e.0 += p.row;
        e.1 += p.col;
        e.2 += 1;
    }
    // Round half up in integer arithmetic: floor((2·sum + n) / 2n).
    let mut pts: Vec<Point> = sums
        .values()
        .map(|&(rs, cs, n)| Point::new((2 * rs + n) / (2 * n), (2 * cs + n) / (2 * n)))
        .collect();
    pts.sort_unstable();
    pts
}

#[test]
fn strict_boundary_at_point_four() {
    let raw = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.40, 0.41]).unwrap();
    assert_eq!(binarize_heatmap(&raw, 0.4).data(), &[0, 1]);
}

#[test]
fn two_by_two_block_rounds_half_up() {
    let mut m = BinaryMap::zeros(16, 16);
    for (r, c) in [(10, 10), (10, 11), (11, 10), (11, 11)] {
        m.set(r, c, true);
    }
    assert_eq!(extract_peaks(&m), vec![Point::new(11, 11)]);
}

#[test]
fn overlapping_squares_fill_union_once() {
    let img = Tensor::full(Shape::new(1, 3, 40, 40), 0.7);
    let dets = [Point::new(15, 15), Point::new(20, 22)];
    let out = crop_out(&img, &dets, 8, FillMode::Constant(0.25), 10.0, 11);
    for ch in 0..3 {
        for r in 0..40 {
            for c in 0..40 {
                let want = if in_some_square(r, c, &dets, 8) { 0.25 } else { 0.7 };
                assert_eq!(out.at(0, ch, r, c), want);
            }
        }
    }
}

proptest! {
    #![proptest_config(seeded(256, 0x5eed))]

    #[test]
    fn binarize_matches_elementwise_oracle(raw in raw_strategy(), tau in prop_oneof![Just(0.4), Just(0.1), 0.0..=1.0f64]) {
        let b = binarize_heatmap(&raw, tau);
        for (i, &v) in raw.data().iter().enumerate() {
            prop_assert_eq!(b.data()[i], u8::from(v > tau));
        }
    }

    #[test]
    fn binarize_is_idempotent(raw in raw_strategy(), tau in 0.0..=1.0f64) {
        let once = binarize_heatmap(&raw, tau);
        prop_assert_eq!(binarize_heatmap(&once.to_tensor(), 0.5), once);
    }

    #[test]
    fn lower_threshold_keeps_more(raw in raw_strategy(), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (beta, alpha) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(binarize_heatmap(&raw, alpha).is_subset_of(&binarize_heatmap(&raw, beta)));
    }

    #[test]
    fn merge_is_elementwise_or((a, b) in map_strategy(12).prop_flat_map(|a| {
        let (h, w) = a.dims();
        (Just(a), proptest::collection::vec(0u8..=1, h * w).prop_map(move |d| BinaryMap::from_vec(h, w, d).unwrap()))
    })) {
        let m = merge_heatmaps(&a, &b).unwrap();
        for i in 0..a.data().len() {
            prop_assert_eq!(m.data()[i], u8::from(a.data()[i] == 1 || b.data()[i] == 1));
        }
        prop_assert_eq!(&m, &merge_heatmaps(&b, &a).unwrap());
        let (h, w) = a.dims();
        prop_assert_eq!(merge_heatmaps(&a, &BinaryMap::zeros(h, w)).unwrap(), a);
    }

    #[test]
    fn crop_leaves_outside_pixels_untouched(
        img in image_strategy(24, 20),
        dets in proptest::collection::vec((0usize..24, 0usize..20), 0..4),
        s in 1usize..8,
        fill in fill_strategy(),
    ) {
        let dets: Vec<Point> = dets.into_iter().map(|(r, c)| Point::new(r, c)).collect();
        let out = crop_out(&img, &dets, s, fill, 3.0, 5);
        let mask = crop_mask(24, 20, &dets, s);
        for r in 0..24 {
            for c in 0..20 {
                prop_assert_eq!(mask.get(r, c), in_some_square(r, c, &dets, s));
                for ch in 0..3 {
                    if !mask.get(r, c) {
                        prop_assert_eq!(out.at(0, ch, r, c).to_bits(), img.at(0, ch, r, c).to_bits());
                    } else if let FillMode::Constant(v) = fill {
                        prop_assert_eq!(out.at(0, ch, r, c), v);
                    }
                }
            }
        }
    }

    #[test]
    fn h2_never_exceeds_h1(
        cores in proptest::collection::vec((0usize..32, 0usize..32), 0..6),
        det in sparse_map(32, 32, 0.05),
        radius in prop_oneof![Just(0.0), 0.0..12.0f64],
        gt_radius in 0.5..3.0f64,
    ) {
        let cores: Vec<Point> = cores.into_iter().map(|(r, c)| Point::new(r, c)).collect();
        let h1 = target_heatmap(32, 32, &cores, gt_radius);
        let h2 = derive_h2(&h1, &det, radius).unwrap();
        prop_assert!(h2.is_subset_of(&h1));
        for p in det.ones() {
            prop_assert!(!h2.get(p.row, p.col));
        }
        if radius == 0.0 {
            for p in h1.ones() {
                prop_assert_eq!(h2.get(p.row, p.col), !det.get(p.row, p.col));
            }
        }
    }

    #[test]
    fn refinement_only_removes(hat in sparse_map(24, 24, 0.08), keep_bits in proptest::collection::vec(any::<bool>(), 64)) {
        let img = Tensor::full(Shape::new(1, 3, 24, 24), 0.5);
        let mut calls = 0usize;
        let tilde = refine_with(&hat, &img, 8, |p| {
            calls = p.len();
            Ok((0..p.len()).map(|i| keep_bits[i % keep_bits.len()]).collect())
        }).unwrap();
        prop_assert!(tilde.is_subset_of(&hat));
        let comps = connected_components(&hat);
        prop_assert_eq!(calls, comps.len());
        let kept = (0..comps.len()).filter(|&i| keep_bits[i % keep_bits.len()]).count();
        prop_assert_eq!(connected_components(&tilde).len(), kept);
    }

    #[test]
    fn peaks_match_union_find(map in map_strategy(20)) {
        prop_assert_eq!(extract_peaks(&map), union_find_peaks(&map));
    }

    #[test]
    fn merged_points_contain_esd_points_when_blobs_are_apart(
        a in proptest::collection::vec((0usize..8, 0usize..8), 1..6),
        b in proptest::collection::vec((0usize..8, 0usize..8), 0..6),
    ) {
        // ESD blobs live on even 4x4 cells and HSD blobs on odd cells, so they never touch.
        let mut h1 = BinaryMap::zeros(64, 64);
        let mut h2 = BinaryMap::zeros(64, 64);
        for (map, cells, odd) in [(&mut h1, &a, false), (&mut h2, &b, true)] {
            for &(r, c) in cells {
                let (r0, c0) = (r * 8 + if odd { 4 } else { 0 }, c * 8 + if odd { 4 } else { 0 });
                for dr in 0..2 { for dc in 0..2 { map.set(r0 + dr, c0 + dc, true); } }
            }
        }
        let merged = extract_peaks(&merge_heatmaps(&h1, &h2).unwrap());
        for p in extract_peaks(&h1) {
            prop_assert!(merged.contains(&p));
        }
    }
}
