//! The detection cascade: thresholding, peak extraction, crop-destruction of easy
//! detections, second-stage targets, and the final merge.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cpdn::{build_cpdn, train_cpdn, CpdnArch, CpdnModel, Role, TrainLog, TrainOptions};
use crate::error::{Error, Result};
use crate::geom::{gaussian_smooth, BinaryMap, Point};
use crate::hsr::{sample_training_patches, train_hsr, HsrArch, HsrModel, HsrTrainOptions, PatchSamplerConfig};
use crate::{OptimizerState, Tensor};

/// How the square around an easy detection is destroyed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FillMode {
    /// Every pixel set to the given intensity in `[0, 1]`.
    Constant(f64),
    /// The square replaced by a Gaussian-smoothed copy of itself.
    Gaussian,
    /// Zero fill, then smoothing of a band just inside the square's edge.
    ConstantPlusBoundaryGaussian,
}

impl fmt::Display for FillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FillMode::Constant(v) => {
                let level = v * 255.0;
                if (level - level.round()).abs() < 1e-9 {
                    write!(f, "{}", level.round() as i64)
                } else {
                    write!(f, "{level}")
                }
            }
            FillMode::Gaussian => f.write_str("gaussian"),
            FillMode::ConstantPlusBoundaryGaussian => f.write_str("0+gaussian"),
        }
    }
}

impl FromStr for FillMode {
    type Err = Error;

    /// Accepts `gaussian`, `0+gaussian`, or an intensity on the 0..=255 scale.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(FillMode::Gaussian),
            "0+gaussian" => Ok(FillMode::ConstantPlusBoundaryGaussian),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown fill mode `{other}`")))?;
                if !(0.0..=255.0).contains(&v) {
                    return Err(Error::Config(format!("fill intensity {v} outside 0..=255")));
                }
                Ok(FillMode::Constant(v / 255.0))
            }
        }
    }
}

pub const BOUNDARY_BAND: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Half side of the destroyed square; `None` disables cropping.
    pub crop_half_size: Option<usize>,
    pub fill_mode: FillMode,
    pub gaussian_sigma: f64,
    /// Side of the smoothing kernel (odd).
    pub gaussian_kernel: usize,
    pub deviation: f64,
    pub gt_suppression_radius: f64,
    /// Ground-truth heatmaps mark pixels strictly closer than this to a core.
    pub gt_radius: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.1,
            crop_half_size: Some(40),
            fill_mode: FillMode::Constant(0.0),
            gaussian_sigma: 10.0,
            gaussian_kernel: 11,
            deviation: 10.0,
            gt_suppression_radius: 0.0,
            gt_radius: 1.0,
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.beta && self.beta <= self.alpha && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= beta <= alpha <= 1, got beta {} alpha {}",
                self.beta, self.alpha
            )));
        }
        if self.crop_half_size == Some(0) {
            return Err(Error::Config("crop_half_size must be at least 1".into()));
        }
        if self.gaussian_kernel % 2 == 0 {
            return Err(Error::Config("gaussian_kernel must be odd".into()));
        }
        if self.deviation < 0.0 || self.gt_suppression_radius < 0.0 || self.gt_radius <= 0.0 {
            return Err(Error::Config("distances must be non-negative".into()));
        }
        if let FillMode::Constant(v) = self.fill_mode {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("fill value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `1` exactly where `raw > tau`.
pub fn binarize_heatmap(raw: &Tensor, tau: f64) -> BinaryMap {
    let s = raw.shape();
    let data = raw.data()[..s.plane()]
        .iter()
        .map(|&v| u8::from(v > tau))
        .collect();
    BinaryMap::from_vec(s.h, s.w, data).expect("plane-sized 0/1 data")
}

/// 8-connected components of `map`, each as its list of pixels, ordered by first pixel.
pub fn connected_components(map: &BinaryMap) -> Vec<Vec<Point>> {
    let (h, w) = map.dims();
    let mut label = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if map.data()[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut pixels = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            pixels.push(Point::new(r, c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if map.data()[j] == 1 && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        comps.push(pixels);
    }
    comps
}

fn centroid(pixels: &[Point]) -> Point {
    let n = pixels.len() as f64;
    let r = pixels.iter().map(|p| p.row as f64).sum::<f64>() / n;
    let c = pixels.iter().map(|p| p.col as f64).sum::<f64>() / n;
    Point::new((r + 0.5).floor() as usize, (c + 0.5).floor() as usize)
}

/// One point per 8-connected component (its centroid, halves rounded up), sorted row-major.
pub fn extract_peaks(map: &BinaryMap) -> Vec<Point> {
    let mut pts: Vec<Point> = connected_components(map).iter().map(|c| centroid(c)).collect();
    pts.sort_unstable();
    pts
}

/// Ground-truth heatmap: ones strictly within `radius` of a core.
pub fn target_heatmap(h: usize, w: usize, cores: &[Point], radius: f64) -> BinaryMap {
    let mut m = BinaryMap::zeros(h, w);
    let reach = radius.ceil() as isize;
    for p in cores {
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (p.row as isize + dr, p.col as isize + dc);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    continue;
                }
                if ((dr * dr + dc * dc) as f64).sqrt() < radius {
                    m.set(r as usize, c as usize, true);
                }
            }
        }
    }
    m
}

/// Pixel mask of the union of `[i−s, i+s) × [j−s, j+s)` squares, clipped to the image.
pub fn crop_mask(h: usize, w: usize, detections: &[Point], s: usize) -> BinaryMap {
    let mut m = BinaryMap::zeros(h, w);
    for p in detections {
        for r in p.row.saturating_sub(s)..(p.row + s).min(h) {
            for c in p.col.saturating_sub(s)..(p.col + s).min(w) {
                m.set(r, c, true);
            }
        }
    }
    m
}

/// Mask pixels within `band` of the mask's outside (Chebyshev distance), or of the image edge
/// where the square is clipped there.
fn inner_band(mask: &BinaryMap, band: usize) -> BinaryMap {
    let (h, w) = mask.dims();
    let mut out = BinaryMap::zeros(h, w);
    let b = band as isize;
    for p in mask.ones() {
        let near_edge = (-b..=b).any(|dr| {
            (-b..=b).any(|dc| {
                let (r, c) = (p.row as isize + dr, p.col as isize + dc);
                r >= 0 && c >= 0 && r < h as isize && c < w as isize && !mask.get(r as usize, c as usize)
            })
        });
        if near_edge {
            out.set(p.row, p.col, true);
        }
    }
    out
}

/// Destroys the structure around each detection in an `N×C×H×W` image (every sample and
/// channel treated alike). Pixels outside the squares are copied unchanged.
pub fn crop_out(
    image: &Tensor,
    detections: &[Point],
    s: usize,
    fill: FillMode,
    sigma: f64,
    kernel: usize,
) -> Tensor {
    let mut out = image.clone();
    if detections.is_empty() || s == 0 {
        return out;
    }
    let shape = image.shape();
    let (h, w) = (shape.h, shape.w);
    let mask = crop_mask(h, w, detections, s);
    let radius = kernel / 2;
    let band = match fill {
        FillMode::ConstantPlusBoundaryGaussian => Some(inner_band(&mask, BOUNDARY_BAND)),
        _ => None,
    };
    for plane in out.data_mut().chunks_mut(h * w) {
        match fill {
            FillMode::Constant(v) => {
                for (x, &m) in plane.iter_mut().zip(mask.data()) {
                    if m == 1 {
                        *x = v;
                    }
                }
            }
            FillMode::Gaussian => {
                let smooth = gaussian_smooth(plane, h, w, sigma, radius);
                for ((x, &m), y) in plane.iter_mut().zip(mask.data()).zip(smooth) {
                    if m == 1 {
                        *x = y;
                    }
                }
            }
            FillMode::ConstantPlusBoundaryGaussian => {
                for (x, &m) in plane.iter_mut().zip(mask.data()) {
                    if m == 1 {
                        *x = 0.0;
                    }
                }
                let smooth = gaussian_smooth(plane, h, w, sigma, radius);
                let band = band.as_ref().expect("band computed for this mode");
                for ((x, &m), y) in plane.iter_mut().zip(band.data()).zip(smooth) {
                    if m == 1 {
                        *x = y;
                    }
                }
            }
        }
    }
    out
}

/// Second-stage target: `H₁` with every pixel detected by the first stage cleared. With a
/// positive `suppression_radius`, whole ground-truth blobs whose centre lies within that
/// distance of a detected peak are cleared as well.
pub fn derive_h2(h1: &BinaryMap, hat_h1: &BinaryMap, suppression_radius: f64) -> Result<BinaryMap> {
    h1.check_same_dims(hat_h1, "derive_h2")?;
    let (h, w) = h1.dims();
    let data = h1
        .data()
        .iter()
        .zip(hat_h1.data())
        .map(|(&g, &d)| if d == 1 { 0 } else { g })
        .collect();
    let mut h2 = BinaryMap::from_vec(h, w, data)?;
    if suppression_radius > 0.0 {
        let detected = extract_peaks(hat_h1);
        for comp in connected_components(h1) {
            let core = centroid(&comp);
            if detected.iter().any(|d| d.dist(&core) <= suppression_radius) {
                for p in comp {
                    h2.set(p.row, p.col, false);
                }
            }
        }
    }
    Ok(h2)
}

/// Elementwise OR.
pub fn merge_heatmaps(a: &BinaryMap, b: &BinaryMap) -> Result<BinaryMap> {
    a.check_same_dims(b, "merge_heatmaps")?;
    let (h, w) = a.dims();
    BinaryMap::from_vec(h, w, a.data().iter().zip(b.data()).map(|(&x, &y)| x | y).collect())
}

/// How far the cascade runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stages {
    Esd,
    EsdHsd,
    Full,
}

/// Every intermediate of one cascade run. Later stages are `None` when the run stopped early.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub raw_h1: Tensor,
    pub hat_h1: BinaryMap,
    pub esd_points: Vec<Point>,
    pub i2: Option<Tensor>,
    /// Second-stage target, present only when ground truth was supplied.
    pub h2: Option<BinaryMap>,
    pub raw_h2: Option<Tensor>,
    pub hat_h2: Option<BinaryMap>,
    pub hsd_points: Vec<Point>,
    pub tilde_h2: Option<BinaryMap>,
    /// Second-stage points kept by refinement (all of them when refinement did not run).
    pub kept_points: Vec<Point>,
    pub merged: BinaryMap,
    pub merged_points: Vec<Point>,
}

impl StageOutputs {
    /// Final predictions, each tagged `esd` when its merged blob overlaps the first-stage map
    /// and `hsd` otherwise.
    pub fn tagged_points(&self) -> Vec<(Point, &'static str)> {
        let mut tagged: Vec<(Point, &'static str)> = connected_components(&self.merged)
            .iter()
            .map(|comp| {
                let esd = comp.iter().any(|p| self.hat_h1.get(p.row, p.col));
                (centroid(comp), if esd { "esd" } else { "hsd" })
            })
            .collect();
        tagged.sort_unstable();
        tagged
    }
}

/// Crops `image` around `points` per the configuration (identity when cropping is off).
pub fn stage2_input(image: &Tensor, points: &[Point], cfg: &PipelineConfig) -> Tensor {
    match cfg.crop_half_size {
        Some(s) => crop_out(image, points, s, cfg.fill_mode, cfg.gaussian_sigma, cfg.gaussian_kernel),
        None => image.clone(),
    }
}

/// Runs the cascade on one `1×3×H×W` image. `hsr` may be omitted unless `stages` is `Full`.
/// Passing ground-truth `cores` also records the second-stage target `H₂`.
pub fn run_pipeline(
    image: &Tensor,
    d1: &CpdnModel<f64>,
    d2: Option<&CpdnModel<f64>>,
    hsr: Option<&HsrModel>,
    cfg: &PipelineConfig,
    stages: Stages,
    cores: Option<&[Point]>,
) -> Result<StageOutputs> {
    if image.shape().n != 1 {
        return Err(Error::Usage(format!("run_pipeline takes one image, got {}", image.shape())));
    }
    let raw_h1 = d1.forward(image)?;
    let hat_h1 = binarize_heatmap(&raw_h1, cfg.alpha);
    let esd_points = extract_peaks(&hat_h1);
    let mut out = StageOutputs {
        raw_h1,
        merged: hat_h1.clone(),
        merged_points: esd_points.clone(),
        hat_h1,
        esd_points,
        i2: None,
        h2: None,
        raw_h2: None,
        hat_h2: None,
        hsd_points: Vec::new(),
        tilde_h2: None,
        kept_points: Vec::new(),
    };
    let (h, w) = out.hat_h1.dims();
    if let Some(cores) = cores {
        let h1 = target_heatmap(h, w, cores, cfg.gt_radius);
        out.h2 = Some(derive_h2(&h1, &out.hat_h1, cfg.gt_suppression_radius)?);
    }
    if stages == Stages::Esd {
        return Ok(out);
    }
    let d2 = d2.ok_or_else(|| Error::Usage("second-stage detector required".into()))?;
    let i2 = stage2_input(image, &out.esd_points, cfg);
    let raw_h2 = d2.forward(&i2)?;
    let hat_h2 = binarize_heatmap(&raw_h2, cfg.beta);
    out.hsd_points = extract_peaks(&hat_h2);
    let tilde_h2 = if stages == Stages::Full {
        let hsr = hsr.ok_or_else(|| Error::Usage("refinement classifier required".into()))?;
        hsr.refine(&hat_h2, &i2)?
    } else {
        hat_h2.clone()
    };
    out.kept_points = extract_peaks(&tilde_h2);
    out.merged = merge_heatmaps(&out.hat_h1, &tilde_h2)?;
    out.merged_points = extract_peaks(&out.merged);
    out.i2 = Some(i2);
    out.raw_h2 = Some(raw_h2);
    out.hat_h2 = Some(hat_h2);
    out.tilde_h2 = Some(tilde_h2);
    Ok(out)
}

/// Final point sets of the three cascade prefixes, computed from one full run.
pub fn prefix_points(out: &StageOutputs) -> Result<[Vec<Point>; 3]> {
    let esd = out.esd_points.clone();
    let hsd = match &out.hat_h2 {
        Some(h2) => extract_peaks(&merge_heatmaps(&out.hat_h1, h2)?),
        None => esd.clone(),
    };
    Ok([esd, hsd, out.merged_points.clone()])
}

/// A labelled training or evaluation image.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub cores: Vec<Point>,
}

impl LabeledImage {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }

    pub fn target(&self, radius: f64) -> BinaryMap {
        let (h, w) = self.dims();
        target_heatmap(h, w, &self.cores, radius)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOptions {
    pub arch: CpdnArch,
    pub d1: TrainOptions,
    pub d2: TrainOptions,
    pub hsr_arch: HsrArch,
    pub hsr: HsrTrainOptions,
    pub sampler: PatchSamplerConfig,
    pub pipeline: PipelineConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainedCascade {
    pub d1: CpdnModel<f64>,
    pub d2: CpdnModel<f64>,
    pub hsr: HsrModel,
    pub d1_log: TrainLog,
    pub d2_log: TrainLog,
    pub hsr_log: TrainLog,
}

/// Derived seeds for the three stages.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let salt = match stage {
        "d1" => 0x0D1,
        "d2" => 0x0D2,
        "hsr" => 0x4A5,
        _ => 0xFFF,
    };
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

pub fn stage1_pairs(train: &[LabeledImage], cfg: &PipelineConfig) -> Vec<(Tensor, Tensor)> {
    train
        .iter()
        .map(|s| (s.image.clone(), s.target(cfg.gt_radius).to_tensor()))
        .collect()
}

/// First-stage inference on every training image, yielding the second-stage
/// `(I₂, H₂)` pairs.
pub fn stage2_pairs(
    d1: &CpdnModel<f64>,
    train: &[LabeledImage],
    cfg: &PipelineConfig,
) -> Result<Vec<(Tensor, Tensor)>> {
    train
        .iter()
        .map(|s| {
            let out = run_pipeline(&s.image, d1, None, None, cfg, Stages::Esd, Some(&s.cores))?;
            let h2 = out.h2.expect("cores supplied");
            Ok((stage2_input(&s.image, &out.esd_points, cfg), h2.to_tensor()))
        })
        .collect()
}

/// Cores still marked in a second-stage target.
pub fn remaining_cores(cores: &[Point], h2: &Tensor) -> Vec<Point> {
    cores
        .iter()
        .copied()
        .filter(|p| h2.at(0, 0, p.row, p.col) > 0.5)
        .collect()
}

pub fn train_d1(train: &[LabeledImage], opts: &CascadeOptions) -> Result<(CpdnModel<f64>, TrainLog)> {
    let mut d1 = build_cpdn::<f64>(opts.arch.clone(), stage_seed(opts.seed, "d1"), Role::D1)?;
    let mut optim = OptimizerState::adam(opts.d1.learning_rate);
    let data = stage1_pairs(train, &opts.pipeline);
    let log = train_cpdn(&mut d1, &data, &opts.d1, &mut optim, 0..opts.d1.epochs)?;
    Ok((d1, log))
}

pub fn train_d2(
    pairs: &[(Tensor, Tensor)],
    opts: &CascadeOptions,
) -> Result<(CpdnModel<f64>, TrainLog)> {
    let mut d2 = build_cpdn::<f64>(opts.arch.clone(), stage_seed(opts.seed, "d2"), Role::D2)?;
    let mut optim = OptimizerState::adam(opts.d2.learning_rate);
    let log = train_cpdn(&mut d2, pairs, &opts.d2, &mut optim, 0..opts.d2.epochs)?;
    Ok((d2, log))
}

/// Refinement patches are drawn from the second-stage inputs around the cores those inputs
/// still contain, so the classifier sees the same kind of image it filters at detection time.
pub fn train_refiner(
    train: &[LabeledImage],
    pairs: &[(Tensor, Tensor)],
    opts: &CascadeOptions,
) -> Result<(HsrModel, TrainLog)> {
    let sources: Vec<LabeledImage> = train
        .iter()
        .zip(pairs)
        .map(|(s, (i2, h2))| LabeledImage {
            image: i2.clone(),
            cores: remaining_cores(&s.cores, h2),
        })
        .collect();
    let sampler = PatchSamplerConfig {
        seed: stage_seed(opts.seed, "hsr"),
        ..opts.sampler.clone()
    };
    let patches = sample_training_patches(&sources, &sampler)?;
    let mut model = HsrModel::new(opts.hsr_arch.clone(), stage_seed(opts.seed, "hsr"))?;
    let log = train_hsr(&mut model, &patches, &opts.hsr)?;
    Ok((model, log))
}

/// Trains `D₁`, then `D₂` on the cropped images with `D₁` held fixed, then the refiner.
pub fn train_cascade(train: &[LabeledImage], opts: &CascadeOptions) -> Result<TrainedCascade> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    opts.pipeline.validate()?;
    let (d1, d1_log) = train_d1(train, opts)?;
    let pairs = stage2_pairs(&d1, train, &opts.pipeline)?;
    let (d2, d2_log) = train_d2(&pairs, opts)?;
    let (hsr, hsr_log) = train_refiner(train, &pairs, opts)?;
    Ok(TrainedCascade {
        d1,
        d2,
        hsr,
        d1_log,
        d2_log,
        hsr_log,
    })
}

/// Fraction of second-stage targets with no marked pixel.
pub fn empty_target_fraction(pairs: &[(Tensor, Tensor)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let empty = pairs.iter().filter(|(_, t)| t.data().iter().all(|&v| v == 0.0)).count();
    empty as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;

    #[test]
    fn strict_threshold() {
        let raw = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.40, 0.41]).unwrap();
        assert_eq!(binarize_heatmap(&raw, 0.4).data(), &[0, 1]);
        let zeros = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(binarize_heatmap(&zeros, 0.0).is_empty());
    }

    #[test]
    fn peaks_of_small_blobs() {
        let mut m = BinaryMap::zeros(16, 16);
        m.set(3, 4, true);
        assert_eq!(extract_peaks(&m), vec![Point::new(3, 4)]);
        let mut m = BinaryMap::zeros(16, 16);
        for (r, c) in [(10, 10), (10, 11), (11, 10), (11, 11)] {
            m.set(r, c, true);
        }
        assert_eq!(extract_peaks(&m), vec![Point::new(11, 11)]);
        // diagonal neighbours join one component
        let mut m = BinaryMap::zeros(8, 8);
        m.set(1, 1, true);
        m.set(2, 2, true);
        m.set(6, 6, true);
        assert_eq!(extract_peaks(&m), vec![Point::new(2, 2), Point::new(6, 6)]);
    }

    #[test]
    fn crop_square_is_eighty_wide() {
        let img = Tensor::ones(Shape::new(1, 3, 128, 128));
        let out = crop_out(&img, &[Point::new(64, 64)], 40, FillMode::Constant(0.0), 10.0, 11);
        for c in 0..3 {
            let zeros = (0..128 * 128)
                .filter(|&i| out.data()[c * 128 * 128 + i] == 0.0)
                .count();
            assert_eq!(zeros, 80 * 80);
        }
        assert_eq!(out.at(0, 0, 24, 24), 0.0);
        assert_eq!(out.at(0, 0, 103, 103), 0.0);
        assert_eq!(out.at(0, 0, 104, 104), 1.0);
        assert_eq!(out.at(0, 0, 23, 64), 1.0);
    }

    #[test]
    fn crop_without_detections_is_identity() {
        let img = Tensor::from_vec(Shape::new(1, 3, 4, 4), (0..48).map(f64::from).collect()).unwrap();
        for fill in [FillMode::Constant(0.5), FillMode::Gaussian, FillMode::ConstantPlusBoundaryGaussian] {
            assert_eq!(crop_out(&img, &[], 2, fill, 3.0, 11), img);
        }
    }

    #[test]
    fn boundary_band_mode_zeroes_the_interior() {
        let img = Tensor::ones(Shape::new(1, 3, 64, 64));
        let out = crop_out(&img, &[Point::new(32, 32)], 12, FillMode::ConstantPlusBoundaryGaussian, 10.0, 11);
        // centre is more than 5 px inside the square
        assert_eq!(out.at(0, 0, 32, 32), 0.0);
        // edge pixel picks up smoothed outside intensity
        assert!(out.at(0, 0, 20, 32) > 0.0 && out.at(0, 0, 20, 32) < 1.0);
        assert_eq!(out.at(0, 0, 19, 32), 1.0);
    }

    #[test]
    fn h2_literal_and_suppressed() {
        let cores = [Point::new(10, 10), Point::new(30, 30), Point::new(50, 10)];
        let h1 = target_heatmap(64, 64, &cores, 1.0);
        assert_eq!(derive_h2(&h1, &BinaryMap::zeros(64, 64), 0.0).unwrap(), h1);
        let hat = BinaryMap::from_points(64, 64, &[Point::new(10, 10), Point::new(36, 30), Point::new(50, 22)]);
        let h2 = derive_h2(&h1, &hat, 0.0).unwrap();
        assert!(!h2.get(10, 10) && h2.get(30, 30) && h2.get(50, 10));
        let h2 = derive_h2(&h1, &hat, 10.0).unwrap();
        // 6 px away is suppressed, 12 px away is kept
        assert!(!h2.get(30, 30) && h2.get(50, 10));
    }

    #[test]
    fn target_radius_one_is_a_single_pixel() {
        let m = target_heatmap(8, 8, &[Point::new(4, 4)], 1.0);
        assert_eq!(m.count_ones(), 1);
        let m = target_heatmap(8, 8, &[Point::new(4, 4)], 2.0);
        assert_eq!(m.count_ones(), 9);
    }

    #[test]
    fn fill_mode_text() {
        for s in ["0", "128", "255", "gaussian", "0+gaussian"] {
            assert_eq!(s.parse::<FillMode>().unwrap().to_string(), s);
        }
        assert!("300".parse::<FillMode>().is_err());
        assert!("blue".parse::<FillMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            beta: 0.5,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
