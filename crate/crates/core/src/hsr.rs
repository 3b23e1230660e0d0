//! Hard-sample refinement: a patch classifier that accepts or rejects second-stage
//! candidates, and the ring-based sampler that builds its training set.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpdn::{epoch_order, TrainLog};
use crate::error::{Error, Result};
use crate::geom::{BinaryMap, Point};
use crate::nn::{kaiming_uniform, logistic, Padding, Shape};
use crate::pipeline::{connected_components, LabeledImage};
use crate::{OptimizerState, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSamplerConfig {
    pub radius_a: f64,
    pub radius_b: f64,
    pub radius_c: f64,
    pub positives_per_core: usize,
    /// Negatives drawn from each of the two rings.
    pub negatives_per_band: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for PatchSamplerConfig {
    fn default() -> Self {
        Self {
            radius_a: 4.0,
            radius_b: 15.0,
            radius_c: 40.0,
            positives_per_core: 5,
            negatives_per_band: 5,
            patch_size: 80,
            seed: 0,
        }
    }
}

impl PatchSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.radius_a && self.radius_a < self.radius_b && self.radius_b < self.radius_c) {
            return Err(Error::Config(format!(
                "sampler radii must increase strictly: {} {} {}",
                self.radius_a, self.radius_b, self.radius_c
            )));
        }
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "patch_size must be positive and even, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PatchKind {
    Positive,
    /// Ring between `radius_a` and `radius_b`.
    NearNegative,
    /// Ring between `radius_b` and `radius_c`.
    FarNegative,
}

impl PatchKind {
    pub fn label(self) -> u8 {
        u8::from(self == PatchKind::Positive)
    }
}

/// Training patches with labels and provenance.
#[derive(Clone, Debug, Default)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub centers: Vec<Point>,
    pub kinds: Vec<PatchKind>,
    /// `(image index, core index)` each patch was drawn around.
    pub origins: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push(&mut self, patch: Tensor, kind: PatchKind, center: Point, origin: (usize, usize)) {
        self.patches.push(patch);
        self.labels.push(kind.label());
        self.centers.push(center);
        self.kinds.push(kind);
        self.origins.push(origin);
    }
}

/// The `size × size` window `[i − size/2, i + size/2) × [j − size/2, j + size/2)` of a
/// `1×C×H×W` image, zero where it leaves the image.
pub fn extract_candidate_patch(image: &Tensor, center: Point, size: usize) -> Tensor {
    let s = image.shape();
    let half = (size / 2) as isize;
    let mut out = Tensor::zeros(Shape::new(1, s.c, size, size));
    let (r0, c0) = (center.row as isize - half, center.col as isize - half);
    for ch in 0..s.c {
        for pr in 0..size {
            let r = r0 + pr as isize;
            if r < 0 || r >= s.h as isize {
                continue;
            }
            for pc in 0..size {
                let c = c0 + pc as isize;
                if c < 0 || c >= s.w as isize {
                    continue;
                }
                out.set(0, ch, pr, pc, image.at(0, ch, r as usize, c as usize));
            }
        }
    }
    out
}

const MAX_DRAWS: usize = 10_000;

/// Uniform draw over the ring `lo < dist ≤ hi` (a disk `dist < hi` when `lo` is `None`)
/// around `core`, rounded to a pixel that still satisfies the ring condition and `accept`.
fn draw_center<R: Rng>(
    rng: &mut R,
    core: Point,
    lo: Option<f64>,
    hi: f64,
    h: usize,
    w: usize,
    accept: impl Fn(Point) -> bool,
) -> Option<Point> {
    let inner = lo.unwrap_or(0.0);
    for _ in 0..MAX_DRAWS {
        let u: f64 = rng.gen();
        let rad = (inner * inner + u * (hi * hi - inner * inner)).sqrt();
        let theta = rng.gen_range(0.0..2.0 * PI);
        let r = (core.row as f64 + rad * theta.sin()).round();
        let c = (core.col as f64 + rad * theta.cos()).round();
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            continue;
        }
        let p = Point::new(r as usize, c as usize);
        let d = p.dist(&core);
        let in_ring = match lo {
            None => d < hi,
            Some(lo) => d > lo && d <= hi,
        };
        if in_ring && accept(p) {
            return Some(p);
        }
    }
    None
}

/// Per core: positives strictly inside the inner disk, then negatives from the two rings.
/// Negatives never fall within `radius_a` of any core in the image.
pub fn sample_training_patches(images: &[LabeledImage], cfg: &PatchSamplerConfig) -> Result<PatchSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = PatchSet::default();
    for (ii, img) in images.iter().enumerate() {
        let (h, w) = img.dims();
        for (ci, &core) in img.cores.iter().enumerate() {
            let clear = |p: Point| img.cores.iter().all(|c| c.dist(&p) > cfg.radius_a);
            let plan = [
                (PatchKind::Positive, None, cfg.radius_a, cfg.positives_per_core),
                (PatchKind::NearNegative, Some(cfg.radius_a), cfg.radius_b, cfg.negatives_per_band),
                (PatchKind::FarNegative, Some(cfg.radius_b), cfg.radius_c, cfg.negatives_per_band),
            ];
            for (kind, lo, hi, count) in plan {
                for _ in 0..count {
                    let center = draw_center(&mut rng, core, lo, hi, h, w, |p| {
                        kind == PatchKind::Positive || clear(p)
                    })
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "image {ii}: no valid {kind:?} patch centre around core ({}, {})",
                            core.row, core.col
                        ))
                    })?;
                    let patch = extract_candidate_patch(&img.image, center, cfg.patch_size);
                    set.push(patch, kind, center, (ii, ci));
                }
            }
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsrArch {
    pub patch_size: usize,
    pub in_channels: usize,
    /// Widths of the three conv + pool blocks.
    pub channels: [usize; 3],
}

impl Default for HsrArch {
    fn default() -> Self {
        Self {
            patch_size: 80,
            in_channels: 3,
            channels: [8, 16, 16],
        }
    }
}

impl HsrArch {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return Err(Error::Config(format!(
                "classifier patch size must be a positive multiple of 8, got {}",
                self.patch_size
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        let side = self.patch_size / 8;
        self.channels[2] * side * side
    }
}

#[derive(Clone, Debug)]
pub struct HsrModel {
    pub arch: HsrArch,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsrTrainOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HsrTrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl HsrModel {
    pub fn new(arch: HsrArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut c_in = arch.in_channels;
        for (i, &c) in arch.channels.iter().enumerate() {
            let shape = Shape::new(c, c_in, 3, 3);
            params.insert(format!("conv{i}.w"), kaiming_uniform(shape, c_in * 9, &mut rng))?;
            params.insert(format!("conv{i}.b"), Tensor::zeros(Shape::new(1, c, 1, 1)))?;
            c_in = c;
        }
        let f = arch.features();
        params.insert("fc.w", kaiming_uniform(Shape::new(1, 1, 1, f), f, &mut rng))?;
        params.insert("fc.b", Tensor::zeros(Shape::new(1, 1, 1, 1)))?;
        Ok(Self { arch, params })
    }

    /// Rebuilds a classifier around loaded parameters.
    pub fn from_parts(arch: HsrArch, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(arch, 0)?;
        crate::nn::restore_into(&mut model.params, &params)?;
        Ok(model)
    }

    /// Records the `(n, 1, 1, 1)` logits of an `n×C×P×P` batch.
    pub fn forward_on(&self, t: &mut Tape, x: crate::nn::Var) -> Result<crate::nn::Var> {
        let s = t.shape(x);
        let p = self.arch.patch_size;
        if s.c != self.arch.in_channels || s.h != p || s.w != p {
            return Err(Error::Config(format!(
                "classifier expects patches of {}x{p}x{p}, got {s}",
                self.arch.in_channels
            )));
        }
        let mut h = x;
        for i in 0..3 {
            let w = t.param(&self.params, &format!("conv{i}.w"))?;
            let b = t.param(&self.params, &format!("conv{i}.b"))?;
            h = t.conv2d(h, w, Some(b), 1, Padding::Same)?;
            h = t.relu(h);
            h = t.max_pool_2x2(h)?;
        }
        let w = t.param(&self.params, "fc.w")?;
        let b = t.param(&self.params, "fc.b")?;
        t.dense(h, w, b)
    }

    pub fn logits(&self, patches: &[&Tensor]) -> Result<Vec<f64>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::inference();
        let x = t.constant(Tensor::stack(patches)?);
        let y = self.forward_on(&mut t, x)?;
        Ok(t.value(y).data().to_vec())
    }

    /// `true` where `sigmoid(logit) > 0.5`.
    pub fn classify(&self, patches: &[&Tensor]) -> Result<Vec<bool>> {
        Ok(self.logits(patches)?.into_iter().map(|z| logistic(z) > 0.5).collect())
    }

    /// Keeps each blob of `hat_h2` whose centroid patch in `i2` the classifier accepts.
    pub fn refine(&self, hat_h2: &BinaryMap, i2: &Tensor) -> Result<BinaryMap> {
        refine_with(hat_h2, i2, self.arch.patch_size, |p| self.classify(p))
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model".into(), "hsr".into());
        m.insert(
            "arch".into(),
            serde_json::to_string(&self.arch).expect("arch serializes"),
        );
        m
    }

    pub fn arch_from_meta(meta: &BTreeMap<String, String>) -> Result<HsrArch> {
        if meta.get("model").map(String::as_str) != Some("hsr") {
            return Err(Error::Config("checkpoint does not hold a refinement classifier".into()));
        }
        let raw = meta
            .get("arch")
            .ok_or_else(|| Error::Config("checkpoint lacks classifier arch".into()))?;
        serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad classifier arch: {e}")))
    }
}

/// Refinement with an arbitrary batch decision function over candidate patches.
pub fn refine_with(
    hat_h2: &BinaryMap,
    i2: &Tensor,
    patch_size: usize,
    decide: impl FnOnce(&[&Tensor]) -> Result<Vec<bool>>,
) -> Result<BinaryMap> {
    let (h, w) = hat_h2.dims();
    let s = i2.shape();
    if (s.h, s.w) != (h, w) {
        return Err(Error::Config(format!(
            "refine: heatmap {h}x{w} does not match image {s}"
        )));
    }
    let comps = connected_components(hat_h2);
    let patches: Vec<Tensor> = comps
        .iter()
        .map(|c| extract_candidate_patch(i2, component_center(c), patch_size))
        .collect();
    let refs: Vec<&Tensor> = patches.iter().collect();
    let keep = decide(&refs)?;
    let mut out = BinaryMap::zeros(h, w);
    for (comp, k) in comps.iter().zip(keep) {
        if k {
            for p in comp {
                out.set(p.row, p.col, true);
            }
        }
    }
    Ok(out)
}

fn component_center(pixels: &[Point]) -> Point {
    let n = pixels.len() as f64;
    let r = pixels.iter().map(|p| p.row as f64).sum::<f64>() / n;
    let c = pixels.iter().map(|p| p.col as f64).sum::<f64>() / n;
    Point::new((r + 0.5).floor() as usize, (c + 0.5).floor() as usize)
}

/// Fraction of `set` the classifier labels correctly.
pub fn accuracy(model: &HsrModel, set: &PatchSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (chunk, labels) in set.patches.chunks(64).zip(set.labels.chunks(64)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        for (pred, &l) in model.classify(&refs)?.into_iter().zip(labels) {
            correct += usize::from(pred == (l == 1));
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Minibatch Adam on the mean binary cross-entropy.
pub fn train_hsr(model: &mut HsrModel, set: &PatchSet, opts: &HsrTrainOptions) -> Result<TrainLog> {
    let mut optim = OptimizerState::adam(opts.learning_rate);
    train_hsr_epochs(model, set, opts, &mut optim, 0..opts.epochs)
}

pub fn train_hsr_epochs(
    model: &mut HsrModel,
    set: &PatchSet,
    opts: &HsrTrainOptions,
    optim: &mut OptimizerState,
    epochs: Range<usize>,
) -> Result<TrainLog> {
    let fail = |message: String| Error::Training {
        stage: "hsr".into(),
        message,
    };
    let positives = set.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == set.len() {
        return Err(fail(format!(
            "need both labels, got {positives} positive of {} patches",
            set.len()
        )));
    }
    let batch = opts.batch_size.max(1);
    let mut log = TrainLog::default();
    for epoch in epochs {
        let order = epoch_order(set.len(), opts.seed, epoch);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let patches: Vec<&Tensor> = chunk.iter().map(|&i| &set.patches[i]).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| set.labels[i]).collect();
            let mut t = Tape::new();
            let x = t.constant(Tensor::stack(&patches)?);
            let z = model.forward_on(&mut t, x)?;
            let loss = t.bce_loss(z, &labels)?;
            let lv = t.value(loss).item()?;
            if !lv.is_finite() {
                return Err(fail(format!("non-finite loss at epoch {epoch}")));
            }
            t.backward(loss)?;
            t.write_param_grads(&mut model.params)?;
            optim.step(&mut model.params)?;
            total += lv;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
    }
    Ok(log)
}
