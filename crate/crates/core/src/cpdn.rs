//! Central point detection network: a small U-Net that regresses a one-channel
//! heatmap of dendrite cores from an RGB image, plus its training loop.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    kaiming_uniform, restore_into, OptimizerState, Padding, ParamStore, Scalar, Shape, Tape, Tensor, Var,
};

pub const GN_EPS: f64 = 1e-5;

/// Channel plan of one bottleneck block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl BottleneckSpec {
    pub fn num_params(&self) -> usize {
        let (i, m, o) = (self.in_channels, self.mid_channels, self.out_channels);
        2 * i + (i * m + m) + 2 * m + (m * m * 9 + m) + 2 * m + (m * o + o)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpdnArch {
    /// Number of pooling levels.
    pub depth: usize,
    pub base_channels: usize,
    pub bottlenecks_per_level: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square input side the model is built for, when known up front.
    pub input_size: Option<usize>,
}

impl Default for CpdnArch {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            bottlenecks_per_level: 1,
            groups: 4,
            in_channels: 3,
            out_channels: 1,
            input_size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    D1,
    D2,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::D1 => "d1",
            Role::D2 => "d2",
        }
    }
}

/// One named block of the network, in execution order.
#[derive(Clone, Debug)]
enum Layer {
    Bottleneck(String, BottleneckSpec),
}

impl CpdnArch {
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("cpdn depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.bottlenecks_per_level == 0 || self.groups == 0 {
            return Err(Error::Config(
                "cpdn base_channels, bottlenecks_per_level and groups must be positive".into(),
            ));
        }
        for spec in self.blocks().into_iter().map(|Layer::Bottleneck(_, s)| s) {
            for c in [spec.in_channels, spec.mid_channels] {
                if c % self.groups != 0 {
                    return Err(Error::Config(format!(
                        "cpdn: {c} channels not divisible into {} groups",
                        self.groups
                    )));
                }
            }
        }
        if let Some(side) = self.input_size {
            self.check_resolution(side, side)?;
        }
        Ok(())
    }

    /// Inputs must be divisible by `2^depth` in both dimensions.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "cpdn with depth {} needs input height and width divisible by {m}, got {h}x{w}",
                self.depth
            )));
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<Layer> {
        let mut out = Vec::new();
        let mut ch = self.base_channels;
        let bn = |name: String, i: usize, o: usize| {
            Layer::Bottleneck(
                name,
                BottleneckSpec {
                    in_channels: i,
                    mid_channels: o,
                    out_channels: o,
                    groups: self.groups,
                },
            )
        };
        for level in 0..self.depth {
            for b in 0..self.bottlenecks_per_level {
                out.push(bn(format!("enc{level}.{b}"), ch, self.channels(level)));
                ch = self.channels(level);
            }
        }
        for b in 0..self.bottlenecks_per_level {
            out.push(bn(format!("bridge.{b}"), ch, self.channels(self.depth)));
            ch = self.channels(self.depth);
        }
        for level in (0..self.depth).rev() {
            for b in 0..self.bottlenecks_per_level {
                let input = if b == 0 { ch + self.channels(level) } else { ch };
                out.push(bn(format!("dec{level}.{b}"), input, self.channels(level)));
                ch = self.channels(level);
            }
        }
        out
    }

    /// Number of scalar parameters, computed from the layer plan alone.
    pub fn num_params(&self) -> usize {
        let stem = self.in_channels * self.base_channels * 9 + self.base_channels;
        let head = self.base_channels * self.out_channels + self.out_channels;
        stem + head
            + self
                .blocks()
                .iter()
                .map(|Layer::Bottleneck(_, s)| s.num_params())
                .sum::<usize>()
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([(
            "arch".to_string(),
            serde_json::to_string(self).expect("arch serializes"),
        )])
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let raw = meta
            .get("arch")
            .ok_or_else(|| Error::Config("checkpoint has no `arch` entry".into()))?;
        serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad arch in checkpoint: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct CpdnModel<S: Scalar> {
    pub arch: CpdnArch,
    pub params: ParamStore<S>,
    pub role: Role,
}

fn init_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let shape = Shape::new(c_out, c_in, k, k);
    store.insert(format!("{name}.w"), kaiming_uniform(shape, c_in * k * k, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(Shape::new(1, c_out, 1, 1)))
}

fn init_gn<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::ones(Shape::new(1, c, 1, 1)))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(Shape::new(1, c, 1, 1)))
}

/// Builds a detector with parameters drawn deterministically from `seed`.
pub fn build_cpdn<S: Scalar>(arch: CpdnArch, seed: u64, role: Role) -> Result<CpdnModel<S>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    init_conv(&mut p, "stem", arch.base_channels, arch.in_channels, 3, &mut rng)?;
    for Layer::Bottleneck(name, s) in arch.blocks() {
        init_gn(&mut p, &format!("{name}.gn1"), s.in_channels)?;
        init_conv(&mut p, &format!("{name}.conv1"), s.mid_channels, s.in_channels, 1, &mut rng)?;
        init_gn(&mut p, &format!("{name}.gn2"), s.mid_channels)?;
        init_conv(&mut p, &format!("{name}.conv2"), s.mid_channels, s.mid_channels, 3, &mut rng)?;
        init_gn(&mut p, &format!("{name}.gn3"), s.mid_channels)?;
        init_conv(&mut p, &format!("{name}.conv3"), s.out_channels, s.mid_channels, 1, &mut rng)?;
    }
    init_conv(&mut p, "head", arch.out_channels, arch.base_channels, 1, &mut rng)?;
    Ok(CpdnModel {
        arch,
        params: p,
        role,
    })
}

fn conv<S: Scalar>(t: &mut Tape<S>, p: &ParamStore<S>, name: &str, x: Var) -> Result<Var> {
    let w = t.param(p, &format!("{name}.w"))?;
    let b = t.param(p, &format!("{name}.b"))?;
    t.conv2d(x, w, Some(b), 1, Padding::Same)
}

fn gn<S: Scalar>(t: &mut Tape<S>, p: &ParamStore<S>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let g = t.param(p, &format!("{name}.gamma"))?;
    let b = t.param(p, &format!("{name}.beta"))?;
    t.group_norm(x, groups, g, b, GN_EPS)
}

/// GN → 1×1 → GN → 3×3 → GN → 1×1, identity skip when the widths agree, then ReLU.
fn bottleneck<S: Scalar>(
    t: &mut Tape<S>,
    p: &ParamStore<S>,
    name: &str,
    spec: &BottleneckSpec,
    x: Var,
) -> Result<Var> {
    let mut h = gn(t, p, &format!("{name}.gn1"), x, spec.groups)?;
    h = conv(t, p, &format!("{name}.conv1"), h)?;
    h = gn(t, p, &format!("{name}.gn2"), h, spec.groups)?;
    h = conv(t, p, &format!("{name}.conv2"), h)?;
    h = gn(t, p, &format!("{name}.gn3"), h, spec.groups)?;
    h = conv(t, p, &format!("{name}.conv3"), h)?;
    if spec.in_channels == spec.out_channels {
        h = t.residual_add(x, h)?;
    }
    Ok(t.relu(h))
}

impl<S: Scalar> CpdnModel<S> {
    /// Records the forward pass of `x` (N×3×H×W) and returns the N×1×H×W raw heatmap.
    pub fn forward_on(&self, t: &mut Tape<S>, x: Var) -> Result<Var> {
        let s = t.shape(x);
        if s.c != self.arch.in_channels {
            return Err(Error::Config(format!(
                "cpdn expects {} input channels, got input {s}",
                self.arch.in_channels
            )));
        }
        self.arch.check_resolution(s.h, s.w)?;
        let p = &self.params;
        let blocks = self.arch.blocks();
        let mut it = blocks.iter();
        let mut next = |t: &mut Tape<S>, h: Var| -> Result<Var> {
            let Layer::Bottleneck(name, spec) = it.next().expect("layer plan");
            bottleneck(t, p, name, spec, h)
        };
        let mut h = conv(t, p, "stem", x)?;
        let mut skips = Vec::with_capacity(self.arch.depth);
        for _ in 0..self.arch.depth {
            for _ in 0..self.arch.bottlenecks_per_level {
                h = next(t, h)?;
            }
            skips.push(h);
            h = t.max_pool_2x2(h)?;
        }
        for _ in 0..self.arch.bottlenecks_per_level {
            h = next(t, h)?;
        }
        for skip in skips.into_iter().rev() {
            h = t.upsample_2x_nearest(h);
            h = t.concat_channels(skip, h)?;
            for _ in 0..self.arch.bottlenecks_per_level {
                h = next(t, h)?;
            }
        }
        conv(t, p, "head", h)
    }

    /// Inference-only forward pass.
    pub fn forward(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let mut t = Tape::inference();
        let x = t.constant(image.clone());
        let y = self.forward_on(&mut t, x)?;
        Ok(t.value(y).clone())
    }

    /// Rebuilds a detector from checkpoint contents, checking the recorded role.
    pub fn from_checkpoint(params: &ParamStore<S>, meta: &BTreeMap<String, String>, role: Role) -> Result<Self> {
        if meta.get("model").map(String::as_str) != Some("cpdn") {
            return Err(Error::Config("checkpoint does not hold a cpdn detector".into()));
        }
        match meta.get("role") {
            Some(r) if r == role.as_str() => {}
            other => {
                return Err(Error::Config(format!(
                    "checkpoint role {other:?} where {} was expected",
                    role.as_str()
                )))
            }
        }
        let arch = CpdnArch::from_meta(meta)?;
        let mut model = build_cpdn(arch, 0, role)?;
        restore_into(&mut model.params, params)?;
        Ok(model)
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = self.arch.to_meta();
        m.insert("role".into(), self.role.as_str().into());
        m.insert("model".into(), "cpdn".into());
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            epochs: 30,
            lambda: 0.5,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Sample order for one epoch; a pure function of the seed and the epoch index.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Trains on `(image, target heatmap)` pairs with the per-sample `λ·‖Ĥ − H‖₂` objective.
pub fn train_cpdn<S: Scalar>(
    model: &mut CpdnModel<S>,
    data: &[(Tensor<S>, Tensor<S>)],
    opts: &TrainOptions,
    optimizer: &mut OptimizerState<S>,
    epochs: Range<usize>,
) -> Result<TrainLog> {
    let stage = model.role.as_str();
    let fail = |message: String| Error::Training {
        stage: stage.to_string(),
        message,
    };
    let (first_img, first_tgt) = data.first().ok_or_else(|| fail("empty training set".into()))?;
    let (ishape, tshape) = (first_img.shape(), first_tgt.shape());
    if data.iter().any(|(i, t)| i.shape() != ishape || t.shape() != tshape) {
        return Err(fail("training images differ in shape".into()));
    }
    model.arch.check_resolution(ishape.h, ishape.w)?;
    let batch = opts.batch_size.max(1);
    let mut log = TrainLog::default();
    for epoch in epochs {
        let order = epoch_order(data.len(), opts.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let imgs: Vec<&Tensor<S>> = chunk.iter().map(|&i| &data[i].0).collect();
            let tgts: Vec<&Tensor<S>> = chunk.iter().map(|&i| &data[i].1).collect();
            let mut t = Tape::new();
            let x = t.constant(Tensor::stack(&imgs)?);
            let y = t.constant(Tensor::stack(&tgts)?);
            let pred = model.forward_on(&mut t, x)?;
            let loss = t.l2_loss_per_sample(pred, y, opts.lambda)?;
            let lv = t.value(loss).item()?.f64();
            if !lv.is_finite() {
                return Err(fail(format!("non-finite loss at epoch {epoch}")));
            }
            t.backward(loss)?;
            t.write_param_grads(&mut model.params)?;
            optimizer.step(&mut model.params)?;
            total += lv;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_tally_depth1_base4() {
        let arch = CpdnArch {
            depth: 1,
            base_channels: 4,
            bottlenecks_per_level: 1,
            groups: 4,
            ..CpdnArch::default()
        };
        // stem 3·4·9+4 = 112; enc0 (4→4) 212; bridge (4→8) 736; dec0 (12→4) 260; head 4+1 = 5
        assert_eq!(arch.num_params(), 112 + 212 + 736 + 260 + 5);
        let m = build_cpdn::<f64>(arch, 1, Role::D1).unwrap();
        assert_eq!(m.params.num_scalars(), 1325);
    }

    #[test]
    fn invalid_arch_is_rejected() {
        let bad = CpdnArch {
            depth: 0,
            ..CpdnArch::default()
        };
        assert!(build_cpdn::<f64>(bad, 0, Role::D1).is_err());
        let bad = CpdnArch {
            input_size: Some(60),
            depth: 3,
            ..CpdnArch::default()
        };
        let err = build_cpdn::<f64>(bad, 0, Role::D1).unwrap_err().to_string();
        assert!(err.contains("divisible by 8"), "{err}");
        let bad = CpdnArch {
            base_channels: 6,
            ..CpdnArch::default()
        };
        assert!(build_cpdn::<f64>(bad, 0, Role::D1).is_err());
    }

    #[test]
    fn arch_meta_round_trip() {
        let a = CpdnArch::default();
        assert_eq!(CpdnArch::from_meta(&a.to_meta()).unwrap(), a);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(17, 3, 2);
        assert_ne!(o, epoch_order(17, 3, 3));
        o.sort_unstable();
        assert_eq!(o, (0..17).collect::<Vec<_>>());
    }
}
