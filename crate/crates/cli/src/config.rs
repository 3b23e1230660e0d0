//! `key = value` run configuration with named profiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dendrite_core::cpdn::{CpdnArch, TrainOptions};
use dendrite_core::hsr::{HsrArch, HsrTrainOptions, PatchSamplerConfig};
use dendrite_core::pipeline::{CascadeOptions, FillMode, PipelineConfig};
use dendrite_core::synth::SynthConfig;
use dendrite_core::{Error, Result};

/// Keys in echo order, with their desk-profile defaults.
const DESK: &[(&str, &str)] = &[
    ("profile", "desk"),
    ("seed", "0"),
    // generator
    ("image_size", "64"),
    ("cores_min", "2"),
    ("cores_max", "6"),
    ("min_core_separation", "16"),
    ("arm_length_min", "5"),
    ("arm_length_max", "7"),
    ("blur_prob", "0.3"),
    ("noise_prob", "0.15"),
    ("incomplete_prob", "0.3"),
    ("blur_sigma_min", "2"),
    ("blur_sigma_max", "3"),
    ("blur_gain_min", "0.45"),
    ("blur_gain_max", "0.65"),
    ("occlusion_min", "0.6"),
    ("occlusion_max", "0.85"),
    ("occluded_center_gain", "0.4"),
    ("background_noise", "0.02"),
    // cascade
    ("alpha", "0.4"),
    ("beta", "0.1"),
    ("crop_half_size", "8"),
    ("fill", "0"),
    ("gaussian_sigma", "10"),
    ("gaussian_kernel", "11"),
    ("deviation", "4"),
    ("gt_suppression_radius", "0"),
    ("gt_radius", "2"),
    ("lambda1", "0.5"),
    ("lambda2", "0.5"),
    // detector
    ("depth", "2"),
    ("base_channels", "8"),
    ("bottlenecks_per_level", "1"),
    ("groups", "4"),
    // training
    ("lr1", "0.0004"),
    ("lr2", "0.0004"),
    ("lr_hsr", "0.0001"),
    ("epochs1", "30"),
    ("epochs2", "30"),
    ("epochs_hsr", "20"),
    ("batch_size", "4"),
    ("hsr_batch_size", "16"),
    // refinement
    ("radius_a", "2"),
    ("radius_b", "5"),
    ("radius_c", "10"),
    ("positives_per_core", "5"),
    ("negatives_per_band", "5"),
    ("patch_size", "32"),
    ("hsr_channels", "8,16,16"),
    // experiments
    ("crop_sizes", "none,8,12,16,20"),
    ("fill_modes", "0,128,255,gaussian,0+gaussian"),
];

const PAPER: &[(&str, &str)] = &[
    ("image_size", "256"),
    ("min_core_separation", "48"),
    ("arm_length_min", "12"),
    ("arm_length_max", "20"),
    ("crop_half_size", "40"),
    ("deviation", "10"),
    ("gt_radius", "1"),
    ("epochs1", "100"),
    ("epochs2", "100"),
    ("epochs_hsr", "50"),
    ("radius_a", "4"),
    ("radius_b", "15"),
    ("radius_c", "40"),
    ("patch_size", "80"),
    ("depth", "3"),
    ("crop_sizes", "none,20,30,40,50"),
];

pub const PAPER_EPOCHS: [(&str, &str); 3] = [("epochs1", "100"), ("epochs2", "100"), ("epochs_hsr", "50")];

/// Effective settings, one string value per known key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn profile_values(name: &str) -> Result<BTreeMap<String, String>> {
    let mut v: BTreeMap<String, String> =
        DESK.iter().map(|(k, d)| (k.to_string(), d.to_string())).collect();
    match name {
        "desk" => {}
        "paper" => {
            for (k, d) in PAPER {
                v.insert(k.to_string(), d.to_string());
            }
            v.insert("profile".into(), "paper".into());
        }
        other => return Err(Error::Config(format!("key `profile`: unknown profile `{other}`"))),
    }
    Ok(v)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: profile_values("desk").expect("desk profile"),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Builds a configuration from overrides; a `profile` override is applied first.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self {
            values: profile_values(profile)?,
        };
        for (k, v) in pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    /// One `key = value` line per key, in a fixed order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, _) in DESK {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
    }

    fn list<T>(&self, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(|item| {
                f(item.trim()).ok_or_else(|| {
                    Error::Config(format!("key `{key}`: cannot parse item `{}`", item.trim()))
                })
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let c = SynthConfig {
            image_size: self.num("image_size")?,
            cores_min: self.num("cores_min")?,
            cores_max: self.num("cores_max")?,
            min_core_separation: self.num("min_core_separation")?,
            arm_length_min: self.num("arm_length_min")?,
            arm_length_max: self.num("arm_length_max")?,
            blur_prob: self.num("blur_prob")?,
            noise_prob: self.num("noise_prob")?,
            incomplete_prob: self.num("incomplete_prob")?,
            blur_sigma: (self.num("blur_sigma_min")?, self.num("blur_sigma_max")?),
            blur_gain: (self.num("blur_gain_min")?, self.num("blur_gain_max")?),
            occlusion: (self.num("occlusion_min")?, self.num("occlusion_max")?),
            occluded_center_gain: self.num("occluded_center_gain")?,
            background_noise: self.num("background_noise")?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }

    fn crop(&self, key: &str, v: &str) -> Result<Option<usize>> {
        parse_crop(v).ok_or_else(|| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let fill: FillMode = self
            .get("fill")
            .parse()
            .map_err(|e: Error| Error::Config(format!("key `fill`: {e}")))?;
        let c = PipelineConfig {
            alpha: self.num("alpha")?,
            beta: self.num("beta")?,
            crop_half_size: self.crop("crop_half_size", self.get("crop_half_size"))?,
            fill_mode: fill,
            gaussian_sigma: self.num("gaussian_sigma")?,
            gaussian_kernel: self.num("gaussian_kernel")?,
            deviation: self.num("deviation")?,
            gt_suppression_radius: self.num("gt_suppression_radius")?,
            gt_radius: self.num("gt_radius")?,
            lambda1: self.num("lambda1")?,
            lambda2: self.num("lambda2")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn arch(&self) -> Result<CpdnArch> {
        let a = CpdnArch {
            depth: self.num("depth")?,
            base_channels: self.num("base_channels")?,
            bottlenecks_per_level: self.num("bottlenecks_per_level")?,
            groups: self.num("groups")?,
            ..CpdnArch::default()
        };
        a.validate()?;
        Ok(a)
    }

    pub fn hsr_arch(&self) -> Result<HsrArch> {
        let ch = self.list("hsr_channels", |s| s.parse::<usize>().ok())?;
        let channels: [usize; 3] = ch
            .try_into()
            .map_err(|_| Error::Config("key `hsr_channels`: need exactly three widths".into()))?;
        let a = HsrArch {
            patch_size: self.num("patch_size")?,
            channels,
            ..HsrArch::default()
        };
        a.validate()?;
        Ok(a)
    }

    pub fn sampler(&self) -> Result<PatchSamplerConfig> {
        let s = PatchSamplerConfig {
            radius_a: self.num("radius_a")?,
            radius_b: self.num("radius_b")?,
            radius_c: self.num("radius_c")?,
            positives_per_core: self.num("positives_per_core")?,
            negatives_per_band: self.num("negatives_per_band")?,
            patch_size: self.num("patch_size")?,
            seed: 0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn cascade(&self) -> Result<CascadeOptions> {
        let seed = self.seed()?;
        let pipeline = self.pipeline()?;
        let batch_size = self.num("batch_size")?;
        Ok(CascadeOptions {
            arch: self.arch()?,
            d1: TrainOptions {
                learning_rate: self.num("lr1")?,
                epochs: self.num("epochs1")?,
                lambda: pipeline.lambda1,
                batch_size,
                seed: seed ^ 0xD1,
            },
            d2: TrainOptions {
                learning_rate: self.num("lr2")?,
                epochs: self.num("epochs2")?,
                lambda: pipeline.lambda2,
                batch_size,
                seed: seed ^ 0xD2,
            },
            hsr_arch: self.hsr_arch()?,
            hsr: HsrTrainOptions {
                learning_rate: self.num("lr_hsr")?,
                epochs: self.num("epochs_hsr")?,
                batch_size: self.num("hsr_batch_size")?,
                seed: seed ^ 0x45,
            },
            sampler: self.sampler()?,
            pipeline,
            seed,
        })
    }

    pub fn crop_sizes(&self) -> Result<Vec<Option<usize>>> {
        self.list("crop_sizes", parse_crop)
    }

    pub fn fill_modes(&self) -> Result<Vec<FillMode>> {
        self.list("fill_modes", |s| s.parse().ok())
    }

    /// Checks that every typed view parses.
    pub fn validate(&self) -> Result<()> {
        self.synth()?;
        self.cascade()?;
        self.crop_sizes()?;
        self.fill_modes()?;
        Ok(())
    }
}

fn parse_crop(v: &str) -> Option<Option<usize>> {
    match v {
        "none" => Some(None),
        n => n.parse::<usize>().ok().filter(|&s| s > 0).map(Some),
    }
}
