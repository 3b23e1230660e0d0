//! Synthetic dendrite micrographs with ground-truth core annotations.
//!
//! Each dendrite is a four-armed cross with short perpendicular side branches,
//! drawn as a Gaussian ridge that peaks at the core. Individual dendrites can be
//! blurred, speckled with dark and bright points, or have a sector of their arms
//! erased; the core stays annotated in every case.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{gaussian_smooth, GrayImage, Point};
use crate::image_io::{quantize, read_rgb_png, write_rgb_png};
use crate::pipeline::LabeledImage;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Blurred,
    Noisy,
    Incomplete,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::Blurred,
        Difficulty::Noisy,
        Difficulty::Incomplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Blurred => "blurred",
            Difficulty::Noisy => "noisy",
            Difficulty::Incomplete => "incomplete",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub cores_min: usize,
    pub cores_max: usize,
    pub min_core_separation: f64,
    pub arm_length_min: f64,
    pub arm_length_max: f64,
    pub blur_prob: f64,
    pub noise_prob: f64,
    pub incomplete_prob: f64,
    /// Gaussian sigma range applied to blurred dendrites.
    pub blur_sigma: (f64, f64),
    /// Intensity multiplier range for blurred dendrites.
    pub blur_gain: (f64, f64),
    /// Fraction of the full turn erased from incomplete dendrites.
    pub occlusion: (f64, f64),
    /// What remains of an incomplete dendrite's centre, relative to its rendered value.
    pub occluded_center_gain: f64,
    /// Standard deviation of the sensor noise added to every pixel.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            cores_min: 2,
            cores_max: 6,
            min_core_separation: 16.0,
            arm_length_min: 5.0,
            arm_length_max: 7.0,
            blur_prob: 0.3,
            noise_prob: 0.15,
            incomplete_prob: 0.3,
            blur_sigma: (2.0, 3.0),
            blur_gain: (0.45, 0.65),
            occlusion: (0.6, 0.85),
            occluded_center_gain: 0.4,
            background_noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("blur_prob", self.blur_prob),
            ("noise_prob", self.noise_prob),
            ("incomplete_prob", self.incomplete_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.min_core_separation <= 2.0 {
            return Err(Error::Config(format!(
                "min_core_separation must exceed 2 px, got {}",
                self.min_core_separation
            )));
        }
        if self.cores_min == 0 || self.cores_min > self.cores_max {
            return Err(Error::Config(format!(
                "invalid core count range {}..={}",
                self.cores_min, self.cores_max
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(0.0..=self.arm_length_max).contains(&self.arm_length_min) {
            return Err(Error::Config("invalid arm length range".into()));
        }
        for (name, (lo, hi)) in [
            ("blur_sigma", self.blur_sigma),
            ("blur_gain", self.blur_gain),
            ("occlusion", self.occlusion),
        ] {
            if !(0.0 <= lo && lo <= hi) {
                return Err(Error::Config(format!("invalid {name} range {lo}..{hi}")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion.1) || !(0.0..=1.0).contains(&self.occluded_center_gain) {
            return Err(Error::Config("occlusion settings must lie in [0, 1]".into()));
        }
        if self.background_noise < 0.0 {
            return Err(Error::Config("background_noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Probability that a core ends up with `d`.
    pub fn flag_probability(&self, d: Difficulty) -> f64 {
        let pi = self.incomplete_prob;
        let pb = (1.0 - pi) * self.blur_prob;
        let pn = (1.0 - pi) * (1.0 - self.blur_prob) * self.noise_prob;
        match d {
            Difficulty::Incomplete => pi,
            Difficulty::Blurred => pb,
            Difficulty::Noisy => pn,
            Difficulty::Easy => 1.0 - pi - pb - pn,
        }
    }
}

/// Shape parameters of one rendered dendrite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DendriteParams {
    pub arm_length: f64,
    /// Rotation of the first arm, radians.
    pub angle: f64,
    /// Standard deviation of the ridge cross-section, pixels.
    pub width: f64,
    /// Peak intensity at the core.
    pub intensity: f64,
    pub branch_spacing: f64,
    pub branch_length: f64,
}

impl DendriteParams {
    pub fn extent(&self) -> f64 {
        self.arm_length + self.branch_length + 3.0 * self.width + 1.0
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt(), t)
}

const ARM_GAIN: f64 = 0.75;
const BRANCH_GAIN: f64 = 0.5;

/// Draws one dendrite centred on `center` into `canvas`, keeping the brighter value per pixel.
pub fn render_dendrite(center: Point, params: &DendriteParams, canvas: &mut GrayImage) {
    let (cr, cc) = (center.row as f64, center.col as f64);
    let w = params.width.max(0.3);
    let extent = params.extent().ceil() as isize;
    let mut segments: Vec<((f64, f64), (f64, f64), f64, f64)> = Vec::new();
    if params.arm_length > 0.0 {
        for k in 0..4 {
            let a = params.angle + k as f64 * PI / 2.0;
            let (dr, dc) = (a.sin(), a.cos());
            let tip = (cr + dr * params.arm_length, cc + dc * params.arm_length);
            segments.push(((cr, cc), tip, ARM_GAIN, w));
            if params.branch_spacing > 0.0 && params.branch_length > 0.0 {
                let mut s = params.branch_spacing;
                while s < params.arm_length {
                    let along = 1.0 - s / params.arm_length;
                    let base = (cr + dr * s, cc + dc * s);
                    let len = params.branch_length * along.max(0.3);
                    for side in [-1.0, 1.0] {
                        let end = (base.0 + side * dc * len, base.1 - side * dr * len);
                        segments.push((base, end, BRANCH_GAIN * (0.6 + 0.4 * along), 0.8 * w));
                    }
                    s += params.branch_spacing;
                }
            }
        }
    }
    let blob_sigma = 1.2 * w;
    for r in (center.row as isize - extent)..=(center.row as isize + extent) {
        if r < 0 || r >= canvas.h as isize {
            continue;
        }
        for c in (center.col as isize - extent)..=(center.col as isize + extent) {
            if c < 0 || c >= canvas.w as isize {
                continue;
            }
            let p = (r as f64, c as f64);
            let d2 = (p.0 - cr).powi(2) + (p.1 - cc).powi(2);
            let mut v = (-d2 / (2.0 * blob_sigma * blob_sigma)).exp();
            for &(a, b, gain, sw) in &segments {
                let (d, t) = segment_distance(p, a, b);
                // primary arms fade towards the tip
                let fade = if gain == ARM_GAIN { 1.0 - 0.4 * t } else { 1.0 - 0.3 * t };
                v = v.max(gain * fade * (-d * d / (2.0 * sw * sw)).exp());
            }
            let v = v * params.intensity;
            let (ru, cu) = (r as usize, c as usize);
            if v > canvas.get(ru, cu) {
                canvas.set(ru, cu, v);
            }
        }
    }
}

fn clamp_unit(img: &mut GrayImage) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Gaussian blur with replicated borders; `sigma = 0` leaves the image unchanged.
pub fn apply_blur(image: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut out = GrayImage {
        h: image.h,
        w: image.w,
        data: gaussian_smooth(&image.data, image.h, image.w, sigma, radius),
    };
    clamp_unit(&mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseMode {
    /// Additive zero-mean Gaussian noise.
    Gaussian { std: f64 },
    /// A fraction of pixels set to dark or bright extremes.
    SaltPepper { fraction: f64, dark: f64, bright: f64 },
}

/// Disk-shaped pixel region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub center: Point,
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        Point::new(r, c).dist(&self.center) <= self.radius
    }
}

/// Adds noise everywhere, or only inside `region`; zero amplitude leaves the image unchanged.
pub fn apply_noise<R: Rng + ?Sized>(
    image: &GrayImage,
    mode: NoiseMode,
    region: Option<Disk>,
    rng: &mut R,
) -> GrayImage {
    let mut out = image.clone();
    let silent = match mode {
        NoiseMode::Gaussian { std } => std <= 0.0,
        NoiseMode::SaltPepper { fraction, .. } => fraction <= 0.0,
    };
    if silent {
        return out;
    }
    let normal = |rng: &mut R| {
        // Box–Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    };
    for r in 0..image.h {
        for c in 0..image.w {
            if region.is_some_and(|d| !d.contains(r, c)) {
                continue;
            }
            let v = out.get(r, c);
            let nv = match mode {
                NoiseMode::Gaussian { std } => v + std * normal(rng),
                NoiseMode::SaltPepper {
                    fraction,
                    dark,
                    bright,
                } => {
                    if rng.gen_bool(fraction.min(1.0)) {
                        if rng.gen_bool(0.5) {
                            dark
                        } else {
                            bright
                        }
                    } else {
                        v
                    }
                }
            };
            out.set(r, c, nv);
        }
    }
    clamp_unit(&mut out);
    out
}

/// Erases the angular sector `[start, start + fraction·2π)` of a dendrite around `core`
/// out to `radius`, and scales what lies within `keep_radius` of the core by `center_gain`
/// so a faint centre survives.
pub fn occlude(
    image: &GrayImage,
    core: Point,
    fraction: f64,
    start: f64,
    radius: f64,
    keep_radius: f64,
    center_gain: f64,
) -> GrayImage {
    let mut out = image.clone();
    let fraction = fraction.clamp(0.0, 1.0);
    if fraction == 0.0 {
        return out;
    }
    let span = fraction * 2.0 * PI;
    for r in 0..image.h {
        for c in 0..image.w {
            let d = Point::new(r, c).dist(&core);
            if d > radius {
                continue;
            }
            if d <= keep_radius {
                out.set(r, c, center_gain * image.get(r, c));
                continue;
            }
            let a = (r as f64 - core.row as f64).atan2(c as f64 - core.col as f64);
            let rel = (a - start).rem_euclid(2.0 * PI);
            if rel < span {
                out.set(r, c, 0.0);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Core {
    pub point: Point,
    pub flag: Difficulty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub name: String,
    /// 1×3×S×S in [0, 1], quantized to 8 bits.
    pub image: Tensor,
    pub cores: Vec<Core>,
}

impl SynthSample {
    pub fn points(&self) -> Vec<Point> {
        self.cores.iter().map(|c| c.point).collect()
    }

    pub fn has_flag(&self, d: Difficulty) -> bool {
        self.cores.iter().any(|c| c.flag == d)
    }

    pub fn labeled(&self) -> LabeledImage {
        LabeledImage {
            image: self.image.clone(),
            cores: self.points(),
        }
    }
}

/// A sample together with the noise-free composite it was derived from.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub sample: SynthSample,
    pub pre_noise: GrayImage,
}

pub fn sample_name(index: usize) -> String {
    format!("sample_{index:05}")
}

fn draw_flag(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Difficulty {
    if rng.gen_bool(cfg.incomplete_prob) {
        Difficulty::Incomplete
    } else if rng.gen_bool(cfg.blur_prob) {
        Difficulty::Blurred
    } else if rng.gen_bool(cfg.noise_prob) {
        Difficulty::Noisy
    } else {
        Difficulty::Easy
    }
}

fn place_cores(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let k = rng.gen_range(cfg.cores_min..=cfg.cores_max);
    let margin = 3usize.min(cfg.image_size / 4);
    let hi = cfg.image_size - margin;
    let mut pts: Vec<Point> = Vec::with_capacity(k);
    let mut attempts = 0;
    while pts.len() < k && attempts < 2000 {
        attempts += 1;
        let p = Point::new(rng.gen_range(margin..hi), rng.gen_range(margin..hi));
        if pts.iter().all(|q| q.dist(&p) >= cfg.min_core_separation) {
            pts.push(p);
        }
    }
    pts
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn render_attempt(cfg: &SynthConfig, index: usize, seed: u64) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let background = rng.gen_range(0.05..0.15);
    let points = place_cores(cfg, &mut rng);
    let mut clean = GrayImage::filled(s, s, background);
    let mut cores = Vec::with_capacity(points.len());
    let mut noisy_regions = Vec::new();
    for p in points {
        let flag = draw_flag(cfg, &mut rng);
        let mut params = DendriteParams {
            arm_length: rng.gen_range(cfg.arm_length_min..=cfg.arm_length_max),
            angle: rng.gen_range(0.0..PI / 2.0),
            width: rng.gen_range(0.8..1.1),
            intensity: rng.gen_range(0.8..1.0),
            branch_spacing: 2.5,
            branch_length: rng.gen_range(1.5..2.5),
        };
        if flag == Difficulty::Blurred {
            params.intensity *= uniform(&mut rng, cfg.blur_gain);
        }
        let mut layer = GrayImage::filled(s, s, 0.0);
        render_dendrite(p, &params, &mut layer);
        match flag {
            Difficulty::Blurred => layer = apply_blur(&layer, uniform(&mut rng, cfg.blur_sigma)),
            Difficulty::Incomplete => {
                let fraction = uniform(&mut rng, cfg.occlusion);
                let start = rng.gen_range(0.0..2.0 * PI);
                layer = occlude(&layer, p, fraction, start, params.extent(), 1.5, cfg.occluded_center_gain);
            }
            Difficulty::Noisy => noisy_regions.push(Disk {
                center: p,
                radius: params.extent(),
            }),
            Difficulty::Easy => {}
        }
        for (dst, &v) in clean.data.iter_mut().zip(&layer.data) {
            if v > *dst {
                *dst = v;
            }
        }
        cores.push(Core { point: p, flag });
    }
    let mut img = clean.clone();
    for region in noisy_regions {
        img = apply_noise(
            &img,
            NoiseMode::SaltPepper {
                fraction: 0.2,
                dark: 0.0,
                bright: 0.9,
            },
            Some(region),
            &mut rng,
        );
        img = apply_noise(&img, NoiseMode::Gaussian { std: 0.08 }, Some(region), &mut rng);
    }
    img = apply_noise(
        &img,
        NoiseMode::Gaussian {
            std: cfg.background_noise,
        },
        None,
        &mut rng,
    );
    for v in &mut img.data {
        *v = quantize(*v) as f64 / 255.0;
    }
    cores.sort_by_key(|c| c.point);
    Rendered {
        sample: SynthSample {
            name: sample_name(index),
            image: img.to_rgb_tensor(),
            cores,
        },
        pre_noise: clean,
    }
}

/// Flag a sample index is required to contain so that every difficulty with
/// non-zero probability appears in any set of at least four samples.
fn required_flag(cfg: &SynthConfig, index: usize) -> Option<Difficulty> {
    let d = *Difficulty::ALL.get(index)?;
    (cfg.flag_probability(d) > 0.0).then_some(d)
}

/// Renders sample `index`; a pure function of `(cfg, index)`.
pub fn render_sample(cfg: &SynthConfig, index: usize) -> Rendered {
    let base = cfg.seed ^ index as u64;
    let need = required_flag(cfg, index);
    let mut first = None;
    for attempt in 0..256u64 {
        let r = render_attempt(cfg, index, base ^ (attempt << 40));
        match need {
            Some(d) if !r.sample.has_flag(d) => {
                first.get_or_insert(r);
            }
            _ => return r,
        }
    }
    first.expect("at least one attempt")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub config: SynthConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl DatasetManifest {
    pub fn names(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub const SPLIT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Seeded 60/20/20 partition of sample indices.
pub fn split_indices(count: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0x5EED));
    // integer arithmetic so 0.6·count never lands just under a whole number
    let n_train = count * 6 / 10;
    let n_val = count * 2 / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    [idx, val, test]
}

/// Renders `count` samples in memory, in index order.
pub fn generate_samples(cfg: &SynthConfig, count: usize) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    Ok((0..count).map(|i| render_sample(cfg, i).sample).collect())
}

pub fn annotation_csv(sample: &SynthSample) -> String {
    let mut s = String::from("row,col,flag\n");
    for c in &sample.cores {
        s.push_str(&format!("{},{},{}\n", c.point.row, c.point.col, c.flag.as_str()));
    }
    s
}

pub fn parse_annotation_csv(text: &str) -> Result<Vec<Core>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.trim() == "row,col,flag" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Data(format!("bad annotation line {}: `{line}`", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(Core {
            point: Point::new(f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?),
            flag: Difficulty::parse(f[2]).ok_or_else(bad)?,
        });
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `count` samples (PNG + CSV) and the split manifest under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if count < 5 {
        return Err(Error::Config(format!("need at least 5 samples, got {count}")));
    }
    let images = out_dir.join("images");
    let annotations = out_dir.join("annotations");
    for d in [&images, &annotations] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..count {
        let s = render_sample(cfg, i).sample;
        write_rgb_png(&images.join(format!("{}.png", s.name)), &s.image)?;
        write(
            &annotations.join(format!("{}.csv", s.name)),
            annotation_csv(&s).as_bytes(),
        )?;
    }
    let [train, val, test] = split_indices(count, cfg.seed);
    let names = |v: Vec<usize>| v.into_iter().map(sample_name).collect();
    let manifest = DatasetManifest {
        count,
        seed: cfg.seed,
        fractions: SPLIT_FRACTIONS,
        config: cfg.clone(),
        train: names(train),
        val: names(val),
        test: names(test),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out_dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_sample(dir: &Path, name: &str) -> Result<SynthSample> {
    let image = read_rgb_png(&dir.join("images").join(format!("{name}.png")))?;
    let path: PathBuf = dir.join("annotations").join(format!("{name}.csv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(SynthSample {
        name: name.to_string(),
        image,
        cores: parse_annotation_csv(&text)?,
    })
}

pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<SynthSample>> {
    manifest
        .names(split)
        .iter()
        .map(|n| load_sample(dir, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(len: f64) -> DendriteParams {
        DendriteParams {
            arm_length: len,
            angle: 0.3,
            width: 1.0,
            intensity: 1.0,
            branch_spacing: 2.5,
            branch_length: 2.0,
        }
    }

    fn argmax(img: &GrayImage) -> Point {
        let i = img
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        Point::new(i / img.w, i % img.w)
    }

    #[test]
    fn rendered_peak_is_the_center() {
        for (r, c) in [(20, 20), (31, 40), (5, 58)] {
            let mut canvas = GrayImage::filled(64, 64, 0.0);
            let center = Point::new(r, c);
            render_dendrite(center, &params(7.0), &mut canvas);
            assert!(argmax(&canvas).dist(&center) <= 1.0);
        }
    }

    #[test]
    fn zero_length_arms_render_a_blob() {
        let mut canvas = GrayImage::filled(32, 32, 0.0);
        render_dendrite(Point::new(16, 16), &params(0.0), &mut canvas);
        assert_eq!(argmax(&canvas), Point::new(16, 16));
        // blob is radially symmetric
        assert!((canvas.get(16, 18) - canvas.get(18, 16)).abs() < 1e-12);
        assert!(canvas.get(16, 26) < 1e-6);
    }

    #[test]
    fn rendering_is_pure() {
        let mut a = GrayImage::filled(32, 32, 0.1);
        let mut b = a.clone();
        render_dendrite(Point::new(10, 12), &params(6.0), &mut a);
        render_dendrite(Point::new(10, 12), &params(6.0), &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_amplitude_filters_are_identities() {
        let mut img = GrayImage::filled(16, 16, 0.2);
        render_dendrite(Point::new(8, 8), &params(5.0), &mut img);
        assert_eq!(apply_blur(&img, 0.0), img);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_noise(&img, NoiseMode::Gaussian { std: 0.0 }, None, &mut rng), img);
        let sp = NoiseMode::SaltPepper {
            fraction: 0.0,
            dark: 0.0,
            bright: 1.0,
        };
        assert_eq!(apply_noise(&img, sp, None, &mut rng), img);
    }

    #[test]
    fn filters_stay_in_unit_range() {
        let mut img = GrayImage::filled(16, 16, 0.95);
        render_dendrite(Point::new(8, 8), &params(5.0), &mut img);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = apply_noise(&img, NoiseMode::Gaussian { std: 0.5 }, None, &mut rng);
        assert!(noisy.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let blurred = apply_blur(&noisy, 1.5);
        assert!(blurred.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_occlusion_leaves_a_faint_center() {
        let mut layer = GrayImage::filled(48, 48, 0.0);
        let core = Point::new(24, 24);
        let p = params(7.0);
        render_dendrite(core, &p, &mut layer);
        let out = occlude(&layer, core, 1.0, 0.0, p.extent(), 1.5, 0.6);
        let ratio = out.sum() / layer.sum();
        assert!(ratio < 0.4, "mass ratio {ratio}");
        assert!(out.get(24, 24) > 0.0);
    }

    #[test]
    fn split_sizes() {
        let [a, b, c] = split_indices(10, 3);
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        let bad = SynthConfig {
            blur_prob: 1.5,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            min_core_separation: 2.0,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }

    #[test]
    fn annotation_csv_round_trip() {
        let s = render_sample(&SynthConfig::default(), 3).sample;
        assert_eq!(parse_annotation_csv(&annotation_csv(&s)).unwrap(), s.cores);
        assert!(parse_annotation_csv("row,col,flag\n1,2,weird\n").is_err());
    }
}
