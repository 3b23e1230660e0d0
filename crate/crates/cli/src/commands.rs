use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dendrite_core::cpdn::{build_cpdn, train_cpdn, CpdnModel, Role, TrainOptions};
use dendrite_core::eval::{
    ablation_csv, ablation_run, crop_size_sweep, evaluate_dataset, fmt4, intensity_sweep, metrics_csv,
    metrics_csv_row, MetricsReport, ABLATION_LABELS, METRICS_HEADER,
};
use dendrite_core::hsr::{sample_training_patches, train_hsr_epochs, HsrModel, PatchSet};
use dendrite_core::image_io::{
    overlay, save_rgb, write_binary_png, write_heatmap_png, write_rgb_png, ESD_MARKER, GT_MARKER,
    HSD_MARKER,
};
use dendrite_core::nn::{load_checkpoint, save_checkpoint};
use dendrite_core::pipeline::{
    remaining_cores, run_pipeline, stage1_pairs, stage2_pairs, stage_seed, CascadeOptions, LabeledImage,
    Stages,
};
use dendrite_core::synth::{generate_dataset, load_split, read_manifest, Split};
use dendrite_core::{Error, OptimizerState, ParamStore, Tensor};

use crate::{CmdResult, Failure, RunConfig, SweepKind, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_IO};

pub const CONFIG_ECHO: &str = "config.txt";

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_fail(path, e))
}

/// Creates `out` and writes the effective configuration into it.
fn prepare_out(cfg: &RunConfig, out: &Path) -> CmdResult {
    fs::create_dir_all(out).map_err(|e| io_fail(out, e))?;
    write_file(&out.join(CONFIG_ECHO), cfg.echo())
}

fn parse_split(s: &str) -> CmdResult<Split> {
    Split::parse(s).ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown split `{s}`")))
}

/// Named labelled images of one split.
pub fn load_labeled(data: &Path, split: &str) -> CmdResult<Vec<(String, LabeledImage)>> {
    let manifest = read_manifest(data)?;
    let samples = load_split(data, &manifest, parse_split(split)?)?;
    if samples.is_empty() {
        return Err(Failure::new(EXIT_DATA, format!("split `{split}` of {} is empty", data.display())));
    }
    Ok(samples.iter().map(|s| (s.name.clone(), s.labeled())).collect())
}

fn images_only(named: &[(String, LabeledImage)]) -> Vec<LabeledImage> {
    named.iter().map(|(_, s)| s.clone()).collect()
}

pub fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path) -> CmdResult {
    let synth = cfg.synth()?;
    let manifest = generate_dataset(&synth, count, out)?;
    write_file(&out.join(CONFIG_ECHO), cfg.echo())?;
    println!(
        "{count} samples in {} (train {}, val {}, test {}; seed {})",
        out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        manifest.seed
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainControl {
    pub resume: bool,
    pub max_epochs: Option<usize>,
}

/// Epoch budget shared by the stages of one invocation.
struct Budget(Option<usize>);

impl Budget {
    fn take(&mut self) -> bool {
        match &mut self.0 {
            None => true,
            Some(0) => false,
            Some(n) => {
                *n -= 1;
                true
            }
        }
    }
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

/// Files holding an unfinished stage between invocations.
struct StagePaths {
    model: PathBuf,
    optim: PathBuf,
    done: PathBuf,
    log: PathBuf,
}

impl StagePaths {
    fn new(out: &Path, stage: &str) -> Self {
        let state = out.join("state");
        Self {
            model: state.join(format!("{stage}.model.ckpt")),
            optim: state.join(format!("{stage}.optim.ckpt")),
            done: out.join(format!("{stage}.ckpt")),
            log: out.join(format!("{stage}_loss.csv")),
        }
    }
}

enum StageOutcome {
    Finished,
    Paused,
}

/// Runs the epochs of one stage, saving state after each so a later `--resume` picks up
/// exactly where this left off.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: &str,
    params: &mut ParamStore,
    meta: &BTreeMap<String, String>,
    learning_rate: f64,
    epochs: usize,
    paths: &StagePaths,
    ctl: &TrainControl,
    budget: &mut Budget,
    mut epoch_fn: impl FnMut(&mut ParamStore, &mut OptimizerState, usize) -> dendrite_core::Result<f64>,
) -> CmdResult<StageOutcome> {
    let mut optim = OptimizerState::adam(learning_rate);
    let mut losses: Vec<f64> = Vec::new();
    if ctl.resume && paths.optim.exists() {
        let (saved, _) = load_checkpoint::<f64>(&paths.model).map_err(Failure::checkpoint)?;
        dendrite_core::nn::restore_into(params, &saved).map_err(Failure::checkpoint)?;
        let (moments, ometa) = load_checkpoint::<f64>(&paths.optim).map_err(Failure::checkpoint)?;
        optim = OptimizerState::import(&moments, &ometa).map_err(Failure::checkpoint)?;
        losses = ometa
            .get("losses")
            .and_then(|l| serde_json::from_str(l).ok())
            .ok_or_else(|| Failure::new(crate::EXIT_CHECKPOINT, format!("{stage}: saved state lacks losses")))?;
    }
    while losses.len() < epochs {
        if !budget.take() {
            return Ok(StageOutcome::Paused);
        }
        let loss = epoch_fn(params, &mut optim, losses.len())?;
        losses.push(loss);
        let dir = paths.model.parent().expect("state dir");
        fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
        save_checkpoint(params, meta, &paths.model)?;
        let (moments, mut ometa) = optim.export();
        ometa.insert("losses".into(), serde_json::to_string(&losses).expect("floats serialize"));
        save_checkpoint(&moments, &ometa, &paths.optim)?;
    }
    save_checkpoint(params, meta, &paths.done)?;
    write_file(&paths.log, loss_csv(&losses))?;
    for p in [&paths.model, &paths.optim] {
        if p.exists() {
            fs::remove_file(p).map_err(|e| io_fail(p, e))?;
        }
    }
    Ok(StageOutcome::Finished)
}

fn one_epoch_cpdn(
    model: &mut CpdnModel<f64>,
    data: &[(Tensor, Tensor)],
    opts: &TrainOptions,
    optim: &mut OptimizerState,
    epoch: usize,
) -> dendrite_core::Result<f64> {
    let log = train_cpdn(model, data, opts, optim, epoch..epoch + 1)?;
    Ok(log.epoch_losses[0])
}

fn cpdn_stage(
    role: Role,
    opts: &CascadeOptions,
    data: &[(Tensor, Tensor)],
    out: &Path,
    ctl: &TrainControl,
    budget: &mut Budget,
) -> CmdResult<Option<CpdnModel<f64>>> {
    let name = role.as_str();
    let paths = StagePaths::new(out, name);
    if ctl.resume && paths.done.exists() {
        return load_cpdn(&paths.done, role, opts).map(Some);
    }
    let topts = if role == Role::D1 { &opts.d1 } else { &opts.d2 };
    let mut model = build_cpdn::<f64>(opts.arch, stage_seed(opts.seed, name), role)?;
    let meta = model.meta();
    let mut params = model.params.clone();
    let outcome = run_stage(
        name,
        &mut params,
        &meta,
        topts.learning_rate,
        topts.epochs,
        &paths,
        ctl,
        budget,
        |p, optim, epoch| {
            std::mem::swap(&mut model.params, p);
            let r = one_epoch_cpdn(&mut model, data, topts, optim, epoch);
            std::mem::swap(&mut model.params, p);
            r
        },
    )?;
    model.params = params;
    Ok(matches!(outcome, StageOutcome::Finished).then_some(model))
}

fn refiner_patches(
    train: &[LabeledImage],
    pairs: &[(Tensor, Tensor)],
    opts: &CascadeOptions,
) -> CmdResult<PatchSet> {
    let sources: Vec<LabeledImage> = train
        .iter()
        .zip(pairs)
        .map(|(s, (i2, h2))| LabeledImage {
            image: i2.clone(),
            cores: remaining_cores(&s.cores, h2),
        })
        .collect();
    let sampler = dendrite_core::hsr::PatchSamplerConfig {
        seed: stage_seed(opts.seed, "hsr"),
        ..opts.sampler.clone()
    };
    Ok(sample_training_patches(&sources, &sampler)?)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, ctl: &TrainControl) -> CmdResult {
    let opts = cfg.cascade()?;
    prepare_out(cfg, out)?;
    let train = images_only(&load_labeled(data, "train")?);
    let mut budget = Budget(ctl.max_epochs);

    let d1_data = stage1_pairs(&train, &opts.pipeline);
    let Some(d1) = cpdn_stage(Role::D1, &opts, &d1_data, out, ctl, &mut budget)? else {
        return paused(out);
    };
    let d2_data = stage2_pairs(&d1, &train, &opts.pipeline)?;
    let Some(d2) = cpdn_stage(Role::D2, &opts, &d2_data, out, ctl, &mut budget)? else {
        return paused(out);
    };

    let paths = StagePaths::new(out, "hsr");
    let hsr = if ctl.resume && paths.done.exists() {
        load_hsr(&paths.done, &opts)?
    } else {
        let patches = refiner_patches(&train, &d2_data, &opts)?;
        let mut model = HsrModel::new(opts.hsr_arch.clone(), stage_seed(opts.seed, "hsr"))?;
        let meta = model.meta();
        let mut params = model.params.clone();
        let outcome = run_stage(
            "hsr",
            &mut params,
            &meta,
            opts.hsr.learning_rate,
            opts.hsr.epochs,
            &paths,
            ctl,
            &mut budget,
            |p, optim, epoch| {
                std::mem::swap(&mut model.params, p);
                let r = train_hsr_epochs(&mut model, &patches, &opts.hsr, optim, epoch..epoch + 1);
                std::mem::swap(&mut model.params, p);
                Ok(r?.epoch_losses[0])
            },
        )?;
        if let StageOutcome::Paused = outcome {
            return paused(out);
        }
        model.params = params;
        model
    };
    let state = out.join("state");
    if state.exists() {
        fs::remove_dir_all(&state).map_err(|e| io_fail(&state, e))?;
    }

    let val = load_labeled(data, "val").ok().map(|v| images_only(&v));
    if let Some(val) = val {
        let rows = ablation_run(&val, &d1, &d2, &hsr, &opts.pipeline)?;
        write_file(&out.join("val_ablation.csv"), ablation_csv(&rows))?;
        print_rows("validation", &rows);
    }
    println!("models written to {}", out.display());
    Ok(())
}

fn paused(out: &Path) -> CmdResult {
    println!("epoch budget spent; resume with --resume --out {}", out.display());
    Ok(())
}

fn load_cpdn(path: &Path, role: Role, opts: &CascadeOptions) -> CmdResult<CpdnModel<f64>> {
    let (params, meta) = load_checkpoint::<f64>(path).map_err(Failure::checkpoint)?;
    let model = CpdnModel::from_checkpoint(&params, &meta, role).map_err(Failure::checkpoint)?;
    if model.arch != opts.arch {
        return Err(Failure::checkpoint(Error::Config(format!(
            "{} was trained with architecture {:?}, configuration asks for {:?}",
            path.display(),
            model.arch,
            opts.arch
        ))));
    }
    Ok(model)
}

fn load_hsr(path: &Path, opts: &CascadeOptions) -> CmdResult<HsrModel> {
    let (params, meta) = load_checkpoint::<f64>(path).map_err(Failure::checkpoint)?;
    let arch = HsrModel::arch_from_meta(&meta).map_err(Failure::checkpoint)?;
    if arch != opts.hsr_arch {
        return Err(Failure::checkpoint(Error::Config(format!(
            "{} was trained with classifier {:?}, configuration asks for {:?}",
            path.display(),
            arch,
            opts.hsr_arch
        ))));
    }
    HsrModel::from_parts(arch, params).map_err(Failure::checkpoint)
}

pub struct Models {
    pub d1: CpdnModel<f64>,
    pub d2: CpdnModel<f64>,
    pub hsr: HsrModel,
}

pub fn load_models(dir: &Path, opts: &CascadeOptions) -> CmdResult<Models> {
    Ok(Models {
        d1: load_cpdn(&dir.join("d1.ckpt"), Role::D1, opts)?,
        d2: load_cpdn(&dir.join("d2.ckpt"), Role::D2, opts)?,
        hsr: load_hsr(&dir.join("hsr.ckpt"), opts)?,
    })
}

fn print_rows(title: &str, rows: &[MetricsReport; 3]) {
    println!("{title}:");
    for (label, m) in ABLATION_LABELS.iter().zip(rows) {
        println!(
            "  {label:<5} recall {} precision {} F {}  (total {}, T-Positive {}, F-Positive {})",
            fmt4(m.recall),
            fmt4(m.precision),
            fmt4(m.fscore),
            m.total_gt,
            m.t_positive,
            m.f_positive
        );
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn cmd_detect(
    cfg: &RunConfig,
    models: &Path,
    images: &[PathBuf],
    data: Option<&Path>,
    split: &str,
    out: &Path,
) -> CmdResult {
    let opts = cfg.cascade()?;
    let m = load_models(models, &opts)?;
    let mut jobs: Vec<(String, Tensor, Option<Vec<dendrite_core::geom::Point>>)> = Vec::new();
    for p in images {
        jobs.push((stem(p), dendrite_core::image_io::read_rgb_png(p)?, None));
    }
    if let Some(d) = data {
        for (name, s) in load_labeled(d, split)? {
            jobs.push((name, s.image, Some(s.cores)));
        }
    }
    if jobs.is_empty() {
        return Err(Failure::new(EXIT_DATA, "no images given (use --image or --data)"));
    }
    prepare_out(cfg, out)?;
    for (name, image, gt) in &jobs {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
        let so = run_pipeline(image, &m.d1, Some(&m.d2), Some(&m.hsr), &opts.pipeline, Stages::Full, None)?;
        let tagged = so.tagged_points();
        let mut csv = String::from("row,col,stage\n");
        for (p, stage) in &tagged {
            let _ = writeln!(csv, "{},{},{stage}", p.row, p.col);
        }
        write_file(&dir.join("pred.csv"), csv)?;
        write_heatmap_png(&dir.join("h1_raw.png"), &so.raw_h1)?;
        write_binary_png(&dir.join("h1.png"), &so.hat_h1)?;
        if let (Some(i2), Some(raw2), Some(hat2), Some(tilde2)) = (&so.i2, &so.raw_h2, &so.hat_h2, &so.tilde_h2) {
            write_rgb_png(&dir.join("i2.png"), i2)?;
            write_heatmap_png(&dir.join("h2_raw.png"), raw2)?;
            write_binary_png(&dir.join("h2.png"), hat2)?;
            write_binary_png(&dir.join("h2_refined.png"), tilde2)?;
        }
        write_binary_png(&dir.join("merged.png"), &so.merged)?;
        let esd: Vec<_> = tagged.iter().filter(|t| t.1 == "esd").map(|t| t.0).collect();
        let hsd: Vec<_> = tagged.iter().filter(|t| t.1 == "hsd").map(|t| t.0).collect();
        let gt_pts = gt.clone().unwrap_or_default();
        let img = overlay(image, 4, &[(GT_MARKER, &gt_pts), (ESD_MARKER, &esd), (HSD_MARKER, &hsd)]);
        save_rgb(&dir.join("overlay.png"), &img)?;
        println!("{name}: {} esd, {} hsd", esd.len(), hsd.len());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, models: &Path, data: &Path, split: &str, out: &Path) -> CmdResult {
    let opts = cfg.cascade()?;
    let m = load_models(models, &opts)?;
    let named = load_labeled(data, split)?;
    let refs: Vec<(String, &LabeledImage)> = named.iter().map(|(n, s)| (n.clone(), s)).collect();
    let (report, per_image) = evaluate_dataset(
        &refs,
        |s| {
            Ok(run_pipeline(&s.image, &m.d1, Some(&m.d2), Some(&m.hsr), &opts.pipeline, Stages::Full, None)?
                .merged_points)
        },
        opts.pipeline.deviation,
    )?;
    prepare_out(cfg, out)?;
    write_file(&out.join("metrics.csv"), metrics_csv(&report))?;
    let mut per = String::from("image,total,tp,fp\n");
    for c in &per_image {
        let _ = writeln!(per, "{},{},{},{}", c.name, c.total_gt, c.t_positive, c.f_positive);
    }
    write_file(&out.join("per_image.csv"), per)?;
    print_metrics(&format!("{split} split, deviation {}", opts.pipeline.deviation), &report);
    Ok(())
}

fn print_metrics(title: &str, m: &MetricsReport) {
    println!("{title}");
    println!("  Total {}  T-Positive {}  F-Positive {}", m.total_gt, m.t_positive, m.f_positive);
    println!(
        "  Recall {}  Precision {}  F-score {}",
        fmt4(m.recall),
        fmt4(m.precision),
        fmt4(m.fscore)
    );
}

/// Rows of a count fixture: `(label, total, tp, fp)`.
pub fn parse_fixture(text: &str) -> CmdResult<Vec<(String, usize, usize, usize)>> {
    let bad = |msg: String| Failure::new(EXIT_DATA, msg);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("fixture is empty".into()))?
        .split(',')
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (t, p, f) = match (col("total"), col("tp"), col("fp")) {
        (Some(t), Some(p), Some(f)) => (t, p, f),
        _ => return Err(bad(format!("fixture header needs total,tp,fp; got {}", header.join(",")))),
    };
    let label = col("method");
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |k: usize| -> CmdResult<usize> {
            cells
                .get(k)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(format!("fixture row {}: bad number in `{line}`", i + 1)))
        };
        let name = label
            .and_then(|k| cells.get(k))
            .map_or_else(|| format!("row{}", i + 1), |s| s.to_string());
        rows.push((name, num(t)?, num(p)?, num(f)?));
    }
    if rows.is_empty() {
        return Err(bad("fixture has no rows".into()));
    }
    Ok(rows)
}

pub fn cmd_eval_fixture(cfg: &RunConfig, fixture: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(fixture).map_err(|e| io_fail(fixture, e))?;
    let rows = parse_fixture(&text)?;
    prepare_out(cfg, out)?;
    let mut csv = format!("{METRICS_HEADER}\n");
    for (name, total, tp, fp) in rows {
        let m = MetricsReport::from_counts(total, tp, fp)?;
        let _ = writeln!(csv, "{}", metrics_csv_row(&m));
        print_metrics(&name, &m);
    }
    write_file(&out.join("metrics.csv"), csv)
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    kind: SweepKind,
    data: &Path,
    models: Option<&Path>,
    split: &str,
    out: &Path,
) -> CmdResult {
    let opts = cfg.cascade()?;
    let train = images_only(&load_labeled(data, "train")?);
    let test = images_only(&load_labeled(data, split)?);
    let (d1, d2) = match models {
        Some(dir) => {
            let d1 = load_cpdn(&dir.join("d1.ckpt"), Role::D1, &opts)?;
            // a second stage stands in for its own setting only if `train` ran with these options
            let d2_path = dir.join("d2.ckpt");
            let same_options = RunConfig::load(&dir.join(CONFIG_ECHO))
                .and_then(|c| c.cascade())
                .is_ok_and(|o| o == opts);
            let d2 = if same_options && d2_path.exists() {
                Some(load_cpdn(&d2_path, Role::D2, &opts)?)
            } else {
                None
            };
            (d1, d2)
        }
        None => (dendrite_core::pipeline::train_d1(&train, &opts)?.0, None),
    };
    prepare_out(cfg, out)?;
    let (report, file) = match kind {
        SweepKind::Crop => (
            crop_size_sweep(&d1, &train, &test, &opts, &cfg.crop_sizes()?, d2.as_ref())?,
            "crop_sweep.csv",
        ),
        SweepKind::Intensity => (
            intensity_sweep(&d1, &train, &test, &opts, &cfg.fill_modes()?, d2.as_ref())?,
            "intensity_sweep.csv",
        ),
    };
    let csv = report.to_csv();
    write_file(&out.join(file), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, models: &Path, data: &Path, split: &str, out: &Path, check: bool) -> CmdResult {
    let opts = cfg.cascade()?;
    let m = load_models(models, &opts)?;
    let test = images_only(&load_labeled(data, split)?);
    let rows = ablation_run(&test, &m.d1, &m.d2, &m.hsr, &opts.pipeline)?;
    prepare_out(cfg, out)?;
    write_file(&out.join("ablation.csv"), ablation_csv(&rows))?;
    print_rows(&format!("{split} split, deviation {}", opts.pipeline.deviation), &rows);
    if check && rows[1].recall < rows[0].recall {
        return Err(Failure::new(
            EXIT_CHECK,
            format!(
                "+HSD recall {} is below ESD recall {}",
                fmt4(rows[1].recall),
                fmt4(rows[0].recall)
            ),
        ));
    }
    Ok(())
}
