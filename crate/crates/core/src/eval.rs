//! Point matching under a deviation radius, detection metrics, and the experiment drivers
//! (crop-size and fill-intensity sweeps, stage ablation).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cpdn::CpdnModel;
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::hsr::HsrModel;
use crate::pipeline::{
    prefix_points, run_pipeline, stage2_pairs, train_d2, CascadeOptions, FillMode, LabeledImage,
    PipelineConfig, Stages,
};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(gt index, pred index, distance)`, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Minimum-cost perfect assignment on a square matrix (row `i` → column `result[i]`).
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// One-to-one matching with every pair at distance `≤ d`: as many pairs as possible, and
/// among those the smallest total distance.
pub fn match_points(gt: &[Point], pred: &[Point], d: f64) -> MatchResult {
    let k = gt.len().max(pred.len());
    let mut result = MatchResult {
        pairs: Vec::new(),
        unmatched_gt: Vec::new(),
        unmatched_pred: Vec::new(),
    };
    if k > 0 {
        // Any single forbidden cell outweighs every admissible assignment's total.
        let big = (d.max(0.0) + 1.0) * (k as f64 + 1.0);
        let cost: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| match (gt.get(i), pred.get(j)) {
                        (Some(g), Some(p)) if g.dist(p) <= d => g.dist(p),
                        _ => big,
                    })
                    .collect()
            })
            .collect();
        for (i, j) in hungarian(&cost).into_iter().enumerate() {
            if let (Some(g), Some(p)) = (gt.get(i), pred.get(j)) {
                let dist = g.dist(p);
                if dist <= d {
                    result.pairs.push((i, j, dist));
                }
            }
        }
    }
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for &(i, j, _) in &result.pairs {
        gt_used[i] = true;
        pred_used[j] = true;
    }
    result.unmatched_gt = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    result.unmatched_pred = (0..pred.len()).filter(|&j| !pred_used[j]).collect();
    result
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_gt: usize,
    pub t_positive: usize,
    pub f_positive: usize,
    pub recall: f64,
    pub precision: f64,
    pub fscore: f64,
    /// Set when there was no ground truth, so recall is reported as 0.
    pub no_ground_truth: bool,
    /// Set when there were no predictions, so precision is reported as 0.
    pub no_predictions: bool,
}

impl MetricsReport {
    pub fn from_counts(total_gt: usize, t_positive: usize, f_positive: usize) -> Result<Self> {
        if t_positive > total_gt {
            return Err(Error::Data(format!(
                "{t_positive} true positives exceed {total_gt} ground-truth cores"
            )));
        }
        let recall = if total_gt == 0 {
            0.0
        } else {
            t_positive as f64 / total_gt as f64
        };
        let predicted = t_positive + f_positive;
        let precision = if predicted == 0 {
            0.0
        } else {
            t_positive as f64 / predicted as f64
        };
        let fscore = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            total_gt,
            t_positive,
            f_positive,
            recall,
            precision,
            fscore,
            no_ground_truth: total_gt == 0,
            no_predictions: predicted == 0,
        })
    }
}

pub fn compute_metrics(m: &MatchResult) -> MetricsReport {
    let total = m.pairs.len() + m.unmatched_gt.len();
    MetricsReport::from_counts(total, m.pairs.len(), m.unmatched_pred.len())
        .expect("matched pairs never exceed ground truth")
}

/// Four decimals, cut rather than rounded.
pub fn truncate4(x: f64) -> f64 {
    // the nudge keeps values like 0.9710 (stored as 0.97099999...) from dropping a digit
    ((x * 1e4) + 1e-9).floor() / 1e4
}

pub fn fmt4(x: f64) -> String {
    format!("{:.4}", truncate4(x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCounts {
    pub name: String,
    pub total_gt: usize,
    pub t_positive: usize,
    pub f_positive: usize,
}

/// Micro-averaged metrics over `samples`: counts pooled over every image, then scored once.
pub fn evaluate_dataset<F>(
    samples: &[(String, &LabeledImage)],
    mut detect: F,
    d: f64,
) -> Result<(MetricsReport, Vec<ImageCounts>)>
where
    F: FnMut(&LabeledImage) -> Result<Vec<Point>>,
{
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for (name, s) in samples {
        let pred = detect(s)?;
        let m = match_points(&s.cores, &pred, d);
        per_image.push(ImageCounts {
            name: name.clone(),
            total_gt: s.cores.len(),
            t_positive: m.pairs.len(),
            f_positive: m.unmatched_pred.len(),
        });
    }
    let report = pool(&per_image)?;
    Ok((report, per_image))
}

pub fn pool(per_image: &[ImageCounts]) -> Result<MetricsReport> {
    let total = per_image.iter().map(|c| c.total_gt).sum();
    let tp = per_image.iter().map(|c| c.t_positive).sum();
    let fp = per_image.iter().map(|c| c.f_positive).sum();
    MetricsReport::from_counts(total, tp, fp)
}

fn named(samples: &[LabeledImage]) -> Vec<(String, &LabeledImage)> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("{i}"), s))
        .collect()
}

pub const METRICS_HEADER: &str = "total,tp,fp,recall,precision,fscore";
pub const SWEEP_HEADER: &str = "setting,recall,precision,fscore";

pub fn metrics_csv_row(m: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        m.total_gt,
        m.t_positive,
        m.f_positive,
        fmt4(m.recall),
        fmt4(m.precision),
        fmt4(m.fscore)
    )
}

pub fn metrics_csv(m: &MetricsReport) -> String {
    format!("{METRICS_HEADER}\n{}\n", metrics_csv_row(m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.setting,
                fmt4(m.recall),
                fmt4(m.precision),
                fmt4(m.fscore)
            );
        }
        s
    }

    pub fn get(&self, setting: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.setting == setting).map(|r| &r.metrics)
    }
}

/// Label used for a crop setting: `none`, or the square's side as `WxW`.
pub fn crop_label(half: Option<usize>) -> String {
    match half {
        None => "none".into(),
        Some(s) => format!("{}x{}", 2 * s, 2 * s),
    }
}

/// Trains a fresh second stage on top of the fixed `d1` for the given pipeline settings and
/// scores the two-stage cascade on `test`.
///
/// `trained` may hold a second stage already trained under `opts`; it is used instead of
/// retraining when `cfg` equals `opts.pipeline`, since training is deterministic and would
/// reproduce it exactly.
pub fn evaluate_stage2_variant(
    d1: &CpdnModel<f64>,
    train: &[LabeledImage],
    test: &[LabeledImage],
    opts: &CascadeOptions,
    cfg: &PipelineConfig,
    trained: Option<&CpdnModel<f64>>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let fresh;
    let d2 = match trained {
        Some(d2) if *cfg == opts.pipeline => d2,
        _ => {
            let pairs = stage2_pairs(d1, train, cfg)?;
            let variant = CascadeOptions {
                pipeline: cfg.clone(),
                ..opts.clone()
            };
            fresh = train_d2(&pairs, &variant)?.0;
            &fresh
        }
    };
    let (report, _) = evaluate_dataset(
        &named(test),
        |s| Ok(run_pipeline(&s.image, d1, Some(d2), None, cfg, Stages::EsdHsd, None)?.merged_points),
        cfg.deviation,
    )?;
    Ok(report)
}

fn check_unique(labels: &[String]) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::Config(format!("sweep setting `{l}` appears twice")));
        }
    }
    Ok(())
}

/// Detection quality of the two-stage cascade for each crop size (`None` = no crop).
pub fn crop_size_sweep(
    d1: &CpdnModel<f64>,
    train: &[LabeledImage],
    test: &[LabeledImage],
    opts: &CascadeOptions,
    sizes: &[Option<usize>],
    trained: Option<&CpdnModel<f64>>,
) -> Result<SweepReport> {
    let labels: Vec<String> = sizes.iter().map(|&s| crop_label(s)).collect();
    check_unique(&labels)?;
    let mut report = SweepReport::default();
    for (&size, setting) in sizes.iter().zip(labels) {
        let cfg = PipelineConfig {
            crop_half_size: size,
            ..opts.pipeline.clone()
        };
        let metrics = evaluate_stage2_variant(d1, train, test, opts, &cfg, trained)?;
        report.rows.push(SweepRow { setting, metrics });
    }
    Ok(report)
}

/// Detection quality of the two-stage cascade for each fill mode at the configured crop size.
pub fn intensity_sweep(
    d1: &CpdnModel<f64>,
    train: &[LabeledImage],
    test: &[LabeledImage],
    opts: &CascadeOptions,
    modes: &[FillMode],
    trained: Option<&CpdnModel<f64>>,
) -> Result<SweepReport> {
    let labels: Vec<String> = modes.iter().map(|m| m.to_string()).collect();
    check_unique(&labels)?;
    if opts.pipeline.crop_half_size.is_none() {
        return Err(Error::Config("intensity sweep needs a crop size".into()));
    }
    let mut report = SweepReport::default();
    for (&fill_mode, setting) in modes.iter().zip(labels) {
        let cfg = PipelineConfig {
            fill_mode,
            ..opts.pipeline.clone()
        };
        let metrics = evaluate_stage2_variant(d1, train, test, opts, &cfg, trained)?;
        report.rows.push(SweepRow { setting, metrics });
    }
    Ok(report)
}

pub const ABLATION_LABELS: [&str; 3] = ["ESD", "+HSD", "+HSR"];

/// Metrics of the three cascade prefixes, all read off one full run per image.
pub fn ablation_run(
    test: &[LabeledImage],
    d1: &CpdnModel<f64>,
    d2: &CpdnModel<f64>,
    hsr: &HsrModel,
    cfg: &PipelineConfig,
) -> Result<[MetricsReport; 3]> {
    if test.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut counts: [Vec<ImageCounts>; 3] = Default::default();
    for (i, s) in test.iter().enumerate() {
        let out = run_pipeline(&s.image, d1, Some(d2), Some(hsr), cfg, Stages::Full, None)?;
        for (k, pred) in prefix_points(&out)?.iter().enumerate() {
            let m = match_points(&s.cores, pred, cfg.deviation);
            counts[k].push(ImageCounts {
                name: i.to_string(),
                total_gt: s.cores.len(),
                t_positive: m.pairs.len(),
                f_positive: m.unmatched_pred.len(),
            });
        }
    }
    Ok([pool(&counts[0])?, pool(&counts[1])?, pool(&counts[2])?])
}

pub fn ablation_csv(rows: &[MetricsReport; 3]) -> String {
    let mut s = String::from("stage,total,tp,fp,recall,precision,fscore\n");
    for (label, m) in ABLATION_LABELS.iter().zip(rows) {
        let _ = writeln!(s, "{label},{}", metrics_csv_row(m));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(usize, usize)]) -> Vec<Point> {
        v.iter().map(|&(r, c)| Point::new(r, c)).collect()
    }

    #[test]
    fn identical_sets_match_fully() {
        let a = pts(&[(1, 1), (5, 9), (20, 3)]);
        let m = match_points(&a, &a, 0.0);
        assert_eq!(m.pairs.len(), 3);
        assert_eq!(m.total_distance(), 0.0);
    }

    #[test]
    fn maximum_not_greedy() {
        let gt = pts(&[(0, 0), (0, 10)]);
        let pred = pts(&[(0, 5), (0, 15)]);
        let m = match_points(&gt, &pred, 10.0);
        assert_eq!(m.pairs.len(), 2);
    }

    #[test]
    fn boundary_distance_is_inclusive() {
        let m = match_points(&pts(&[(0, 0)]), &pts(&[(6, 8)]), 10.0);
        assert_eq!(m.pairs, vec![(0, 0, 10.0)]);
        let m = match_points(&pts(&[(0, 0)]), &pts(&[(6, 9)]), 10.0);
        assert!(m.pairs.is_empty());
    }

    #[test]
    fn empty_sides() {
        let m = match_points(&[], &pts(&[(1, 1)]), 5.0);
        assert_eq!(m.unmatched_pred, vec![0]);
        let r = compute_metrics(&m);
        assert!(r.no_ground_truth);
        assert_eq!(r.recall, 0.0);
        let r = compute_metrics(&match_points(&pts(&[(1, 1)]), &[], 5.0));
        assert_eq!((r.recall, r.f_positive), (0.0, 0));
    }

    #[test]
    fn perfect_detection_scores_one() {
        let r = MetricsReport::from_counts(10, 10, 0).unwrap();
        assert_eq!((r.recall, r.precision, r.fscore), (1.0, 1.0, 1.0));
    }

    #[test]
    fn truncation() {
        assert_eq!(fmt4(1814.0 / 1868.0), "0.9710");
        assert_eq!(fmt4(0.97), "0.9700");
        assert_eq!(fmt4(1.0), "1.0000");
    }

    #[test]
    fn crop_labels() {
        assert_eq!(crop_label(None), "none");
        assert_eq!(crop_label(Some(40)), "80x80");
    }
}
