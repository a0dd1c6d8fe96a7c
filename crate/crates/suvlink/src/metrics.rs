//! Lesion-level detection and segmentation metrics: per-criterion F1
//! (matching SUVmax, any overlap, Dice > 0.5), mean Dice, percentile
//! bootstrap confidence intervals, and subgroup breakdowns.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuvlinkError};
use crate::matcher::{label_components, Connectivity};
use crate::par;
use crate::volume::Volume3D;

pub const SUV_TOLERANCE: f64 = 0.1;

/// The three detection criteria, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MatchingSuvmax,
    AnyOverlap,
    DiceGtHalf,
}

pub const CRITERIA: [Criterion; 3] = [
    Criterion::MatchingSuvmax,
    Criterion::AnyOverlap,
    Criterion::DiceGtHalf,
];

impl Criterion {
    pub fn label(self) -> &'static str {
        match self {
            Criterion::MatchingSuvmax => "Matching SUVmax (F1)",
            Criterion::AnyOverlap => "Any Overlap (F1)",
            Criterion::DiceGtHalf => "Dice > 0.5 (F1)",
        }
    }
}

/// TP/FP/FN tally for one criterion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Tally {
    pub fn add(&mut self, other: &Tally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// One scored prediction/target pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub matching_suvmax: Tally,
    pub any_overlap: Tally,
    pub dice_gt_half: Tally,
    pub dice: f64,
    /// Flags the degenerate both-empty case; it scores 0 but signals a
    /// pipeline bug upstream rather than a real result.
    pub both_empty: bool,
    pub tracer: Option<String>,
    pub size_bin: Option<String>,
    pub uptake_bin: Option<String>,
}

impl EvalRecord {
    pub fn tally(&self, criterion: Criterion) -> &Tally {
        match criterion {
            Criterion::MatchingSuvmax => &self.matching_suvmax,
            Criterion::AnyOverlap => &self.any_overlap,
            Criterion::DiceGtHalf => &self.dice_gt_half,
        }
    }
}

fn check_same_dims(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        let (ax, ay, az) = a.dim();
        let (bx, by, bz) = b.dim();
        return Err(SuvlinkError::GeometryMismatch {
            left: [ax, ay, az],
            right: [bx, by, bz],
        });
    }
    Ok(())
}

/// Dice coefficient 2|a∩b| / (|a| + |b|); both-empty is defined as 0.
pub fn dice(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    check_same_dims(a.data(), b.data())?;
    Ok(dice_arrays(a.data(), b.data()))
}

fn dice_arrays(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let fx = x != 0.0;
        let fy = y != 0.0;
        na += fx as u64;
        nb += fy as u64;
        inter += (fx && fy) as u64;
    });
    if na + nb == 0 {
        0.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Scores one prediction against one target lesion.
///
/// The prediction is decomposed into connected components. Per criterion, a
/// component qualifies if it overlaps the target and meets the criterion's
/// condition; a TP is recorded when any component qualifies, every
/// non-qualifying component counts as a FP, and a target with no qualifying
/// component counts as a FN. An empty prediction is FN = 1, FP = 0.
pub fn score_sample(
    sample_id: &str,
    pred: &Volume3D,
    target: &Volume3D,
    pet: &Volume3D,
    target_suvmax: f64,
    connectivity: Connectivity,
) -> Result<EvalRecord> {
    check_same_dims(pred.data(), target.data())?;
    check_same_dims(pred.data(), pet.data())?;
    let pred_fg = pred.data().mapv(|v| (v != 0.0) as u8);
    let (labels, count) = label_components(&pred_fg, connectivity);
    let target_fg = target.data();
    let target_voxels = target_fg.iter().filter(|&&v| v != 0.0).count();
    let both_empty = count == 0 && target_voxels == 0;

    // Per component: overlap with target, max PET value, dice vs target.
    let mut qualify = vec![[false; 3]; count as usize];
    for id in 1..=count {
        let comp = labels.mapv(|l| ((l == id) as u8) as f32);
        let comp_voxels = comp.iter().filter(|&&v| v != 0.0).count();
        let mut overlap = 0usize;
        let mut comp_max = f64::NEG_INFINITY;
        for ((x, y, z), &c) in comp.indexed_iter() {
            if c != 0.0 {
                comp_max = comp_max.max(pet.data()[(x, y, z)] as f64);
                if target_fg[(x, y, z)] != 0.0 {
                    overlap += 1;
                }
            }
        }
        let overlaps = overlap > 0;
        let comp_dice = if comp_voxels + target_voxels == 0 {
            0.0
        } else {
            2.0 * overlap as f64 / (comp_voxels + target_voxels) as f64
        };
        let q = &mut qualify[(id - 1) as usize];
        q[0] = overlaps && (comp_max - target_suvmax).abs() <= SUV_TOLERANCE;
        q[1] = overlaps;
        q[2] = overlaps && comp_dice > 0.5;
    }

    let mut tallies = [Tally::default(); 3];
    for (ci, tally) in tallies.iter_mut().enumerate() {
        let any_tp = qualify.iter().any(|q| q[ci]);
        tally.tp = any_tp as u64;
        tally.fp = qualify.iter().filter(|q| !q[ci]).count() as u64;
        // Missed target, including the empty-prediction case.
        tally.fn_ = (!any_tp && target_voxels > 0) as u64;
        if count == 0 {
            tally.fp = 0;
            tally.fn_ = 1;
        }
    }

    Ok(EvalRecord {
        sample_id: sample_id.to_string(),
        matching_suvmax: tallies[0],
        any_overlap: tallies[1],
        dice_gt_half: tallies[2],
        dice: dice_arrays(pred.data(), target.data()),
        both_empty,
        tracer: None,
        size_bin: None,
        uptake_bin: None,
    })
}

/// F1 = 2tp / (2tp + fp + fn). Undefined when all counts are zero.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> Result<f64> {
    if tp == 0 && fp == 0 && fn_ == 0 {
        return Err(SuvlinkError::F1Undefined);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

fn pooled_f1(records: &[&EvalRecord], criterion: Criterion) -> f64 {
    let mut total = Tally::default();
    for r in records {
        total.add(r.tally(criterion));
    }
    f1(total.tp, total.fp, total.fn_).unwrap_or(0.0)
}

fn mean_dice(records: &[&EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CiEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap over the record set. Deterministic given `seed`:
/// each iteration draws from its own counter-derived RNG stream, so the
/// result is identical whether iterations run in parallel or sequentially.
pub fn bootstrap_ci<F>(
    records: &[EvalRecord],
    metric: F,
    iterations: usize,
    level: f64,
    seed: u64,
) -> CiEstimate
where
    F: Fn(&[&EvalRecord]) -> f64 + Sync + Send,
{
    let refs: Vec<&EvalRecord> = records.iter().collect();
    let point = metric(&refs);
    if records.is_empty() || iterations == 0 {
        return CiEstimate {
            point,
            lo: point,
            hi: point,
        };
    }
    let n = records.len();
    let mut samples = par::map_range(iterations, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, i as u64));
        let resample: Vec<&EvalRecord> =
            (0..n).map(|_| &records[rng.random_range(0..n)]).collect();
        metric(&resample)
    });
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    CiEstimate {
        point,
        lo: percentile(&samples, alpha),
        hi: percentile(&samples, 1.0 - alpha),
    }
}

/// Sequential bootstrap used for the criterion bench comparison; computes
/// the identical estimate via the same per-iteration RNG streams.
pub fn bootstrap_ci_seq<F>(
    records: &[EvalRecord],
    metric: F,
    iterations: usize,
    level: f64,
    seed: u64,
) -> CiEstimate
where
    F: Fn(&[&EvalRecord]) -> f64,
{
    let refs: Vec<&EvalRecord> = records.iter().collect();
    let point = metric(&refs);
    if records.is_empty() || iterations == 0 {
        return CiEstimate {
            point,
            lo: point,
            hi: point,
        };
    }
    let n = records.len();
    let mut samples = par::seq::map_range(iterations, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, i as u64));
        let resample: Vec<&EvalRecord> =
            (0..n).map(|_| &records[rng.random_range(0..n)]).collect();
        metric(&resample)
    });
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    CiEstimate {
        point,
        lo: percentile(&samples, alpha),
        hi: percentile(&samples, 1.0 - alpha),
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Point estimate + CI for each criterion and for mean Dice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub matching_suvmax: CiEstimate,
    pub any_overlap: CiEstimate,
    pub dice_gt_half: CiEstimate,
    pub mean_dice: CiEstimate,
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            level: 0.95,
            seed: 0,
        }
    }
}

pub fn metric_report(records: &[EvalRecord], cfg: &BootstrapConfig) -> MetricReport {
    let ci = |criterion: Criterion, salt: u64| {
        bootstrap_ci(
            records,
            move |rs| pooled_f1(rs, criterion),
            cfg.iterations,
            cfg.level,
            cfg.seed ^ salt,
        )
    };
    MetricReport {
        n: records.len(),
        matching_suvmax: ci(Criterion::MatchingSuvmax, 1),
        any_overlap: ci(Criterion::AnyOverlap, 2),
        dice_gt_half: ci(Criterion::DiceGtHalf, 3),
        mean_dice: bootstrap_ci(records, mean_dice, cfg.iterations, cfg.level, cfg.seed ^ 4),
    }
}

/// Full report with per-tracer, per-size-bin and per-uptake-bin sub-reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub overall: MetricReport,
    pub by_tracer: BTreeMap<String, MetricReport>,
    pub by_size_bin: BTreeMap<String, MetricReport>,
    pub by_uptake_bin: BTreeMap<String, MetricReport>,
}

pub fn subgroup_report(records: &[EvalRecord], cfg: &BootstrapConfig) -> SubgroupReport {
    let partition = |key: fn(&EvalRecord) -> Option<&String>| {
        let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
        for r in records {
            if let Some(k) = key(r) {
                groups.entry(k.clone()).or_default().push(r.clone());
            }
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, metric_report(&v, cfg)))
            .collect::<BTreeMap<_, _>>()
    };
    SubgroupReport {
        overall: metric_report(records, cfg),
        by_tracer: partition(|r| r.tracer.as_ref()),
        by_size_bin: partition(|r| r.size_bin.as_ref()),
        by_uptake_bin: partition(|r| r.uptake_bin.as_ref()),
    }
}

fn fmt_ci(e: &CiEstimate) -> String {
    format!("{:.3} [{:.3}, {:.3}]", e.point, e.lo, e.hi)
}

fn report_row(name: &str, r: &MetricReport) -> String {
    format!(
        "{name} (n={})  {}  {}  {}  {}\n",
        r.n,
        fmt_ci(&r.matching_suvmax),
        fmt_ci(&r.any_overlap),
        fmt_ci(&r.dice_gt_half),
        fmt_ci(&r.mean_dice),
    )
}

/// Text table shaped like the comparator/analysis tables: criterion columns
/// with bracketed CIs, one row per group.
pub fn render_report(report: &SubgroupReport) -> String {
    let mut out = String::new();
    out.push_str(
        "Group  Matching SUVmax (F1)  Any Overlap (F1)  Dice > 0.5 (F1)  Dice\n",
    );
    out.push_str(&report_row("Overall", &report.overall));
    if !report.by_size_bin.is_empty() {
        out.push_str("Lesion Size Analysis\n");
        for (k, v) in &report.by_size_bin {
            out.push_str(&report_row(k, v));
        }
    }
    if !report.by_tracer.is_empty() {
        out.push_str("Tracer Type Analysis\n");
        for (k, v) in &report.by_tracer {
            out.push_str(&report_row(k, v));
        }
    }
    if !report.by_uptake_bin.is_empty() {
        out.push_str("Uptake Analysis\n");
        for (k, v) in &report.by_uptake_bin {
            out.push_str(&report_row(k, v));
        }
    }
    out
}
