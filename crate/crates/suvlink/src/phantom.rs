//! Synthetic PET exam generator: planted lesions with analytic profiles,
//! seeded noise, rendered report sentences, and a hidden truth manifest.
//! Serves as the ground-truth oracle for end-to-end pipeline tests.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuvlinkError};
use crate::extract::TranscriptLine;
use crate::par;
use crate::report::{Report, StageFunnel, STAGE_NAMES};
use crate::volume::{save_volume, Geometry, SliceConvention, Volume3D, VolumeKind};

/// Intensity profile of a planted lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionShape {
    /// `peak * exp(-r^2 / 2 width^2)` — nontrivial thresholding fixed point.
    Gaussian,
    /// Uniform `peak` inside radius `width` — exact-geometry assertions.
    Sphere,
}

/// One planted lesion. `peak` is the total PET value at the center
/// (background included); `width_mm` is sigma for Gaussian, radius for Sphere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [usize; 3],
    pub peak: f64,
    pub width_mm: f64,
    pub shape: LesionShape,
}

impl LesionSpec {
    /// Radius (mm) of the truth mask: the 0.5×peak super-level set.
    pub fn truth_radius_mm(&self, background: f64) -> f64 {
        match self.shape {
            LesionShape::Sphere => self.width_mm,
            LesionShape::Gaussian => {
                let amplitude = self.peak - background;
                // bg + A exp(-r^2/2s^2) >= peak/2  =>  r <= s sqrt(2 ln(A/u))
                let u = 0.5 * self.peak - background;
                self.width_mm * (2.0 * (amplitude / u).ln()).sqrt()
            }
        }
    }
}

/// Full description of one synthetic exam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub background: f64,
    pub noise_sigma: f64,
    pub lesions: Vec<LesionSpec>,
}

impl PhantomSpec {
    /// Checks peaks clear the noise floor, centers sit inside the grid with a
    /// truth-mask margin, and lesions are pairwise well separated.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(SuvlinkError::SpecInvalid(reason));
        if self.background < 0.0 || self.noise_sigma < 0.0 {
            return fail("background and noise sigma must be non-negative".into());
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if l.peak <= self.background + 5.0 * self.noise_sigma {
                return fail(format!(
                    "lesion {i} peak {} does not clear background {} + 5 sigma",
                    l.peak, self.background
                ));
            }
            if l.width_mm <= 0.0 {
                return fail(format!("lesion {i} has non-positive width"));
            }
            let r = l.truth_radius_mm(self.background);
            for axis in 0..3 {
                let margin = (r / self.spacing[axis] as f64).ceil() as usize + 1;
                let c = l.center[axis];
                if c < margin || c + margin >= self.dims[axis] {
                    return fail(format!(
                        "lesion {i} center {c} within {margin} voxels of the axis-{axis} edge"
                    ));
                }
            }
        }
        for i in 0..self.lesions.len() {
            for j in (i + 1)..self.lesions.len() {
                let (a, b) = (&self.lesions[i], &self.lesions[j]);
                let d2: f64 = (0..3)
                    .map(|k| {
                        let d = (a.center[k] as f64 - b.center[k] as f64)
                            * self.spacing[k] as f64;
                        d * d
                    })
                    .sum();
                let need = 4.0 * (a.width_mm + b.width_mm);
                if d2.sqrt() <= need {
                    return fail(format!(
                        "lesions {i} and {j} are {:.1} mm apart, need > {need:.1}",
                        d2.sqrt()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-lesion ground truth measured on the generated exam.
#[derive(Debug, Clone)]
pub struct TruthLesion {
    pub mask: Volume3D,
    /// Nominal planted peak (noiseless center value).
    pub peak: f64,
    /// Measured max over the truth mask, rounded to 1 decimal — the value the
    /// report sentence quotes, so ±0.1 matching holds by construction.
    pub suvmax: f64,
    pub peak_voxel: [usize; 3],
    pub volume_ml: f64,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Noiseless profile of one lesion at a voxel, background excluded.
fn profile_at(l: &LesionSpec, background: f64, spacing: [f32; 3], v: [usize; 3]) -> f64 {
    let d2: f64 = (0..3)
        .map(|k| {
            let d = (v[k] as f64 - l.center[k] as f64) * spacing[k] as f64;
            d * d
        })
        .sum();
    let amplitude = l.peak - background;
    match l.shape {
        LesionShape::Gaussian => amplitude * (-d2 / (2.0 * l.width_mm * l.width_mm)).exp(),
        LesionShape::Sphere => {
            if d2.sqrt() <= l.width_mm {
                amplitude
            } else {
                0.0
            }
        }
    }
}

/// Bounding box (inclusive-exclusive) covering a lesion's truth mask.
fn lesion_box(l: &LesionSpec, spec: &PhantomSpec, margin: usize) -> [std::ops::Range<usize>; 3] {
    let r = l.truth_radius_mm(spec.background);
    std::array::from_fn(|k| {
        let half = (r / spec.spacing[k] as f64).ceil() as usize + margin;
        l.center[k].saturating_sub(half)..(l.center[k] + half + 1).min(spec.dims[k])
    })
}

/// Generates the PET volume and per-lesion truth for one exam. Noise is
/// seeded Gaussian clamped at ±3σ, so measured maxes stay within a hard
/// bound of the planted peaks and funnel outcomes are certain, not merely
/// probable. Deterministic given the seed.
pub fn generate_exam(spec: &PhantomSpec, seed: u64) -> Result<(Volume3D, Vec<TruthLesion>)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let mut field = Array3::<f32>::from_elem((nx, ny, nz), spec.background as f32);
    for l in &spec.lesions {
        // Profiles are added only inside a generous box; tails beyond it are
        // below f32 noise anyway and skipping them keeps generation fast.
        let r = l.truth_radius_mm(spec.background).max(3.0 * l.width_mm);
        let boxed: [std::ops::Range<usize>; 3] = std::array::from_fn(|k| {
            let half = (r / spec.spacing[k] as f64).ceil() as usize + 2;
            l.center[k].saturating_sub(half)..(l.center[k] + half + 1).min(spec.dims[k])
        });
        for x in boxed[0].clone() {
            for y in boxed[1].clone() {
                for z in boxed[2].clone() {
                    field[(x, y, z)] += profile_at(l, spec.background, spec.spacing, [x, y, z]) as f32;
                }
            }
        }
    }

    let mut pet = field.clone();
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        let clamp = 3.0 * spec.noise_sigma;
        for v in pet.iter_mut() {
            let e: f64 = normal.sample(&mut rng);
            *v = (*v + e.clamp(-clamp, clamp) as f32).max(0.0);
        }
    }
    let pet = Volume3D::new(pet, spec.spacing, [0.0; 3], VolumeKind::PetSuv)?;

    let voxel_ml = pet.voxel_ml();
    let mut truths = Vec::with_capacity(spec.lesions.len());
    for l in &spec.lesions {
        let mut mask = Array3::<f32>::zeros((nx, ny, nz));
        let mut count = 0u64;
        let boxed = lesion_box(l, spec, 1);
        let mut measured = f32::NEG_INFINITY;
        for x in boxed[0].clone() {
            for y in boxed[1].clone() {
                for z in boxed[2].clone() {
                    let own = spec.background + profile_at(l, spec.background, spec.spacing, [x, y, z]);
                    if own >= 0.5 * l.peak {
                        mask[(x, y, z)] = 1.0;
                        count += 1;
                        measured = measured.max(pet.data()[(x, y, z)]);
                    }
                }
            }
        }
        truths.push(TruthLesion {
            mask: Volume3D::new(mask, spec.spacing, [0.0; 3], VolumeKind::Mask)?,
            peak: l.peak,
            suvmax: round1(measured as f64),
            peak_voxel: l.center,
            volume_ml: count as f64 * voxel_ml,
        });
    }
    Ok((pet, truths))
}

/// Fractions of exams receiving one sentence of each negative kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectMix {
    pub multi_slice: f64,
    pub blood_pool: f64,
    pub below_cutoff: f64,
    pub distractor: f64,
    pub no_anatomy: f64,
    pub no_match: f64,
    pub ambiguous: f64,
    pub timeout: f64,
}

impl InjectMix {
    pub fn none() -> Self {
        Self {
            multi_slice: 0.0,
            blood_pool: 0.0,
            below_cutoff: 0.0,
            distractor: 0.0,
            no_anatomy: 0.0,
            no_match: 0.0,
            ambiguous: 0.0,
            timeout: 0.0,
        }
    }

    /// The acceptance-test mix: 10% each of the four report-level negatives.
    pub fn acceptance() -> Self {
        Self {
            multi_slice: 0.1,
            blood_pool: 0.1,
            below_cutoff: 0.1,
            distractor: 0.1,
            ..Self::none()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_exams: usize,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub convention: SliceConvention,
    pub inject: InjectMix,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_exams: 50,
            dims: [64, 64, 64],
            spacing: [3.0, 3.0, 3.0],
            background: 0.2,
            noise_sigma: 0.05,
            seed: 7,
            convention: SliceConvention::default(),
            inject: InjectMix::none(),
        }
    }
}

/// One line of the hidden truth manifest consumed by the scorer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub exam_id: String,
    pub sentence_id: usize,
    pub suvmax: f64,
    pub slice: i64,
    pub peak_voxel: [usize; 3],
    pub volume_ml: f64,
    pub tracer: String,
    pub mask_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    /// Funnel the pipeline must reproduce exactly, tallied at planting time.
    pub expected_funnel: StageFunnel,
    pub truth: Vec<TruthRecord>,
    pub n_exams: usize,
}

/// Anatomy phrases drawn from the built-in gazetteer, cycled per lesion.
const ANATOMY: [&str; 6] = [
    "right axilla",
    "liver",
    "mediastinum",
    "left hilar region",
    "spleen",
    "right lung",
];

const TRACERS: [&str; 4] = ["FDG", "DOTATATE", "Fluciclovine", "DCFPyL"];

/// Planted peak values; the 0.5 spacing guarantees measured maxes of distinct
/// lesions differ by > 0.2, keeping every intended match unique.
const PEAK_GRID: [f64; 11] = [4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0, 8.5, 9.0];

/// Sentence widths cycle through the size bins (sigma / radius in mm).
const WIDTHS: [f64; 3] = [4.0, 6.0, 9.0];

/// Evenly spreads `count` injections over `n` exams (Bresenham spacing).
fn injected(i: usize, n: usize, fraction: f64) -> bool {
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return false;
    }
    ((i + 1) * count) / n > (i * count) / n
}

/// What one planted sentence expects from the pipeline.
struct PlannedSentence {
    text: String,
    /// Last 0-based funnel stage the sentence survives (8 = labeled).
    expected_stage: usize,
    /// Lesion index in the exam's truth list, for labeled sentences.
    truth: Option<usize>,
    /// Scripted ensemble answers, for sentences the rule extractor defers.
    transcript: Option<Vec<String>>,
}

fn format_suv(v: f64) -> String {
    format!("{v:.1}")
}

/// Copies the PET values of lesion `a`'s neighborhood onto lesion `b`'s, so
/// the two components have exactly equal maxima. Both lesions must share the
/// same shape, width, and z center.
fn mirror_values(pet: &mut Array3<f32>, spec: &PhantomSpec, a: usize, b: usize) {
    let (la, lb) = (&spec.lesions[a], &spec.lesions[b]);
    let boxed = lesion_box(la, spec, 2);
    for x in boxed[0].clone() {
        for y in boxed[1].clone() {
            for z in boxed[2].clone() {
                let tx = (x as i64 - la.center[0] as i64 + lb.center[0] as i64) as usize;
                let ty = (y as i64 - la.center[1] as i64 + lb.center[1] as i64) as usize;
                let tz = (z as i64 - la.center[2] as i64 + lb.center[2] as i64) as usize;
                pet[(tx, ty, tz)] = pet[(x, y, z)];
            }
        }
    }
}

/// Deterministically places lesions with validated margins and separation,
/// drawing candidate centers from the exam RNG. `pair` forces plan `b` to
/// share plan `a`'s z plane (for the deliberate ambiguous pair).
fn place_lesions(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    plans: &[(f64, f64, LesionShape)],
    pair: Option<(usize, usize)>,
) -> Result<Vec<LesionSpec>> {
    let mut lesions: Vec<LesionSpec> = Vec::new();
    for (plan_idx, &(peak, width_mm, shape)) in plans.iter().enumerate() {
        let probe = LesionSpec {
            center: [0; 3],
            peak,
            width_mm,
            shape,
        };
        let r = probe.truth_radius_mm(cfg.background);
        let margin: [usize; 3] =
            std::array::from_fn(|k| (r / cfg.spacing[k] as f64).ceil() as usize + 2);
        let mut placed = None;
        for _attempt in 0..1000 {
            let mut center: [usize; 3] =
                std::array::from_fn(|k| rng.random_range(margin[k]..cfg.dims[k] - margin[k]));
            if let Some((a, b)) = pair {
                if plan_idx == b {
                    center[2] = lesions[a].center[2];
                }
            }
            let ok = lesions.iter().all(|other| {
                let d2: f64 = (0..3)
                    .map(|k| {
                        let d = (center[k] as f64 - other.center[k] as f64)
                            * cfg.spacing[k] as f64;
                        d * d
                    })
                    .sum();
                d2.sqrt() > 4.0 * (width_mm + other.width_mm) + 1.0
            });
            if ok {
                placed = Some(center);
                break;
            }
        }
        let center = placed.ok_or_else(|| SuvlinkError::SpecInvalid(
            "could not place lesions with required separation; grid too small".into(),
        ))?;
        lesions.push(LesionSpec {
            center,
            peak,
            width_mm,
            shape,
        });
    }
    Ok(lesions)
}

/// Generates a corpus on disk: `reports.jsonl`, `transcripts.jsonl`,
/// `truth.jsonl`, `expected_funnel.json`, plus `pet/` and `masks/` volumes
/// (uncompressed NIfTI, for byte-stable reruns). Returns the summary that the
/// acceptance harness scores against.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusSummary> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out.join("pet"))?;
    std::fs::create_dir_all(out.join("masks"))?;

    let mut reports = Vec::new();
    let mut transcripts: Vec<TranscriptLine> = Vec::new();
    let mut truth_records = Vec::new();
    let mut expected = vec![0u64; STAGE_NAMES.len()];

    for i in 0..cfg.n_exams {
        let exam_seed = par::derive_seed(cfg.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(exam_seed, 0xA11C));
        let exam_id = format!("exam{i:04}");
        let patient_id = format!("pat{:04}", i / 2);
        let tracer = TRACERS[if i % 4 == 3 { 1 + (i / 4) % 3 } else { 0 }];

        // Assign distinct peak values for this exam's lesions.
        let mut peaks: Vec<f64> = PEAK_GRID.to_vec();
        for k in (1..peaks.len()).rev() {
            peaks.swap(k, rng.random_range(0..=k));
        }
        let n_clean = 1 + i % 2;
        let has_ambiguous = injected(i, cfg.n_exams, cfg.inject.ambiguous);
        let has_distractor = injected(i, cfg.n_exams, cfg.inject.distractor);

        // Lesion plan: clean lesions first, then the ambiguous pair (equal
        // peaks, equal widths, Gaussian) appended at the end.
        let mut plans: Vec<(f64, f64, LesionShape)> = (0..n_clean)
            .map(|k| {
                let shape = if (i + k) % 3 == 0 {
                    LesionShape::Sphere
                } else {
                    LesionShape::Gaussian
                };
                (peaks[k], WIDTHS[(i + k) % WIDTHS.len()], shape)
            })
            .collect();
        if has_ambiguous {
            let p = peaks[n_clean];
            plans.push((p, 6.0, LesionShape::Gaussian));
            plans.push((p, 6.0, LesionShape::Gaussian));
        }
        // The ambiguous pair must share a z plane so both components
        // intersect the reported slice.
        let pair = has_ambiguous.then_some((n_clean, n_clean + 1));
        let lesions = place_lesions(&mut rng, cfg, &plans, pair)?;
        let spec = PhantomSpec {
            dims: cfg.dims,
            spacing: cfg.spacing,
            background: cfg.background,
            noise_sigma: cfg.noise_sigma,
            lesions,
        };
        spec.validate()?;
        let (mut pet, mut truths) = {
            let (pet, truths) = generate_exam(&spec, exam_seed)?;
            (pet.data().clone(), truths)
        };
        if has_ambiguous {
            mirror_values(&mut pet, &spec, n_clean, n_clean + 1);
            // Re-measure the pair: their maxima are now exactly equal.
            for idx in [n_clean, n_clean + 1] {
                let mask = truths[idx].mask.data();
                let mut m = f32::NEG_INFINITY;
                ndarray::Zip::indexed(mask).for_each(|ix, &v| {
                    if v > 0.0 {
                        m = m.max(pet[ix]);
                    }
                });
                truths[idx].suvmax = round1(m as f64);
            }
        }
        let pet = Volume3D::new(pet, cfg.spacing, [0.0; 3], VolumeKind::PetSuv)?;
        let geom = pet.geometry(cfg.convention);

        let mut sentences: Vec<PlannedSentence> = Vec::new();
        // Every exam opens with a benign sentence: stage 0 only.
        sentences.push(PlannedSentence {
            text: "Physiologic tracer distribution throughout the remainder of the study."
                .to_string(),
            expected_stage: 0,
            truth: None,
            transcript: None,
        });

        for (k, truth) in truths.iter().enumerate().take(n_clean) {
            let slice = slice_number(truth.peak_voxel[2], &geom);
            let anat = ANATOMY[(i + k) % ANATOMY.len()];
            let v = format_suv(truth.suvmax);
            if k == 0 && has_distractor {
                // Prior-value distractor: two SUV mentions force the ensemble;
                // the scripted endpoints agree on the current value.
                let prior = format_suv((truth.suvmax - 2.1).max(1.1));
                let text = format!(
                    "Dominant lesion in the {anat} measures SUVmax {v} on slice {slice}, \
                     previously SUVmax {prior}."
                );
                let answer = format!("{{\"suvmax\": {v}, \"slice\": {slice}}}");
                sentences.push(PlannedSentence {
                    text,
                    expected_stage: 8,
                    truth: Some(k),
                    transcript: Some(vec![answer.clone(), answer.clone(), answer]),
                });
            } else {
                sentences.push(PlannedSentence {
                    text: format!(
                        "Hypermetabolic focus in the {anat} with SUVmax {v} on slice {slice}."
                    ),
                    expected_stage: 8,
                    truth: Some(k),
                    transcript: None,
                });
            }
        }

        if injected(i, cfg.n_exams, cfg.inject.multi_slice) {
            sentences.push(PlannedSentence {
                text: "Confluent uptake in the liver with SUVmax 5.0 extending from slice 10 to slice 14."
                    .to_string(),
                expected_stage: 1,
                truth: None,
                transcript: None,
            });
        }
        if injected(i, cfg.n_exams, cfg.inject.no_anatomy) {
            sentences.push(PlannedSentence {
                text: "Focal activity measuring SUVmax 3.6 on slice 12.".to_string(),
                expected_stage: 2,
                truth: None,
                transcript: None,
            });
        }
        if injected(i, cfg.n_exams, cfg.inject.timeout) {
            // Two timeouts leave a single valid vote: no majority, dropped at
            // the extraction stage.
            let text = "Nodal mass in the mediastinum with SUVmax 6.3 on slice 20, \
                        compared to SUVmax 4.4 prior."
                .to_string();
            sentences.push(PlannedSentence {
                text,
                expected_stage: 3,
                truth: None,
                transcript: Some(vec![
                    "TIMEOUT".to_string(),
                    "TIMEOUT".to_string(),
                    "{\"suvmax\": 6.3, \"slice\": 20}".to_string(),
                ]),
            });
        }
        if injected(i, cfg.n_exams, cfg.inject.blood_pool) {
            sentences.push(PlannedSentence {
                text: "Mediastinal blood pool SUVmax 2.9 at slice 30.".to_string(),
                expected_stage: 4,
                truth: None,
                transcript: None,
            });
        }
        if injected(i, cfg.n_exams, cfg.inject.below_cutoff) {
            sentences.push(PlannedSentence {
                text: "Mild uptake in the right axilla with SUVmax 1.8 on slice 25.".to_string(),
                expected_stage: 4,
                truth: None,
                transcript: None,
            });
        }
        if injected(i, cfg.n_exams, cfg.inject.no_match) {
            // 11.5 is far above every planted peak, so no component matches.
            sentences.push(PlannedSentence {
                text: "Intense focus in the liver with SUVmax 11.5 on slice 24.".to_string(),
                expected_stage: 5,
                truth: None,
                transcript: None,
            });
        }
        if has_ambiguous {
            let t = &truths[n_clean];
            let slice = slice_number(t.peak_voxel[2], &geom);
            sentences.push(PlannedSentence {
                text: format!(
                    "Paired lesions in the spleen each with SUVmax {} on slice {slice}.",
                    format_suv(t.suvmax)
                ),
                expected_stage: 6,
                truth: None,
                transcript: None,
            });
        }

        // Tally the expected funnel and write per-sentence artifacts.
        let mut texts = Vec::new();
        for (sid, s) in sentences.iter().enumerate() {
            for stage in expected.iter_mut().take(s.expected_stage + 1) {
                *stage += 1;
            }
            if let Some(answers) = &s.transcript {
                transcripts.push(TranscriptLine {
                    sentence: s.text.clone(),
                    answers: answers.clone(),
                });
            }
            if let Some(lesion_idx) = s.truth {
                let t = &truths[lesion_idx];
                let mask_path = format!("masks/{exam_id}_{sid}.nii");
                save_volume(&t.mask, out.join(&mask_path))?;
                truth_records.push(TruthRecord {
                    exam_id: exam_id.clone(),
                    sentence_id: sid,
                    suvmax: t.suvmax,
                    slice: slice_number(t.peak_voxel[2], &geom),
                    peak_voxel: t.peak_voxel,
                    volume_ml: t.volume_ml,
                    tracer: tracer.to_string(),
                    mask_path,
                });
            }
            texts.push(s.text.clone());
        }

        save_volume(&pet, out.join(format!("pet/{exam_id}.nii")))?;
        reports.push(Report {
            exam_id,
            patient_id,
            tracer: tracer.to_string(),
            report_text: texts.join(" "),
        });
    }

    write_jsonl(out.join("reports.jsonl"), &reports)?;
    write_jsonl(out.join("transcripts.jsonl"), &transcripts)?;
    write_jsonl(out.join("truth.jsonl"), &truth_records)?;
    let funnel = StageFunnel { counts: expected };
    std::fs::write(
        out.join("expected_funnel.json"),
        serde_json::to_string_pretty(&funnel)?,
    )?;
    Ok(CorpusSummary {
        expected_funnel: funnel,
        truth: truth_records,
        n_exams: cfg.n_exams,
    })
}

/// 1-based report slice number for a 0-based z index.
pub fn slice_number(z: usize, geom: &Geometry) -> i64 {
    match geom.convention {
        SliceConvention::InferiorFirst => z as i64 + 1,
        SliceConvention::SuperiorFirst => (geom.dims[2] - z) as i64,
    }
}

fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
