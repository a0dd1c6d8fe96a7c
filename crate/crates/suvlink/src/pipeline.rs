//! Stage orchestration: parse → extract → match → refine → build, with JSONL
//! interchange between stages so each one is independently runnable and
//! resumable, plus the evaluation entry point.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, GroundingSample, Tracer};
use crate::error::{Result, SuvlinkError};
use crate::extract::{self, ChatEndpoint, ExtractConfig, ExtractedValues, MockTranscripts,
    PromptTemplate};
use crate::matcher::{self, Connectivity, MatchOutcome};
use crate::metrics::{self, BootstrapConfig, EvalRecord, SubgroupReport};
use crate::refine::{refine, IterThresholdConfig};
use crate::report::{self, Blocklist, FindingCandidate, Gazetteer, Rejection, Report,
    StageFunnel};
use crate::volume::{load_volume, save_volume, slice_to_index, SliceConvention, Volume3D,
    VolumeKind};

/// Everything the pipeline needs, loadable from TOML or JSON. Unknown keys
/// are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Input reports JSONL (one `Report` per line).
    pub reports: PathBuf,
    /// Directory holding `pet/{exam_id}.nii` volumes.
    pub volumes_dir: PathBuf,
    /// Output directory for stage files, masks, and the manifest.
    pub out_dir: PathBuf,
    /// Scripted LLM transcripts; when set, no network endpoints are used.
    pub transcripts: Option<PathBuf>,
    /// Chat endpoint URLs (exactly three) for live extraction.
    pub endpoints: Vec<String>,
    pub min_suv: f64,
    pub suv_tol: f64,
    pub connectivity: Connectivity,
    pub slice_convention: SliceConvention,
    pub refine: IterThresholdConfig,
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
    pub always_ensemble: bool,
    /// Worker threads for the parallel stages; 0 = library default.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            reports: PathBuf::from("reports.jsonl"),
            volumes_dir: PathBuf::from("."),
            out_dir: PathBuf::from("out"),
            transcripts: None,
            endpoints: Vec::new(),
            min_suv: 2.5,
            suv_tol: 0.1,
            connectivity: Connectivity::TwentySix,
            slice_convention: SliceConvention::default(),
            refine: IterThresholdConfig::default(),
            split_fractions: (0.81, 0.085, 0.105),
            seed: 0,
            always_ensemble: false,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    /// Loads TOML or JSON depending on the file extension.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|_| SuvlinkError::InputMissing(path.to_path_buf()))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)
                .map_err(|e| SuvlinkError::ConfigInvalid(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_suv < 0.0 || self.suv_tol < 0.0 {
            return Err(SuvlinkError::ConfigInvalid(
                "min_suv and suv_tol must be non-negative".into(),
            ));
        }
        self.refine
            .validate()
            .map_err(SuvlinkError::ConfigInvalid)?;
        let (a, b, c) = self.split_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-6 {
            return Err(SuvlinkError::ConfigInvalid(
                "split_fractions must be non-negative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// One candidate's full state as it moves through the stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateState {
    pub candidate: FindingCandidate,
    pub patient_id: String,
    pub tracer: String,
    pub values: Option<ExtractedValues>,
    pub component_id: Option<u32>,
    pub label: Option<LabelSummary>,
}

/// Serializable summary of a refined lesion; the mask itself lives on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSummary {
    pub mask_path: String,
    pub max_suv: f64,
    pub volume_ml: f64,
    pub centroid_mm: [f64; 3],
    pub converged: bool,
    pub iterations: usize,
    pub final_threshold: f64,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| SuvlinkError::InputMissing(path.to_path_buf()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Canonical ordering: states are always sorted by (exam, sentence) before
/// being written, so stage outputs are byte-stable regardless of scheduling.
fn canonicalize(states: &mut [CandidateState]) {
    states.sort_by(|a, b| {
        (&a.candidate.exam_id, a.candidate.sentence_id)
            .cmp(&(&b.candidate.exam_id, b.candidate.sentence_id))
    });
}

/// Stage 1–3: sentence splitting, mention detection, single-slice and
/// anatomy filters. Writes `parse.jsonl`.
pub fn run_parse(cfg: &PipelineConfig) -> Result<Vec<CandidateState>> {
    let reports: Vec<Report> = read_jsonl(&cfg.reports)?;
    let gazetteer = Gazetteer::builtin();
    let mut states = Vec::new();
    for r in &reports {
        for (sid, sentence) in report::split_sentences(&r.report_text).iter().enumerate() {
            let mut c = FindingCandidate::new(&r.exam_id, sid, sentence);
            report::filter_has_mentions(&mut c);
            report::filter_single_slice(&mut c);
            report::filter_anatomy(&mut c, &gazetteer)?;
            states.push(CandidateState {
                candidate: c,
                patient_id: r.patient_id.clone(),
                tracer: r.tracer.clone(),
                values: None,
                component_id: None,
                label: None,
            });
        }
    }
    canonicalize(&mut states);
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_jsonl(&cfg.out_dir.join("parse.jsonl"), &states)?;
    log_rejections("parse", &states);
    Ok(states)
}

fn endpoints_for(cfg: &PipelineConfig) -> Result<Vec<Box<dyn ChatEndpoint>>> {
    if let Some(path) = &cfg.transcripts {
        return Ok(MockTranscripts::from_file(path)?.endpoints());
    }
    if cfg.endpoints.is_empty() {
        // No ensemble available: rule-only extraction still works because
        // the mock set answers null for unknown sentences.
        return Ok(MockTranscripts::default().endpoints());
    }
    cfg.endpoints
        .iter()
        .enumerate()
        .map(|(i, url)| {
            let key = std::env::var("SUVLINK_API_KEY").ok();
            Ok(Box::new(extract::HttpChatEndpoint::new(
                format!("endpoint-{i}"),
                url.clone(),
                "default",
                key,
                std::time::Duration::from_secs(30),
            )?) as Box<dyn ChatEndpoint>)
        })
        .collect()
}

/// Stage 4–5: value extraction (rule, then ensemble) plus the templated and
/// SUV-cutoff filters. Writes `extract.jsonl`.
pub fn run_extract(
    cfg: &PipelineConfig,
    mut states: Vec<CandidateState>,
) -> Result<Vec<CandidateState>> {
    let endpoints = endpoints_for(cfg)?;
    let template = PromptTemplate::default();
    let blocklist = Blocklist::builtin();
    let ex_cfg = ExtractConfig {
        always_ensemble: cfg.always_ensemble,
    };
    for s in states.iter_mut() {
        if !s.candidate.accepted() {
            continue;
        }
        let values = extract::extract(&mut s.candidate, &endpoints, &template, ex_cfg);
        if let Some(v) = values {
            report::filter_templated(&mut s.candidate, &blocklist);
            report::filter_cutoff(&mut s.candidate, v.suvmax, cfg.min_suv);
            s.values = Some(v);
        }
    }
    canonicalize(&mut states);
    write_jsonl(&cfg.out_dir.join("extract.jsonl"), &states)?;
    log_rejections("extract", &states);
    Ok(states)
}

/// Loads one exam's PET volume from the corpus layout.
fn load_pet(cfg: &PipelineConfig, exam_id: &str) -> Result<Volume3D> {
    let path = cfg.volumes_dir.join(format!("pet/{exam_id}.nii"));
    let (pet, _) = load_volume(&path, VolumeKind::PetSuv)?;
    Ok(pet)
}

/// Groups state indices by exam so each PET volume is loaded once.
fn by_exam(states: &[CandidateState], alive_only: bool) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in states.iter().enumerate() {
        if !alive_only || (s.candidate.accepted() && s.values.is_some()) {
            groups.entry(s.candidate.exam_id.clone()).or_default().push(i);
        }
    }
    groups
}

/// Stage 6–7: component search at half the reported SUVmax (floored at the
/// cutoff) and the unique-match requirement. Writes `match.jsonl`.
pub fn run_match(
    cfg: &PipelineConfig,
    mut states: Vec<CandidateState>,
) -> Result<Vec<CandidateState>> {
    let groups = by_exam(&states, true);
    // Per-exam work in parallel; each item returns (state index, outcome).
    let exams: Vec<(&String, &Vec<usize>)> = groups.iter().collect();
    let results: Vec<Result<Vec<(usize, MatchOutcome)>>> =
        crate::par::map_indexed(&exams, |_, (exam_id, idxs)| {
            let pet = load_pet(cfg, exam_id)?;
            let geom = pet.geometry(cfg.slice_convention);
            let mut out = Vec::new();
            for &i in idxs.iter() {
                let v = states[i].values.as_ref().expect("alive state has values");
                let slice_idx = match slice_to_index(v.slice, &geom) {
                    Ok(z) => z,
                    Err(_) => {
                        // Reported slice outside the volume: nothing to match.
                        out.push((i, MatchOutcome::NoMatch));
                        continue;
                    }
                };
                let level = matcher::initial_threshold(v.suvmax, cfg.min_suv);
                let fg = matcher::threshold_volume(&pet, level as f32);
                let comps = matcher::connected_components(&pet, &fg, cfg.connectivity);
                out.push((i, matcher::match_component(&comps, v.suvmax, slice_idx, cfg.suv_tol)));
            }
            Ok(out)
        });
    for r in results {
        for (i, outcome) in r? {
            match outcome {
                MatchOutcome::Matched(id) => states[i].component_id = Some(id),
                MatchOutcome::NoMatch => {
                    states[i].candidate.rejection = Some(Rejection::NoMatch)
                }
                MatchOutcome::Ambiguous(_) => {
                    states[i].candidate.rejection = Some(Rejection::AmbiguousMatch)
                }
            }
        }
    }
    canonicalize(&mut states);
    write_jsonl(&cfg.out_dir.join("match.jsonl"), &states)?;
    log_rejections("match", &states);
    Ok(states)
}

/// Stage 8: iterative-threshold refinement of each matched component.
/// Writes the mask volumes and `refine.jsonl`.
pub fn run_refine(
    cfg: &PipelineConfig,
    mut states: Vec<CandidateState>,
) -> Result<Vec<CandidateState>> {
    std::fs::create_dir_all(cfg.out_dir.join("masks"))?;
    let groups = by_exam(&states, true);
    let exams: Vec<(&String, &Vec<usize>)> = groups.iter().collect();
    let results: Vec<Result<Vec<(usize, LabelSummary, Volume3D)>>> =
        crate::par::map_indexed(&exams, |_, (exam_id, idxs)| {
            let pet = load_pet(cfg, exam_id)?;
            let mut out = Vec::new();
            for &i in idxs.iter() {
                let s = &states[i];
                let (Some(v), Some(component_id)) = (s.values.as_ref(), s.component_id) else {
                    continue;
                };
                let level = matcher::initial_threshold(v.suvmax, cfg.min_suv);
                let fg = matcher::threshold_volume(&pet, level as f32);
                let comps = matcher::connected_components(&pet, &fg, cfg.connectivity);
                let seed: Array3<u8> = comps.component_mask(component_id);
                let label = refine(
                    &pet,
                    &seed,
                    &cfg.refine,
                    &s.candidate.exam_id,
                    s.candidate.sentence_id,
                    component_id,
                );
                let mask_path =
                    format!("masks/{}_{}.nii", s.candidate.exam_id, s.candidate.sentence_id);
                out.push((
                    i,
                    LabelSummary {
                        mask_path,
                        max_suv: label.max_suv,
                        volume_ml: label.volume_ml,
                        centroid_mm: label.centroid_mm,
                        converged: label.converged,
                        iterations: label.iterations,
                        final_threshold: label.final_threshold,
                    },
                    label.mask,
                ));
            }
            Ok(out)
        });
    for r in results {
        for (i, summary, mask) in r? {
            save_volume(&mask, cfg.out_dir.join(&summary.mask_path))?;
            states[i].label = Some(summary);
        }
    }
    canonicalize(&mut states);
    write_jsonl(&cfg.out_dir.join("refine.jsonl"), &states)?;
    log_rejections("refine", &states);
    Ok(states)
}

/// Stage 9: sample assembly, patient-level split, manifest and funnel.
pub fn run_build(
    cfg: &PipelineConfig,
    states: Vec<CandidateState>,
) -> Result<Vec<GroundingSample>> {
    let mut samples = Vec::new();
    for s in &states {
        let (true, Some(v), Some(label)) = (s.candidate.accepted(), &s.values, &s.label) else {
            continue;
        };
        let tracer = Tracer::parse(&s.tracer).unwrap_or(Tracer::Fdg);
        // build_sample wants a LesionLabel; reconstruct the summary fields it
        // reads (volume and convergence) without reloading the mask.
        let sample = GroundingSample {
            exam_id: s.candidate.exam_id.clone(),
            patient_id: s.patient_id.clone(),
            sentence_id: s.candidate.sentence_id,
            tracer,
            referring_expression: report::redact(&s.candidate.text),
            pet_path: format!("pet/{}.nii", s.candidate.exam_id),
            mask_path: label.mask_path.clone(),
            suvmax: v.suvmax,
            slice_number: v.slice,
            volume_ml: label.volume_ml,
            size_bin: dataset::size_bin(label.volume_ml),
            uptake_bin: dataset::uptake_bin(v.suvmax),
            converged: label.converged,
            split: None,
        };
        samples.push(sample);
    }
    dataset::split_patients(&mut samples, cfg.split_fractions, cfg.seed)?;
    dataset::write_manifest(&samples, cfg.out_dir.join("manifest.jsonl"))?;

    let funnel = dataset::funnel_report(states.iter().map(|s| &s.candidate));
    std::fs::write(
        cfg.out_dir.join("funnel.json"),
        serde_json::to_string_pretty(&funnel)?,
    )?;
    std::fs::write(cfg.out_dir.join("funnel.txt"), funnel.render())?;
    Ok(samples)
}

/// Runs the whole pipeline; each stage also leaves its JSONL snapshot behind.
pub fn run_all(cfg: &PipelineConfig) -> Result<(Vec<GroundingSample>, StageFunnel)> {
    cfg.validate()?;
    let states = run_parse(cfg)?;
    let states = run_extract(cfg, states)?;
    let states = run_match(cfg, states)?;
    let states = run_refine(cfg, states)?;
    let funnel = dataset::funnel_report(states.iter().map(|s| &s.candidate));
    let samples = run_build(cfg, states)?;
    Ok((samples, funnel))
}

/// Loads the funnel left by a previous run.
pub fn load_funnel(cfg: &PipelineConfig) -> Result<StageFunnel> {
    let path = cfg.out_dir.join("funnel.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| SuvlinkError::InputMissing(path.clone()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rejection-reason counts for one stage, as a structured log line.
fn log_rejections(stage: &str, states: &[CandidateState]) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in states {
        if let Some(r) = s.candidate.rejection {
            *counts
                .entry(serde_json::to_string(&r).unwrap_or_default())
                .or_default() += 1;
        }
    }
    log::info!("stage={stage} rejections={counts:?}");
}

/// Scores a built dataset against a hidden truth manifest. Pairing is by
/// (exam_id, sentence_id); a truth lesion with no prediction counts as a
/// missed target.
pub fn evaluate(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    truth_path: &Path,
    bootstrap: &BootstrapConfig,
) -> Result<SubgroupReport> {
    let samples = dataset::read_manifest(manifest_path)?;
    let truths: Vec<crate::phantom::TruthRecord> = read_jsonl(truth_path)?;
    let truth_dir = truth_path.parent().unwrap_or(Path::new("."));
    let by_key: BTreeMap<(String, usize), &GroundingSample> = samples
        .iter()
        .map(|s| ((s.exam_id.clone(), s.sentence_id), s))
        .collect();

    let records: Vec<Result<EvalRecord>> = crate::par::map_indexed(&truths, |_, t| {
        let pet = load_pet(cfg, &t.exam_id)?;
        let (target, _) = load_volume(truth_dir.join(&t.mask_path), VolumeKind::Mask)?;
        let pred = match by_key.get(&(t.exam_id.clone(), t.sentence_id)) {
            Some(s) => load_volume(cfg.out_dir.join(&s.mask_path), VolumeKind::Mask)?.0,
            None => Volume3D::new(
                Array3::zeros(pet.data().dim()),
                pet.spacing(),
                pet.origin(),
                VolumeKind::Mask,
            )?,
        };
        let sample_id = format!("{}/{}", t.exam_id, t.sentence_id);
        let mut rec = metrics::score_sample(
            &sample_id,
            &pred,
            &target,
            &pet,
            t.suvmax,
            cfg.connectivity,
        )?;
        rec.tracer = Some(t.tracer.clone());
        rec.size_bin = Some(format!("{:?}", dataset::size_bin(t.volume_ml)));
        rec.uptake_bin = Some(format!("{:?}", dataset::uptake_bin(t.suvmax)));
        Ok(rec)
    });
    let records: Vec<EvalRecord> = records.into_iter().collect::<Result<_>>()?;
    Ok(metrics::subgroup_report(&records, bootstrap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_corpus, CorpusConfig, InjectMix};

    fn corpus_and_config(n_exams: usize, inject: InjectMix) -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let corpus = CorpusConfig {
            n_exams,
            inject,
            ..CorpusConfig::default()
        };
        generate_corpus(&corpus, dir.path()).unwrap();
        let cfg = PipelineConfig {
            reports: dir.path().join("reports.jsonl"),
            volumes_dir: dir.path().to_path_buf(),
            out_dir: dir.path().join("out"),
            transcripts: Some(dir.path().join("transcripts.jsonl")),
            ..PipelineConfig::default()
        };
        (dir, cfg)
    }

    #[test]
    fn clean_corpus_labels_every_planted_lesion() {
        let (dir, cfg) = corpus_and_config(4, InjectMix::none());
        let (samples, funnel) = run_all(&cfg).unwrap();
        let expected: StageFunnel = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("expected_funnel.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(funnel, expected);
        assert_eq!(samples.len() as u64, expected.counts[8]);
        for s in &samples {
            assert!(cfg.out_dir.join(&s.mask_path).exists());
            assert!(s.referring_expression.contains("the"));
        }
    }

    #[test]
    fn injected_negatives_drop_at_their_stages() {
        let inject = InjectMix {
            multi_slice: 0.5,
            blood_pool: 0.5,
            below_cutoff: 0.5,
            distractor: 0.5,
            no_anatomy: 0.5,
            no_match: 0.5,
            ambiguous: 0.5,
            timeout: 0.5,
            ..InjectMix::none()
        };
        let (dir, cfg) = corpus_and_config(4, inject);
        let (_, funnel) = run_all(&cfg).unwrap();
        let expected: StageFunnel = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("expected_funnel.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(funnel, expected);
        assert!(funnel.is_monotone());
        assert_eq!(funnel.counts[7], funnel.counts[8]);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "mystery_knob = 3\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
        let bad = PipelineConfig {
            split_fractions: (0.9, 0.3, 0.1),
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_reports_is_input_missing() {
        let cfg = PipelineConfig {
            reports: PathBuf::from("/nonexistent/reports.jsonl"),
            ..PipelineConfig::default()
        };
        assert!(matches!(
            run_parse(&cfg),
            Err(SuvlinkError::InputMissing(_))
        ));
    }

    #[test]
    fn evaluation_on_own_output_scores_near_perfect_matching() {
        let (dir, cfg) = corpus_and_config(4, InjectMix::none());
        run_all(&cfg).unwrap();
        let report = evaluate(
            &cfg,
            &cfg.out_dir.join("manifest.jsonl"),
            &dir.path().join("truth.jsonl"),
            &BootstrapConfig {
                iterations: 200,
                ..BootstrapConfig::default()
            },
        )
        .unwrap();
        assert!(report.overall.matching_suvmax.point > 0.99);
        assert!(report.overall.any_overlap.point > 0.99);
    }
}
