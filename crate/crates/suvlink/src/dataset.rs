//! Assembles grounding samples from accepted candidates, assigns patient-level
//! splits, and renders the stage funnel.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SuvlinkError};
use crate::refine::LesionLabel;
use crate::report::{redact, FindingCandidate, StageFunnel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Tracer {
    Fdg,
    Dotatate,
    Fluciclovine,
    Dcfpyl,
}

impl Tracer {
    /// Forgiving parse of the tracer strings found in report headers.
    pub fn parse(s: &str) -> Option<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "fdg" | "[18f]fdg" => Some(Self::Fdg),
            "dotatate" | "[68ga]dotatate" => Some(Self::Dotatate),
            "fluciclovine" | "[18f]fluciclovine" => Some(Self::Fluciclovine),
            "dcfpyl" | "[18f]dcfpyl" => Some(Self::Dcfpyl),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Fdg => "FDG",
            Self::Dotatate => "DOTATATE",
            Self::Fluciclovine => "FLUCICLOVINE",
            Self::Dcfpyl => "DCFPYL",
        }
    }
}

/// Lesion volume bins, left-closed right-open so the edges are unambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

/// SUVmax bins: [2.5, 5) LOW, [5, 10) MID, [10, ∞) HIGH.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UptakeBin {
    Low,
    Mid,
    High,
}

/// [0, 1) ml SMALL, [1, 4) ml MEDIUM, [4, ∞) ml LARGE.
pub fn size_bin(volume_ml: f64) -> SizeBin {
    if volume_ml < 1.0 {
        SizeBin::Small
    } else if volume_ml < 4.0 {
        SizeBin::Medium
    } else {
        SizeBin::Large
    }
}

pub fn uptake_bin(suvmax: f64) -> UptakeBin {
    if suvmax < 5.0 {
        UptakeBin::Low
    } else if suvmax < 10.0 {
        UptakeBin::Mid
    } else {
        UptakeBin::High
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dataset row: a referring expression tied to its lesion mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingSample {
    pub exam_id: String,
    pub patient_id: String,
    pub sentence_id: usize,
    pub tracer: Tracer,
    /// Sentence with SUVmax and slice mentions removed.
    pub referring_expression: String,
    pub pet_path: String,
    pub mask_path: String,
    pub suvmax: f64,
    pub slice_number: i64,
    pub volume_ml: f64,
    pub size_bin: SizeBin,
    pub uptake_bin: UptakeBin,
    /// Refinement convergence flag; non-converged samples are kept but marked.
    pub converged: bool,
    pub split: Option<Split>,
}

/// Builds one sample from an accepted candidate and its refined label.
/// The caller owns file placement; paths are recorded relative to the
/// dataset root.
pub fn build_sample(
    candidate: &FindingCandidate,
    patient_id: &str,
    tracer: Tracer,
    suvmax: f64,
    slice_number: i64,
    label: &LesionLabel,
    pet_path: &str,
    mask_path: &str,
) -> Result<GroundingSample> {
    let referring_expression = redact(&candidate.text);
    let (suv_left, slice_left) = crate::report::find_mentions(&referring_expression);
    if !suv_left.is_empty() || !slice_left.is_empty() {
        return Err(SuvlinkError::SpecInvalid(format!(
            "redaction left mentions in: {referring_expression}"
        )));
    }
    Ok(GroundingSample {
        exam_id: candidate.exam_id.clone(),
        patient_id: patient_id.to_string(),
        sentence_id: candidate.sentence_id,
        tracer,
        referring_expression,
        pet_path: pet_path.to_string(),
        mask_path: mask_path.to_string(),
        suvmax,
        slice_number,
        volume_ml: label.volume_ml,
        size_bin: size_bin(label.volume_ml),
        uptake_bin: uptake_bin(suvmax),
        converged: label.converged,
        split: None,
    })
}

/// FNV-1a over the seed and patient id: a stable per-patient sort key, so the
/// split assignment survives reordering of the sample list.
fn patient_key(seed: u64, patient_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in patient_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Assigns splits at the patient level: patients are ordered by seeded hash
/// and sliced by the requested fractions, so all samples of one patient land
/// in the same split and the assignment is deterministic given the seed.
pub fn split_patients(
    samples: &mut [GroundingSample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let (tr, va, te) = fractions;
    if tr < 0.0 || va < 0.0 || te < 0.0 || (tr + va + te - 1.0).abs() > 1e-6 {
        return Err(SuvlinkError::ConfigInvalid(format!(
            "split fractions ({tr}, {va}, {te}) must be non-negative and sum to 1"
        )));
    }
    let mut patients: Vec<&str> = samples
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    patients.sort_by_key(|p| (patient_key(seed, p), p.to_string()));
    let n = patients.len();
    let n_train = (tr * n as f64).round() as usize;
    let n_val = (va * n as f64).round() as usize;
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (i, p) in patients.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < (n_train + n_val).min(n) {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(p.to_string(), split);
    }
    for s in samples.iter_mut() {
        s.split = Some(assignment[&s.patient_id]);
    }
    Ok(())
}

/// Table-1-style funnel over the final candidate states.
pub fn funnel_report<'a>(
    candidates: impl IntoIterator<Item = &'a FindingCandidate>,
) -> StageFunnel {
    StageFunnel::from_candidates(candidates)
}

/// Writes the dataset manifest as JSONL, one sample per line, ordered by
/// (exam_id, sentence_id) for byte-stable output.
pub fn write_manifest(samples: &[GroundingSample], path: impl AsRef<Path>) -> Result<()> {
    let mut sorted: Vec<&GroundingSample> = samples.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.exam_id, a.sentence_id).cmp(&(&b.exam_id, b.sentence_id))
    });
    let mut out = String::new();
    for s in sorted {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    let text = std::fs::read_to_string(&path).map_err(|_| SuvlinkError::InputMissing(path.as_ref().to_path_buf()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(patient: &str, n: usize) -> GroundingSample {
        GroundingSample {
            exam_id: format!("e{n}"),
            patient_id: patient.to_string(),
            sentence_id: n,
            tracer: Tracer::Fdg,
            referring_expression: "focus in the liver".into(),
            pet_path: "pet/e.nii".into(),
            mask_path: "masks/e.nii".into(),
            suvmax: 5.0,
            slice_number: 10,
            volume_ml: 0.5,
            size_bin: size_bin(0.5),
            uptake_bin: uptake_bin(5.0),
            converged: true,
            split: None,
        }
    }

    #[test]
    fn bin_boundaries_are_left_closed() {
        assert_eq!(size_bin(0.5), SizeBin::Small);
        assert_eq!(size_bin(1.0), SizeBin::Medium);
        assert_eq!(size_bin(4.0), SizeBin::Large);
        assert_eq!(uptake_bin(2.5), UptakeBin::Low);
        assert_eq!(uptake_bin(5.0), UptakeBin::Mid);
        assert_eq!(uptake_bin(10.0), UptakeBin::High);
        assert_eq!(uptake_bin(12.3), UptakeBin::High);
    }

    #[test]
    fn one_patient_lands_in_one_split() {
        let mut samples: Vec<_> = (0..5).map(|n| sample("p0", n)).collect();
        split_patients(&mut samples, (0.8, 0.1, 0.1), 3).unwrap();
        let first = samples[0].split;
        assert!(samples.iter().all(|s| s.split == first));
    }

    #[test]
    fn split_is_deterministic_and_patient_atomic() {
        let mut a: Vec<_> = (0..200)
            .map(|n| sample(&format!("p{}", n / 2), n))
            .collect();
        let mut b = a.clone();
        split_patients(&mut a, (0.8, 0.1, 0.1), 42).unwrap();
        split_patients(&mut b, (0.8, 0.1, 0.1), 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.split, y.split);
        }
        let mut by_patient: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &a {
            let e = by_patient.entry(&s.patient_id).or_insert(s.split.unwrap());
            assert_eq!(*e, s.split.unwrap(), "patient {} split twice", s.patient_id);
        }
    }

    #[test]
    fn hundred_patients_split_close_to_fractions() {
        let mut samples: Vec<_> = (0..100).map(|n| sample(&format!("p{n}"), n)).collect();
        split_patients(&mut samples, (0.8, 0.1, 0.1), 7).unwrap();
        let count = |w| samples.iter().filter(|s| s.split == Some(w)).count() as i64;
        assert!((count(Split::Train) - 80).abs() <= 2);
        assert!((count(Split::Val) - 10).abs() <= 2);
        assert!((count(Split::Test) - 10).abs() <= 2);
    }

    #[test]
    fn bad_fractions_rejected() {
        let mut samples = vec![sample("p0", 0)];
        assert!(split_patients(&mut samples, (0.8, 0.3, 0.1), 1).is_err());
    }

    #[test]
    fn manifest_round_trips_and_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let samples = vec![sample("p1", 2), sample("p0", 1)];
        write_manifest(&samples, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].exam_id < back[1].exam_id);
    }

    #[test]
    fn tracer_parse_accepts_report_spellings() {
        assert_eq!(Tracer::parse("FDG"), Some(Tracer::Fdg));
        assert_eq!(Tracer::parse("[68Ga]DOTATATE"), Some(Tracer::Dotatate));
        assert_eq!(Tracer::parse("xenon"), None);
    }
}
