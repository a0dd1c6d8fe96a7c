//! Report sentence splitting, SUVmax/slice mention finding, the lexical
//! filter cascade, redaction, and the stage funnel.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuvlinkError};

/// One input report line of the pipeline's JSONL interchange.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub exam_id: String,
    pub patient_id: String,
    pub tracer: String,
    pub report_text: String,
}

/// Why a sentence left the pipeline. A candidate carries at most one reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rejection {
    NoSuvmaxSlice,
    MultiSlice,
    NoAnatomy,
    ExtractionFailed,
    BelowCutoff,
    Templated,
    NoMatch,
    AmbiguousMatch,
}

/// One report sentence with its pipeline state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindingCandidate {
    pub exam_id: String,
    pub sentence_id: usize,
    pub text: String,
    pub suvmax_mentions: Vec<f64>,
    pub slice_mentions: Vec<i64>,
    pub has_anatomy: bool,
    pub rejection: Option<Rejection>,
}

impl FindingCandidate {
    pub fn new(exam_id: &str, sentence_id: usize, text: &str) -> Self {
        let (suvmax_mentions, slice_mentions) = find_mentions(text);
        Self {
            exam_id: exam_id.to_string(),
            sentence_id,
            text: text.to_string(),
            suvmax_mentions,
            slice_mentions,
            has_anatomy: false,
            rejection: None,
        }
    }

    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }

    pub fn distinct_slices(&self) -> usize {
        self.slice_mentions.iter().collect::<BTreeSet<_>>().len()
    }

    fn reject(&mut self, reason: Rejection) {
        if self.rejection.is_none() {
            self.rejection = Some(reason);
        }
    }
}

const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "vs", "approx", "cm", "mm", "no", "fig", "st", "e.g", "i.e",
];

/// Splits report text into sentences at sentence-final punctuation, keeping
/// decimals ("5.4"), common abbreviations and list enumerators intact.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        if c == '.' || c == '!' || c == '?' {
            if c == '.' && !is_boundary_period(&chars, i, start) {
                i += 1;
                continue;
            }
            let sentence: String = chars[start..=i].iter().collect();
            let trimmed = sentence.trim();
            if !trimmed.is_empty() {
                sentences.push(trimmed.to_string());
            }
            i += 1;
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            start = i;
        } else {
            i += 1;
        }
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        let trimmed = tail.trim();
        if !trimmed.is_empty() {
            sentences.push(trimmed.to_string());
        }
    }
    sentences
}

fn is_boundary_period(chars: &[char], i: usize, sent_start: usize) -> bool {
    // Decimal number: digit on both sides.
    let prev = if i > 0 { Some(chars[i - 1]) } else { None };
    let next = chars.get(i + 1).copied();
    if prev.is_some_and(|c| c.is_ascii_digit()) && next.is_some_and(|c| c.is_ascii_digit()) {
        return false;
    }
    // Word immediately before the period.
    let mut w = i;
    while w > 0 && (chars[w - 1].is_alphanumeric() || chars[w - 1] == '.') {
        w -= 1;
    }
    let word: String = chars[w..i].iter().collect::<String>().to_lowercase();
    if ABBREVIATIONS.contains(&word.as_str()) {
        return false;
    }
    // List enumerator: a bare short number opening the sentence ("1. ...").
    if w == sent_start && !word.is_empty() && word.len() <= 2 && word.chars().all(|c| c.is_ascii_digit()) {
        return false;
    }
    // Boundary only before end of text or a following capital/digit/paren.
    match next {
        None => true,
        Some(c) if c.is_whitespace() => {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            match chars.get(j) {
                None => true,
                Some(&c) => c.is_uppercase() || c.is_ascii_digit() || c == '(' || c == '"',
            }
        }
        Some(_) => false,
    }
}

fn suv_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\bsuv[\s_\-]*max\b[^0-9(]{0,16}\(?\s*(\d+(?:\.\d+)?)").unwrap()
    })
}

fn slice_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bslice\b[^0-9]{0,16}(\d+)").unwrap())
}

/// All SUVmax decimals and slice integers mentioned in a sentence, in
/// textual order, case-insensitively and tolerant of connector words.
pub fn find_mentions(sentence: &str) -> (Vec<f64>, Vec<i64>) {
    let mut suv = Vec::new();
    for cap in suv_regex().captures_iter(sentence) {
        if let Ok(v) = cap[1].parse::<f64>() {
            suv.push(v);
        }
    }
    let mut slices = Vec::new();
    for cap in slice_regex().captures_iter(sentence) {
        let m = cap.get(1).unwrap();
        // Skip matches that are really the integer part of a decimal.
        let rest = &sentence[m.end()..];
        if rest.starts_with('.') && rest[1..].starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        if let Ok(v) = m.as_str().parse::<i64>() {
            slices.push(v);
        }
    }
    (suv, slices)
}

/// Marks sentences missing either a SUVmax or a slice mention.
pub fn filter_has_mentions(c: &mut FindingCandidate) {
    if c.suvmax_mentions.is_empty() || c.slice_mentions.is_empty() {
        c.reject(Rejection::NoSuvmaxSlice);
    }
}

/// Rejects candidates naming two or more distinct slices.
pub fn filter_single_slice(c: &mut FindingCandidate) {
    if c.distinct_slices() > 1 {
        c.reject(Rejection::MultiSlice);
    }
}

/// Present/absent anatomy verdict; pluggable so an external NER service can
/// replace the built-in gazetteer.
pub trait AnatomyDetector: Send + Sync {
    fn has_anatomy(&self, sentence: &str) -> Result<bool>;
}

/// Word-boundary phrase matcher over a term list.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    terms: Vec<String>,
}

impl Gazetteer {
    pub fn new(terms: impl IntoIterator<Item = String>) -> Self {
        let terms = terms
            .into_iter()
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty() && !t.starts_with('#'))
            .collect();
        Self { terms }
    }

    pub fn builtin() -> Self {
        Self::new(include_str!("../data/gazetteer.txt").lines().map(String::from))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(text.lines().map(String::from)))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn matches(&self, sentence: &str) -> bool {
        let lower = sentence.to_lowercase();
        self.terms.iter().any(|t| contains_word_bounded(&lower, t))
    }
}

fn contains_word_bounded(haystack: &str, needle: &str) -> bool {
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = start == 0
            || !haystack[..start]
                .chars()
                .next_back()
                .unwrap()
                .is_alphanumeric();
        let after_ok = end == haystack.len()
            || !haystack[end..].chars().next().unwrap().is_alphanumeric();
        if before_ok && after_ok {
            return true;
        }
        from = start + 1;
    }
    false
}

impl AnatomyDetector for Gazetteer {
    fn has_anatomy(&self, sentence: &str) -> Result<bool> {
        Ok(self.matches(sentence))
    }
}

/// Adapter for an external NER service speaking
/// `POST {"text": ...} -> {"has_anatomy": bool}`.
pub struct HttpNerDetector {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpNerDetector {
    pub fn new(url: impl Into<String>, timeout: std::time::Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SuvlinkError::DetectorUnavailable(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            client,
        })
    }
}

#[derive(Deserialize)]
struct NerResponse {
    has_anatomy: bool,
}

impl AnatomyDetector for HttpNerDetector {
    fn has_anatomy(&self, sentence: &str) -> Result<bool> {
        let resp = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "text": sentence }))
            .send()
            .map_err(|e| SuvlinkError::DetectorUnavailable(e.to_string()))?;
        let body: NerResponse = resp
            .json()
            .map_err(|e| SuvlinkError::DetectorUnavailable(e.to_string()))?;
        Ok(body.has_anatomy)
    }
}

pub fn filter_anatomy(c: &mut FindingCandidate, detector: &dyn AnatomyDetector) -> Result<()> {
    c.has_anatomy = detector.has_anatomy(&c.text)?;
    if !c.has_anatomy {
        c.reject(Rejection::NoAnatomy);
    }
    Ok(())
}

/// Case-insensitive templated-phrase blocklist.
#[derive(Debug, Clone)]
pub struct Blocklist {
    phrases: Vec<String>,
}

impl Blocklist {
    pub fn new(phrases: impl IntoIterator<Item = String>) -> Self {
        let phrases = phrases
            .into_iter()
            .map(|p| p.trim().to_lowercase())
            .filter(|p| !p.is_empty() && !p.starts_with('#'))
            .collect();
        Self { phrases }
    }

    pub fn builtin() -> Self {
        Self::new(include_str!("../data/blocklist.txt").lines().map(String::from))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(text.lines().map(String::from)))
    }

    pub fn matches(&self, sentence: &str) -> bool {
        let lower = sentence.to_lowercase();
        self.phrases.iter().any(|p| lower.contains(p.as_str()))
    }
}

pub fn filter_templated(c: &mut FindingCandidate, blocklist: &Blocklist) {
    if blocklist.matches(&c.text) {
        c.reject(Rejection::Templated);
    }
}

/// Applies the SUV cutoff to an already-extracted value.
pub fn filter_cutoff(c: &mut FindingCandidate, extracted_suvmax: f64, min_suv: f64) {
    if extracted_suvmax < min_suv {
        c.reject(Rejection::BelowCutoff);
    }
}

const CONNECTORS: &[&str] = &[
    "on", "at", "of", "and", "with", "now", "previously", "currently", "measuring", "versus", "vs",
];

/// Removes every SUVmax and slice mention (keyword + value + glue) from a
/// sentence, producing the redacted referring expression.
pub fn redact(sentence: &str) -> String {
    let mut spans: Vec<Range<usize>> = suv_regex()
        .find_iter(sentence)
        .chain(slice_regex().find_iter(sentence))
        .map(|m| m.range())
        .collect();
    if spans.is_empty() {
        return sentence.to_string();
    }
    spans.sort_by_key(|r| r.start);
    // Absorb a connector word immediately before a span ("with SUVmax 8.6").
    for span in &mut spans {
        let head = &sentence[..span.start];
        let trimmed = head.trim_end();
        let ws = head.len() - trimmed.len();
        if let Some(word) = trimmed.split_whitespace().last() {
            if CONNECTORS.contains(&word.to_lowercase().as_str()) {
                span.start = trimmed.len() - word.len();
            } else if ws > 0 {
                span.start = trimmed.len();
            }
        }
    }
    // Merge spans whose gap holds only connectors and punctuation.
    let mut merged: Vec<Range<usize>> = Vec::new();
    for span in spans {
        match merged.last_mut() {
            Some(last) if span.start <= last.end || gap_is_glue(&sentence[last.end..span.start.max(last.end)]) => {
                last.end = last.end.max(span.end);
            }
            _ => merged.push(span),
        }
    }
    let mut out = String::new();
    let mut pos = 0;
    for span in &merged {
        out.push_str(&sentence[pos..span.start]);
        pos = span.end;
    }
    out.push_str(&sentence[pos..]);
    cleanup_redacted(&out)
}

fn gap_is_glue(gap: &str) -> bool {
    gap.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .all(|w| CONNECTORS.contains(&w.to_lowercase().as_str()))
}

fn cleanup_redacted(text: &str) -> String {
    let mut s = text.to_string();
    loop {
        let before = s.clone();
        // Empty or punctuation-only parentheticals.
        s = Regex::new(r"\(\s*[,;:\s]*\)").unwrap().replace_all(&s, "").into_owned();
        // Doubled punctuation and stranded commas.
        s = Regex::new(r"\s+([,;:.!?])").unwrap().replace_all(&s, "$1").into_owned();
        s = Regex::new(r"([,;:])\s*([,;:])").unwrap().replace_all(&s, "$1").into_owned();
        s = Regex::new(r"([,;:])\s*([.!?])").unwrap().replace_all(&s, "$2").into_owned();
        s = Regex::new(r"\s{2,}").unwrap().replace_all(&s, " ").into_owned();
        s = s.trim().trim_start_matches(|c: char| c == ',' || c == ';' || c == ':').trim().to_string();
        if s == before {
            break;
        }
    }
    if s.chars().all(|c| !c.is_alphanumeric()) {
        return String::new();
    }
    s
}

/// Table-1-style funnel: remaining-sentence counts per pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFunnel {
    pub counts: Vec<u64>,
}

pub const STAGE_NAMES: [&str; 9] = [
    "Starting sentences",
    "Sentences with SUVmax and slice",
    "Single slice number requirement",
    "Sentences with anatomical description",
    "Sentences with extracted SUVmax and slice",
    "Sentences above 2.5 SUVmax",
    "Sentences with located SUVmax intersecting slice",
    "Sentences with unique SUVmax intersecting slice",
    "Sentences with Labels",
];

/// Last stage (0-based) a candidate survives, judged from its rejection.
fn terminal_stage(c: &FindingCandidate) -> usize {
    match c.rejection {
        None => 8,
        Some(Rejection::NoSuvmaxSlice) => 0,
        Some(Rejection::MultiSlice) => 1,
        Some(Rejection::NoAnatomy) => 2,
        Some(Rejection::ExtractionFailed) => 3,
        Some(Rejection::Templated) | Some(Rejection::BelowCutoff) => 4,
        Some(Rejection::NoMatch) => 5,
        Some(Rejection::AmbiguousMatch) => 6,
    }
}

impl StageFunnel {
    pub fn from_candidates<'a>(candidates: impl IntoIterator<Item = &'a FindingCandidate>) -> Self {
        let mut counts = vec![0u64; STAGE_NAMES.len()];
        for c in candidates {
            let last = terminal_stage(c);
            for item in counts.iter_mut().take(last + 1) {
                *item += 1;
            }
        }
        Self { counts }
    }

    pub fn is_monotone(&self) -> bool {
        self.counts.windows(2).all(|w| w[0] >= w[1])
    }

    /// Two-column text table mirroring the report layout.
    pub fn render(&self) -> String {
        let width = STAGE_NAMES.iter().map(|n| n.len()).max().unwrap();
        let mut out = String::new();
        out.push_str(&format!(
            "{:<width$}  {}\n",
            "Data processing Step", "Number of remaining sentences"
        ));
        for (name, count) in STAGE_NAMES.iter().zip(&self.counts) {
            out.push_str(&format!("{name:<width$}  {count}\n"));
        }
        out
    }
}
