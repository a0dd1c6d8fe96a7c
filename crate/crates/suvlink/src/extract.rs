//! Resolves which SUVmax/slice mentions refer to the current exam: a rule
//! extractor for unambiguous sentences, and a 3-endpoint LLM ensemble with
//! 2-of-3 majority voting for the rest.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SuvlinkError};
use crate::report::{FindingCandidate, Rejection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Rule,
    Ensemble,
}

/// A resolved (SUVmax, slice) pair for the current exam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractedValues {
    pub suvmax: f64,
    pub slice: i64,
    pub source: Source,
    /// Raw per-endpoint answers; empty for rule extraction.
    pub votes: Vec<VoteRecord>,
}

/// One endpoint's raw answer, post-normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRecord {
    pub endpoint: String,
    /// Normalized decimal string, None for a non-vote on this field.
    pub suvmax: Option<String>,
    pub slice: Option<i64>,
    pub error: Option<String>,
}

/// Chat message in the completion protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

/// Few-shot prompt for current-vs-prior value disambiguation. The output
/// schema is `{"suvmax": number|null, "slice": integer|null}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    /// (sentence, JSON answer) exemplar pairs; at least three, including a
    /// prior-vs-current distractor.
    pub exemplars: Vec<(String, String)>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system: "You extract the CURRENT exam's SUVmax and axial slice number from one \
                     PET/CT report sentence. Ignore values attributed to prior exams. Answer \
                     with exactly one JSON object {\"suvmax\": number|null, \"slice\": \
                     integer|null} and nothing else."
                .to_string(),
            exemplars: vec![
                (
                    "Hypermetabolic right hilar lymph node with SUVmax 8.6 on slice 142.".into(),
                    "{\"suvmax\": 8.6, \"slice\": 142}".into(),
                ),
                (
                    "Left iliac node, SUVmax 4.1 on slice 90, previously SUVmax 6.2.".into(),
                    "{\"suvmax\": 4.1, \"slice\": 90}".into(),
                ),
                (
                    "Liver lesion now SUVmax 5.0 slice 201, prior exam slice 198.".into(),
                    "{\"suvmax\": 5.0, \"slice\": 201}".into(),
                ),
                (
                    "No suspicious uptake identified.".into(),
                    "{\"suvmax\": null, \"slice\": null}".into(),
                ),
            ],
        }
    }
}

impl PromptTemplate {
    /// Renders the message list; the sentence under extraction is the final
    /// user message, verbatim.
    pub fn render(&self, sentence: &str) -> Vec<Message> {
        let mut messages = vec![Message {
            role: "system".into(),
            content: self.system.clone(),
        }];
        for (example, answer) in &self.exemplars {
            messages.push(Message {
                role: "user".into(),
                content: example.clone(),
            });
            messages.push(Message {
                role: "assistant".into(),
                content: answer.clone(),
            });
        }
        messages.push(Message {
            role: "user".into(),
            content: sentence.to_string(),
        });
        messages
    }
}

/// A chat-completion endpoint. Implementations: HTTP client and scripted mock.
pub trait ChatEndpoint: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, messages: &[Message]) -> Result<String>;
}

/// HTTP chat-completion client: `POST {model, messages, temperature}`.
pub struct HttpChatEndpoint {
    name: String,
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatEndpoint {
    pub fn new(
        name: impl Into<String>,
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self> {
        let name = name.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SuvlinkError::MalformedModelOutput {
                endpoint: name.clone(),
                raw: e.to_string(),
            })?;
        Ok(Self {
            name,
            url: url.into(),
            model: model.into(),
            api_key,
            client,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: Message,
}

impl ChatEndpoint for HttpChatEndpoint {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                SuvlinkError::EndpointTimeout {
                    endpoint: self.name.clone(),
                }
            } else {
                SuvlinkError::MalformedModelOutput {
                    endpoint: self.name.clone(),
                    raw: e.to_string(),
                }
            }
        })?;
        let parsed: ChatResponse =
            resp.json().map_err(|e| SuvlinkError::MalformedModelOutput {
                endpoint: self.name.clone(),
                raw: e.to_string(),
            })?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| SuvlinkError::MalformedModelOutput {
                endpoint: self.name.clone(),
                raw: "empty choices".into(),
            })
    }
}

/// Scripted transcripts for tests and offline runs: JSONL lines of
/// `{"sentence": ..., "answers": [a0, a1, a2]}` where answer `i` is what
/// endpoint `i` replies. The literal answer "TIMEOUT" simulates a timeout.
#[derive(Debug, Clone, Default)]
pub struct MockTranscripts {
    by_sentence: HashMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
pub struct TranscriptLine {
    pub sentence: String,
    pub answers: Vec<String>,
}

impl MockTranscripts {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines(&text)
    }

    pub fn from_lines(jsonl: &str) -> Result<Self> {
        let mut by_sentence = HashMap::new();
        for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
            let parsed: TranscriptLine = serde_json::from_str(line)?;
            by_sentence.insert(parsed.sentence, parsed.answers);
        }
        Ok(Self { by_sentence })
    }

    pub fn insert(&mut self, sentence: &str, answers: &[&str]) {
        self.by_sentence.insert(
            sentence.to_string(),
            answers.iter().map(|s| s.to_string()).collect(),
        );
    }

    /// The three scripted endpoints backed by this transcript set.
    pub fn endpoints(&self) -> Vec<Box<dyn ChatEndpoint>> {
        let shared = Arc::new(self.by_sentence.clone());
        (0..3)
            .map(|i| {
                Box::new(MockEndpoint {
                    name: format!("mock-{i}"),
                    index: i,
                    by_sentence: Arc::clone(&shared),
                }) as Box<dyn ChatEndpoint>
            })
            .collect()
    }
}

struct MockEndpoint {
    name: String,
    index: usize,
    by_sentence: Arc<HashMap<String, Vec<String>>>,
}

impl ChatEndpoint for MockEndpoint {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        let sentence = messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let answer = self
            .by_sentence
            .get(sentence)
            .and_then(|a| a.get(self.index))
            .cloned()
            .unwrap_or_else(|| "{\"suvmax\": null, \"slice\": null}".to_string());
        if answer == "TIMEOUT" {
            return Err(SuvlinkError::EndpointTimeout {
                endpoint: self.name.clone(),
            });
        }
        Ok(answer)
    }
}

/// Strips trailing zeros so "4.10" and "4.1" compare equal as vote strings.
pub fn normalize_decimal(s: &str) -> Option<String> {
    let t = s.trim();
    let v: f64 = t.parse().ok()?;
    if !v.is_finite() {
        return None;
    }
    let mut out = if t.contains('.') {
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        t.to_string()
    };
    if out.is_empty() || out == "-" {
        out = "0".to_string();
    }
    Some(out)
}

fn normalize_f64(v: f64) -> String {
    normalize_decimal(&format!("{v}")).expect("finite value")
}

#[derive(Deserialize)]
struct ModelAnswer {
    suvmax: Option<serde_json::Number>,
    slice: Option<i64>,
}

/// Parses the first JSON object found in a model reply.
fn parse_answer(content: &str) -> Option<ModelAnswer> {
    let start = content.find('{')?;
    let end = content.rfind('}')?;
    serde_json::from_str(&content[start..=end]).ok()
}

pub enum Extraction {
    Resolved(ExtractedValues),
    Unresolved,
}

/// One mention of each kind -> take them; otherwise defer to the ensemble.
/// Duplicate identical mentions count once.
pub fn extract_rule(candidate: &FindingCandidate) -> Extraction {
    let mut suv: Vec<String> = candidate
        .suvmax_mentions
        .iter()
        .map(|&v| normalize_f64(v))
        .collect();
    suv.sort();
    suv.dedup();
    let mut slices = candidate.slice_mentions.clone();
    slices.sort_unstable();
    slices.dedup();
    if suv.len() == 1 && slices.len() == 1 {
        Extraction::Resolved(ExtractedValues {
            suvmax: suv[0].parse().expect("normalized decimal"),
            slice: slices[0],
            source: Source::Rule,
            votes: Vec::new(),
        })
    } else {
        Extraction::Unresolved
    }
}

/// Queries each endpoint once (one reprompt on a parse failure) and accepts
/// each field independently when at least two endpoints agree. Answers not
/// present among the sentence's mentions are discarded as non-votes.
pub fn extract_ensemble(
    candidate: &FindingCandidate,
    endpoints: &[Box<dyn ChatEndpoint>],
    template: &PromptTemplate,
) -> Extraction {
    let messages = template.render(&candidate.text);
    let mention_suv: Vec<String> = candidate
        .suvmax_mentions
        .iter()
        .map(|&v| normalize_f64(v))
        .collect();
    let votes: Vec<VoteRecord> = endpoints
        .iter()
        .map(|ep| {
            let mut attempt = ep.complete(&messages);
            let mut answer = attempt.as_ref().ok().and_then(|c| parse_answer(c));
            if answer.is_none() && attempt.is_ok() {
                // One automatic reprompt on unparseable output.
                attempt = ep.complete(&messages);
                answer = attempt.as_ref().ok().and_then(|c| parse_answer(c));
            }
            let error = match (&attempt, &answer) {
                (Err(e), _) => Some(e.to_string()),
                (Ok(raw), None) => Some(format!("unparseable output: {raw}")),
                _ => None,
            };
            let (mut suv_vote, mut slice_vote) = match answer {
                Some(a) => (
                    a.suvmax.and_then(|n| normalize_decimal(&n.to_string())),
                    a.slice,
                ),
                None => (None, None),
            };
            // Hallucination guard: votes must appear among the mentions.
            if let Some(s) = &suv_vote {
                if !mention_suv.contains(s) {
                    suv_vote = None;
                }
            }
            if let Some(s) = slice_vote {
                if !candidate.slice_mentions.contains(&s) {
                    slice_vote = None;
                }
            }
            VoteRecord {
                endpoint: ep.name().to_string(),
                suvmax: suv_vote,
                slice: slice_vote,
                error,
            }
        })
        .collect();

    let suv_winner = majority(votes.iter().filter_map(|v| v.suvmax.clone()));
    let slice_winner = majority(votes.iter().filter_map(|v| v.slice));
    match (suv_winner, slice_winner) {
        (Some(suv), Some(slice)) => Extraction::Resolved(ExtractedValues {
            suvmax: suv.parse().expect("normalized decimal"),
            slice,
            source: Source::Ensemble,
            votes,
        }),
        _ => Extraction::Unresolved,
    }
}

fn majority<T: Eq + std::hash::Hash>(votes: impl Iterator<Item = T>) -> Option<T> {
    let mut counts: HashMap<T, usize> = HashMap::new();
    for v in votes {
        *counts.entry(v).or_insert(0) += 1;
    }
    counts.into_iter().find(|(_, n)| *n >= 2).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractConfig {
    /// Skip the rule short-circuit and always query the ensemble.
    pub always_ensemble: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            always_ensemble: false,
        }
    }
}

/// Full extraction: rule first (unless `always_ensemble`), ensemble on
/// ambiguity. Marks the candidate `EXTRACTION_FAILED` when both fall through.
pub fn extract(
    candidate: &mut FindingCandidate,
    endpoints: &[Box<dyn ChatEndpoint>],
    template: &PromptTemplate,
    cfg: ExtractConfig,
) -> Option<ExtractedValues> {
    if !cfg.always_ensemble {
        if let Extraction::Resolved(v) = extract_rule(candidate) {
            return Some(v);
        }
    }
    match extract_ensemble(candidate, endpoints, template) {
        Extraction::Resolved(v) => Some(v),
        Extraction::Unresolved => {
            candidate.rejection = Some(Rejection::ExtractionFailed);
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn candidate(text: &str) -> FindingCandidate {
        FindingCandidate::new("e", 0, text)
    }

    #[test]
    fn rule_unambiguous() {
        let c = candidate("right hilar node SUVmax 8.6 on slice 142");
        match extract_rule(&c) {
            Extraction::Resolved(v) => {
                assert_eq!(v.suvmax, 8.6);
                assert_eq!(v.slice, 142);
                assert_eq!(v.source, Source::Rule);
            }
            _ => panic!("expected resolution"),
        }
    }

    #[test]
    fn rule_ambiguous_and_missing() {
        let amb = candidate("previously SUVmax 6.2 now SUVmax 4.1 slice 90");
        assert!(matches!(extract_rule(&amb), Extraction::Unresolved));
        let missing = candidate("lesion on slice 142");
        assert!(matches!(extract_rule(&missing), Extraction::Unresolved));
    }

    #[test]
    fn ensemble_majority() {
        let text = "previously SUVmax 6.2, now SUVmax 4.1 on slice 90";
        let mut m = MockTranscripts::default();
        m.insert(
            text,
            &[
                "{\"suvmax\": 4.1, \"slice\": 90}",
                "{\"suvmax\": 4.10, \"slice\": 90}",
                "{\"suvmax\": 6.2, \"slice\": 90}",
            ],
        );
        let c = candidate(text);
        match extract_ensemble(&c, &m.endpoints(), &PromptTemplate::default()) {
            Extraction::Resolved(v) => {
                assert_eq!(v.suvmax, 4.1);
                assert_eq!(v.slice, 90);
                assert_eq!(v.source, Source::Ensemble);
            }
            _ => panic!("expected majority"),
        }
    }

    #[test]
    fn ensemble_no_majority() {
        let text = "previously SUVmax 6.2, now SUVmax 4.1 on slice 90";
        let mut m = MockTranscripts::default();
        m.insert(
            text,
            &[
                "{\"suvmax\": 4.1, \"slice\": 90}",
                "{\"suvmax\": 6.2, \"slice\": 90}",
                "{\"suvmax\": null, \"slice\": 90}",
            ],
        );
        let c = candidate(text);
        assert!(matches!(
            extract_ensemble(&c, &m.endpoints(), &PromptTemplate::default()),
            Extraction::Unresolved
        ));
    }

    #[test]
    fn ensemble_all_timeouts() {
        let text = "node SUVmax 4.1 or SUVmax 6.2 slice 90";
        let mut m = MockTranscripts::default();
        m.insert(text, &["TIMEOUT", "TIMEOUT", "TIMEOUT"]);
        let c = candidate(text);
        match extract_ensemble(&c, &m.endpoints(), &PromptTemplate::default()) {
            Extraction::Unresolved => {}
            _ => panic!("expected unresolved"),
        }
    }

    #[test]
    fn hallucinated_vote_discarded() {
        let text = "previously SUVmax 6.2, now SUVmax 4.1 on slice 90";
        let mut m = MockTranscripts::default();
        // 9.9 appears nowhere in the sentence; that vote must not count.
        m.insert(
            text,
            &[
                "{\"suvmax\": 9.9, \"slice\": 90}",
                "{\"suvmax\": 9.9, \"slice\": 90}",
                "{\"suvmax\": 4.1, \"slice\": 90}",
            ],
        );
        let c = candidate(text);
        assert!(matches!(
            extract_ensemble(&c, &m.endpoints(), &PromptTemplate::default()),
            Extraction::Unresolved
        ));
    }

    #[test]
    fn unanimity_is_majority() {
        let text = "liver lesion SUVmax 5.0 and SUVmax 7.0 slice 40";
        let mut m = MockTranscripts::default();
        m.insert(text, &["{\"suvmax\": 5.0, \"slice\": 40}"; 3]);
        let c = candidate(text);
        match extract_ensemble(&c, &m.endpoints(), &PromptTemplate::default()) {
            Extraction::Resolved(v) => assert_eq!(v.suvmax, 5.0),
            _ => panic!("unanimity must resolve"),
        }
    }

    #[test]
    fn extract_short_circuits_rule() {
        // Endpoints that panic if called: rule extraction must not consult
        // the ensemble for an unambiguous sentence.
        struct Bomb;
        impl ChatEndpoint for Bomb {
            fn name(&self) -> &str {
                "bomb"
            }
            fn complete(&self, _: &[Message]) -> Result<String> {
                panic!("ensemble must not be called");
            }
        }
        let endpoints: Vec<Box<dyn ChatEndpoint>> =
            vec![Box::new(Bomb), Box::new(Bomb), Box::new(Bomb)];
        let mut c = candidate("liver lesion SUVmax 5.0 slice 40");
        let v = extract(&mut c, &endpoints, &PromptTemplate::default(), ExtractConfig::default())
            .expect("rule path");
        assert_eq!(v.source, Source::Rule);
    }

    #[test]
    fn extract_marks_failure() {
        let text = "nodes SUVmax 4.1 and SUVmax 6.2 slice 90";
        let mut m = MockTranscripts::default();
        m.insert(text, &["garbage", "also garbage", "{not json"]);
        let mut c = candidate(text);
        let got = extract(&mut c, &m.endpoints(), &PromptTemplate::default(), ExtractConfig::default());
        assert!(got.is_none());
        assert_eq!(c.rejection, Some(Rejection::ExtractionFailed));
    }

    #[test]
    fn permutation_invariance() {
        let text = "previously SUVmax 6.2, now SUVmax 4.1 on slice 90";
        let answers = [
            "{\"suvmax\": 4.1, \"slice\": 90}",
            "{\"suvmax\": 4.1, \"slice\": 90}",
            "{\"suvmax\": 6.2, \"slice\": 90}",
        ];
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let c = candidate(text);
        for perm in perms {
            let mut m = MockTranscripts::default();
            m.insert(text, &[answers[perm[0]], answers[perm[1]], answers[perm[2]]]);
            match extract_ensemble(&c, &m.endpoints(), &PromptTemplate::default()) {
                Extraction::Resolved(v) => assert_eq!(v.suvmax, 4.1, "perm {perm:?}"),
                _ => panic!("perm {perm:?} failed to resolve"),
            }
        }
    }

    #[test]
    fn normalize_decimal_equivalence() {
        assert_eq!(normalize_decimal("4.10").unwrap(), "4.1");
        assert_eq!(normalize_decimal("4.1").unwrap(), "4.1");
        assert_eq!(normalize_decimal("7").unwrap(), "7");
        assert_eq!(normalize_decimal("7.0").unwrap(), "7");
        assert!(normalize_decimal("abc").is_none());
    }
}
