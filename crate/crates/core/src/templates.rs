//! Query template pools with named slots, train/val disjointness checks, and
//! the two-pass text-refinement protocol behind a pluggable client.
//!
//! Templates live in plain text files, one per line, with `{name}` slots.
//! Directory layout is documented in `docs/templates.md`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convgen::Family;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file}:{line}: unknown slot {{{slot}}} for family {family}")]
    UnknownSlot {
        file: String,
        line: usize,
        slot: String,
        family: Family,
    },
    #[error("{file}:{line}: unbalanced braces in template")]
    UnbalancedBraces { file: String, line: usize },
    #[error("{file}: template pool is empty")]
    EmptyPool { file: String },
    #[error("family {family}: train and val pools share {count} templates, e.g. {example:?}")]
    TrainValOverlap {
        family: Family,
        count: usize,
        example: String,
    },
    #[error("no value supplied for slot {{{slot}}} (template line {line})")]
    MissingSlot { slot: String, line: usize },
    #[error("instantiated text still contains a brace: {text:?}")]
    BraceResidue { text: String },
    #[error("cannot instantiate from an empty template set")]
    EmptySet,
}

/// Pool split: templates used for training-corpus generation vs validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn file_name(&self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Val => "val.txt",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One template line: its raw text, the slot names it mentions, and its
/// 1-based line number in the source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub text: String,
    pub slots: BTreeSet<String>,
    pub line: usize,
}

/// A validated pool of templates for one (family, split).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub family: Family,
    pub split: Split,
    pub entries: Vec<Template>,
}

/// Slot names each family's templates may use.
pub fn allowed_slots(family: Family) -> &'static [&'static str] {
    match family {
        Family::Positional => &["class", "relation", "reference"],
        Family::Hierarchical => &["class", "part", "reference"],
        Family::Interactional => &["class", "relation", "reference"],
        Family::Attribute => &["description", "class"],
        Family::Semantic => &["class"],
        Family::Hard => &["class"],
    }
}

fn scan_slots(text: &str) -> Result<BTreeSet<String>, ()> {
    let mut slots = BTreeSet::new();
    let mut chars = text.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' => {
                let rest = &text[i + 1..];
                let end = rest.find('}').ok_or(())?;
                let name = &rest[..end];
                if name.is_empty() || name.contains('{') {
                    return Err(());
                }
                slots.insert(name.to_string());
                // Skip to the closing brace.
                for _ in 0..=end {
                    chars.next();
                }
            }
            '}' => return Err(()),
            _ => {}
        }
    }
    Ok(slots)
}

/// Load and slot-validate the template pool for one family and split from
/// `<dir>/<family>/<split>.txt`. Blank lines and `#` comments are skipped.
pub fn load(template_dir: &Path, family: Family, split: Split) -> Result<TemplateSet, TemplateError> {
    let path = template_dir.join(family.slug()).join(split.file_name());
    let display = path.display().to_string();
    let content = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
        path: display.clone(),
        source,
    })?;
    let allowed = allowed_slots(family);
    let mut entries = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let slots = scan_slots(text).map_err(|_| TemplateError::UnbalancedBraces {
            file: display.clone(),
            line,
        })?;
        for slot in &slots {
            if !allowed.contains(&slot.as_str()) {
                return Err(TemplateError::UnknownSlot {
                    file: display.clone(),
                    line,
                    slot: slot.clone(),
                    family,
                });
            }
        }
        entries.push(Template {
            text: text.to_string(),
            slots,
            line,
        });
    }
    if entries.is_empty() {
        return Err(TemplateError::EmptyPool { file: display });
    }
    Ok(TemplateSet {
        family,
        split,
        entries,
    })
}

/// Error if the two pools of one family share any template text.
pub fn verify_disjoint(train: &TemplateSet, val: &TemplateSet) -> Result<(), TemplateError> {
    let train_texts: BTreeSet<&str> = train.entries.iter().map(|t| t.text.as_str()).collect();
    let shared: Vec<&str> = val
        .entries
        .iter()
        .map(|t| t.text.as_str())
        .filter(|t| train_texts.contains(t))
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(TemplateError::TrainValOverlap {
            family: train.family,
            count: shared.len(),
            example: shared[0].to_string(),
        })
    }
}

impl TemplateSet {
    /// Sub-pool of entries satisfying a predicate on their slot set.
    pub fn filter(&self, pred: impl Fn(&BTreeSet<String>) -> bool) -> TemplateSet {
        TemplateSet {
            family: self.family,
            split: self.split,
            entries: self
                .entries
                .iter()
                .filter(|t| pred(&t.slots))
                .cloned()
                .collect(),
        }
    }

    /// Entries whose slots include `slot`.
    pub fn requiring(&self, slot: &str) -> TemplateSet {
        self.filter(|slots| slots.contains(slot))
    }

    /// Entries whose slots exclude `slot`.
    pub fn without(&self, slot: &str) -> TemplateSet {
        self.filter(|slots| !slots.contains(slot))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Pick a template uniformly and substitute every slot. The result never
/// contains an unresolved brace.
pub fn instantiate(
    set: &TemplateSet,
    slots: &[(&str, &str)],
    rng: &mut impl Rng,
) -> Result<String, TemplateError> {
    if set.entries.is_empty() {
        return Err(TemplateError::EmptySet);
    }
    let template = &set.entries[rng.random_range(0..set.entries.len())];
    let mut text = template.text.clone();
    for slot in &template.slots {
        let value = slots
            .iter()
            .find(|(name, _)| name == slot)
            .map(|(_, value)| *value)
            .ok_or_else(|| TemplateError::MissingSlot {
                slot: slot.clone(),
                line: template.line,
            })?;
        text = text.replace(&format!("{{{slot}}}"), value);
    }
    if text.contains('{') || text.contains('}') {
        return Err(TemplateError::BraceResidue { text });
    }
    Ok(text)
}

// --- Two-pass text refinement -------------------------------------------

/// A single request/response text exchange with a refinement service.
///
/// Implementations: a deterministic offline stub (default), a transcript
/// replayer for tests, and an HTTP client in the CLI crate.
pub trait TextExchange: Send + Sync {
    fn exchange(&self, request: &str) -> Result<String, String>;
}

/// What the two-pass protocol decided for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    /// Pass 2 confirmed the corrected sentence preserves the meaning.
    CorrectedSame,
    /// Pass 2 judged the correction different and supplied a replacement.
    ReplacedDifferent,
    /// Protocol failure at some step; the original sentence was kept.
    FailedOpen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOutcome {
    pub text: String,
    pub status: RefineStatus,
    /// Failure detail when status is `FailedOpen`.
    pub detail: Option<String>,
}

pub fn correction_prompt(sentence: &str) -> String {
    format!(
        "Can you fix any errors and make the sentence sound like natural English, \
         and provide our output in a dictionary of format 'corrected'=CORRECT_SENTENCE? \
         here is the sentence I want you to correct, '{sentence}'"
    )
}

pub fn verification_prompt(original: &str, corrected: &str) -> String {
    format!(
        "Here is the original sentence: '{original}'. Here is the corrected sentence: \
         '{corrected}'. Does the corrected sentence have the same meaning as the original? \
         If yes, please output ['Same', 'None']. If no, please output \
         ['Different', '<corrected_with_same_meaning_as_original>']."
    )
}

#[derive(Deserialize)]
struct CorrectionReply {
    corrected: String,
}

/// Refine one sentence with the two-pass protocol.
///
/// Pass 1 asks for a corrected sentence; pass 2 submits (original, corrected)
/// and asks whether the meaning is preserved. Any protocol failure returns
/// the original sentence unchanged: a dataset build must never stall on the
/// refinement service.
pub fn refine(client: &dyn TextExchange, sentence: &str) -> RefineOutcome {
    let failed = |detail: String| RefineOutcome {
        text: sentence.to_string(),
        status: RefineStatus::FailedOpen,
        detail: Some(detail),
    };
    let reply1 = match client.exchange(&correction_prompt(sentence)) {
        Ok(r) => r,
        Err(e) => return failed(format!("pass 1 exchange failed: {e}")),
    };
    let corrected = match serde_json::from_str::<CorrectionReply>(&reply1) {
        Ok(r) if !r.corrected.trim().is_empty() => r.corrected,
        Ok(_) => return failed("pass 1 returned an empty correction".into()),
        Err(e) => return failed(format!("pass 1 reply was not a correction object: {e}")),
    };
    let reply2 = match client.exchange(&verification_prompt(sentence, &corrected)) {
        Ok(r) => r,
        Err(e) => return failed(format!("pass 2 exchange failed: {e}")),
    };
    let verdict: Vec<String> = match serde_json::from_str(&reply2) {
        Ok(v) => v,
        Err(e) => return failed(format!("pass 2 reply was not a verdict array: {e}")),
    };
    match verdict.as_slice() {
        [same, _] if same == "Same" => RefineOutcome {
            text: corrected,
            status: RefineStatus::CorrectedSame,
            detail: None,
        },
        [different, replacement] if different == "Different" => {
            if replacement.trim().is_empty() {
                failed("pass 2 replacement was empty".into())
            } else {
                RefineOutcome {
                    text: replacement.clone(),
                    status: RefineStatus::ReplacedDifferent,
                    detail: None,
                }
            }
        }
        other => failed(format!("pass 2 verdict not understood: {other:?}")),
    }
}

/// Refine a batch with at most `max_in_flight` concurrent exchanges. Results
/// keep input order.
pub fn refine_batch(
    client: &dyn TextExchange,
    sentences: &[String],
    max_in_flight: usize,
) -> Vec<RefineOutcome> {
    let cap = max_in_flight.max(1);
    let mut results = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(cap) {
        let outcomes = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|s| scope.spawn(move || refine(client, s)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("refine worker panicked"))
                .collect::<Vec<_>>()
        });
        results.extend(outcomes);
    }
    results
}

fn extract_quoted_sentence(prompt: &str) -> Option<&str> {
    let start = prompt.find("correct, '")? + "correct, '".len();
    let rest = &prompt[start..];
    let end = rest.rfind('\'')?;
    Some(&rest[..end])
}

/// Offline stub: echoes every sentence back as already correct.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityExchange;

impl TextExchange for IdentityExchange {
    fn exchange(&self, request: &str) -> Result<String, String> {
        if request.starts_with("Here is the original sentence:") {
            Ok("[\"Same\", \"None\"]".to_string())
        } else {
            let sentence = extract_quoted_sentence(request)
                .ok_or_else(|| "unrecognized prompt shape".to_string())?;
            Ok(serde_json::json!({ "corrected": sentence }).to_string())
        }
    }
}

/// One recorded exchange pair for transcript replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub sentence: String,
    pub response1: String,
    pub response2: String,
}

/// Replays recorded responses keyed by the sentence embedded in each prompt.
#[derive(Debug, Clone, Default)]
pub struct ReplayExchange {
    pub entries: Vec<TranscriptEntry>,
}

impl TextExchange for ReplayExchange {
    fn exchange(&self, request: &str) -> Result<String, String> {
        let pass2 = request.starts_with("Here is the original sentence:");
        for entry in &self.entries {
            let key = format!("'{}'", entry.sentence);
            if request.contains(&key) {
                return Ok(if pass2 {
                    entry.response2.clone()
                } else {
                    entry.response1.clone()
                });
            }
        }
        Err("no transcript entry matches the prompt".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write_pool(dir: &Path, family: &str, split: &str, lines: &[&str]) {
        let d = dir.join(family);
        std::fs::create_dir_all(&d).unwrap();
        let mut f = std::fs::File::create(d.join(format!("{split}.txt"))).unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
    }

    fn tmp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("mrseg-tmpl-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn load_counts_valid_templates() {
        let dir = tmp_dir("count");
        write_pool(
            &dir,
            "semantic",
            "train",
            &["Segment the {class}.", "# comment", "", "Mask out every {class}.", "Find the {class} region."],
        );
        let set = load(&dir, Family::Semantic, Split::Train).unwrap();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn unknown_slot_names_line() {
        let dir = tmp_dir("slot");
        write_pool(&dir, "positional", "train", &["Segment the {color} thing."]);
        match load(&dir, Family::Positional, Split::Train) {
            Err(TemplateError::UnknownSlot { line: 1, slot, .. }) => assert_eq!(slot, "color"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn unbalanced_braces_rejected() {
        let dir = tmp_dir("brace");
        write_pool(&dir, "semantic", "train", &["Segment the {class."]);
        assert!(matches!(
            load(&dir, Family::Semantic, Split::Train),
            Err(TemplateError::UnbalancedBraces { line: 1, .. })
        ));
    }

    #[test]
    fn instantiate_fills_single_template() {
        let set = TemplateSet {
            family: Family::Semantic,
            split: Split::Train,
            entries: vec![Template {
                text: "Please segment the {class}.".into(),
                slots: ["class".to_string()].into_iter().collect(),
                line: 1,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text = instantiate(&set, &[("class", "dog")], &mut rng).unwrap();
        assert_eq!(text, "Please segment the dog.");
        assert!(!text.contains('{') && !text.contains('}'));
    }

    #[test]
    fn instantiate_missing_slot_is_error() {
        let set = TemplateSet {
            family: Family::Semantic,
            split: Split::Train,
            entries: vec![Template {
                text: "Segment the {class}.".into(),
                slots: ["class".to_string()].into_iter().collect(),
                line: 4,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            instantiate(&set, &[("part", "ear")], &mut rng),
            Err(TemplateError::MissingSlot { line: 4, .. })
        ));
    }

    #[test]
    fn instantiate_uniform_over_pool() {
        let entries: Vec<Template> = (0..10)
            .map(|i| Template {
                text: format!("Template number {i} for the {{class}}."),
                slots: ["class".to_string()].into_iter().collect(),
                line: i + 1,
            })
            .collect();
        let set = TemplateSet {
            family: Family::Semantic,
            split: Split::Train,
            entries,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            let text = instantiate(&set, &[("class", "sky")], &mut rng).unwrap();
            let i: usize = text
                .strip_prefix("Template number ")
                .and_then(|r| r.split(' ').next())
                .and_then(|n| n.parse().ok())
                .unwrap();
            counts[i] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!((60..=140).contains(&c), "template {i} drawn {c} times");
        }
    }

    #[test]
    fn disjointness_detects_overlap() {
        let mk = |split, texts: &[&str]| TemplateSet {
            family: Family::Semantic,
            split,
            entries: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Template {
                    text: t.to_string(),
                    slots: BTreeSet::new(),
                    line: i + 1,
                })
                .collect(),
        };
        let train = mk(Split::Train, &["a", "b"]);
        let val_ok = mk(Split::Val, &["c"]);
        let val_bad = mk(Split::Val, &["b", "c"]);
        assert!(verify_disjoint(&train, &val_ok).is_ok());
        assert!(verify_disjoint(&train, &val_bad).is_err());
    }

    #[test]
    fn refine_identity_stub_is_noop() {
        let outcome = refine(&IdentityExchange, "Segment the dog that chases the ball.");
        assert_eq!(outcome.text, "Segment the dog that chases the ball.");
        assert_eq!(outcome.status, RefineStatus::CorrectedSame);
    }

    #[test]
    fn refine_uses_pass2_replacement_when_different() {
        let replay = ReplayExchange {
            entries: vec![TranscriptEntry {
                sentence: "seg the dog".into(),
                response1: r#"{"corrected": "Segment a canine."}"#.into(),
                response2: r#"["Different", "Segment the dog."]"#.into(),
            }],
        };
        let outcome = refine(&replay, "seg the dog");
        assert_eq!(outcome.text, "Segment the dog.");
        assert_eq!(outcome.status, RefineStatus::ReplacedDifferent);
    }

    #[test]
    fn refine_fails_open_on_protocol_error() {
        struct Broken;
        impl TextExchange for Broken {
            fn exchange(&self, _: &str) -> Result<String, String> {
                Ok("not json".to_string())
            }
        }
        let outcome = refine(&Broken, "keep me");
        assert_eq!(outcome.text, "keep me");
        assert_eq!(outcome.status, RefineStatus::FailedOpen);
        assert!(!outcome.text.is_empty());
    }

    #[test]
    fn refine_batch_keeps_order() {
        let sentences: Vec<String> = (0..7).map(|i| format!("sentence {i}")).collect();
        let outcomes = refine_batch(&IdentityExchange, &sentences, 3);
        let texts: Vec<&str> = outcomes.iter().map(|o| o.text.as_str()).collect();
        assert_eq!(texts, sentences.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }
}
