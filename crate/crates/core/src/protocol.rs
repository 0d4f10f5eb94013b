//! Token-stream layouts for conversations: special-token placement with
//! teacher-forcing embedding slots, decoder query specs, and flattening of
//! N-round conversations into single-turn baseline tasks.
//!
//! The serialized layout format is specified bit-exactly in
//! `docs/protocol.md`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::Corpus;
use crate::convgen::{Conversation, Round};
use crate::tokens::{ENC_CLOSE, ENC_OPEN};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("layout line {line}: {message}")]
    BadLayoutLine { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

/// One marker of a serialized conversation stream.
///
/// Mask- and box-embedding slots are placeholders filled by downstream
/// trainers; a slot carries only the round whose mask it stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    ImageSlot,
    Text { role: Role, text: String },
    SegToken { round: u32 },
    RefToken,
    PadToken,
    MaskSlot { round: u32 },
    BoxSlot { round: u32 },
}

/// Ordered marker stream for one conversation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenLayout {
    pub items: Vec<Marker>,
}

/// Teacher-forcing layout: the image slot first, then per round the user
/// text, the assistant text with its segmentation token, and the ground-truth
/// mask and box embedding slots appended right after that token. A round that
/// references an earlier round re-declares the referenced round's embedding
/// slots immediately before its own user text.
pub fn teacher_forcing_layout(conv: &Conversation) -> TokenLayout {
    let mut items = Vec::with_capacity(2 + conv.rounds.len() * 5);
    items.push(Marker::ImageSlot);
    for round in &conv.rounds {
        if let Some(referenced) = round.reference_round {
            items.push(Marker::MaskSlot { round: referenced });
            items.push(Marker::BoxSlot { round: referenced });
        }
        items.push(Marker::Text {
            role: Role::User,
            text: round.query_text.clone(),
        });
        items.push(Marker::Text {
            role: Role::Assistant,
            text: round.answer_text.clone(),
        });
        items.push(Marker::SegToken { round: round.index });
        items.push(Marker::MaskSlot { round: round.index });
        items.push(Marker::BoxSlot { round: round.index });
    }
    TokenLayout { items }
}

/// Decoder query token, distinct from the stream markers: these two-token
/// pairs drive the mask decoder, they never appear in the conversational
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryToken {
    Ref,
    Pad,
    Seg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    ReferenceMask,
    TargetMask,
}

/// One decoder query: an ordered token pair matched to a ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderQuerySpec {
    pub tokens: (QueryToken, QueryToken),
    pub target: MaskTarget,
    /// Whether the reference channel carries a real mask. Self-queries have
    /// no reference mask, so their single spec marks the channel inactive.
    pub reference_active: bool,
}

/// Decoder queries for one round: reference-bearing rounds yield the
/// (ref, pad) -> reference-mask and (ref, seg) -> target-mask pair;
/// self-queries yield only the target spec with the reference channel
/// inactive.
pub fn decoder_queries(round: &Round) -> Vec<DecoderQuerySpec> {
    if round.has_reference() {
        vec![
            DecoderQuerySpec {
                tokens: (QueryToken::Ref, QueryToken::Pad),
                target: MaskTarget::ReferenceMask,
                reference_active: true,
            },
            DecoderQuerySpec {
                tokens: (QueryToken::Ref, QueryToken::Seg),
                target: MaskTarget::TargetMask,
                reference_active: true,
            },
        ]
    } else {
        vec![DecoderQuerySpec {
            tokens: (QueryToken::Ref, QueryToken::Seg),
            target: MaskTarget::TargetMask,
            reference_active: false,
        }]
    }
}

/// Baseline flattening mode for models without multi-round support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlattenMode {
    /// Replace each encoded-reference span with the literal words "the mask".
    TagAsMask,
    /// Replace each encoded-reference span with the reference instance's
    /// first caption; falls back to [`FlattenMode::TagAsMask`] when the
    /// reference has no captions.
    CaptionSubstitute,
}

/// One single-turn task produced by flattening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatTask {
    pub conversation_id: String,
    pub round_index: u32,
    pub image_id: u64,
    pub text: String,
    pub target_instance: u64,
    /// True when caption substitution fell back to tag replacement.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fell_back: bool,
}

fn replace_spans(text: &str, replacement: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(ENC_OPEN) {
        out.push_str(&rest[..start]);
        let after_open = &rest[start + ENC_OPEN.len()..];
        match after_open.find(ENC_CLOSE) {
            Some(end) => {
                out.push_str(replacement);
                rest = &after_open[end + ENC_CLOSE.len()..];
            }
            None => {
                // Unterminated span: keep the raw text rather than lose it.
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn reference_instance_of(conv: &Conversation, round: &Round) -> Option<u64> {
    if let Some(id) = round.reference_instance {
        return Some(id);
    }
    let referenced = round.reference_round?;
    conv.rounds
        .iter()
        .find(|r| r.index == referenced)
        .map(|r| r.target_instance)
}

/// Flatten an N-round conversation into N single-turn tasks, substituting
/// encoded-reference spans per `mode`. Rounds without spans (self-queries and
/// caption-phrased references) pass through unchanged.
pub fn flatten(conv: &Conversation, mode: FlattenMode, corpus: &Corpus) -> Vec<FlatTask> {
    conv.rounds
        .iter()
        .map(|round| {
            let has_span = round.query_text.contains(ENC_OPEN);
            let (text, fell_back) = if !has_span {
                (round.query_text.clone(), false)
            } else {
                match mode {
                    FlattenMode::TagAsMask => {
                        (replace_spans(&round.query_text, "the mask"), false)
                    }
                    FlattenMode::CaptionSubstitute => {
                        let caption = reference_instance_of(conv, round)
                            .and_then(|id| corpus.instance(id))
                            .and_then(|inst| inst.captions.first().cloned());
                        match caption {
                            Some(caption) => (replace_spans(&round.query_text, &caption), false),
                            None => (replace_spans(&round.query_text, "the mask"), true),
                        }
                    }
                }
            };
            FlatTask {
                conversation_id: conv.conversation_id.clone(),
                round_index: round.index,
                image_id: conv.image_id,
                text,
                target_instance: round.target_instance,
                fell_back,
            }
        })
        .collect()
}

/// Render a layout to its line-based serialized form.
///
/// One marker per line: `IMG`, `TXT <role> <json-string>`, `SEG <round>`,
/// `MSLOT <round>`, `BSLOT <round>`, `REF`, `PAD`.
pub fn render_layout(layout: &TokenLayout) -> String {
    let mut out = String::new();
    for item in &layout.items {
        match item {
            Marker::ImageSlot => out.push_str("IMG"),
            Marker::Text { role, text } => {
                let role = match role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                out.push_str(&format!(
                    "TXT {role} {}",
                    serde_json::to_string(text).expect("strings always serialize")
                ));
            }
            Marker::SegToken { round } => out.push_str(&format!("SEG {round}")),
            Marker::RefToken => out.push_str("REF"),
            Marker::PadToken => out.push_str("PAD"),
            Marker::MaskSlot { round } => out.push_str(&format!("MSLOT {round}")),
            Marker::BoxSlot { round } => out.push_str(&format!("BSLOT {round}")),
        }
        out.push('\n');
    }
    out
}

/// Parse a serialized layout back; inverse of [`render_layout`].
pub fn parse_layout(text: &str) -> Result<TokenLayout, ProtocolError> {
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |message: &str| ProtocolError::BadLayoutLine {
            line: line_no,
            message: message.to_string(),
        };
        if line.is_empty() {
            continue;
        }
        let (word, rest) = line.split_once(' ').unwrap_or((line, ""));
        let parse_round = |rest: &str| -> Result<u32, ProtocolError> {
            rest.trim().parse().map_err(|_| bad("expected a round number"))
        };
        let item = match word {
            "IMG" => Marker::ImageSlot,
            "REF" => Marker::RefToken,
            "PAD" => Marker::PadToken,
            "SEG" => Marker::SegToken { round: parse_round(rest)? },
            "MSLOT" => Marker::MaskSlot { round: parse_round(rest)? },
            "BSLOT" => Marker::BoxSlot { round: parse_round(rest)? },
            "TXT" => {
                let (role, json) = rest.split_once(' ').ok_or_else(|| bad("expected role and text"))?;
                let role = match role {
                    "user" => Role::User,
                    "assistant" => Role::Assistant,
                    _ => return Err(bad("role must be user or assistant")),
                };
                let text: String =
                    serde_json::from_str(json).map_err(|_| bad("text is not a JSON string"))?;
                Marker::Text { role, text }
            }
            _ => return Err(bad("unknown marker")),
        };
        items.push(item);
    }
    Ok(TokenLayout { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::parse_instances;
    use crate::convgen::{Family, ReferenceMode};
    use crate::tokens;

    fn round(
        index: u32,
        query: &str,
        target: u64,
        reference_round: Option<u32>,
        mode: ReferenceMode,
    ) -> Round {
        Round {
            index,
            query_text: query.to_string(),
            target_instance: target,
            reference_round,
            reference_instance: None,
            reference_mode: mode,
            answer_text: "Sure,".to_string(),
        }
    }

    fn conversation(rounds: Vec<Round>) -> Conversation {
        Conversation {
            conversation_id: "test:positional:1:0".to_string(),
            image_id: 1,
            family: Family::Positional,
            rounds,
            seed: 5,
        }
    }

    fn corpus_with_captions() -> crate::annotations::Corpus {
        let mut corpus = parse_instances(
            r#"{
            "images": [{"id": 1, "width": 50, "height": 50, "file_name": "a.jpg"}],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10]},
                {"id": 11, "image_id": 1, "category_id": 1, "bbox": [20, 20, 10, 10]}
            ],
            "categories": [{"id": 1, "name": "dog"}]
        }"#,
        )
        .unwrap();
        crate::annotations::parse_referring(
            r#"{"refs": [{"ann_id": 10, "sentences": ["the dog chasing after a butterfly"]}]}"#,
            &mut corpus,
        )
        .unwrap();
        corpus
    }

    #[test]
    fn single_round_layout_order() {
        let conv = conversation(vec![round(1, "Segment the dog.", 10, None, ReferenceMode::None)]);
        let layout = teacher_forcing_layout(&conv);
        let seg_count = layout
            .items
            .iter()
            .filter(|m| matches!(m, Marker::SegToken { .. }))
            .count();
        assert_eq!(seg_count, 1);
        assert_eq!(layout.items[0], Marker::ImageSlot);
        let tail = &layout.items[layout.items.len() - 3..];
        assert_eq!(
            tail,
            &[
                Marker::SegToken { round: 1 },
                Marker::MaskSlot { round: 1 },
                Marker::BoxSlot { round: 1 },
            ]
        );
    }

    #[test]
    fn every_seg_token_is_followed_by_its_slots() {
        let conv = conversation(vec![
            round(1, "Segment the dog.", 10, None, ReferenceMode::None),
            round(2, "Segment the other dog.", 11, Some(1), ReferenceMode::Caption),
            round(3, "And the first one again.", 10, Some(2), ReferenceMode::RoundTag),
        ]);
        let layout = teacher_forcing_layout(&conv);
        let seg_positions: Vec<usize> = layout
            .items
            .iter()
            .enumerate()
            .filter_map(|(i, m)| matches!(m, Marker::SegToken { .. }).then_some(i))
            .collect();
        assert_eq!(seg_positions.len(), 3);
        for pos in seg_positions {
            let Marker::SegToken { round } = layout.items[pos] else {
                unreachable!()
            };
            assert_eq!(layout.items[pos + 1], Marker::MaskSlot { round });
            assert_eq!(layout.items[pos + 2], Marker::BoxSlot { round });
        }
        assert!(layout
            .items
            .iter()
            .all(|m| !matches!(m, Marker::PadToken | Marker::RefToken)));
    }

    #[test]
    fn referencing_round_redeclares_earlier_slots_before_its_text() {
        let conv = conversation(vec![
            round(1, "Segment the dog.", 10, None, ReferenceMode::None),
            round(2, "Segment the other dog.", 11, Some(1), ReferenceMode::Caption),
        ]);
        let layout = teacher_forcing_layout(&conv);
        let round2_text_pos = layout
            .items
            .iter()
            .position(
                |m| matches!(m, Marker::Text { role: Role::User, text } if text.contains("other")),
            )
            .unwrap();
        assert_eq!(
            layout.items[round2_text_pos - 2],
            Marker::MaskSlot { round: 1 }
        );
        assert_eq!(layout.items[round2_text_pos - 1], Marker::BoxSlot { round: 1 });
    }

    #[test]
    fn decoder_queries_for_relational_and_self_rounds() {
        let relational = round(2, "q", 11, Some(1), ReferenceMode::Caption);
        let specs = decoder_queries(&relational);
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].tokens, (QueryToken::Ref, QueryToken::Pad));
        assert_eq!(specs[0].target, MaskTarget::ReferenceMask);
        assert_eq!(specs[1].tokens, (QueryToken::Ref, QueryToken::Seg));
        assert_eq!(specs[1].target, MaskTarget::TargetMask);
        assert!(specs.iter().all(|s| s.reference_active));

        let self_query = round(1, "q", 10, None, ReferenceMode::None);
        let specs = decoder_queries(&self_query);
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].tokens, (QueryToken::Ref, QueryToken::Seg));
        assert!(!specs[0].reference_active);
    }

    #[test]
    fn decoder_query_counts_over_conversation() {
        let conv = conversation(vec![
            round(1, "a", 10, None, ReferenceMode::None),
            round(2, "b", 11, Some(1), ReferenceMode::Caption),
            round(3, "c", 10, Some(1), ReferenceMode::RoundTag),
        ]);
        let total: usize = conv.rounds.iter().map(|r| decoder_queries(r).len()).sum();
        // 2 relational rounds x 2 specs + 1 self round x 1 spec.
        assert_eq!(total, 5);
    }

    #[test]
    fn flatten_replaces_tag_span_per_mode() {
        let corpus = corpus_with_captions();
        let span = tokens::encoded_span(&tokens::instance_tag(1));
        let conv = conversation(vec![
            round(1, "Segment the dog.", 10, None, ReferenceMode::None),
            round(
                2,
                &format!("Segment the person to the left of {span}."),
                11,
                Some(1),
                ReferenceMode::InstanceTag,
            ),
        ]);

        let tag_tasks = flatten(&conv, FlattenMode::TagAsMask, &corpus);
        assert_eq!(tag_tasks.len(), 2);
        assert_eq!(tag_tasks[0].text, "Segment the dog.");
        assert_eq!(
            tag_tasks[1].text,
            "Segment the person to the left of the mask."
        );
        assert!(!tag_tasks[1].text.contains(tokens::ENC_OPEN));

        let caption_tasks = flatten(&conv, FlattenMode::CaptionSubstitute, &corpus);
        assert_eq!(
            caption_tasks[1].text,
            "Segment the person to the left of the dog chasing after a butterfly."
        );
        assert!(!caption_tasks[1].fell_back);
    }

    #[test]
    fn flatten_preserves_targets_and_falls_back_without_captions() {
        let corpus = corpus_with_captions();
        let span = tokens::encoded_span(&tokens::round_tag(1));
        let conv = conversation(vec![
            // Instance 11 has no captions.
            round(1, "Segment the other dog.", 11, None, ReferenceMode::None),
            round(
                2,
                &format!("Segment the dog above {span}."),
                10,
                Some(1),
                ReferenceMode::RoundTag,
            ),
        ]);
        let tasks = flatten(&conv, FlattenMode::CaptionSubstitute, &corpus);
        assert_eq!(tasks.len(), 2);
        assert_eq!(
            tasks.iter().map(|t| t.target_instance).collect::<Vec<_>>(),
            conv.rounds.iter().map(|r| r.target_instance).collect::<Vec<_>>()
        );
        assert!(tasks[1].fell_back);
        assert_eq!(tasks[1].text, "Segment the dog above the mask.");
    }

    #[test]
    fn layout_roundtrip() {
        let conv = conversation(vec![
            round(1, "Text with \"quotes\" and \n newline.", 10, None, ReferenceMode::None),
            round(2, "Second round.", 11, Some(1), ReferenceMode::Caption),
        ]);
        let layout = teacher_forcing_layout(&conv);
        let rendered = render_layout(&layout);
        let parsed = parse_layout(&rendered).unwrap();
        assert_eq!(layout, parsed);
        assert_eq!(render_layout(&parsed), rendered);
    }

    #[test]
    fn parse_layout_rejects_garbage() {
        assert!(parse_layout("BOGUS 1\n").is_err());
        assert!(parse_layout("TXT user notjson\n").is_err());
        assert!(parse_layout("SEG x\n").is_err());
    }
}
