//! Corpus validation: every conversation and round invariant, template-slot
//! residue, tag phrasing, and mask/box consistency of the dumped corpora.

use serde::{Deserialize, Serialize};

use mrseg_core::annotations::Corpus;
use mrseg_core::convgen::{Family, ReferenceMode};
use mrseg_core::maskops;
use mrseg_core::tokens::{ENC_CLOSE, ENC_OPEN};

use crate::pipeline::LoadedBuild;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation_id: Option<String>,
    pub code: String,
    pub detail: String,
}

fn violation(conversation_id: &str, code: &str, detail: String) -> Violation {
    Violation {
        conversation_id: Some(conversation_id.to_string()),
        code: code.to_string(),
        detail,
    }
}

fn tag_occurrences(text: &str) -> (usize, usize) {
    let instance_tags = text.matches("<instance ").count();
    let round_tags = text.matches("<the output of round ").count();
    (instance_tags, round_tags)
}

/// Validate one loaded build directory. Returns every violation found; an
/// empty list means the corpus passes.
pub fn validate(build: &LoadedBuild) -> Vec<Violation> {
    let mut violations = Vec::new();

    for sc in &build.conversations {
        let conv = &sc.conversation;
        let id = conv.conversation_id.as_str();
        let corpus = build.corpus_of(&sc.source);
        if corpus.is_none() {
            violations.push(violation(
                id,
                "unknown_source",
                format!("no corpus dump for source {:?}", sc.source),
            ));
        }

        if conv.rounds.is_empty() {
            violations.push(violation(id, "empty_conversation", "no rounds".into()));
            continue;
        }
        let n = conv.rounds.len();
        let cardinality_ok = match conv.family {
            Family::Interactional => n == 2,
            Family::Attribute | Family::Semantic | Family::Hard => n == 1,
            Family::Hierarchical | Family::Positional => n >= 2,
        };
        if !cardinality_ok {
            violations.push(violation(
                id,
                "family_cardinality",
                format!("family {} has {n} round(s)", conv.family),
            ));
        }

        for (pos, round) in conv.rounds.iter().enumerate() {
            if round.index != (pos + 1) as u32 {
                violations.push(violation(
                    id,
                    "round_index",
                    format!("round at position {} has index {}", pos + 1, round.index),
                ));
            }

            // Reference integrity: one violation per defective round.
            let reference_defect: Option<String> = match (
                round.reference_mode,
                round.reference_round,
                round.reference_instance,
            ) {
                (ReferenceMode::None, None, None) => None,
                (ReferenceMode::None, _, _) => {
                    Some("reference fields set but mode is none".into())
                }
                (_, Some(_), Some(_)) => {
                    Some("both round and instance references set".into())
                }
                (_, Some(r), None) => {
                    if r == 0 || r >= round.index {
                        Some(format!("reference_round {r} not earlier than round {}", round.index))
                    } else {
                        None
                    }
                }
                (ReferenceMode::InstanceTag, None, Some(instance)) => {
                    // Hard-family shape: direct instance reference.
                    match corpus {
                        Some(c) => match c.instance(instance) {
                            Some(inst) if inst.image_id == conv.image_id => None,
                            Some(_) => Some(format!(
                                "reference instance {instance} belongs to another image"
                            )),
                            None => Some(format!("reference instance {instance} does not exist")),
                        },
                        None => None,
                    }
                }
                (mode, None, Some(_)) => {
                    Some(format!("instance reference with mode {mode:?}"))
                }
                (_, None, None) => Some("reference mode set but no reference present".into()),
            };
            if let Some(detail) = reference_defect {
                violations.push(violation(id, "reference_integrity", detail));
            }

            if let Some(corpus) = corpus {
                match corpus.instance(round.target_instance) {
                    Some(instance) if instance.image_id == conv.image_id => {}
                    Some(_) => violations.push(violation(
                        id,
                        "target_image",
                        format!(
                            "round {} target {} belongs to another image",
                            round.index, round.target_instance
                        ),
                    )),
                    None => violations.push(violation(
                        id,
                        "target_missing",
                        format!(
                            "round {} target {} does not exist",
                            round.index, round.target_instance
                        ),
                    )),
                }
            }

            for text in [&round.query_text, &round.answer_text] {
                if text.contains('{') || text.contains('}') {
                    violations.push(violation(
                        id,
                        "slot_residue",
                        format!("round {}: unresolved slot in {text:?}", round.index),
                    ));
                }
            }
            if round.query_text.matches(ENC_OPEN).count()
                != round.query_text.matches(ENC_CLOSE).count()
            {
                violations.push(violation(
                    id,
                    "sentinel_balance",
                    format!("round {}: unbalanced encoded-reference span", round.index),
                ));
            }

            let (instance_tags, round_tags) = tag_occurrences(&round.query_text);
            let tag_defect = match round.reference_mode {
                ReferenceMode::InstanceTag => instance_tags != 1 || round_tags != 0,
                ReferenceMode::RoundTag => round_tags != 1 || instance_tags != 0,
                ReferenceMode::Caption | ReferenceMode::None => {
                    instance_tags != 0 || round_tags != 0
                }
            };
            if tag_defect {
                violations.push(violation(
                    id,
                    "tag_phrasing",
                    format!(
                        "round {}: mode {:?} with {instance_tags} instance tag(s), {round_tags} round tag(s)",
                        round.index, round.reference_mode
                    ),
                ));
            }
        }
    }

    for (source, corpus) in &build.corpora {
        violations.extend(validate_corpus(source, corpus));
    }

    violations
}

/// Instance-level invariants of one corpus dump: image sizes, box bounds,
/// and box/mask agreement.
pub fn validate_corpus(source: &str, corpus: &Corpus) -> Vec<Violation> {
    let mut violations = Vec::new();
    for image in corpus.images() {
        if image.width == 0 || image.height == 0 {
            violations.push(Violation {
                conversation_id: None,
                code: "image_size".into(),
                detail: format!("{source}: image {} has a zero dimension", image.image_id),
            });
        }
    }
    for instance in corpus.instances() {
        let Some(image) = corpus.image(instance.image_id) else {
            violations.push(Violation {
                conversation_id: None,
                code: "instance_image".into(),
                detail: format!(
                    "{source}: instance {} references missing image {}",
                    instance.instance_id, instance.image_id
                ),
            });
            continue;
        };
        if instance.bbox.x2 > image.width || instance.bbox.y2 > image.height {
            violations.push(Violation {
                conversation_id: None,
                code: "box_bounds".into(),
                detail: format!(
                    "{source}: instance {} box exceeds image bounds",
                    instance.instance_id
                ),
            });
            continue;
        }
        match instance.mask.to_grid(image.height, image.width) {
            Ok(grid) => {
                if maskops::bbox_of(&grid) != Some(instance.bbox) {
                    violations.push(Violation {
                        conversation_id: None,
                        code: "box_mask_mismatch".into(),
                        detail: format!(
                            "{source}: instance {} box is not the mask's tight bbox",
                            instance.instance_id
                        ),
                    });
                }
            }
            Err(e) => violations.push(Violation {
                conversation_id: None,
                code: "bad_mask".into(),
                detail: format!("{source}: instance {}: {e}", instance.instance_id),
            }),
        }
    }
    violations
}
