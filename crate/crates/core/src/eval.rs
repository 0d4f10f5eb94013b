//! Per-round scoring of mask predictions against ground truth with mIoU and
//! cIoU, and round-indexed report emission.
//!
//! cIoU keeps exact integer intersection/union accumulators; the division
//! happens once at render time. Samples whose union is zero (empty ground
//! truth and empty prediction) are excluded from both means and counted
//! separately.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{Corpus, MaskSpec};
use crate::convgen::Conversation;
use crate::maskops::{self, MaskError, MaskGrid};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate prediction for ({conversation_id}, round {round_index})")]
    DuplicatePrediction {
        conversation_id: String,
        round_index: u32,
    },
    #[error("predictions for nonexistent rounds: {}", format_rounds(.rounds))]
    UnknownRounds { rounds: Vec<(String, u32)> },
    #[error("prediction ({conversation_id}, round {round_index}): bad mask: {source}")]
    BadPredictionMask {
        conversation_id: String,
        round_index: u32,
        source: MaskError,
    },
    #[error("conversation {conversation_id} round {round_index}: unknown target instance {instance_id}")]
    MissingInstance {
        conversation_id: String,
        round_index: u32,
        instance_id: u64,
    },
    #[error("conversation {conversation_id}: unknown image {image_id}")]
    MissingImage {
        conversation_id: String,
        image_id: u64,
    },
    #[error("conversation {conversation_id} round {round_index}: bad ground-truth mask: {source}")]
    BadGroundTruthMask {
        conversation_id: String,
        round_index: u32,
        source: MaskError,
    },
    #[error("prediction file line {line}: {message}")]
    BadPredictionLine { line: usize, message: String },
    #[error("report is not parseable: {0}")]
    BadReport(serde_json::Error),
}

fn format_rounds(rounds: &[(String, u32)]) -> String {
    rounds
        .iter()
        .map(|(c, r)| format!("({c}, {r})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One submitted prediction: a mask for one round of one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub conversation_id: String,
    pub round_index: u32,
    pub mask: MaskSpec,
}

/// Parse a prediction submission: one JSON record per line, an optional
/// schema header line first.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && trimmed.contains("\"schema\"")) {
            continue;
        }
        let record: PredictionRecord =
            serde_json::from_str(trimmed).map_err(|e| EvalError::BadPredictionLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Ground-truth masks indexed by (conversation id, round index).
#[derive(Debug, Default)]
pub struct GroundTruth {
    rounds: BTreeMap<(String, u32), MaskGrid>,
}

impl GroundTruth {
    /// Index every round of `conversations`, resolving target instances in
    /// `corpus`. Instances referenced by several rounds are rasterized once.
    pub fn add_source<'a>(
        &mut self,
        conversations: impl IntoIterator<Item = &'a Conversation>,
        corpus: &Corpus,
    ) -> Result<(), EvalError> {
        let mut cache: BTreeMap<u64, MaskGrid> = BTreeMap::new();
        for conv in conversations {
            let image =
                corpus
                    .image(conv.image_id)
                    .ok_or_else(|| EvalError::MissingImage {
                        conversation_id: conv.conversation_id.clone(),
                        image_id: conv.image_id,
                    })?;
            for round in &conv.rounds {
                let grid = match cache.get(&round.target_instance) {
                    Some(grid) => grid.clone(),
                    None => {
                        let instance = corpus.instance(round.target_instance).ok_or_else(|| {
                            EvalError::MissingInstance {
                                conversation_id: conv.conversation_id.clone(),
                                round_index: round.index,
                                instance_id: round.target_instance,
                            }
                        })?;
                        let grid = instance
                            .mask
                            .to_grid(image.height, image.width)
                            .map_err(|source| EvalError::BadGroundTruthMask {
                                conversation_id: conv.conversation_id.clone(),
                                round_index: round.index,
                                source,
                            })?;
                        cache.insert(round.target_instance, grid.clone());
                        grid
                    }
                };
                self.rounds
                    .insert((conv.conversation_id.clone(), round.index), grid);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

/// Per-round accumulated scores. `intersection_sum` and `union_sum` are the
/// exact integer accumulators behind `ciou`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sample_count: u64,
    pub zero_union_count: u64,
    pub intersection_sum: u64,
    pub union_sum: u64,
    pub miou: f64,
    pub ciou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round_index: u32,
    #[serde(flatten)]
    pub scores: Aggregate,
}

/// Round-indexed evaluation report plus the aggregate over all rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<RoundRow>,
    pub overall: Aggregate,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    samples: u64,
    zero_union: u64,
    intersection_sum: u64,
    union_sum: u64,
    ratio_sum: f64,
}

impl Acc {
    fn add(&mut self, intersection: u64, union: u64) {
        if union == 0 {
            self.zero_union += 1;
        } else {
            self.samples += 1;
            self.intersection_sum += intersection;
            self.union_sum += union;
            self.ratio_sum += intersection as f64 / union as f64;
        }
    }

    fn finish(&self) -> Aggregate {
        Aggregate {
            sample_count: self.samples,
            zero_union_count: self.zero_union,
            intersection_sum: self.intersection_sum,
            union_sum: self.union_sum,
            miou: if self.samples > 0 {
                self.ratio_sum / self.samples as f64
            } else {
                0.0
            },
            ciou: if self.union_sum > 0 {
                self.intersection_sum as f64 / self.union_sum as f64
            } else {
                0.0
            },
        }
    }
}

/// Score predictions against ground truth.
///
/// Every ground-truth round is a sample: a missing prediction scores zero
/// intersection with the full ground-truth area as union, so partial
/// submissions cannot inflate scores. A prediction for a round that does not
/// exist is an error.
pub fn score(preds: &[PredictionRecord], gt: &GroundTruth) -> Result<EvalReport, EvalError> {
    let mut by_key: BTreeMap<(String, u32), &PredictionRecord> = BTreeMap::new();
    for pred in preds {
        let key = (pred.conversation_id.clone(), pred.round_index);
        if by_key.insert(key, pred).is_some() {
            return Err(EvalError::DuplicatePrediction {
                conversation_id: pred.conversation_id.clone(),
                round_index: pred.round_index,
            });
        }
    }
    let unknown: Vec<(String, u32)> = by_key
        .keys()
        .filter(|key| !gt.rounds.contains_key(*key))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownRounds { rounds: unknown });
    }

    let mut per_round: BTreeMap<u32, Acc> = BTreeMap::new();
    let mut overall = Acc::default();
    for ((conversation_id, round_index), gt_grid) in &gt.rounds {
        let (intersection, union) =
            match by_key.get(&(conversation_id.clone(), *round_index)) {
                Some(pred) => {
                    let pred_grid = pred
                        .mask
                        .to_grid(gt_grid.height(), gt_grid.width())
                        .map_err(|source| EvalError::BadPredictionMask {
                            conversation_id: conversation_id.clone(),
                            round_index: *round_index,
                            source,
                        })?;
                    maskops::iou(&pred_grid, gt_grid).map_err(|source| {
                        EvalError::BadPredictionMask {
                            conversation_id: conversation_id.clone(),
                            round_index: *round_index,
                            source,
                        }
                    })?
                }
                None => (0, gt_grid.area()),
            };
        per_round.entry(*round_index).or_default().add(intersection, union);
        overall.add(intersection, union);
    }

    Ok(EvalReport {
        rows: per_round
            .into_iter()
            .map(|(round_index, acc)| RoundRow {
                round_index,
                scores: acc.finish(),
            })
            .collect(),
        overall: overall.finish(),
    })
}

/// Output shape for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    MachineReadable,
}

/// Render a report: an aligned text table, or a machine-readable JSON
/// document that parses back to an equal report.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::MachineReadable => {
            serde_json::to_string_pretty(report).expect("report serializes")
        }
        ReportFormat::TableText => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:>5}  {:>8}  {:>10}  {:>8}  {:>8}\n",
                "round", "samples", "zero_union", "mIoU", "cIoU"
            ));
            for row in &report.rows {
                out.push_str(&format!(
                    "{:>5}  {:>8}  {:>10}  {:>8.4}  {:>8.4}\n",
                    row.round_index,
                    row.scores.sample_count,
                    row.scores.zero_union_count,
                    row.scores.miou,
                    row.scores.ciou
                ));
            }
            out.push_str(&format!(
                "{:>5}  {:>8}  {:>10}  {:>8.4}  {:>8.4}\n",
                "all",
                report.overall.sample_count,
                report.overall.zero_union_count,
                report.overall.miou,
                report.overall.ciou
            ));
            out
        }
    }
}

/// Parse a machine-readable report; inverse of [`emit_report`].
pub fn parse_report(text: &str) -> Result<EvalReport, EvalError> {
    serde_json::from_str(text).map_err(EvalError::BadReport)
}
