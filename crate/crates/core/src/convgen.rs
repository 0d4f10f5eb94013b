//! Seeded generation of multi-round conversations from parsed corpora.
//!
//! Each source family has its own construction rules; all of them share the
//! deterministic seeding contract: the stream seed of every conversation is a
//! stable hash of (master seed, image id, family, unit), so regeneration is
//! byte-identical regardless of worker count or image processing order.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{Corpus, InstanceRecord};
use crate::maskops::{self, MaskGrid, PixelImage};
use crate::relations::{self, RelationLabel};
use crate::seeding::derive_seed;
use crate::templates::{self, TemplateError, TemplateSet};
use crate::tokens;

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unknown image {0}")]
    UnknownImage(u64),
}

/// Conversation family, matching the source-dataset pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Hierarchical,
    Positional,
    Interactional,
    Attribute,
    Semantic,
    Hard,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Hierarchical,
        Family::Positional,
        Family::Interactional,
        Family::Attribute,
        Family::Semantic,
        Family::Hard,
    ];

    /// Families whose conversations can span more than one round.
    pub const MULTI_ROUND: [Family; 3] =
        [Family::Hierarchical, Family::Positional, Family::Interactional];

    pub fn slug(&self) -> &'static str {
        match self {
            Family::Hierarchical => "hierarchical",
            Family::Positional => "positional",
            Family::Interactional => "interactional",
            Family::Attribute => "attribute",
            Family::Semantic => "semantic",
            Family::Hard => "hard",
        }
    }

    fn discriminant(&self) -> u64 {
        match self {
            Family::Hierarchical => 1,
            Family::Positional => 2,
            Family::Interactional => 3,
            Family::Attribute => 4,
            Family::Semantic => 5,
            Family::Hard => 6,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

/// How a round's query refers back to earlier conversation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    None,
    Caption,
    InstanceTag,
    RoundTag,
}

/// One query/answer turn targeting a single instance mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub index: u32,
    pub query_text: String,
    pub target_instance: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_round: Option<u32>,
    /// Direct instance reference used by the hard family's encoded prompt,
    /// where no earlier round exists to point at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_instance: Option<u64>,
    pub reference_mode: ReferenceMode,
    pub answer_text: String,
}

impl Round {
    pub fn has_reference(&self) -> bool {
        self.reference_mode != ReferenceMode::None
    }
}

/// An ordered multi-round conversation over one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub image_id: u64,
    pub family: Family,
    pub rounds: Vec<Round>,
    pub seed: u64,
}

/// Sampling parameters. Defaults: self-query probability 1/3, caption
/// phrasing probability 1/2, 2-18 annotations per positional image, 1-4
/// instances x 1-4 parts for hierarchical sampling, at most 4 relationship
/// triples per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub p_self: f64,
    pub p_caption: f64,
    pub positional_annotations: (u32, u32),
    pub hier_parents: (u32, u32),
    pub hier_parts: (u32, u32),
    pub max_triples_per_image: u32,
    pub master_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            p_self: 1.0 / 3.0,
            p_caption: 0.5,
            positional_annotations: (2, 18),
            hier_parents: (1, 4),
            hier_parts: (1, 4),
            max_triples_per_image: 4,
            master_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("p_self", self.p_self), ("p_caption", self.p_caption)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, (lo, hi)) in [
            ("positional_annotations", self.positional_annotations),
            ("hier_parents", self.hier_parents),
            ("hier_parts", self.hier_parts),
        ] {
            if lo == 0 || lo > hi {
                return Err(format!("{name} bounds must be positive and ordered, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// Reason code for a conversation that was not generated, or a note attached
/// to one that was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    TooFewInstances,
    NoParts,
    NoTriples,
    NoCategories,
    NoEligiblePairs,
    CaptionerUnavailable,
    CaptionerFailure,
    SameAsFallback,
    RefineFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub image_id: u64,
    pub family: Family,
    pub reason: SkipReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation_id: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Provider of attribute descriptions for cropped instances.
pub trait Captioner: Send + Sync {
    fn describe(&self, instance: &InstanceRecord) -> Result<String, String>;
}

/// Offline captioner stub backed by a stored description table.
#[derive(Debug, Clone, Default)]
pub struct StoredDescriptions {
    map: BTreeMap<u64, String>,
}

impl StoredDescriptions {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Doc {
            #[serde(default)]
            descriptions: Vec<Entry>,
        }
        #[derive(Deserialize)]
        struct Entry {
            instance_id: u64,
            description: String,
        }
        let doc: Doc = serde_json::from_str(text)?;
        Ok(Self {
            map: doc
                .descriptions
                .into_iter()
                .map(|e| (e.instance_id, e.description))
                .collect(),
        })
    }

    pub fn insert(&mut self, instance_id: u64, description: String) {
        self.map.insert(instance_id, description);
    }
}

impl Captioner for StoredDescriptions {
    fn describe(&self, instance: &InstanceRecord) -> Result<String, String> {
        self.map
            .get(&instance.instance_id)
            .cloned()
            .ok_or_else(|| format!("no stored description for instance {}", instance.instance_id))
    }
}

/// Direct and reference-bearing sub-pools of one family's template set.
#[derive(Debug, Clone)]
pub struct FamilyTemplates {
    pub direct: TemplateSet,
    pub relational: TemplateSet,
}

impl FamilyTemplates {
    fn split(set: &TemplateSet) -> Self {
        Self {
            direct: set.without("reference"),
            relational: set.requiring("reference"),
        }
    }
}

/// All template pools needed for one generation split. Loading verifies
/// train/val disjointness for every family.
#[derive(Debug, Clone)]
pub struct TemplateLibrary {
    pub positional: FamilyTemplates,
    pub hierarchical: FamilyTemplates,
    pub interactional: FamilyTemplates,
    pub attribute_query: TemplateSet,
    pub attribute_answer: TemplateSet,
    pub semantic: TemplateSet,
    pub hard: TemplateSet,
}

impl TemplateLibrary {
    pub fn load(dir: &std::path::Path, split: templates::Split) -> Result<Self, TemplateError> {
        let mut sets: BTreeMap<Family, TemplateSet> = BTreeMap::new();
        for family in Family::ALL {
            let train = templates::load(dir, family, templates::Split::Train)?;
            let val = templates::load(dir, family, templates::Split::Val)?;
            templates::verify_disjoint(&train, &val)?;
            sets.insert(
                family,
                match split {
                    templates::Split::Train => train,
                    templates::Split::Val => val,
                },
            );
        }
        let attribute = &sets[&Family::Attribute];
        Ok(Self {
            positional: FamilyTemplates::split(&sets[&Family::Positional]),
            hierarchical: FamilyTemplates::split(&sets[&Family::Hierarchical]),
            interactional: FamilyTemplates::split(&sets[&Family::Interactional]),
            attribute_query: attribute.requiring("description"),
            attribute_answer: attribute.requiring("class").without("description"),
            semantic: sets[&Family::Semantic].clone(),
            hard: sets[&Family::Hard].clone(),
        })
    }
}

const PLAIN_ANSWER: &str = "Sure,";

/// One sampleable (instance, caption) unit of the positional pool. The same
/// instance appears once per distinct caption.
#[derive(Debug, Clone)]
pub struct QueryUnit<'a> {
    pub instance: &'a InstanceRecord,
    pub caption: String,
}

fn caption_of(instance: &InstanceRecord) -> String {
    instance
        .captions
        .first()
        .cloned()
        .unwrap_or_else(|| format!("the {}", instance.category))
}

fn dedup_captions(captions: &[String]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    captions
        .iter()
        .filter(|c| seen.insert(c.as_str()))
        .cloned()
        .collect()
}

/// Build the positional sampling pool for one image.
///
/// Captioned style keeps one unit per (instance, distinct caption). Category
/// style (LVIS-like sources without referring expressions) admits a category
/// only when one or two instances carry it, synthesizing a location phrase to
/// disambiguate pairs.
pub fn build_positional_pool<'a>(
    corpus: &'a Corpus,
    image_id: u64,
    lvis_style: bool,
) -> Vec<QueryUnit<'a>> {
    let instances = corpus.instances_of_image(image_id);
    if !lvis_style {
        let mut pool = Vec::new();
        for instance in instances {
            for caption in dedup_captions(&instance.captions) {
                pool.push(QueryUnit { instance, caption });
            }
        }
        return pool;
    }

    let with_cats: Vec<(u64, &str)> = instances
        .iter()
        .map(|i| (i.instance_id, i.category.as_str()))
        .collect();
    let mut categories: Vec<&str> = instances.iter().map(|i| i.category.as_str()).collect();
    categories.sort_unstable();
    categories.dedup();

    let mut pool = Vec::new();
    for category in categories {
        let report = relations::ambiguity_filter(&with_cats, category);
        if !report.eligible {
            continue;
        }
        let members: Vec<&&InstanceRecord> = instances
            .iter()
            .filter(|i| i.category == category)
            .collect();
        if report.needs_location_phrase.is_empty() {
            pool.push(QueryUnit {
                instance: members[0],
                caption: format!("the {category}"),
            });
        } else {
            let (a, b) = (members[0], members[1]);
            if let (Some(ca), Some(cb)) = (
                location_caption(a, b, category),
                location_caption(b, a, category),
            ) {
                pool.push(QueryUnit { instance: a, caption: ca });
                pool.push(QueryUnit { instance: b, caption: cb });
            }
        }
    }
    pool
}

/// Disambiguating caption for `this` against `other` of the same category.
fn location_caption(
    this: &InstanceRecord,
    other: &InstanceRecord,
    category: &str,
) -> Option<String> {
    let label = relations::classify(&this.bbox, &other.bbox).ok()?;
    match label {
        RelationLabel::SameAs => None,
        RelationLabel::Overlapping => {
            // Fall back to which side of the other instance the center lies on.
            let cx_this = this.bbox.x1 as i64 + this.bbox.x2 as i64;
            let cx_other = other.bbox.x1 as i64 + other.bbox.x2 as i64;
            let cy_this = this.bbox.y1 as i64 + this.bbox.y2 as i64;
            let cy_other = other.bbox.y1 as i64 + other.bbox.y2 as i64;
            let dx = cx_this - cx_other;
            let dy = cy_this - cy_other;
            if dx == 0 && dy == 0 {
                return None;
            }
            let side = if dx.abs() >= dy.abs() {
                if dx < 0 { "on the left" } else { "on the right" }
            } else if dy < 0 {
                "near the top"
            } else {
                "near the bottom"
            };
            Some(format!("the {category} {side}"))
        }
        separated => Some(format!(
            "the {category} {} the other {category}",
            relations::phrase(separated)
        )),
    }
}

fn draw_reference_phrase(
    caption: &str,
    referenced_round: u32,
    p_caption: f64,
    rng: &mut ChaCha8Rng,
) -> (ReferenceMode, String) {
    if rng.random_bool(p_caption) {
        (ReferenceMode::Caption, caption.to_string())
    } else if rng.random_bool(0.5) {
        (
            ReferenceMode::InstanceTag,
            tokens::encoded_span(&tokens::instance_tag(referenced_round)),
        )
    } else {
        (
            ReferenceMode::RoundTag,
            tokens::encoded_span(&tokens::round_tag(referenced_round)),
        )
    }
}

/// Output of one family generator for one image.
#[derive(Debug, Default)]
pub struct FamilyOutput {
    pub conversations: Vec<Conversation>,
    pub skips: Vec<SkipRecord>,
}

const SAME_AS_REDRAW_ATTEMPTS: usize = 8;

/// Rounds of one positional conversation plus the count of relational draws
/// that collapsed to self-queries after exhausting same-as redraws.
#[derive(Debug)]
pub struct PositionalGen {
    pub rounds: Vec<Round>,
    pub same_as_fallbacks: u32,
}

/// Generate one positional conversation: round 1 is always a self-query,
/// later rounds reference a uniformly chosen earlier round with probability
/// `1 - p_self`.
pub fn gen_positional(
    pool: &[QueryUnit<'_>],
    cfg: &GenConfig,
    tmpl: &FamilyTemplates,
    rng: &mut ChaCha8Rng,
) -> Result<Result<PositionalGen, SkipReason>, GenError> {
    if pool.len() < 2 {
        return Ok(Err(SkipReason::TooFewInstances));
    }
    let k_hi = (cfg.positional_annotations.1 as usize).min(pool.len());
    let k_lo = (cfg.positional_annotations.0 as usize).min(k_hi);
    let k = rng.random_range(k_lo..=k_hi);
    let chosen = index::sample(rng, pool.len(), k);

    let mut rounds: Vec<Round> = Vec::with_capacity(k);
    let mut round_units: Vec<&QueryUnit> = Vec::with_capacity(k);
    let mut same_as_fallbacks = 0u32;
    for (i, pick) in chosen.iter().enumerate() {
        let unit = &pool[pick];
        let index = (i + 1) as u32;
        let make_self = |rng: &mut ChaCha8Rng| -> Result<Round, GenError> {
            Ok(Round {
                index,
                query_text: templates::instantiate(
                    &tmpl.direct,
                    &[("class", unit.caption.as_str())],
                    rng,
                )?,
                target_instance: unit.instance.instance_id,
                reference_round: None,
                reference_instance: None,
                reference_mode: ReferenceMode::None,
                answer_text: PLAIN_ANSWER.to_string(),
            })
        };
        let round = if i == 0 || rng.random_bool(cfg.p_self) {
            make_self(rng)?
        } else {
            let mut picked: Option<(usize, RelationLabel)> = None;
            for _ in 0..SAME_AS_REDRAW_ATTEMPTS {
                let j = rng.random_range(0..i);
                let label = relations::classify(&unit.instance.bbox, &round_units[j].instance.bbox)
                    .expect("parsed boxes are nondegenerate");
                if label != RelationLabel::SameAs {
                    picked = Some((j, label));
                    break;
                }
            }
            match picked {
                None => {
                    same_as_fallbacks += 1;
                    make_self(rng)?
                }
                Some((j, label)) => {
                    let (mode, reference) = draw_reference_phrase(
                        &round_units[j].caption,
                        (j + 1) as u32,
                        cfg.p_caption,
                        rng,
                    );
                    Round {
                        index,
                        query_text: templates::instantiate(
                            &tmpl.relational,
                            &[
                                ("class", unit.instance.category.as_str()),
                                ("relation", relations::phrase(label)),
                                ("reference", reference.as_str()),
                            ],
                            rng,
                        )?,
                        target_instance: unit.instance.instance_id,
                        reference_round: Some((j + 1) as u32),
                        reference_instance: None,
                        reference_mode: mode,
                        answer_text: PLAIN_ANSWER.to_string(),
                    }
                }
            }
        };
        rounds.push(round);
        round_units.push(unit);
    }
    Ok(Ok(PositionalGen {
        rounds,
        same_as_fallbacks,
    }))
}

/// Generate one hierarchical conversation: per sampled parent, one round for
/// the whole object followed by rounds for sampled parts, each referencing
/// the parent's round.
pub fn gen_hierarchical(
    parents: &[(&InstanceRecord, Vec<(&InstanceRecord, &str)>)],
    cfg: &GenConfig,
    tmpl: &FamilyTemplates,
    rng: &mut ChaCha8Rng,
) -> Result<Result<Vec<Round>, SkipReason>, GenError> {
    if parents.is_empty() {
        return Ok(Err(SkipReason::NoParts));
    }
    let np_hi = (cfg.hier_parents.1 as usize).min(parents.len());
    let np_lo = (cfg.hier_parents.0 as usize).min(np_hi);
    let np = rng.random_range(np_lo..=np_hi);
    let parent_picks = index::sample(rng, parents.len(), np);

    let mut rounds: Vec<Round> = Vec::new();
    for pick in parent_picks.iter() {
        let (parent, parts) = &parents[pick];
        let parent_caption = caption_of(parent);
        let parent_round_index = (rounds.len() + 1) as u32;
        rounds.push(Round {
            index: parent_round_index,
            query_text: templates::instantiate(
                &tmpl.direct,
                &[("class", parent_caption.as_str())],
                rng,
            )?,
            target_instance: parent.instance_id,
            reference_round: None,
            reference_instance: None,
            reference_mode: ReferenceMode::None,
            answer_text: PLAIN_ANSWER.to_string(),
        });
        let nq_hi = (cfg.hier_parts.1 as usize).min(parts.len());
        let nq_lo = (cfg.hier_parts.0 as usize).min(nq_hi);
        let nq = rng.random_range(nq_lo..=nq_hi);
        let part_picks = index::sample(rng, parts.len(), nq);
        for part_pick in part_picks.iter() {
            let (part, part_name) = &parts[part_pick];
            let (mode, reference) =
                draw_reference_phrase(&parent_caption, parent_round_index, cfg.p_caption, rng);
            rounds.push(Round {
                index: (rounds.len() + 1) as u32,
                query_text: templates::instantiate(
                    &tmpl.relational,
                    &[("part", *part_name), ("reference", reference.as_str())],
                    rng,
                )?,
                target_instance: part.instance_id,
                reference_round: Some(parent_round_index),
                reference_instance: None,
                reference_mode: mode,
                answer_text: PLAIN_ANSWER.to_string(),
            });
        }
    }
    Ok(Ok(rounds))
}

/// Generate the two-round interactional conversation for one relationship
/// triple: round 1 segments the subject, round 2 the object via the predicate.
pub fn gen_interactional(
    subject: &InstanceRecord,
    predicate: &str,
    object: &InstanceRecord,
    tmpl: &FamilyTemplates,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Round>, GenError> {
    let subject_caption = caption_of(subject);
    let round1 = Round {
        index: 1,
        query_text: templates::instantiate(
            &tmpl.direct,
            &[("class", subject_caption.as_str())],
            rng,
        )?,
        target_instance: subject.instance_id,
        reference_round: None,
        reference_instance: None,
        reference_mode: ReferenceMode::None,
        answer_text: PLAIN_ANSWER.to_string(),
    };
    let round2 = Round {
        index: 2,
        query_text: templates::instantiate(
            &tmpl.relational,
            &[
                ("class", object.category.as_str()),
                ("relation", predicate),
                ("reference", subject_caption.as_str()),
            ],
            rng,
        )?,
        target_instance: object.instance_id,
        reference_round: Some(1),
        reference_instance: None,
        reference_mode: ReferenceMode::Caption,
        answer_text: PLAIN_ANSWER.to_string(),
    };
    Ok(vec![round1, round2])
}

/// Generate one single-round attribute conversation. The query embeds the
/// captioner's description; the answer names the category.
pub fn gen_attribute(
    instance: &InstanceRecord,
    captioner: &dyn Captioner,
    query_pool: &TemplateSet,
    answer_pool: &TemplateSet,
    rng: &mut ChaCha8Rng,
) -> Result<Result<Vec<Round>, SkipReason>, GenError> {
    let description = match captioner.describe(instance) {
        Ok(d) => d,
        Err(_) => return Ok(Err(SkipReason::CaptionerFailure)),
    };
    let query_text =
        templates::instantiate(query_pool, &[("description", description.as_str())], rng)?;
    let answer_text =
        templates::instantiate(answer_pool, &[("class", instance.category.as_str())], rng)?;
    Ok(Ok(vec![Round {
        index: 1,
        query_text,
        target_instance: instance.instance_id,
        reference_round: None,
        reference_instance: None,
        reference_mode: ReferenceMode::None,
        answer_text,
    }]))
}

/// Generate one single-round semantic-segmentation conversation for a
/// category present in the image.
pub fn gen_semantic(
    category: &str,
    target_instance: u64,
    pool: &TemplateSet,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Round>, GenError> {
    Ok(vec![Round {
        index: 1,
        query_text: templates::instantiate(pool, &[("class", category)], rng)?,
        target_instance,
        reference_round: None,
        reference_instance: None,
        reference_mode: ReferenceMode::None,
        answer_text: PLAIN_ANSWER.to_string(),
    }])
}

/// Generate the mirrored pair of hard single-round conversations for two
/// same-category instances: each encodes one instance as the reference and
/// asks for the other one.
pub fn gen_hard_pair(
    first: &InstanceRecord,
    second: &InstanceRecord,
    pool: &TemplateSet,
    rng: &mut ChaCha8Rng,
) -> Result<[Vec<Round>; 2], GenError> {
    // Canonical order makes the pair independent of argument order.
    let (x, y) = if first.instance_id <= second.instance_id {
        (first, second)
    } else {
        (second, first)
    };
    let mut make = |reference: &InstanceRecord, target: &InstanceRecord| -> Result<Vec<Round>, GenError> {
        let body = templates::instantiate(pool, &[("class", target.category.as_str())], rng)?;
        let span = tokens::encoded_span(&tokens::instance_tag(1));
        Ok(vec![Round {
            index: 1,
            query_text: format!("{span} {body}"),
            target_instance: target.instance_id,
            reference_round: None,
            reference_instance: Some(reference.instance_id),
            reference_mode: ReferenceMode::InstanceTag,
            answer_text: PLAIN_ANSWER.to_string(),
        }])
    };
    Ok([make(x, y)?, make(y, x)?])
}

/// Deterministic 8-component feature vector of an object-centric crop.
///
/// Components: mean RGB of the crop, box width/height normalized by the full
/// image, mask-area fraction, box aspect ratio, and a content checksum.
/// Stands in for a learned mask embedding in protocol round-trip tests.
pub fn stub_featurize(object: &PixelImage, mask: &MaskGrid) -> [f64; 8] {
    let bbox = maskops::bbox_of(mask).expect("featurized mask must be nonempty");
    let n = (object.height() as f64) * (object.width() as f64);
    let mut sums = [0.0f64; 3];
    for px in object.data() {
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += px[c] as f64;
        }
    }
    let checksum = {
        const WHEEL: u64 = 9973;
        const MODULUS: u64 = 999_983;
        let mut acc = 0u64;
        let mut i = 0u64;
        for px in object.data() {
            for &channel in px {
                acc = (acc + channel as u64 * (i % WHEEL + 1)) % MODULUS;
                i += 1;
            }
        }
        acc as f64 / MODULUS as f64
    };
    [
        sums[0] / (255.0 * n),
        sums[1] / (255.0 * n),
        sums[2] / (255.0 * n),
        bbox.width() as f64 / mask.width() as f64,
        bbox.height() as f64 / mask.height() as f64,
        mask.area() as f64 / (mask.width() as f64 * mask.height() as f64),
        bbox.width() as f64 / bbox.height() as f64,
        checksum,
    ]
}

/// One source corpus wired for generation.
pub struct SourceSpec<'a> {
    pub name: &'a str,
    pub corpus: &'a Corpus,
    /// Category-multiplicity captioning instead of referring expressions.
    pub lvis_style: bool,
    pub captioner: Option<&'a dyn Captioner>,
}

/// Reserved ordinal for family-level unit-selection randomness, distinct from
/// every per-conversation ordinal.
const SELECTION_STREAM: u64 = u64::MAX;

fn conversation_id(source: &str, family: Family, image_id: u64, ordinal: usize) -> String {
    format!("{source}:{}:{image_id}:{ordinal}", family.slug())
}

/// Generate every enabled family for one image. Deterministic in
/// (config, source, image); independent of any other image.
pub fn generate_image(
    spec: &SourceSpec<'_>,
    image_id: u64,
    families: &[Family],
    cfg: &GenConfig,
    library: &TemplateLibrary,
) -> Result<(Vec<Conversation>, Vec<SkipRecord>), GenError> {
    if spec.corpus.image(image_id).is_none() {
        return Err(GenError::UnknownImage(image_id));
    }
    let mut conversations = Vec::new();
    let mut skips = Vec::new();
    let master = cfg.master_seed;

    for &family in families {
        let disc = family.discriminant();
        let conv_seed = |unit: u64| derive_seed(master, &[image_id, disc, unit]);
        let emit = |rounds: Vec<Round>, ordinal: usize, seed: u64, out: &mut Vec<Conversation>| {
            out.push(Conversation {
                conversation_id: conversation_id(spec.name, family, image_id, ordinal),
                image_id,
                family,
                rounds,
                seed,
            });
        };
        match family {
            Family::Positional => {
                let pool = build_positional_pool(spec.corpus, image_id, spec.lvis_style);
                let seed = conv_seed(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                match gen_positional(&pool, cfg, &library.positional, &mut rng)? {
                    Ok(gen) => {
                        if gen.same_as_fallbacks > 0 {
                            skips.push(SkipRecord {
                                image_id,
                                family,
                                reason: SkipReason::SameAsFallback,
                                conversation_id: Some(conversation_id(
                                    spec.name, family, image_id, 0,
                                )),
                                detail: format!("{} round(s)", gen.same_as_fallbacks),
                            });
                        }
                        emit(gen.rounds, 0, seed, &mut conversations);
                    }
                    Err(reason) => skips.push(SkipRecord {
                        image_id,
                        family,
                        reason,
                        conversation_id: None,
                        detail: format!("pool size {}", pool.len()),
                    }),
                }
            }
            Family::Hierarchical => {
                let links = spec.corpus.part_links_of_image(image_id);
                let mut grouped: BTreeMap<u64, Vec<(&InstanceRecord, &str)>> = BTreeMap::new();
                for link in &links {
                    if let (Some(_), Some(part)) = (
                        spec.corpus.instance(link.parent_instance),
                        spec.corpus.instance(link.part_instance),
                    ) {
                        grouped
                            .entry(link.parent_instance)
                            .or_default()
                            .push((part, link.part_name.as_str()));
                    }
                }
                let parents: Vec<(&InstanceRecord, Vec<(&InstanceRecord, &str)>)> = grouped
                    .into_iter()
                    .map(|(pid, parts)| (spec.corpus.instance(pid).unwrap(), parts))
                    .collect();
                let seed = conv_seed(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                match gen_hierarchical(&parents, cfg, &library.hierarchical, &mut rng)? {
                    Ok(rounds) => emit(rounds, 0, seed, &mut conversations),
                    Err(reason) => skips.push(SkipRecord {
                        image_id,
                        family,
                        reason,
                        conversation_id: None,
                        detail: String::new(),
                    }),
                }
            }
            Family::Interactional => {
                let triples = spec.corpus.triples_of_image(image_id);
                if triples.is_empty() {
                    skips.push(SkipRecord {
                        image_id,
                        family,
                        reason: SkipReason::NoTriples,
                        conversation_id: None,
                        detail: String::new(),
                    });
                    continue;
                }
                let take = (cfg.max_triples_per_image as usize).min(triples.len());
                let mut sel_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(master, &[image_id, disc, SELECTION_STREAM]));
                let mut picks: Vec<usize> =
                    index::sample(&mut sel_rng, triples.len(), take).into_vec();
                picks.sort_unstable();
                for (ordinal, pick) in picks.into_iter().enumerate() {
                    let triple = triples[pick];
                    let subject = spec.corpus.instance(triple.subject_instance).unwrap();
                    let object = spec.corpus.instance(triple.object_instance).unwrap();
                    let seed = conv_seed(ordinal as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let rounds = gen_interactional(
                        subject,
                        &triple.predicate,
                        object,
                        &library.interactional,
                        &mut rng,
                    )?;
                    emit(rounds, ordinal, seed, &mut conversations);
                }
            }
            Family::Attribute => {
                let Some(captioner) = spec.captioner else {
                    skips.push(SkipRecord {
                        image_id,
                        family,
                        reason: SkipReason::CaptionerUnavailable,
                        conversation_id: None,
                        detail: String::new(),
                    });
                    continue;
                };
                let mut ordinal = 0usize;
                for instance in spec.corpus.instances_of_image(image_id) {
                    let seed = conv_seed(instance.instance_id);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    match gen_attribute(
                        instance,
                        captioner,
                        &library.attribute_query,
                        &library.attribute_answer,
                        &mut rng,
                    )? {
                        Ok(rounds) => {
                            emit(rounds, ordinal, seed, &mut conversations);
                            ordinal += 1;
                        }
                        Err(reason) => skips.push(SkipRecord {
                            image_id,
                            family,
                            reason,
                            conversation_id: None,
                            detail: format!("instance {}", instance.instance_id),
                        }),
                    }
                }
            }
            Family::Semantic => {
                let instances = spec.corpus.instances_of_image(image_id);
                let mut categories: Vec<&str> =
                    instances.iter().map(|i| i.category.as_str()).collect();
                categories.sort_unstable();
                categories.dedup();
                if categories.is_empty() {
                    skips.push(SkipRecord {
                        image_id,
                        family,
                        reason: SkipReason::NoCategories,
                        conversation_id: None,
                        detail: String::new(),
                    });
                    continue;
                }
                for (ordinal, category) in categories.into_iter().enumerate() {
                    let target = instances
                        .iter()
                        .find(|i| i.category == category)
                        .expect("category came from this list");
                    let seed = conv_seed(target.instance_id);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let rounds =
                        gen_semantic(category, target.instance_id, &library.semantic, &mut rng)?;
                    emit(rounds, ordinal, seed, &mut conversations);
                }
            }
            Family::Hard => {
                let instances = spec.corpus.instances_of_image(image_id);
                let with_cats: Vec<(u64, &str)> = instances
                    .iter()
                    .map(|i| (i.instance_id, i.category.as_str()))
                    .collect();
                let mut categories: Vec<&str> =
                    instances.iter().map(|i| i.category.as_str()).collect();
                categories.sort_unstable();
                categories.dedup();
                let mut ordinal = 0usize;
                let mut any = false;
                for category in categories {
                    let report = relations::ambiguity_filter(&with_cats, category);
                    if report.needs_location_phrase.len() != 2 {
                        continue;
                    }
                    any = true;
                    let a = spec.corpus.instance(report.needs_location_phrase[0]).unwrap();
                    let b = spec.corpus.instance(report.needs_location_phrase[1]).unwrap();
                    let seed = conv_seed(a.instance_id.min(b.instance_id));
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let [rounds_x, rounds_y] = gen_hard_pair(a, b, &library.hard, &mut rng)?;
                    emit(rounds_x, ordinal, seed, &mut conversations);
                    emit(rounds_y, ordinal + 1, derive_seed(seed, &[1]), &mut conversations);
                    ordinal += 2;
                }
                if !any {
                    skips.push(SkipRecord {
                        image_id,
                        family,
                        reason: SkipReason::NoEligiblePairs,
                        conversation_id: None,
                        detail: String::new(),
                    });
                }
            }
        }
    }
    Ok((conversations, skips))
}
