//! Parsing of source annotation corpora into a unified in-memory model.
//!
//! Accepted inputs (documented field-by-field in `docs/formats.md`):
//! COCO-style instance documents, referring-expression documents, part-link
//! documents, and relationship-triple documents. A parsed [`Corpus`] is
//! immutable afterward and safe to share across threads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskops::{self, BBox, MaskError, MaskGrid};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image {image_id}: width and height must be at least 1")]
    InvalidImageSize { image_id: u64 },
    #[error("duplicate image id {image_id}")]
    DuplicateImage { image_id: u64 },
    #[error("duplicate category id {category_id}")]
    DuplicateCategory { category_id: u64 },
    #[error("duplicate annotation id {annotation_id}")]
    DuplicateAnnotation { annotation_id: u64 },
    #[error("annotation {annotation_id}: unresolved category id {category_id}")]
    UnknownCategory { annotation_id: u64, category_id: u64 },
    #[error("annotation {annotation_id}: unknown image {image_id}")]
    UnknownImage { annotation_id: u64, image_id: u64 },
    #[error("annotation {annotation_id}: degenerate box (zero width or height)")]
    DegenerateBox { annotation_id: u64 },
    #[error("annotation {annotation_id}: box extends outside the image")]
    BoxOutOfBounds { annotation_id: u64 },
    #[error("annotation {annotation_id}: no bbox and no segmentation")]
    MissingGeometry { annotation_id: u64 },
    #[error("annotation {annotation_id}: polygon ring has fewer than 3 vertices")]
    ShortRing { annotation_id: u64 },
    #[error("annotation {annotation_id}: polygon ring has an odd coordinate count")]
    OddRing { annotation_id: u64 },
    #[error("annotation {annotation_id}: RLE size {rle_h}x{rle_w} does not match image {img_h}x{img_w}")]
    RleSizeMismatch {
        annotation_id: u64,
        rle_h: u32,
        rle_w: u32,
        img_h: u32,
        img_w: u32,
    },
    #[error("annotation {annotation_id}: mask rasterizes to an empty grid")]
    EmptyMaskAnnotation { annotation_id: u64 },
    #[error("annotation {annotation_id}: bad mask payload: {source}")]
    BadMask {
        annotation_id: u64,
        source: MaskError,
    },
    #[error("referring expressions reference unknown annotation ids: {}", format_ids(.ids))]
    DanglingAnnotationIds { ids: Vec<u64> },
    #[error("part link declares instance {instance_id} a part of itself")]
    CyclicPartLink { instance_id: u64 },
    #[error("part link {parent_id} -> {part_id}: unknown instance {missing_id}")]
    UnknownPartInstance {
        parent_id: u64,
        part_id: u64,
        missing_id: u64,
    },
    #[error("part link {parent_id} -> {part_id}: instances live on different images")]
    CrossImagePartLink { parent_id: u64, part_id: u64 },
    #[error("part link {parent_id} -> {part_id}: part box does not intersect parent box")]
    DisjointPartLink { parent_id: u64, part_id: u64 },
    #[error("relationship {subject_id} -{predicate}-> {object_id}: unknown instance {missing_id}")]
    UnknownTripleInstance {
        subject_id: u64,
        predicate: String,
        object_id: u64,
        missing_id: u64,
    },
    #[error("relationship {subject_id} -{predicate}-> {object_id}: instances live on different images")]
    CrossImageTriple {
        subject_id: u64,
        predicate: String,
        object_id: u64,
    },
    #[error("corpus dump line {line}: {message}")]
    BadDumpLine { line: usize, message: String },
}

fn format_ids(ids: &[u64]) -> String {
    ids.iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// One image's metadata. Pixel content is never decoded here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

/// Mask payload of one instance: run-length counts with their grid size, or a
/// set of closed polygon rings as flat coordinate lists.
///
/// RLE counts deserialize from an integer list or from COCO compressed-count
/// text; serialization always emits the canonical integer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpec {
    Rle {
        size: (u32, u32),
        #[serde(deserialize_with = "counts_from_list_or_text")]
        counts: Vec<u32>,
    },
    Polygons(Vec<Vec<f64>>),
}

fn counts_from_list_or_text<'de, D>(deserializer: D) -> Result<Vec<u32>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        List(Vec<u32>),
        Text(String),
    }
    match Raw::deserialize(deserializer)? {
        Raw::List(list) => Ok(list),
        Raw::Text(text) => {
            maskops::rle_counts_from_text(&text).map_err(serde::de::Error::custom)
        }
    }
}

impl MaskSpec {
    /// Rasterize onto the image lattice.
    pub fn to_grid(&self, height: u32, width: u32) -> Result<MaskGrid, MaskError> {
        match self {
            MaskSpec::Rle { size, counts } => {
                if size.0 != height || size.1 != width {
                    return Err(MaskError::DimMismatch {
                        a_h: size.0,
                        a_w: size.1,
                        b_h: height,
                        b_w: width,
                    });
                }
                maskops::rle_decode(counts, height, width)
            }
            MaskSpec::Polygons(rings) => Ok(maskops::rasterize(rings, height, width)),
        }
    }

    /// Rectangle polygon covering exactly the box under pixel-center sampling.
    pub fn rect(bbox: &BBox) -> MaskSpec {
        let (x1, y1, x2, y2) = (
            bbox.x1 as f64,
            bbox.y1 as f64,
            bbox.x2 as f64,
            bbox.y2 as f64,
        );
        MaskSpec::Polygons(vec![vec![x1, y1, x2, y1, x2, y2, x1, y2]])
    }
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u64,
    pub image_id: u64,
    pub category: String,
    pub captions: Vec<String>,
    pub mask: MaskSpec,
    pub bbox: BBox,
}

/// Instance-level part relation: `part_instance` is a named part of
/// `parent_instance` on the same image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartLink {
    pub parent_instance: u64,
    pub part_instance: u64,
    pub part_name: String,
}

/// Interactional relation between two instances of one image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationshipTriple {
    pub subject_instance: u64,
    pub predicate: String,
    pub object_instance: u64,
}

/// Unified in-memory model of one source corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    images: BTreeMap<u64, ImageRecord>,
    instances: BTreeMap<u64, InstanceRecord>,
    part_links: Vec<PartLink>,
    triples: Vec<RelationshipTriple>,
    by_image: BTreeMap<u64, Vec<u64>>,
}

impl Corpus {
    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.images.keys().copied()
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images.get(&image_id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn instance(&self, instance_id: u64) -> Option<&InstanceRecord> {
        self.instances.get(&instance_id)
    }

    /// Instances of one image in ascending id order.
    pub fn instances_of_image(&self, image_id: u64) -> Vec<&InstanceRecord> {
        self.by_image
            .get(&image_id)
            .map(|ids| ids.iter().map(|id| &self.instances[id]).collect())
            .unwrap_or_default()
    }

    pub fn part_links(&self) -> &[PartLink] {
        &self.part_links
    }

    pub fn triples(&self) -> &[RelationshipTriple] {
        &self.triples
    }

    pub fn part_links_of_image(&self, image_id: u64) -> Vec<&PartLink> {
        self.part_links
            .iter()
            .filter(|l| {
                self.instances
                    .get(&l.parent_instance)
                    .is_some_and(|i| i.image_id == image_id)
            })
            .collect()
    }

    pub fn triples_of_image(&self, image_id: u64) -> Vec<&RelationshipTriple> {
        self.triples
            .iter()
            .filter(|t| {
                self.instances
                    .get(&t.subject_instance)
                    .is_some_and(|i| i.image_id == image_id)
            })
            .collect()
    }

    fn insert_image(&mut self, record: ImageRecord) -> Result<(), AnnotationError> {
        let image_id = record.image_id;
        if self.images.insert(image_id, record).is_some() {
            return Err(AnnotationError::DuplicateImage { image_id });
        }
        self.by_image.entry(image_id).or_default();
        Ok(())
    }

    fn insert_instance(&mut self, record: InstanceRecord) -> Result<(), AnnotationError> {
        let instance_id = record.instance_id;
        let image_id = record.image_id;
        if self.instances.insert(instance_id, record).is_some() {
            return Err(AnnotationError::DuplicateAnnotation {
                annotation_id: instance_id,
            });
        }
        self.by_image.entry(image_id).or_default().push(instance_id);
        Ok(())
    }

    pub fn attach_part_links(&mut self, mut links: Vec<PartLink>) {
        self.part_links.append(&mut links);
        self.part_links.sort();
    }

    pub fn attach_triples(&mut self, mut triples: Vec<RelationshipTriple>) {
        self.triples.append(&mut triples);
        self.triples.sort();
    }

    /// Serialize to the canonical one-record-per-line dump.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str("{\"schema\":\"mrseg/corpus/v1\"}\n");
        for image in self.images.values() {
            out.push_str(&serde_json::to_string(&CorpusLine::Image(image.clone())).unwrap());
            out.push('\n');
        }
        for instance in self.instances.values() {
            out.push_str(&serde_json::to_string(&CorpusLine::Instance(instance.clone())).unwrap());
            out.push('\n');
        }
        for link in &self.part_links {
            out.push_str(&serde_json::to_string(&CorpusLine::PartLink(link.clone())).unwrap());
            out.push('\n');
        }
        for triple in &self.triples {
            out.push_str(&serde_json::to_string(&CorpusLine::Triple(triple.clone())).unwrap());
            out.push('\n');
        }
        out
    }

    /// Parse a canonical dump produced by [`Corpus::to_jsonl`].
    pub fn from_jsonl(text: &str) -> Result<Corpus, AnnotationError> {
        let mut corpus = Corpus::default();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.contains("mrseg/corpus/v1") => {}
            _ => {
                return Err(AnnotationError::BadDumpLine {
                    line: 1,
                    message: "missing mrseg/corpus/v1 header".into(),
                })
            }
        }
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CorpusLine =
                serde_json::from_str(line).map_err(|e| AnnotationError::BadDumpLine {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            match parsed {
                CorpusLine::Image(image) => corpus.insert_image(image)?,
                CorpusLine::Instance(instance) => corpus.insert_instance(instance)?,
                CorpusLine::PartLink(link) => corpus.part_links.push(link),
                CorpusLine::Triple(triple) => corpus.triples.push(triple),
            }
        }
        corpus.part_links.sort();
        corpus.triples.sort();
        Ok(corpus)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CorpusLine {
    Image(ImageRecord),
    Instance(InstanceRecord),
    PartLink(PartLink),
    Triple(RelationshipTriple),
}

// Raw document shapes. Unknown extra fields are deliberately ignored so
// corpus dialects stay parseable.

#[derive(Deserialize)]
struct RawInstanceDoc {
    #[serde(default)]
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    segmentation: Option<RawSegmentation>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSegmentation {
    Polygons(Vec<Vec<f64>>),
    Rle {
        size: [u32; 2],
        counts: RawCounts,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCounts {
    List(Vec<u32>),
    Text(String),
}

/// Parse a COCO-style instance document into a corpus of images and
/// instances. Boxes arrive as `(x, y, w, h)` and leave as half-open
/// `(x1, y1, x2, y2)`; category ids are resolved to names.
pub fn parse_instances(text: &str) -> Result<Corpus, AnnotationError> {
    let doc: RawInstanceDoc = serde_json::from_str(text)?;
    let mut corpus = Corpus::default();
    for raw in doc.images {
        if raw.width == 0 || raw.height == 0 {
            return Err(AnnotationError::InvalidImageSize { image_id: raw.id });
        }
        corpus.insert_image(ImageRecord {
            image_id: raw.id,
            width: raw.width,
            height: raw.height,
            file_name: raw.file_name,
        })?;
    }
    let mut categories: BTreeMap<u64, String> = BTreeMap::new();
    for raw in doc.categories {
        if categories.insert(raw.id, raw.name).is_some() {
            return Err(AnnotationError::DuplicateCategory { category_id: raw.id });
        }
    }
    for raw in doc.annotations {
        let annotation_id = raw.id;
        let category = categories
            .get(&raw.category_id)
            .cloned()
            .ok_or(AnnotationError::UnknownCategory {
                annotation_id,
                category_id: raw.category_id,
            })?;
        let image = corpus
            .images
            .get(&raw.image_id)
            .ok_or(AnnotationError::UnknownImage {
                annotation_id,
                image_id: raw.image_id,
            })?
            .clone();

        let mask = match raw.segmentation {
            Some(seg) => Some(convert_segmentation(seg, annotation_id, &image)?),
            None => None,
        };
        let bbox = match raw.bbox {
            Some([x, y, w, h]) => Some(convert_bbox(x, y, w, h, annotation_id, &image)?),
            None => None,
        };
        let (mask, bbox) = match (mask, bbox) {
            (Some(mask), Some(bbox)) => (mask, bbox),
            (Some(mask), None) => {
                let grid = mask
                    .to_grid(image.height, image.width)
                    .map_err(|source| AnnotationError::BadMask { annotation_id, source })?;
                let derived = maskops::bbox_of(&grid)
                    .ok_or(AnnotationError::EmptyMaskAnnotation { annotation_id })?;
                (mask, derived)
            }
            (None, Some(bbox)) => (MaskSpec::rect(&bbox), bbox),
            (None, None) => return Err(AnnotationError::MissingGeometry { annotation_id }),
        };
        corpus.insert_instance(InstanceRecord {
            instance_id: annotation_id,
            image_id: raw.image_id,
            category,
            captions: Vec::new(),
            mask,
            bbox,
        })?;
    }
    Ok(corpus)
}

fn convert_bbox(
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    annotation_id: u64,
    image: &ImageRecord,
) -> Result<BBox, AnnotationError> {
    let x1 = x.round() as i64;
    let y1 = y.round() as i64;
    let x2 = (x + w).round() as i64;
    let y2 = (y + h).round() as i64;
    if x1 >= x2 || y1 >= y2 {
        return Err(AnnotationError::DegenerateBox { annotation_id });
    }
    if x1 < 0 || y1 < 0 || x2 > image.width as i64 || y2 > image.height as i64 {
        return Err(AnnotationError::BoxOutOfBounds { annotation_id });
    }
    Ok(BBox {
        x1: x1 as u32,
        y1: y1 as u32,
        x2: x2 as u32,
        y2: y2 as u32,
    })
}

fn convert_segmentation(
    seg: RawSegmentation,
    annotation_id: u64,
    image: &ImageRecord,
) -> Result<MaskSpec, AnnotationError> {
    match seg {
        RawSegmentation::Polygons(rings) => {
            for ring in &rings {
                if ring.len() % 2 != 0 {
                    return Err(AnnotationError::OddRing { annotation_id });
                }
                if ring.len() < 6 {
                    return Err(AnnotationError::ShortRing { annotation_id });
                }
            }
            Ok(MaskSpec::Polygons(rings))
        }
        RawSegmentation::Rle { size, counts } => {
            let [h, w] = size;
            if h != image.height || w != image.width {
                return Err(AnnotationError::RleSizeMismatch {
                    annotation_id,
                    rle_h: h,
                    rle_w: w,
                    img_h: image.height,
                    img_w: image.width,
                });
            }
            let counts = match counts {
                RawCounts::List(list) => list,
                RawCounts::Text(text) => maskops::rle_counts_from_text(&text)
                    .map_err(|source| AnnotationError::BadMask { annotation_id, source })?,
            };
            let total: u64 = counts.iter().map(|&c| c as u64).sum();
            if total != h as u64 * w as u64 {
                return Err(AnnotationError::BadMask {
                    annotation_id,
                    source: MaskError::RleSumMismatch {
                        got: total,
                        expected: h as u64 * w as u64,
                    },
                });
            }
            Ok(MaskSpec::Rle {
                size: (h, w),
                counts,
            })
        }
    }
}

#[derive(Deserialize)]
struct RawReferringDoc {
    #[serde(default)]
    refs: Vec<RawRef>,
}

#[derive(Deserialize)]
struct RawRef {
    ann_id: u64,
    #[serde(default)]
    sentences: Vec<String>,
}

/// Attach referring expressions to their instances. Multiple captions per
/// instance are kept; a dangling annotation id fails the whole document.
pub fn parse_referring(text: &str, corpus: &mut Corpus) -> Result<usize, AnnotationError> {
    let doc: RawReferringDoc = serde_json::from_str(text)?;
    let mut dangling: Vec<u64> = doc
        .refs
        .iter()
        .filter(|r| !corpus.instances.contains_key(&r.ann_id))
        .map(|r| r.ann_id)
        .collect();
    if !dangling.is_empty() {
        dangling.sort_unstable();
        dangling.dedup();
        return Err(AnnotationError::DanglingAnnotationIds { ids: dangling });
    }
    let mut attached = 0;
    for r in doc.refs {
        let instance = corpus.instances.get_mut(&r.ann_id).expect("checked above");
        attached += r.sentences.len();
        instance.captions.extend(r.sentences);
    }
    Ok(attached)
}

#[derive(Deserialize)]
struct RawPartDoc {
    #[serde(default)]
    links: Vec<RawPartLink>,
}

#[derive(Deserialize)]
struct RawPartLink {
    parent_id: u64,
    part_id: u64,
    part_name: String,
    #[serde(default = "default_level")]
    level: String,
}

fn default_level() -> String {
    "instance".to_string()
}

/// Result of parsing a part-link document: retained instance-level links and
/// the count of semantic-level rows that were dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLinkParse {
    pub links: Vec<PartLink>,
    pub dropped_semantic: usize,
}

/// Parse instance-level part links; semantic-level rows are dropped and
/// counted, a self-link is an error.
pub fn parse_part_links(text: &str, corpus: &Corpus) -> Result<PartLinkParse, AnnotationError> {
    let doc: RawPartDoc = serde_json::from_str(text)?;
    let mut links = Vec::new();
    let mut dropped_semantic = 0usize;
    for raw in doc.links {
        if raw.level == "semantic" {
            dropped_semantic += 1;
            continue;
        }
        if raw.parent_id == raw.part_id {
            return Err(AnnotationError::CyclicPartLink {
                instance_id: raw.parent_id,
            });
        }
        let parent = corpus.instances.get(&raw.parent_id).ok_or(
            AnnotationError::UnknownPartInstance {
                parent_id: raw.parent_id,
                part_id: raw.part_id,
                missing_id: raw.parent_id,
            },
        )?;
        let part = corpus.instances.get(&raw.part_id).ok_or(
            AnnotationError::UnknownPartInstance {
                parent_id: raw.parent_id,
                part_id: raw.part_id,
                missing_id: raw.part_id,
            },
        )?;
        if parent.image_id != part.image_id {
            return Err(AnnotationError::CrossImagePartLink {
                parent_id: raw.parent_id,
                part_id: raw.part_id,
            });
        }
        if parent.bbox.intersection_area(&part.bbox) == 0 {
            return Err(AnnotationError::DisjointPartLink {
                parent_id: raw.parent_id,
                part_id: raw.part_id,
            });
        }
        links.push(PartLink {
            parent_instance: raw.parent_id,
            part_instance: raw.part_id,
            part_name: raw.part_name,
        });
    }
    links.sort();
    Ok(PartLinkParse {
        links,
        dropped_semantic,
    })
}

#[derive(Deserialize)]
struct RawTripleDoc {
    #[serde(default)]
    relationships: Vec<RawTriple>,
}

#[derive(Deserialize)]
struct RawTriple {
    subject_id: u64,
    predicate: String,
    object_id: u64,
}

/// Parse relationship triples; rows with `subject == object` are removed.
pub fn parse_triples(
    text: &str,
    corpus: &Corpus,
) -> Result<Vec<RelationshipTriple>, AnnotationError> {
    let doc: RawTripleDoc = serde_json::from_str(text)?;
    let mut triples = Vec::new();
    for raw in doc.relationships {
        if raw.subject_id == raw.object_id {
            continue;
        }
        for id in [raw.subject_id, raw.object_id] {
            if !corpus.instances.contains_key(&id) {
                return Err(AnnotationError::UnknownTripleInstance {
                    subject_id: raw.subject_id,
                    predicate: raw.predicate.clone(),
                    object_id: raw.object_id,
                    missing_id: id,
                });
            }
        }
        let subject_image = corpus.instances[&raw.subject_id].image_id;
        let object_image = corpus.instances[&raw.object_id].image_id;
        if subject_image != object_image {
            return Err(AnnotationError::CrossImageTriple {
                subject_id: raw.subject_id,
                predicate: raw.predicate,
                object_id: raw.object_id,
            });
        }
        triples.push(RelationshipTriple {
            subject_instance: raw.subject_id,
            predicate: raw.predicate,
            object_instance: raw.object_id,
        });
    }
    triples.sort();
    Ok(triples)
}
