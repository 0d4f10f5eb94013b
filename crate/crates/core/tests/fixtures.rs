//! Fixture-backed parsing checks. Expected values are hand counts over the
//! committed fixture files.

use std::path::PathBuf;

use mrseg_core::annotations::{
    parse_instances, parse_part_links, parse_referring, parse_triples, Corpus,
};
use mrseg_core::templates::{refine, ReplayExchange, TranscriptEntry};

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn mini_corpus() -> Corpus {
    parse_instances(&fixture("coco_mini.json")).expect("mini corpus parses")
}

#[test]
fn coco_mini_has_17_annotations_over_5_images() {
    let corpus = mini_corpus();
    assert_eq!(corpus.images().count(), 5);
    assert_eq!(corpus.instances().count(), 17);
}

#[test]
fn coco_mini_boxes_inside_images_and_consistent_with_masks() {
    let corpus = mini_corpus();
    for instance in corpus.instances() {
        let image = corpus.image(instance.image_id).unwrap();
        assert!(instance.bbox.x2 <= image.width);
        assert!(instance.bbox.y2 <= image.height);
        let grid = instance.mask.to_grid(image.height, image.width).unwrap();
        assert_eq!(
            mrseg_core::maskops::bbox_of(&grid),
            Some(instance.bbox),
            "instance {}",
            instance.instance_id
        );
    }
}

#[test]
fn refs_mini_caption_counts_match_hand_tally() {
    let mut corpus = mini_corpus();
    let attached = parse_referring(&fixture("refs_mini.json"), &mut corpus).unwrap();
    assert_eq!(attached, 13);
    let expected: &[(u64, usize)] = &[
        (101, 2),
        (104, 1),
        (107, 1),
        (108, 2),
        (109, 1),
        (111, 1),
        (114, 1),
        (115, 3),
        (116, 1),
    ];
    for &(id, count) in expected {
        assert_eq!(
            corpus.instance(id).unwrap().captions.len(),
            count,
            "instance {id}"
        );
    }
    // Everything else stays caption-free.
    let captioned: usize = corpus.instances().filter(|i| !i.captions.is_empty()).count();
    assert_eq!(captioned, expected.len());
}

#[test]
fn parts_mini_six_links_one_semantic_dropped() {
    let corpus = mini_corpus();
    let parsed = parse_part_links(&fixture("parts_mini.json"), &corpus).unwrap();
    assert_eq!(parsed.links.len(), 6);
    assert_eq!(parsed.dropped_semantic, 1);
    // 3 parents with 2 parts each.
    let mut parents: Vec<u64> = parsed.links.iter().map(|l| l.parent_instance).collect();
    parents.sort_unstable();
    parents.dedup();
    assert_eq!(parents, vec![101, 104, 111]);
}

#[test]
fn triples_mini_drops_the_one_self_loop() {
    let corpus = mini_corpus();
    let triples = parse_triples(&fixture("triples_mini.json"), &corpus).unwrap();
    assert_eq!(triples.len(), 8);
    assert!(triples.iter().all(|t| t.subject_instance != t.object_instance));
}

#[test]
fn mini_corpus_dump_roundtrip() {
    let mut corpus = mini_corpus();
    parse_referring(&fixture("refs_mini.json"), &mut corpus).unwrap();
    let parts = parse_part_links(&fixture("parts_mini.json"), &corpus).unwrap();
    corpus.attach_part_links(parts.links);
    let triples = parse_triples(&fixture("triples_mini.json"), &corpus).unwrap();
    corpus.attach_triples(triples);

    let dump = corpus.to_jsonl();
    let reparsed = Corpus::from_jsonl(&dump).unwrap();
    assert_eq!(corpus, reparsed);
    assert_eq!(reparsed.to_jsonl(), dump);
}

#[test]
fn refine_replay_matches_recorded_finals() {
    #[derive(serde::Deserialize)]
    struct Recorded {
        sentence: String,
        response1: String,
        response2: String,
        r#final: String,
    }
    let recorded: Vec<Recorded> =
        serde_json::from_str(&fixture("refine_transcript.json")).unwrap();
    let replay = ReplayExchange {
        entries: recorded
            .iter()
            .map(|r| TranscriptEntry {
                sentence: r.sentence.clone(),
                response1: r.response1.clone(),
                response2: r.response2.clone(),
            })
            .collect(),
    };
    for r in &recorded {
        let outcome = refine(&replay, &r.sentence);
        assert_eq!(outcome.text, r.r#final, "sentence {:?}", r.sentence);
        assert!(!outcome.text.is_empty());
    }
}
