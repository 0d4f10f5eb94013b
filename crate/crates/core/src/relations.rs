//! Spatial relation classification between two boxes, the natural-language
//! surface forms of each relation, and the same-category ambiguity filter.
//!
//! The label set and surface forms are frozen in `docs/relations.md`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskops::BBox;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("degenerate box ({x1},{y1},{x2},{y2}) cannot be classified")]
    DegenerateBox { x1: u32, y1: u32, x2: u32, y2: u32 },
}

/// Spatial relation of a target box with respect to a reference box.
///
/// Exactly one label applies to every ordered pair of nondegenerate boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationLabel {
    SameAs,
    Overlapping,
    LeftOf,
    RightOf,
    Above,
    Below,
    TopLeftOf,
    TopRightOf,
    BottomLeftOf,
    BottomRightOf,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 10] = [
        RelationLabel::SameAs,
        RelationLabel::Overlapping,
        RelationLabel::LeftOf,
        RelationLabel::RightOf,
        RelationLabel::Above,
        RelationLabel::Below,
        RelationLabel::TopLeftOf,
        RelationLabel::TopRightOf,
        RelationLabel::BottomLeftOf,
        RelationLabel::BottomRightOf,
    ];
}

/// Box-IoU at or above this value classifies the pair as `SameAs`.
pub const SAME_AS_IOU_THRESHOLD: f64 = 0.95;

/// Classify the spatial relation of `target` with respect to `reference`.
///
/// Decision order: `SameAs` (IoU >= 0.95), then `Overlapping` (any shared
/// area), then edge separation. Boxes disjoint on both axes get a diagonal
/// label; disjoint on one axis, that axis's label. "Above" means smaller y
/// (image coordinates grow downward).
pub fn classify(target: &BBox, reference: &BBox) -> Result<RelationLabel, RelationError> {
    for b in [target, reference] {
        if b.is_degenerate() {
            return Err(RelationError::DegenerateBox {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            });
        }
    }
    if target.iou(reference) >= SAME_AS_IOU_THRESHOLD {
        return Ok(RelationLabel::SameAs);
    }
    if target.intersection_area(reference) > 0 {
        return Ok(RelationLabel::Overlapping);
    }
    let left = target.x2 <= reference.x1;
    let right = target.x1 >= reference.x2;
    let above = target.y2 <= reference.y1;
    let below = target.y1 >= reference.y2;
    Ok(match (left, right, above, below) {
        (true, _, true, _) => RelationLabel::TopLeftOf,
        (true, _, _, true) => RelationLabel::BottomLeftOf,
        (_, true, true, _) => RelationLabel::TopRightOf,
        (_, true, _, true) => RelationLabel::BottomRightOf,
        (true, _, _, _) => RelationLabel::LeftOf,
        (_, true, _, _) => RelationLabel::RightOf,
        (_, _, true, _) => RelationLabel::Above,
        (_, _, _, true) => RelationLabel::Below,
        // Zero intersection area forces separation on at least one axis.
        (false, false, false, false) => unreachable!("disjoint boxes must be edge-separated"),
    })
}

/// Natural-language surface form of a relation label.
pub fn phrase(label: RelationLabel) -> &'static str {
    match label {
        RelationLabel::SameAs => "the same as",
        RelationLabel::Overlapping => "overlapping with",
        RelationLabel::LeftOf => "to the left of",
        RelationLabel::RightOf => "to the right of",
        RelationLabel::Above => "above",
        RelationLabel::Below => "below",
        RelationLabel::TopLeftOf => "to the top left of",
        RelationLabel::TopRightOf => "to the top right of",
        RelationLabel::BottomLeftOf => "to the bottom left of",
        RelationLabel::BottomRightOf => "to the bottom right of",
    }
}

/// Eligibility of one category within one image for ambiguity-sensitive
/// sampling: a category qualifies with exactly one or two instances; with two,
/// both need a disambiguating location phrase in their captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Eligibility {
    pub eligible: bool,
    /// Instance ids that require a location phrase appended to their caption.
    pub needs_location_phrase: Vec<u64>,
}

/// Filter a category by instance multiplicity within one image.
///
/// `instances` holds (instance id, category) pairs for the whole image.
pub fn ambiguity_filter(instances: &[(u64, &str)], category: &str) -> Eligibility {
    let matching: Vec<u64> = instances
        .iter()
        .filter(|(_, c)| *c == category)
        .map(|(id, _)| *id)
        .collect();
    match matching.len() {
        1 => Eligibility {
            eligible: true,
            needs_location_phrase: Vec::new(),
        },
        2 => Eligibility {
            eligible: true,
            needs_location_phrase: matching,
        },
        _ => Eligibility {
            eligible: false,
            needs_location_phrase: Vec::new(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Independent predicate evaluation: each of the ten labels gets its own
    /// test, and exactly one must fire for any nondegenerate ordered pair.
    fn oracle(target: &BBox, reference: &BBox) -> RelationLabel {
        let inter = target.intersection_area(reference);
        let union = target.area() + reference.area() - inter;
        let same = inter as f64 / union as f64 >= SAME_AS_IOU_THRESHOLD;
        let overlapping = !same && inter > 0;
        let sep_l = target.x2 <= reference.x1;
        let sep_r = target.x1 >= reference.x2;
        let sep_a = target.y2 <= reference.y1;
        let sep_b = target.y1 >= reference.y2;
        let disjoint = inter == 0;
        let candidates = [
            (RelationLabel::SameAs, same),
            (RelationLabel::Overlapping, overlapping),
            (RelationLabel::LeftOf, disjoint && sep_l && !sep_a && !sep_b),
            (RelationLabel::RightOf, disjoint && sep_r && !sep_a && !sep_b),
            (RelationLabel::Above, disjoint && sep_a && !sep_l && !sep_r),
            (RelationLabel::Below, disjoint && sep_b && !sep_l && !sep_r),
            (RelationLabel::TopLeftOf, disjoint && sep_l && sep_a),
            (RelationLabel::TopRightOf, disjoint && sep_r && sep_a),
            (RelationLabel::BottomLeftOf, disjoint && sep_l && sep_b),
            (RelationLabel::BottomRightOf, disjoint && sep_r && sep_b),
        ];
        let fired: Vec<RelationLabel> = candidates
            .iter()
            .filter(|(_, on)| *on)
            .map(|(l, _)| *l)
            .collect();
        assert_eq!(fired.len(), 1, "exactly one label must fire for {target:?} vs {reference:?}");
        fired[0]
    }

    fn random_box(rng: &mut ChaCha8Rng, extent: u32) -> BBox {
        let x1 = rng.random_range(0..extent - 1);
        let y1 = rng.random_range(0..extent - 1);
        let x2 = rng.random_range(x1 + 1..extent);
        let y2 = rng.random_range(y1 + 1..extent);
        bb(x1, y1, x2, y2)
    }

    #[test]
    fn identical_boxes_are_same_as() {
        let b = bb(2, 3, 9, 8);
        assert_eq!(classify(&b, &b).unwrap(), RelationLabel::SameAs);
    }

    #[test]
    fn pure_horizontal_separation() {
        assert_eq!(
            classify(&bb(0, 0, 10, 10), &bb(20, 0, 30, 10)).unwrap(),
            RelationLabel::LeftOf
        );
    }

    #[test]
    fn diagonal_separation() {
        assert_eq!(
            classify(&bb(0, 0, 5, 5), &bb(10, 10, 20, 20)).unwrap(),
            RelationLabel::TopLeftOf
        );
        assert_eq!(
            classify(&bb(10, 10, 20, 20), &bb(0, 0, 5, 5)).unwrap(),
            RelationLabel::BottomRightOf
        );
    }

    #[test]
    fn touching_edges_are_separated_not_overlapping() {
        // Half-open boxes sharing an edge have zero intersection area.
        assert_eq!(
            classify(&bb(0, 0, 5, 10), &bb(5, 0, 10, 10)).unwrap(),
            RelationLabel::LeftOf
        );
    }

    #[test]
    fn degenerate_box_is_error() {
        let degenerate = BBox { x1: 3, y1: 3, x2: 3, y2: 8 };
        assert!(classify(&degenerate, &bb(0, 0, 4, 4)).is_err());
    }

    #[test]
    fn matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for _ in 0..10_000 {
            let a = random_box(&mut rng, 100);
            let b = random_box(&mut rng, 100);
            assert_eq!(classify(&a, &b).unwrap(), oracle(&a, &b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn mirror_consistency_on_separated_pairs() {
        use RelationLabel::*;
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        let mut seen = 0;
        while seen < 2000 {
            let a = random_box(&mut rng, 60);
            let b = random_box(&mut rng, 60);
            if a.intersection_area(&b) > 0 {
                continue;
            }
            seen += 1;
            let ab = classify(&a, &b).unwrap();
            let ba = classify(&b, &a).unwrap();
            let expected = match ab {
                LeftOf => RightOf,
                RightOf => LeftOf,
                Above => Below,
                Below => Above,
                TopLeftOf => BottomRightOf,
                TopRightOf => BottomLeftOf,
                BottomLeftOf => TopRightOf,
                BottomRightOf => TopLeftOf,
                other => other,
            };
            assert_eq!(ba, expected);
        }
    }

    #[test]
    fn phrases_match_frozen_table() {
        assert_eq!(phrase(RelationLabel::SameAs), "the same as");
        assert_eq!(phrase(RelationLabel::Overlapping), "overlapping with");
        assert_eq!(phrase(RelationLabel::LeftOf), "to the left of");
        assert_eq!(phrase(RelationLabel::BottomRightOf), "to the bottom right of");
        assert_eq!(phrase(RelationLabel::Above), "above");
    }

    #[test]
    fn ambiguity_filter_counts() {
        let one = [(1u64, "dog")];
        let report = ambiguity_filter(&one, "dog");
        assert!(report.eligible);
        assert!(report.needs_location_phrase.is_empty());

        let two = [(1u64, "dog"), (2, "dog"), (3, "cat")];
        let report = ambiguity_filter(&two, "dog");
        assert!(report.eligible);
        assert_eq!(report.needs_location_phrase, vec![1, 2]);

        let three = [(1u64, "dog"), (2, "dog"), (3, "dog")];
        assert!(!ambiguity_filter(&three, "dog").eligible);
    }
}
