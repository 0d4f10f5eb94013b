//! Round-count histograms of a conversation corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use mrseg_core::convgen::Family;

use crate::pipeline::SourcedConversation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub round_count: u32,
    pub family: Family,
    pub count: u64,
}

/// Histogram rows (round_count, family, count), ordered by round count then
/// family. Row counts always sum to the corpus size.
pub fn stats(conversations: &[SourcedConversation]) -> Vec<StatsRow> {
    let mut counts: BTreeMap<(u32, Family), u64> = BTreeMap::new();
    for sc in conversations {
        *counts
            .entry((sc.conversation.rounds.len() as u32, sc.conversation.family))
            .or_default() += 1;
    }
    counts
        .into_iter()
        .map(|((round_count, family), count)| StatsRow {
            round_count,
            family,
            count,
        })
        .collect()
}

pub fn render_table(rows: &[StatsRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:>6}  {:<14}  {:>8}\n", "rounds", "family", "count"));
    let mut total = 0u64;
    for row in rows {
        out.push_str(&format!(
            "{:>6}  {:<14}  {:>8}\n",
            row.round_count,
            row.family.slug(),
            row.count
        ));
        total += row.count;
    }
    out.push_str(&format!("{:>6}  {:<14}  {:>8}\n", "", "total", total));
    out
}
