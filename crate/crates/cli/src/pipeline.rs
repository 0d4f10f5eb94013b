//! The build pipeline: parse sources, generate conversations per family in
//! parallel, canonicalize ordering, optionally refine text, and write the
//! output directory (manifest, conversation corpus, skip log, corpus dumps).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mrseg_core::annotations::{self, Corpus};
use mrseg_core::convgen::{
    self, Conversation, Family, SkipReason, SkipRecord, SourceSpec, StoredDescriptions,
    TemplateLibrary,
};
use mrseg_core::templates::{refine_batch, IdentityExchange, RefineStatus, TextExchange};

use crate::config::{BuildConfig, RefineMode, RefineTargets, SourceStyle};
use crate::refiner_http::HttpExchange;

pub const CONVERSATIONS_HEADER: &str = "{\"schema\":\"mrseg/conversations/v1\"}";
pub const SKIPS_HEADER: &str = "{\"schema\":\"mrseg/skips/v1\"}";
pub const TASKS_HEADER: &str = "{\"schema\":\"mrseg/tasks/v1\"}";
pub const PREDICTIONS_HEADER: &str = "{\"schema\":\"mrseg/predictions/v1\"}";

/// A conversation tagged with the source corpus its instance ids live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcedConversation {
    pub source: String,
    #[serde(flatten)]
    pub conversation: Conversation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcedSkip {
    pub source: String,
    #[serde(flatten)]
    pub skip: SkipRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub images: u64,
    pub instances: u64,
}

/// Build manifest: records what produced the outputs. Deliberately free of
/// timestamps and worker counts so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub template_split: String,
    pub families: BTreeMap<String, u64>,
    pub conversations: u64,
    pub rounds: u64,
    pub skips: u64,
    pub refined: u64,
    pub refine_failures: u64,
    pub sources: BTreeMap<String, SourceStats>,
}

pub struct LoadedSource {
    pub corpus: Corpus,
    pub style: SourceStyle,
    pub captioner: Option<StoredDescriptions>,
}

/// Parse every configured source document set into memory.
pub fn load_sources(config: &BuildConfig) -> Result<BTreeMap<String, LoadedSource>> {
    let mut out = BTreeMap::new();
    for (name, source) in &config.sources {
        let read = |p: &Path| -> Result<String> {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
        };
        let mut corpus = annotations::parse_instances(&read(&source.instances)?)
            .with_context(|| format!("source {name}: {}", source.instances.display()))?;
        if let Some(refs) = &source.refs {
            annotations::parse_referring(&read(refs)?, &mut corpus)
                .with_context(|| format!("source {name}: {}", refs.display()))?;
        }
        if let Some(parts) = &source.parts {
            let parsed = annotations::parse_part_links(&read(parts)?, &corpus)
                .with_context(|| format!("source {name}: {}", parts.display()))?;
            corpus.attach_part_links(parsed.links);
        }
        if let Some(triples) = &source.triples {
            let parsed = annotations::parse_triples(&read(triples)?, &corpus)
                .with_context(|| format!("source {name}: {}", triples.display()))?;
            corpus.attach_triples(parsed);
        }
        let captioner = match &source.descriptions {
            Some(path) => Some(
                StoredDescriptions::from_json(&read(path)?)
                    .with_context(|| format!("source {name}: {}", path.display()))?,
            ),
            None => None,
        };
        out.insert(
            name.clone(),
            LoadedSource {
                corpus,
                style: source.style,
                captioner,
            },
        );
    }
    Ok(out)
}

pub struct BuildOutputs {
    pub conversations: Vec<SourcedConversation>,
    pub skips: Vec<SourcedSkip>,
    pub manifest: Manifest,
}

/// Run the full generation pipeline. Deterministic in (config digest, seed):
/// per-image jobs run in parallel on `config.workers` threads, and outputs
/// are canonically ordered afterwards.
pub fn build(config: &BuildConfig) -> Result<BuildOutputs> {
    let library = TemplateLibrary::load(&config.template_dir, config.template_split)?;
    let sources = load_sources(config)?;
    let gen_config = config.gen_config();

    // One job per (family, source, image), in deterministic order.
    let mut jobs: Vec<(Family, &str, u64)> = Vec::new();
    for (family, source_names) in &config.families {
        for name in source_names {
            let loaded = &sources[name.as_str()];
            for image_id in loaded.corpus.image_ids() {
                jobs.push((*family, name.as_str(), image_id));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .context("building worker pool")?;
    let results: Result<Vec<_>, convgen::GenError> = pool.install(|| {
        jobs.par_iter()
            .map(|(family, source_name, image_id)| {
                let loaded = &sources[*source_name];
                let spec = SourceSpec {
                    name: source_name,
                    corpus: &loaded.corpus,
                    lvis_style: loaded.style == SourceStyle::Category,
                    captioner: loaded
                        .captioner
                        .as_ref()
                        .map(|c| c as &dyn convgen::Captioner),
                };
                generate_one(&spec, *image_id, *family, &gen_config, &library)
            })
            .collect()
    });

    let mut conversations: Vec<SourcedConversation> = Vec::new();
    let mut skips: Vec<SourcedSkip> = Vec::new();
    for (source, convs, skip_records) in results? {
        conversations.extend(convs.into_iter().map(|conversation| SourcedConversation {
            source: source.clone(),
            conversation,
        }));
        skips.extend(skip_records.into_iter().map(|skip| SourcedSkip {
            source: source.clone(),
            skip,
        }));
    }

    // Canonical output order, independent of job scheduling.
    conversations.sort_by(|a, b| {
        (
            a.conversation.image_id,
            a.conversation.family,
            a.conversation.seed,
            &a.source,
            &a.conversation.conversation_id,
        )
            .cmp(&(
                b.conversation.image_id,
                b.conversation.family,
                b.conversation.seed,
                &b.source,
                &b.conversation.conversation_id,
            ))
    });
    skips.sort_by(|a, b| {
        (a.skip.image_id, a.skip.family, &a.source, &a.skip.detail).cmp(&(
            b.skip.image_id,
            b.skip.family,
            &b.source,
            &b.skip.detail,
        ))
    });

    let (refined, refine_failures) =
        apply_refinement(config, &mut conversations, &mut skips)?;

    let mut families: BTreeMap<String, u64> = BTreeMap::new();
    let mut rounds = 0u64;
    for sc in &conversations {
        *families.entry(sc.conversation.family.slug().to_string()).or_default() += 1;
        rounds += sc.conversation.rounds.len() as u64;
    }
    for family in config.families.keys() {
        families.entry(family.slug().to_string()).or_default();
    }
    let manifest = Manifest {
        tool: "mrseg".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config.digest(),
        seed: config.seed,
        template_split: config.template_split.to_string(),
        families,
        conversations: conversations.len() as u64,
        rounds,
        skips: skips.len() as u64,
        refined,
        refine_failures,
        sources: sources
            .iter()
            .map(|(name, loaded)| {
                (
                    name.clone(),
                    SourceStats {
                        images: loaded.corpus.images().count() as u64,
                        instances: loaded.corpus.instances().count() as u64,
                    },
                )
            })
            .collect(),
    };

    Ok(BuildOutputs {
        conversations,
        skips,
        manifest,
    })
}

fn generate_one(
    spec: &SourceSpec<'_>,
    image_id: u64,
    family: Family,
    gen_config: &mrseg_core::convgen::GenConfig,
    library: &TemplateLibrary,
) -> Result<(String, Vec<Conversation>, Vec<SkipRecord>), convgen::GenError> {
    let (convs, skips) =
        convgen::generate_image(spec, image_id, &[family], gen_config, library)?;
    Ok((spec.name.to_string(), convs, skips))
}

/// Refine query/answer texts for the configured families. Fail-open: a
/// protocol failure keeps the original sentence and logs a skip note.
fn apply_refinement(
    config: &BuildConfig,
    conversations: &mut [SourcedConversation],
    skips: &mut Vec<SourcedSkip>,
) -> Result<(u64, u64)> {
    if config.refine.mode == RefineMode::Off || config.refine.families.is_empty() {
        return Ok((0, 0));
    }
    let http;
    let identity;
    let client: &dyn TextExchange = match config.refine.mode {
        RefineMode::Off => unreachable!(),
        RefineMode::Stub => {
            identity = IdentityExchange;
            &identity
        }
        RefineMode::Http => {
            let endpoint = config
                .refine
                .endpoint
                .clone()
                .expect("validated at config load");
            http = HttpExchange::new(endpoint, config.refine.timeout_ms, config.refine.retries)?;
            &http
        }
    };

    let refine_queries = matches!(config.refine.targets, RefineTargets::Queries | RefineTargets::Both);
    let refine_answers = matches!(config.refine.targets, RefineTargets::Answers | RefineTargets::Both);

    // Collect target sentences with back-references.
    let mut slots: Vec<(usize, usize, bool)> = Vec::new(); // (conv idx, round idx, is_query)
    let mut sentences: Vec<String> = Vec::new();
    for (ci, sc) in conversations.iter().enumerate() {
        if !config.refine.families.contains(&sc.conversation.family) {
            continue;
        }
        for (ri, round) in sc.conversation.rounds.iter().enumerate() {
            if refine_queries {
                slots.push((ci, ri, true));
                sentences.push(round.query_text.clone());
            }
            if refine_answers {
                slots.push((ci, ri, false));
                sentences.push(round.answer_text.clone());
            }
        }
    }
    if sentences.is_empty() {
        return Ok((0, 0));
    }
    let outcomes = refine_batch(client, &sentences, config.refine.max_in_flight);
    let mut refined = 0u64;
    let mut failures = 0u64;
    for ((ci, ri, is_query), outcome) in slots.into_iter().zip(outcomes) {
        match outcome.status {
            RefineStatus::FailedOpen => {
                failures += 1;
                let sc = &conversations[ci];
                skips.push(SourcedSkip {
                    source: sc.source.clone(),
                    skip: SkipRecord {
                        image_id: sc.conversation.image_id,
                        family: sc.conversation.family,
                        reason: SkipReason::RefineFailure,
                        conversation_id: Some(sc.conversation.conversation_id.clone()),
                        detail: outcome.detail.unwrap_or_default(),
                    },
                });
            }
            _ => {
                refined += 1;
                let round = &mut conversations[ci].conversation.rounds[ri];
                if is_query {
                    round.query_text = outcome.text;
                } else {
                    round.answer_text = outcome.text;
                }
            }
        }
    }
    Ok((refined, failures))
}

/// Write a build's outputs into `out_dir`.
pub fn write_outputs(
    out_dir: &Path,
    outputs: &BuildOutputs,
    sources: &BTreeMap<String, LoadedSource>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut conv_lines = String::from(CONVERSATIONS_HEADER);
    conv_lines.push('\n');
    for sc in &outputs.conversations {
        conv_lines.push_str(&serde_json::to_string(sc)?);
        conv_lines.push('\n');
    }
    std::fs::write(out_dir.join("conversations.jsonl"), conv_lines)?;

    let mut skip_lines = String::from(SKIPS_HEADER);
    skip_lines.push('\n');
    for skip in &outputs.skips {
        skip_lines.push_str(&serde_json::to_string(skip)?);
        skip_lines.push('\n');
    }
    std::fs::write(out_dir.join("skips.jsonl"), skip_lines)?;

    let corpus_dir = out_dir.join("corpus");
    std::fs::create_dir_all(&corpus_dir)?;
    for (name, loaded) in sources {
        std::fs::write(corpus_dir.join(format!("{name}.jsonl")), loaded.corpus.to_jsonl())?;
    }

    let mut manifest_json = serde_json::to_string_pretty(&outputs.manifest)?;
    manifest_json.push('\n');
    std::fs::write(out_dir.join("manifest.json"), manifest_json)?;
    Ok(())
}

/// A build directory loaded back for stats/validate/flatten/score.
pub struct LoadedBuild {
    pub conversations: Vec<SourcedConversation>,
    pub corpora: BTreeMap<String, Corpus>,
    pub manifest: Option<Manifest>,
}

impl LoadedBuild {
    pub fn corpus_of(&self, source: &str) -> Option<&Corpus> {
        self.corpora.get(source)
    }
}

/// Load a directory produced by [`write_outputs`].
pub fn load_build_dir(dir: &Path) -> Result<LoadedBuild> {
    let conv_path = dir.join("conversations.jsonl");
    let text = std::fs::read_to_string(&conv_path)
        .with_context(|| format!("reading {}", conv_path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.contains("mrseg/conversations/v1") => {}
        _ => bail!("{}: missing mrseg/conversations/v1 header", conv_path.display()),
    }
    let mut conversations = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sc: SourcedConversation = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", conv_path.display(), idx + 2))?;
        conversations.push(sc);
    }

    let mut corpora = BTreeMap::new();
    let corpus_dir = dir.join("corpus");
    if corpus_dir.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(&corpus_dir)?
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let corpus = Corpus::from_jsonl(&std::fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            corpora.insert(name, corpus);
        }
    }

    let manifest = match std::fs::read_to_string(dir.join("manifest.json")) {
        Ok(text) => Some(serde_json::from_str(&text).context("parsing manifest.json")?),
        Err(_) => None,
    };

    Ok(LoadedBuild {
        conversations,
        corpora,
        manifest,
    })
}
