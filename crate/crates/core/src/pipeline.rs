//! Stage orchestration, caching and the report bundle.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{cache_key, Cache, CacheError, CachedEmbed, CachedTextGen};
use crate::clients::{ClientError, EmbedClient, TextGenClient};
use crate::config::{ConfigError, RunConfig};
use crate::conllu::{read_blocks, SentenceBlock};
use crate::evaluate::{
    execute_gold, Evaluator, ItemOutcome, Outcome, PairedEvalRecord, NL2SQL_TEMPLATE,
};
use crate::ingest::{load_benchmark, Benchmark, Example, IngestError, LoadOptions};
use crate::paragen::{generate_paraphrases, GenError, ParaphraseSet, PARAPHRASE_TEMPLATE};
use crate::rank::{rank_paraphrases, RankedParaphrase};
use crate::semantic::{
    apply_cosine_filter, distribution_tables, DistributionTables, FilterConfig, OverlapRecord,
};
use crate::stats::{
    stratified_curves, tau_report, RankFilter, StatsError, StratifiedCurves, TauReport,
};
use crate::tree::DepTree;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot build client: {0}")]
    Client(#[from] ClientError),
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("stage {stage} failed: {message} (completed: {completed})")]
    Fatal {
        stage: Stage,
        completed: String,
        message: String,
    },
    #[error("calibration: {0}")]
    Calibration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Paraphrase,
    ParseImport,
    Rank,
    Filter,
    Evaluate,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Paraphrase,
        Stage::ParseImport,
        Stage::Rank,
        Stage::Filter,
        Stage::Evaluate,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Paraphrase => "paraphrase",
            Stage::ParseImport => "parse-import",
            Stage::Rank => "rank",
            Stage::Filter => "filter",
            Stage::Evaluate => "evaluate",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Parsed original and candidates of one example. Candidates keep their
/// position in the generator output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSet {
    pub original: DepTree,
    pub candidates: Vec<(usize, String, DepTree)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseImport {
    pub sets: BTreeMap<String, ParsedSet>,
    pub parser_versions: BTreeSet<String>,
}

/// Records of one NL2SQL model over all ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    pub model_id: String,
    pub records: Vec<PairedEvalRecord>,
    /// Originals (rank 0) first, then paraphrase items by rank.
    pub items: Vec<ItemOutcome>,
    /// Example ids behind `acc_orig` and `acc_para`, per rank.
    pub pairing: Vec<PairingAudit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingAudit {
    pub rank: usize,
    pub orig_ids: Vec<String>,
    pub para_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub overlap: Vec<OverlapRecord>,
    pub tables: DistributionTables,
    pub curves: Vec<(String, StratifiedCurves)>,
}

/// Everything produced by a run up to the requested stage.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub benchmark: Option<Benchmark>,
    pub paraphrases: Option<BTreeMap<String, ParaphraseSet>>,
    pub parses: Option<ParseImport>,
    pub ranked: Option<BTreeMap<String, Vec<RankedParaphrase>>>,
    pub filtered: Option<BTreeMap<String, Vec<RankedParaphrase>>>,
    pub evaluations: Option<Vec<ModelEvaluation>>,
    pub tau_reports: Option<Vec<TauReport>>,
    pub controls: Option<Controls>,
    pub completed: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHistogram {
    pub sampled_examples: usize,
    pub total_pairs: usize,
    /// The requested sample exceeded the corpus and was clamped.
    pub clamped: bool,
    pub bins: Vec<CosineBin>,
}

pub const COSINE_BINS: usize = 20;

/// Histogram of cosine values over `[-1, 1]` in equal bins, last bin closed.
pub fn cosine_histogram(values: &[f64]) -> Vec<CosineBin> {
    let half = (COSINE_BINS / 2) as f64;
    let mut counts = vec![0usize; COSINE_BINS];
    for &c in values {
        let idx = (((c + 1.0) * half).floor().max(0.0) as usize).min(COSINE_BINS - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| CosineBin {
            bin_lo: (i as f64 - half) / half,
            bin_hi: (i as f64 + 1.0 - half) / half,
            count,
        })
        .collect()
}

struct ModelClient {
    model_id: String,
    temperature: f64,
    client: Arc<dyn TextGenClient>,
}

#[derive(Default)]
struct RunLog {
    notices: Vec<(Stage, String)>,
    completed: Vec<Stage>,
}

pub struct Pipeline {
    config: RunConfig,
    cache: Arc<Cache>,
    generator: Arc<dyn TextGenClient>,
    models: Vec<ModelClient>,
    embedder: Arc<dyn EmbedClient>,
    pool: rayon::ThreadPool,
    log: Mutex<RunLog>,
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Pipeline {
    /// Builds every client from its spec in the configuration.
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        let generator = config.generator.build(&config.base_dir)?;
        let models = config
            .models
            .iter()
            .map(|m| m.client.build(&config.base_dir))
            .collect::<Result<Vec<_>, _>>()?;
        let embedder = config.embedder.build(&config.base_dir)?;
        Self::with_clients(config, generator, models, embedder)
    }

    /// Uses the given clients; `models` pairs up with `config.models`.
    pub fn with_clients(
        config: RunConfig,
        generator: Arc<dyn TextGenClient>,
        models: Vec<Arc<dyn TextGenClient>>,
        embedder: Arc<dyn EmbedClient>,
    ) -> Result<Self, PipelineError> {
        assert_eq!(
            models.len(),
            config.models.len(),
            "one client per configured model"
        );
        let cache = Arc::new(Cache::open(&config.cache_path())?);
        let models = config
            .models
            .iter()
            .zip(models)
            .map(|(spec, client)| ModelClient {
                model_id: spec.client.model_id().to_string(),
                temperature: spec.temperature,
                client: Arc::new(
                    CachedTextGen::new(client, cache.clone(), "nl2sql")
                        .retry_failures(config.retry_failed_calls),
                ) as Arc<dyn TextGenClient>,
            })
            .collect();
        let embedder: Arc<dyn EmbedClient> =
            Arc::new(CachedEmbed::new(embedder, cache.clone(), "embed"));
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.workers {
            pool = pool.num_threads(n);
        }
        let pool = pool
            .build()
            .map_err(|e| PipelineError::Calibration(format!("thread pool: {e}")))?;
        Ok(Self {
            config,
            cache,
            generator,
            models,
            embedder,
            pool,
            log: Mutex::new(RunLog::default()),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    fn notice(&self, stage: Stage, message: String) {
        log::info!("[{stage}] {message}");
        self.log.lock().unwrap().notices.push((stage, message));
    }

    fn complete(&self, stage: Stage) {
        self.log.lock().unwrap().completed.push(stage);
    }

    fn fatal(&self, stage: Stage, message: impl Into<String>) -> PipelineError {
        let completed = self
            .log
            .lock()
            .unwrap()
            .completed
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .join(", ");
        PipelineError::Fatal {
            stage,
            completed: if completed.is_empty() {
                "none".into()
            } else {
                completed
            },
            message: message.into(),
        }
    }

    /// Notices in stage order, sorted within a stage.
    pub fn notices(&self) -> Vec<String> {
        let mut notices = self.log.lock().unwrap().notices.clone();
        notices.sort();
        notices.dedup();
        notices
            .into_iter()
            .map(|(stage, m)| format!("{stage}: {m}"))
            .collect()
    }

    pub fn ingest(&self) -> Result<Benchmark, PipelineError> {
        let spec = &self.config.benchmark;
        let options = LoadOptions {
            name: Some(spec.name.clone()),
            release_tag: spec.release_tag.clone(),
            sample_rows: spec.sample_rows,
        };
        let benchmark = load_benchmark(&self.config.benchmark_dir(), spec.format, &options)?;
        for s in &benchmark.skipped {
            self.notice(
                Stage::Ingest,
                format!("record {} ({}) skipped: {}", s.index, s.db_id, s.reason),
            );
        }
        if benchmark.examples.is_empty() {
            return Err(self.fatal(Stage::Ingest, "benchmark has no usable examples"));
        }
        self.complete(Stage::Ingest);
        Ok(benchmark)
    }

    fn paraphrase_key(&self, example: &Example) -> String {
        let input = json!({
            "question": example.question,
            "context_turns": example.context_turns,
            "gold_sql": example.gold_sql,
            "schema": example.schema_text,
        });
        let config = json!({
            "generator": self.generator.model_id(),
            "generation": self.config.generation,
            "template": digest(PARAPHRASE_TEMPLATE),
        });
        cache_key("paraphrase", &input, &config)
    }

    /// Generates paraphrase sets and writes `parse_requests.jsonl` for the
    /// external parser.
    pub fn paraphrase(
        &self,
        benchmark: &Benchmark,
    ) -> Result<BTreeMap<String, ParaphraseSet>, PipelineError> {
        let results: Vec<(String, Result<ParaphraseSet, String>)> = self.pool.install(|| {
            benchmark
                .examples
                .par_iter()
                .map(|ex| {
                    let key = self.paraphrase_key(ex);
                    let result: Result<ParaphraseSet, GenStageError> =
                        self.cache.get_or_compute("paraphrase", &key, || {
                            generate_paraphrases(
                                ex,
                                self.generator.as_ref(),
                                &self.config.generation,
                            )
                            .map_err(GenStageError::Gen)
                        });
                    (ex.id.clone(), result.map_err(|e| e.to_string()))
                })
                .collect()
        });
        let mut sets = BTreeMap::new();
        let mut failed = 0;
        for (id, result) in results {
            match result {
                Ok(set) if set.candidates.is_empty() => {
                    failed += 1;
                    self.notice(Stage::Paraphrase, format!("{id}: no candidates; excluded"));
                }
                Ok(set) => {
                    if set.shortfall > 0 {
                        self.notice(
                            Stage::Paraphrase,
                            format!("{id}: shortfall of {}", set.shortfall),
                        );
                    }
                    sets.insert(id, set);
                }
                Err(e) => {
                    failed += 1;
                    self.notice(Stage::Paraphrase, format!("{id}: excluded: {e}"));
                }
            }
        }
        if sets.is_empty() {
            return Err(self.fatal(
                Stage::Paraphrase,
                format!("generation failed for all {failed} examples"),
            ));
        }
        self.write_parse_requests(benchmark, &sets)?;
        self.complete(Stage::Paraphrase);
        Ok(sets)
    }

    fn write_parse_requests(
        &self,
        benchmark: &Benchmark,
        sets: &BTreeMap<String, ParaphraseSet>,
    ) -> Result<(), PipelineError> {
        let mut out = String::new();
        for ex in &benchmark.examples {
            let Some(set) = sets.get(&ex.id) else {
                continue;
            };
            let mut sentences = vec![ex.question.clone()];
            sentences.extend(set.candidates.iter().cloned());
            out.push_str(
                &serde_json::to_string(&json!({ "example_id": ex.id, "sentences": sentences }))
                    .unwrap(),
            );
            out.push('\n');
        }
        write_file(
            &self.config.output_path().join("parse_requests.jsonl"),
            &out,
        )
    }

    /// Reads CoNLL-U files and matches sentences to paraphrase sets.
    ///
    /// Blocks are keyed by `# sent_id = <example_id>:<position>`, position 0
    /// being the original. Blocks without a sent_id take the file stem as the
    /// example id and their order in the file as the position.
    pub fn import_parses(
        &self,
        benchmark: &Benchmark,
        sets: &BTreeMap<String, ParaphraseSet>,
    ) -> Result<ParseImport, PipelineError> {
        let stage = Stage::ParseImport;
        let dir = self.config.parse_dir();
        let listing = fs::read_dir(&dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut files: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "conllu"))
            .collect();
        files.sort();

        let mut blocks: HashMap<String, BTreeMap<usize, SentenceBlock>> = HashMap::new();
        let mut versions = BTreeSet::new();
        for path in &files {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            for (order, block) in read_blocks(&text).into_iter().enumerate() {
                let (id, pos) = match block.sent_id() {
                    Some(sid) => match sid
                        .rsplit_once(':')
                        .and_then(|(id, p)| Some((id.to_string(), p.parse().ok()?)))
                    {
                        Some(key) => key,
                        None => {
                            self.notice(
                                stage,
                                format!("{name}:{}: unreadable sent_id {sid:?}", block.line),
                            );
                            continue;
                        }
                    },
                    None => (stem.clone(), order),
                };
                if !sets.contains_key(&id) {
                    continue;
                }
                if let Some(v) = block.meta.get("parser") {
                    versions.insert(v.clone());
                }
                let slot = blocks.entry(id.clone()).or_default();
                match slot.entry(pos) {
                    Entry::Occupied(_) => self.notice(
                        stage,
                        format!(
                            "{name}:{}: duplicate sentence {id}:{pos} ignored",
                            block.line
                        ),
                    ),
                    Entry::Vacant(e) => {
                        e.insert(block);
                    }
                }
            }
        }

        let mut out = ParseImport {
            sets: BTreeMap::new(),
            parser_versions: versions,
        };
        for (id, set) in sets {
            let example = benchmark
                .example(id)
                .expect("paraphrase sets come from the benchmark");
            let mut found = blocks.remove(id).unwrap_or_default();
            let original = match take_tree(&mut found, 0, &example.question) {
                Ok(t) => t,
                Err(why) => {
                    self.notice(stage, format!("{id}: original {why}; excluded"));
                    continue;
                }
            };
            let mut candidates = Vec::new();
            for (i, text) in set.candidates.iter().enumerate() {
                match take_tree(&mut found, i + 1, text) {
                    Ok(t) => candidates.push((i, text.clone(), t)),
                    Err(why) => {
                        self.notice(stage, format!("{id}: candidate {} {why}; dropped", i + 1))
                    }
                }
            }
            if candidates.is_empty() {
                self.notice(stage, format!("{id}: no parsed candidates; excluded"));
                continue;
            }
            out.sets.insert(
                id.clone(),
                ParsedSet {
                    original,
                    candidates,
                },
            );
        }
        if out.sets.is_empty() {
            return Err(self.fatal(stage, "no example has a usable parse"));
        }
        self.complete(stage);
        Ok(out)
    }

    /// Ranks candidates by tree edit distance; cached per example.
    pub fn rank(
        &self,
        parses: &ParseImport,
    ) -> Result<BTreeMap<String, Vec<RankedParaphrase>>, PipelineError> {
        let ranked: Result<Vec<(String, Vec<RankedParaphrase>)>, CacheError> =
            self.pool.install(|| {
                parses
                    .sets
                    .par_iter()
                    .map(|(id, set)| {
                        let input =
                            json!({ "original": set.original, "candidates": set.candidates });
                        let key = cache_key("rank", &input, &"zhang-shasha/unit-cost/lemma-upos");
                        let ranked = self.cache.get_or_compute("rank", &key, || {
                            let positions: Vec<usize> =
                                set.candidates.iter().map(|c| c.0).collect();
                            let candidates = set
                                .candidates
                                .iter()
                                .map(|(_, text, tree)| (text.clone(), tree.clone()));
                            let mut ranked = rank_paraphrases(&set.original, candidates.collect());
                            for p in &mut ranked {
                                p.generation_index = positions[p.generation_index];
                            }
                            Ok::<_, CacheError>(ranked)
                        })?;
                        Ok((id.clone(), ranked))
                    })
                    .collect()
            });
        let ranked = ranked?.into_iter().collect();
        self.complete(Stage::Rank);
        Ok(ranked)
    }

    fn embed_cosines(
        &self,
        benchmark: &Benchmark,
        ranked: &BTreeMap<String, Vec<RankedParaphrase>>,
        filter: &FilterConfig,
    ) -> Vec<(String, Result<Vec<RankedParaphrase>, String>)> {
        self.pool.install(|| {
            ranked
                .par_iter()
                .map(|(id, list)| {
                    let ex = benchmark
                        .example(id)
                        .expect("ranked sets come from the benchmark");
                    let result = apply_cosine_filter(
                        list.clone(),
                        &ex.question,
                        self.embedder.as_ref(),
                        filter,
                    )
                    .map_err(|e| e.to_string());
                    (id.clone(), result)
                })
                .collect()
        })
    }

    /// Fills cosine similarity and the retained flag.
    pub fn filter(
        &self,
        benchmark: &Benchmark,
        ranked: &BTreeMap<String, Vec<RankedParaphrase>>,
    ) -> Result<BTreeMap<String, Vec<RankedParaphrase>>, PipelineError> {
        let mut out = BTreeMap::new();
        let mut failed = 0;
        for (id, result) in self.embed_cosines(benchmark, ranked, &self.config.filter) {
            match result {
                Ok(list) => {
                    let kept = list.iter().filter(|p| p.retained).count();
                    if kept == 0 {
                        self.notice(
                            Stage::Filter,
                            format!("{id}: no paraphrase above the cosine threshold"),
                        );
                    }
                    out.insert(id, list);
                }
                Err(e) => {
                    failed += 1;
                    self.notice(
                        Stage::Filter,
                        format!("{id}: embedding failed ({e}); excluded"),
                    );
                }
            }
        }
        if out.is_empty() {
            return Err(self.fatal(
                Stage::Filter,
                format!("embedding failed for all {failed} examples"),
            ));
        }
        self.complete(Stage::Filter);
        Ok(out)
    }

    /// Paired evaluation of every configured model over ranks
    /// `1..=num_queries`.
    pub fn evaluate(
        &self,
        benchmark: &Benchmark,
        filtered: &BTreeMap<String, Vec<RankedParaphrase>>,
    ) -> Result<Vec<ModelEvaluation>, PipelineError> {
        let stage = Stage::Evaluate;
        let limits = self.config.execution;
        let gold = self.pool.install(|| execute_gold(benchmark, &limits));
        for (id, g) in &gold {
            if let Err(e) = g {
                self.notice(
                    stage,
                    format!("{id}: gold SQL fails ({}); unusable", e.class()),
                );
            }
        }
        let mut out = Vec::new();
        for model in &self.models {
            let evaluator = Evaluator::new(
                benchmark,
                &gold,
                model.client.as_ref(),
                model.temperature,
                limits,
                self.config.filter.tokenizer.clone(),
            );
            let mut records = Vec::new();
            let mut para_items = Vec::new();
            let mut pairing = Vec::new();
            for rank in 1..=self.config.generation.num_queries {
                let Some(eval) = self
                    .pool
                    .install(|| evaluator.evaluate_rank(&benchmark.name, filtered, rank))
                else {
                    self.notice(
                        stage,
                        format!(
                            "{}: rank {rank} has no paired examples; skipped",
                            model.model_id
                        ),
                    );
                    continue;
                };
                if eval.orig_ids != eval.para_ids {
                    return Err(self.fatal(
                        stage,
                        format!("{} rank {rank}: unpaired id sets", model.model_id),
                    ));
                }
                records.push(eval.record);
                para_items.extend(eval.items);
                pairing.push(PairingAudit {
                    rank,
                    orig_ids: eval.orig_ids,
                    para_ids: eval.para_ids,
                });
            }
            let mut items = evaluator.original_outcomes();
            items.extend(para_items);
            if !items.is_empty()
                && items
                    .iter()
                    .all(|i| i.error_class.as_deref() == Some("client_error"))
            {
                return Err(self.fatal(
                    stage,
                    format!("model {} failed on every request", model.model_id),
                ));
            }
            let errors = items
                .iter()
                .filter(|i| i.outcome == Outcome::PredictionError)
                .count();
            if errors > 0 {
                self.notice(
                    stage,
                    format!(
                        "{}: {errors} of {} predictions failed",
                        model.model_id,
                        items.len()
                    ),
                );
            }
            out.push(ModelEvaluation {
                model_id: model.model_id.clone(),
                records,
                items,
                pairing,
            });
        }
        self.complete(stage);
        Ok(out)
    }

    /// Tau reports (all ranks and ranks >= 3) per model.
    pub fn stats(&self, evaluations: &[ModelEvaluation]) -> Vec<TauReport> {
        let mut reports = Vec::new();
        for eval in evaluations {
            for filter in [RankFilter::All, RankFilter::Ge3] {
                match tau_report(
                    &eval.records,
                    filter,
                    self.config.bootstrap_resamples,
                    self.config.seed,
                ) {
                    Ok(r) => {
                        if r.estimate_outside_ci() {
                            self.notice(
                                Stage::Stats,
                                format!(
                                    "{} {filter}: tau lies outside its interval",
                                    eval.model_id
                                ),
                            );
                        }
                        reports.push(r);
                    }
                    Err(StatsError::TooFewPoints(n)) => self.notice(
                        Stage::Stats,
                        format!(
                            "{} {filter}: {n} rank point(s); tau not computed",
                            eval.model_id
                        ),
                    ),
                    Err(e) => self.notice(Stage::Stats, format!("{} {filter}: {e}", eval.model_id)),
                }
            }
        }
        self.complete(Stage::Stats);
        reports
    }

    /// Length and overlap distributions of retained paraphrases and the
    /// Jaccard-stratified accuracy curves.
    pub fn controls(
        &self,
        benchmark: &Benchmark,
        filtered: &BTreeMap<String, Vec<RankedParaphrase>>,
        evaluations: &[ModelEvaluation],
    ) -> Controls {
        let tokenizer = &self.config.filter.tokenizer;
        let mut overlap = Vec::new();
        for (id, list) in filtered {
            let ex = benchmark
                .example(id)
                .expect("filtered sets come from the benchmark");
            for p in list.iter().filter(|p| p.retained) {
                match OverlapRecord::compute(id, p.rank, &ex.question, &p.text, tokenizer) {
                    Ok(r) => overlap.push(r),
                    Err(e) => self.notice(
                        Stage::Report,
                        format!("{id} rank {}: no overlap record ({e})", p.rank),
                    ),
                }
            }
        }
        let ranks: BTreeSet<usize> = self.config.report_ranks.iter().copied().collect();
        let tables = distribution_tables(&overlap, &ranks, &self.config.filter);
        let curves = evaluations
            .iter()
            .map(|e| {
                (
                    e.model_id.clone(),
                    stratified_curves(&e.items, &self.config.filter.jaccard_bins),
                )
            })
            .collect();
        Controls {
            overlap,
            tables,
            curves,
        }
    }

    /// Runs every stage up to and including `stop`. The report stage writes
    /// the full bundle to the output directory.
    pub fn run_to(&self, stop: Stage) -> Result<RunOutput, PipelineError> {
        let mut out = RunOutput::default();
        let benchmark = self.ingest()?;
        if stop > Stage::Ingest {
            let sets = self.paraphrase(&benchmark)?;
            if stop > Stage::Paraphrase {
                let parses = self.import_parses(&benchmark, &sets)?;
                if stop > Stage::ParseImport {
                    let ranked = self.rank(&parses)?;
                    if stop > Stage::Rank {
                        let filtered = self.filter(&benchmark, &ranked)?;
                        if stop > Stage::Filter {
                            let evaluations = self.evaluate(&benchmark, &filtered)?;
                            if stop > Stage::Evaluate {
                                out.tau_reports = Some(self.stats(&evaluations));
                                out.controls =
                                    Some(self.controls(&benchmark, &filtered, &evaluations));
                            }
                            out.evaluations = Some(evaluations);
                        }
                        out.filtered = Some(filtered);
                    }
                    out.ranked = Some(ranked);
                }
                out.parses = Some(parses);
            }
            out.paraphrases = Some(sets);
        }
        out.benchmark = Some(benchmark);
        if stop == Stage::Report {
            self.write_bundle(&out)?;
            self.complete(Stage::Report);
        }
        out.completed = self.log.lock().unwrap().completed.clone();
        Ok(out)
    }

    /// Cosine distribution over a seeded sample of examples, for choosing
    /// the filter threshold.
    pub fn calibrate(&self, sample_size: usize) -> Result<CosineHistogram, PipelineError> {
        let run = self.run_to(Stage::Rank)?;
        let benchmark = run.benchmark.expect("ingested");
        let ranked = run.ranked.expect("ranked");
        let mut ids: Vec<&String> = ranked.keys().collect();
        if ids.is_empty() {
            return Err(PipelineError::Calibration(
                "no paraphrases available".into(),
            ));
        }
        let clamped = sample_size > ids.len();
        if clamped {
            self.notice(
                Stage::Filter,
                format!(
                    "calibration sample of {sample_size} clamped to the {} available examples",
                    ids.len()
                ),
            );
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.config.seed);
        ids.shuffle(&mut rng);
        ids.truncate(sample_size.min(ids.len()));
        let sample: BTreeMap<String, Vec<RankedParaphrase>> = ids
            .into_iter()
            .map(|id| (id.clone(), ranked[id].clone()))
            .collect();
        let any_threshold = FilterConfig {
            cosine_threshold: -1.0,
            ..self.config.filter.clone()
        };
        let mut cosines = Vec::new();
        for (id, result) in self.embed_cosines(&benchmark, &sample, &any_threshold) {
            match result {
                Ok(list) => cosines.extend(list.iter().filter_map(|p| p.cosine)),
                Err(e) => self.notice(Stage::Filter, format!("{id}: embedding failed ({e})")),
            }
        }
        if cosines.is_empty() {
            return Err(PipelineError::Calibration(
                "no paraphrase could be embedded".into(),
            ));
        }
        Ok(CosineHistogram {
            sampled_examples: sample.len(),
            total_pairs: cosines.len(),
            clamped,
            bins: cosine_histogram(&cosines),
        })
    }

    /// Writes `cosine_hist.csv` to the output directory.
    pub fn write_calibration(&self, hist: &CosineHistogram) -> Result<PathBuf, PipelineError> {
        let path = self.config.output_path().join("cosine_hist.csv");
        write_csv(&path, &hist.bins)?;
        Ok(path)
    }

    pub fn write_bundle(&self, run: &RunOutput) -> Result<(), PipelineError> {
        let dir = self.config.output_path();
        let benchmark = run.benchmark.as_ref().expect("bundle needs the benchmark");
        let empty = BTreeMap::new();
        let sets = run.paraphrases.as_ref().unwrap_or(&empty);
        let filtered = run.filtered.as_ref();
        let evaluations = run.evaluations.as_deref().unwrap_or(&[]);
        let gold_usable: BTreeSet<&str> = evaluations
            .iter()
            .flat_map(|e| {
                e.items
                    .iter()
                    .filter(|i| i.rank == 0)
                    .map(|i| i.example_id.as_str())
            })
            .collect();

        let mut rows = Vec::new();
        for ex in &benchmark.examples {
            let set = sets.get(&ex.id);
            let list = filtered.and_then(|f| f.get(&ex.id));
            let ranked = run.ranked.as_ref().and_then(|r| r.get(&ex.id));
            rows.push(ExampleRow {
                example_id: ex.id.clone(),
                db_id: ex.db_id.clone(),
                turns: ex.context_turns.len() + 1,
                candidates: set.map_or(0, |s| s.candidates.len()),
                shortfall: set.map_or(0, |s| s.shortfall),
                ranked: ranked.map_or(0, Vec::len),
                retained: list.map_or(0, |l| l.iter().filter(|p| p.retained).count()),
                evaluated: gold_usable.contains(ex.id.as_str()),
            });
        }
        write_csv(&dir.join("examples.csv"), &rows)?;

        let mut lines = String::new();
        if let Some(filtered) = filtered {
            for (id, list) in filtered {
                let mut list: Vec<&RankedParaphrase> = list.iter().collect();
                list.sort_by_key(|p| p.rank);
                for p in list {
                    let row = json!({
                        "example_id": id,
                        "rank": p.rank,
                        "generation_index": p.generation_index,
                        "text": p.text,
                        "ted": p.ted,
                        "ted_norm": p.ted_norm,
                        "cosine": p.cosine,
                        "retained": p.retained,
                    });
                    lines.push_str(&row.to_string());
                    lines.push('\n');
                }
            }
        }
        write_file(&dir.join("paraphrases.jsonl"), &lines)?;

        let records: Vec<&PairedEvalRecord> = evaluations.iter().flat_map(|e| &e.records).collect();
        write_csv(&dir.join("paired_eval.csv"), &records)?;
        let mut lines = String::new();
        for item in evaluations.iter().flat_map(|e| &e.items) {
            lines.push_str(&serde_json::to_string(item).unwrap());
            lines.push('\n');
        }
        write_file(&dir.join("item_outcomes.jsonl"), &lines)?;

        let reports = run.tau_reports.as_deref().unwrap_or(&[]);
        let tau_rows: Vec<TauRow> = reports.iter().map(TauRow::from).collect();
        write_csv(&dir.join("tau_reports.csv"), &tau_rows)?;
        let resample_rows: Vec<ResampleRow> = reports
            .iter()
            .flat_map(|r| {
                r.resamples
                    .iter()
                    .enumerate()
                    .map(move |(i, &tau)| ResampleRow {
                        model_id: r.model_id.clone(),
                        dataset: r.dataset.clone(),
                        rank_filter: r.rank_filter,
                        resample: i,
                        tau,
                    })
            })
            .collect();
        write_csv(&dir.join("tau_resamples.csv"), &resample_rows)?;

        if let Some(controls) = &run.controls {
            write_csv(&dir.join("overlap.csv"), &controls.overlap)?;
            write_csv(
                &dir.join("length_hist.csv"),
                &controls.tables.length_rows().collect::<Vec<_>>(),
            )?;
            write_csv(
                &dir.join("jaccard_hist.csv"),
                &controls.tables.jaccard_rows().collect::<Vec<_>>(),
            )?;
            let mut curve_rows = Vec::new();
            let mut curve_taus = Vec::new();
            for (model_id, curves) in &controls.curves {
                for stratum in std::iter::once(&curves.unfiltered).chain(&curves.bins) {
                    let (bin_lo, bin_hi) = (stratum.bin.map(|b| b.lo), stratum.bin.map(|b| b.hi));
                    for p in &stratum.points {
                        curve_rows.push(CurveRow {
                            model_id: model_id.clone(),
                            bin_lo,
                            bin_hi,
                            rank: p.rank,
                            n: p.n,
                            accuracy: p.accuracy,
                        });
                    }
                    curve_taus.push(StratumTauRow {
                        model_id: model_id.clone(),
                        bin_lo,
                        bin_hi,
                        ranks: stratum.points.len(),
                        tau: stratum.tau.map(|t| t.tau),
                        n_c: stratum.tau.map(|t| t.n_c),
                        n_d: stratum.tau.map(|t| t.n_d),
                    });
                }
                for b in &curves.omitted_bins {
                    curve_taus.push(StratumTauRow {
                        model_id: model_id.clone(),
                        bin_lo: Some(b.lo),
                        bin_hi: Some(b.hi),
                        ranks: 0,
                        tau: None,
                        n_c: None,
                        n_d: None,
                    });
                }
            }
            write_csv(&dir.join("stratified_curves.csv"), &curve_rows)?;
            write_csv(&dir.join("stratified_tau.csv"), &curve_taus)?;
        }

        let mut outcome_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for eval in evaluations {
            let counts = outcome_counts.entry(eval.model_id.clone()).or_default();
            for item in &eval.items {
                let key = match &item.error_class {
                    Some(class) => format!("{}:{class}", outcome_name(item.outcome)),
                    None => outcome_name(item.outcome).to_string(),
                };
                *counts.entry(key).or_default() += 1;
            }
        }
        let summary = json!({
            "completed_stages": self.log.lock().unwrap().completed.iter().map(|s| s.name()).collect::<Vec<_>>(),
            "examples": benchmark.examples.len(),
            "skipped_records": benchmark.skipped.len(),
            "paraphrase_sets": sets.len(),
            "shortfall_total": sets.values().map(|s| s.shortfall).sum::<usize>(),
            "parsed_sets": run.parses.as_ref().map_or(0, |p| p.sets.len()),
            "outcome_counts": outcome_counts,
            "notices": self.notices(),
        });
        write_file(&dir.join("run_summary.json"), &pretty(&summary))?;
        write_file(&dir.join("manifest.json"), &pretty(&self.manifest(run)))?;
        Ok(())
    }

    /// Config snapshot, seed, versions and the cache keys behind the bundle.
    /// Output and cache locations are left out so bundles compare across
    /// machines.
    pub fn manifest(&self, run: &RunOutput) -> serde_json::Value {
        let mut config = serde_json::to_value(&self.config).expect("config serializes");
        if let Some(obj) = config.as_object_mut() {
            obj.remove("cache_dir");
            obj.remove("output_dir");
        }
        json!({
            "tool": { "name": "paraprobe", "version": env!("CARGO_PKG_VERSION") },
            "config": config,
            "seed": self.config.seed,
            "bootstrap_resamples": self.config.bootstrap_resamples,
            "benchmark": run.benchmark.as_ref().map(|b| json!({
                "name": b.name,
                "release_tag": b.release_tag,
                "format": b.format,
            })),
            "prompt_templates": {
                "paraphrase_sha256": digest(PARAPHRASE_TEMPLATE),
                "nl2sql_sha256": digest(NL2SQL_TEMPLATE),
            },
            "parser_versions": run.parses.as_ref().map(|p| &p.parser_versions),
            "cache_keys": self.cache.touched_keys(),
        })
    }
}

#[derive(Debug, Error)]
enum GenStageError {
    #[error(transparent)]
    Gen(GenError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

fn take_tree(
    found: &mut BTreeMap<usize, SentenceBlock>,
    pos: usize,
    expected: &str,
) -> Result<DepTree, String> {
    let block = found
        .remove(&pos)
        .ok_or_else(|| "has no parse".to_string())?;
    if let Some(text) = block.text() {
        if text.trim() != expected.trim() {
            return Err(format!("parse text {text:?} does not match"));
        }
    }
    block.tree.map_err(|e| format!("parse is invalid ({e})"))
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Correct => "correct",
        Outcome::Incorrect => "incorrect",
        Outcome::PredictionError => "prediction_error",
        Outcome::ExecutionError => "execution_error",
    }
}

#[derive(Serialize)]
struct ExampleRow {
    example_id: String,
    db_id: String,
    turns: usize,
    candidates: usize,
    shortfall: usize,
    ranked: usize,
    retained: usize,
    evaluated: bool,
}

#[derive(Serialize)]
struct TauRow {
    model_id: String,
    dataset: String,
    rank_filter: RankFilter,
    tau: f64,
    ci_lo: f64,
    ci_hi: f64,
    n: usize,
    n_c: u64,
    n_d: u64,
    b: usize,
    seed: u64,
    estimate_outside_ci: bool,
}

impl From<&TauReport> for TauRow {
    fn from(r: &TauReport) -> Self {
        Self {
            model_id: r.model_id.clone(),
            dataset: r.dataset.clone(),
            rank_filter: r.rank_filter,
            tau: r.estimate.tau,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            n: r.estimate.n,
            n_c: r.estimate.n_c,
            n_d: r.estimate.n_d,
            b: r.b,
            seed: r.seed,
            estimate_outside_ci: r.estimate_outside_ci(),
        }
    }
}

#[derive(Serialize)]
struct ResampleRow {
    model_id: String,
    dataset: String,
    rank_filter: RankFilter,
    resample: usize,
    tau: f64,
}

#[derive(Serialize)]
struct CurveRow {
    model_id: String,
    bin_lo: Option<f64>,
    bin_hi: Option<f64>,
    rank: usize,
    n: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct StratumTauRow {
    model_id: String,
    bin_lo: Option<f64>,
    bin_hi: Option<f64>,
    ranks: usize,
    tau: Option<f64>,
    n_c: Option<u64>,
    n_d: Option<u64>,
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let fail = |e: &dyn fmt::Display| PipelineError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| fail(&e))?;
    }
    let bytes = w.into_inner().map_err(|e| fail(&e))?;
    write_file(
        path,
        &String::from_utf8(bytes).expect("csv output is UTF-8"),
    )
}

/// One config per requested generation temperature, each writing to its
/// own `t<temperature>` subdirectory of the output directory.
pub fn temperature_variants(config: &RunConfig, temperatures: &[f64]) -> Vec<RunConfig> {
    temperatures
        .iter()
        .map(|&t| {
            let mut c = config.clone();
            c.generation.temperature = t;
            c.output_dir = Path::new(&config.output_dir)
                .join(format!("t{t}"))
                .to_string_lossy()
                .into_owned();
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_histogram_conserves_mass() {
        let values: Vec<f64> = (0..100).map(|i| -1.0 + i as f64 * 0.02).collect();
        let bins = cosine_histogram(&values);
        assert_eq!(bins.len(), COSINE_BINS);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 100);
        assert_eq!((bins[0].bin_lo, bins[19].bin_hi), (-1.0, 1.0));
        let top = cosine_histogram(&[1.0, 1.0, 1.0]);
        assert_eq!(top[COSINE_BINS - 1].count, 3);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("plot".parse::<Stage>().is_err());
    }
}
