//! NL2SQL prediction, execution scoring and paired accuracy per rank.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ChatRequest, ClientError, TextGenClient};
use crate::ingest::{Benchmark, Example};
use crate::paragen::{dialogue_context_block, fill_template};
use crate::rank::RankedParaphrase;
use crate::semantic::{jaccard, TokenizerConfig};
use crate::sqlexec::{
    execute_sql, has_order_by, results_equivalent, ExecError, ExecLimits, ResultSet,
};

pub const NL2SQL_TEMPLATE: &str = include_str!("../assets/nl2sql_prompt.txt");

#[derive(Debug, Clone, Error)]
pub enum PredictError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("model returned an empty reply")]
    EmptyReply,
}

impl PredictError {
    pub fn class(&self) -> &'static str {
        match self {
            PredictError::Client(_) => "client_error",
            PredictError::EmptyReply => "empty_reply",
        }
    }
}

/// Contents of the first fenced code block, or the whole reply trimmed.
pub fn extract_sql(reply: &str) -> Result<String, PredictError> {
    let sql = match fenced_block(reply) {
        Some(block) => block.trim(),
        None => reply.trim(),
    };
    if sql.is_empty() {
        return Err(PredictError::EmptyReply);
    }
    Ok(sql.to_string())
}

fn fenced_block(reply: &str) -> Option<&str> {
    let open = reply.find("```")?;
    let after = &reply[open + 3..];
    // skip the info string (e.g. `sql`) up to the end of the fence line
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    let close = body.find("```").unwrap_or(body.len());
    Some(&body[..close])
}

pub fn build_nl2sql_prompt(question: &str, context_turns: &[String], schema: &str) -> String {
    let context = if context_turns.is_empty() {
        String::new()
    } else {
        format!("{}\n", dialogue_context_block(context_turns))
    };
    fill_template(
        NL2SQL_TEMPLATE,
        &[
            ("schema_definitions", schema),
            ("dialogue_context", &context),
            ("question", question),
        ],
    )
}

pub fn predict_sql(
    question: &str,
    context_turns: &[String],
    schema: &str,
    client: &dyn TextGenClient,
    temperature: f64,
) -> Result<String, PredictError> {
    let request = ChatRequest::user(
        build_nl2sql_prompt(question, context_turns, schema),
        temperature,
    );
    extract_sql(&client.complete(&request)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Incorrect,
    PredictionError,
    ExecutionError,
}

/// Audit record for one scored question; `rank` 0 is the original question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub model_id: String,
    pub example_id: String,
    pub rank: usize,
    pub question: String,
    pub predicted_sql: Option<String>,
    pub outcome: Outcome,
    pub error_class: Option<String>,
    pub correct: bool,
    /// Token overlap with the original question; paraphrase items only.
    pub jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedEvalRecord {
    pub model_id: String,
    pub dataset: String,
    pub rank: usize,
    pub n_pairs: usize,
    pub acc_orig: f64,
    pub acc_para: f64,
    pub delta: f64,
}

impl PairedEvalRecord {
    pub fn from_counts(
        model_id: &str,
        dataset: &str,
        rank: usize,
        n_pairs: usize,
        orig: usize,
        para: usize,
    ) -> Self {
        assert!(n_pairs > 0, "paired record needs at least one pair");
        let acc_orig = orig as f64 / n_pairs as f64;
        let acc_para = para as f64 / n_pairs as f64;
        Self {
            model_id: model_id.to_string(),
            dataset: dataset.to_string(),
            rank,
            n_pairs,
            acc_orig,
            acc_para,
            delta: acc_para - acc_orig,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldResult {
    pub result: ResultSet,
    pub ordered: bool,
}

/// Gold results by example id; examples whose gold query fails hold the error
/// and are unusable.
pub type GoldTable = BTreeMap<String, Result<GoldResult, ExecError>>;

pub fn execute_gold(benchmark: &Benchmark, limits: &ExecLimits) -> GoldTable {
    benchmark
        .examples
        .par_iter()
        .map(|ex| {
            let result = execute_sql(
                &benchmark.db_path(&ex.db_id),
                &ex.gold_sql,
                limits.timeout(),
                limits.row_cap,
            )
            .map(|result| GoldResult {
                result,
                ordered: has_order_by(&ex.gold_sql),
            });
            if let Err(e) = &result {
                log::warn!("{}: gold SQL fails ({e}); example unusable", ex.id);
            }
            (ex.id.clone(), result)
        })
        .collect()
}

/// Executes a prediction and compares it with the gold result.
pub fn score_prediction(
    benchmark: &Benchmark,
    example: &Example,
    gold: &GoldResult,
    predicted: &Result<String, PredictError>,
    limits: &ExecLimits,
) -> (Outcome, Option<String>) {
    let sql = match predicted {
        Ok(sql) => sql,
        Err(e) => return (Outcome::PredictionError, Some(e.class().to_string())),
    };
    match execute_sql(
        &benchmark.db_path(&example.db_id),
        sql,
        limits.timeout(),
        limits.row_cap,
    ) {
        Ok(rows) if results_equivalent(&gold.result, &rows, gold.ordered) => {
            (Outcome::Correct, None)
        }
        Ok(_) => (Outcome::Incorrect, None),
        Err(e) => (Outcome::ExecutionError, Some(e.class().to_string())),
    }
}

/// One rank's record with the id sets behind each accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct RankEvaluation {
    pub record: PairedEvalRecord,
    pub orig_ids: Vec<String>,
    pub para_ids: Vec<String>,
    /// Paraphrase items at this rank, in example-id order.
    pub items: Vec<ItemOutcome>,
}

/// Scores one model over the ranks of a benchmark. Original-question outcomes
/// are computed once per example and reused across ranks.
pub struct Evaluator<'a> {
    benchmark: &'a Benchmark,
    gold: &'a GoldTable,
    client: &'a dyn TextGenClient,
    temperature: f64,
    limits: ExecLimits,
    tokenizer: TokenizerConfig,
    originals: Mutex<HashMap<String, ItemOutcome>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        benchmark: &'a Benchmark,
        gold: &'a GoldTable,
        client: &'a dyn TextGenClient,
        temperature: f64,
        limits: ExecLimits,
        tokenizer: TokenizerConfig,
    ) -> Self {
        Self {
            benchmark,
            gold,
            client,
            temperature,
            limits,
            tokenizer,
            originals: Mutex::new(HashMap::new()),
        }
    }

    pub fn model_id(&self) -> &str {
        self.client.model_id()
    }

    fn usable(&self, id: &str) -> Option<(&'a Example, &'a GoldResult)> {
        let gold = self.gold.get(id)?.as_ref().ok()?;
        Some((self.benchmark.example(id)?, gold))
    }

    fn score(
        &self,
        example: &Example,
        gold: &GoldResult,
        question: &str,
        rank: usize,
    ) -> ItemOutcome {
        let predicted = predict_sql(
            question,
            &example.context_turns,
            &example.schema_text,
            self.client,
            self.temperature,
        );
        if let Err(e) = &predicted {
            log::warn!("{} rank {rank}: prediction failed: {e}", example.id);
        }
        let (outcome, error_class) =
            score_prediction(self.benchmark, example, gold, &predicted, &self.limits);
        let jaccard = (rank > 0)
            .then(|| jaccard(&example.question, question, &self.tokenizer).ok())
            .flatten();
        ItemOutcome {
            model_id: self.model_id().to_string(),
            example_id: example.id.clone(),
            rank,
            question: question.to_string(),
            predicted_sql: predicted.ok(),
            outcome,
            error_class,
            correct: outcome == Outcome::Correct,
            jaccard,
        }
    }

    fn ensure_originals(&self, ids: &[&str]) {
        let missing: Vec<&str> = {
            let memo = self.originals.lock().unwrap();
            ids.iter()
                .copied()
                .filter(|id| !memo.contains_key(*id))
                .collect()
        };
        let fresh: Vec<ItemOutcome> = missing
            .par_iter()
            .filter_map(|id| self.usable(id))
            .map(|(ex, gold)| self.score(ex, gold, &ex.question, 0))
            .collect();
        let mut memo = self.originals.lock().unwrap();
        for item in fresh {
            memo.insert(item.example_id.clone(), item);
        }
    }

    /// Original-question outcomes scored so far, in example-id order.
    pub fn original_outcomes(&self) -> Vec<ItemOutcome> {
        let memo = self.originals.lock().unwrap();
        let mut items: Vec<ItemOutcome> = memo.values().cloned().collect();
        items.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        items
    }

    /// Paired accuracy over the usable examples that retain a paraphrase of
    /// `rank`. `None` (with a notice) when no example qualifies.
    pub fn evaluate_rank(
        &self,
        dataset: &str,
        paraphrases: &BTreeMap<String, Vec<RankedParaphrase>>,
        rank: usize,
    ) -> Option<RankEvaluation> {
        assert!(rank >= 1, "ranks start at 1");
        let subset: Vec<(&str, &RankedParaphrase)> = paraphrases
            .iter()
            .filter(|(id, _)| self.usable(id).is_some())
            .filter_map(|(id, ranked)| {
                ranked
                    .iter()
                    .find(|p| p.rank == rank && p.retained)
                    .map(|p| (id.as_str(), p))
            })
            .collect();
        if subset.is_empty() {
            log::info!(
                "{}: no example retains a paraphrase of rank {rank}; skipped",
                self.model_id()
            );
            return None;
        }
        let ids: Vec<&str> = subset.iter().map(|(id, _)| *id).collect();
        self.ensure_originals(&ids);

        let items: Vec<ItemOutcome> = subset
            .par_iter()
            .map(|(id, p)| {
                let (ex, gold) = self.usable(id).expect("subset holds usable examples");
                self.score(ex, gold, &p.text, rank)
            })
            .collect();

        let memo = self.originals.lock().unwrap();
        let orig: Vec<&ItemOutcome> = ids.iter().map(|id| &memo[*id]).collect();
        let orig_ids: Vec<String> = orig.iter().map(|i| i.example_id.clone()).collect();
        let para_ids: Vec<String> = items.iter().map(|i| i.example_id.clone()).collect();
        debug_assert_eq!(orig_ids, para_ids);
        let record = PairedEvalRecord::from_counts(
            self.model_id(),
            dataset,
            rank,
            ids.len(),
            orig.iter().filter(|i| i.correct).count(),
            items.iter().filter(|i| i.correct).count(),
        );
        Some(RankEvaluation {
            record,
            orig_ids,
            para_ids,
            items,
        })
    }
}
