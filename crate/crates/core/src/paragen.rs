//! Schema-conditioned paraphrase generation.

use std::collections::HashSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::clients::{ChatRequest, ClientError, TextGenClient};
use crate::ingest::Example;

/// Generation prompt with `{num_queries}`, `{schema_definitions}` and
/// `{sql_query}` placeholders.
pub const PARAPHRASE_TEMPLATE: &str = include_str!("../assets/paraphrase_prompt.txt");

#[derive(Debug, Error)]
pub enum GenError {
    #[error("no numbered items in model output: {raw:?}")]
    Parse { raw: String },
    #[error("generation for {example_id} failed after {attempts} attempt(s): {last}")]
    Exhausted {
        example_id: String,
        attempts: usize,
        last: String,
    },
    #[error("invalid generation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "default_num_queries")]
    pub num_queries: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_num_queries() -> usize {
    10
}

fn default_temperature() -> f64 {
    1.0
}

fn default_attempts() -> usize {
    3
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_queries: default_num_queries(),
            temperature: default_temperature(),
            max_attempts: default_attempts(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.num_queries == 0 {
            return Err(GenError::Config("num_queries must be at least 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(GenError::Config("max_attempts must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GenError::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseSet {
    pub example_id: String,
    /// Distinct candidates in generation order.
    pub candidates: Vec<String>,
    pub generator_model: String,
    /// Requested minus produced.
    pub shortfall: usize,
}

/// Replaces `{name}` placeholders in one pass, so placeholder-like text inside
/// substituted values is left alone.
pub(crate) fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out =
        String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in values {
            let key = format!("{{{name}}}");
            if tail.starts_with(&key) {
                out.push_str(value);
                rest = &tail[key.len()..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

pub(crate) fn dialogue_context_block(turns: &[String]) -> String {
    let mut block = String::from("Dialogue context:\n");
    for t in turns {
        block.push_str(t);
        block.push('\n');
    }
    block
}

/// Fills the paraphrase prompt for one example. For dialogues the earlier
/// turns go in a `Dialogue context:` block ahead of the schema.
pub fn build_prompt(example: &Example, config: &GenConfig) -> String {
    let n = config.num_queries.to_string();
    let schema = if example.context_turns.is_empty() {
        example.schema_text.clone()
    } else {
        format!(
            "{}\n{}",
            dialogue_context_block(&example.context_turns),
            example.schema_text
        )
    };
    fill_template(
        PARAPHRASE_TEMPLATE,
        &[
            ("num_queries", &n),
            ("schema_definitions", &schema),
            ("sql_query", &example.gold_sql),
        ],
    )
}

static ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(\d+)[.)]\s*(.*?)\s*$").unwrap());

/// Extracts `k. question` lines for k = 1, 2, ... in order, stopping at the
/// first gap or after `expected` items. Anything after the list is ignored.
pub fn parse_numbered_list(raw: &str, expected: usize) -> Result<Vec<String>, GenError> {
    let mut out = Vec::new();
    for line in raw.lines() {
        if out.len() == expected {
            break;
        }
        let Some(caps) = ITEM.captures(line) else {
            if !out.is_empty() && !line.trim().is_empty() {
                break;
            }
            continue;
        };
        let k: usize = caps[1].parse().unwrap_or(0);
        if k != out.len() + 1 {
            if out.is_empty() {
                continue;
            }
            break;
        }
        let text = caps[2].trim();
        if text.is_empty() {
            break;
        }
        out.push(text.to_string());
    }
    if out.is_empty() {
        return Err(GenError::Parse {
            raw: raw.to_string(),
        });
    }
    Ok(out)
}

/// Inverse of [`parse_numbered_list`] for well-formed lists.
pub fn render_numbered_list(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {q}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn dedup_key(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Requests `num_queries` paraphrases, retrying on transport failures,
/// unparsable output and shortfalls. Distinct new candidates from later
/// attempts are appended after earlier ones.
pub fn generate_paraphrases(
    example: &Example,
    client: &dyn TextGenClient,
    config: &GenConfig,
) -> Result<ParaphraseSet, GenError> {
    let request = ChatRequest::user(build_prompt(example, config), config.temperature);
    let mut seen: HashSet<String> = HashSet::new();
    let mut candidates = Vec::new();
    let mut last_error: Option<String> = None;
    let mut attempts = 0;

    while attempts < config.max_attempts && candidates.len() < config.num_queries {
        attempts += 1;
        let reply = match client.complete(&request) {
            Ok(r) => r,
            Err(
                e @ (ClientError::Transport(_) | ClientError::Http { .. } | ClientError::Decode(_)),
            ) => {
                log::warn!("{}: generation attempt {attempts} failed: {e}", example.id);
                last_error = Some(e.to_string());
                continue;
            }
            Err(e) => {
                return Err(GenError::Exhausted {
                    example_id: example.id.clone(),
                    attempts,
                    last: e.to_string(),
                });
            }
        };
        match parse_numbered_list(&reply, config.num_queries) {
            Ok(items) => {
                for item in items {
                    if candidates.len() == config.num_queries {
                        break;
                    }
                    if seen.insert(dedup_key(&item)) {
                        candidates.push(item);
                    }
                }
            }
            Err(e) => {
                log::warn!("{}: attempt {attempts}: {e}", example.id);
                last_error = Some(e.to_string());
            }
        }
    }

    if candidates.is_empty() {
        return Err(GenError::Exhausted {
            example_id: example.id.clone(),
            attempts,
            last: last_error.unwrap_or_else(|| "no candidates".into()),
        });
    }
    Ok(ParaphraseSet {
        example_id: example.id.clone(),
        shortfall: config.num_queries - candidates.len(),
        candidates,
        generator_model: client.model_id().to_string(),
    })
}
