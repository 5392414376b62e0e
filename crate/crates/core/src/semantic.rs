//! Embedding-based paraphrase filtering and the lexical control statistics
//! (token-set Jaccard overlap and length distributions).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, EmbedClient};
use crate::rank::RankedParaphrase;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("text has no tokens: {0:?}")]
    NoTokens(String),
    #[error("embedding client returned {got} vectors for {expected} texts")]
    EmbeddingCount { expected: usize, got: usize },
    #[error("embedding request failed: {0}")]
    Client(#[from] ClientError),
    #[error("invalid filter config: {0}")]
    Config(String),
}

/// A half-open interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
}

impl Bin {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }
}

/// Tokenizer used for Jaccard overlap and token lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Paraphrases with cosine similarity at or above this are retained.
    /// There is deliberately no default; use `calibrate` to pick one.
    pub cosine_threshold: f64,
    #[serde(default = "default_jaccard_bins")]
    pub jaccard_bins: Vec<Bin>,
    /// Number of equal-width bins for the token length histograms.
    #[serde(default = "default_length_bins")]
    pub length_bins: usize,
    /// Number of equal-width bins over `[0, 1]` for the Jaccard histograms.
    #[serde(default = "default_jaccard_hist_bins")]
    pub jaccard_hist_bins: usize,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
}

fn default_jaccard_bins() -> Vec<Bin> {
    vec![Bin::new(0.0, 0.2), Bin::new(0.2, 0.4)]
}

fn default_length_bins() -> usize {
    10
}

fn default_jaccard_hist_bins() -> usize {
    10
}

impl FilterConfig {
    pub fn new(cosine_threshold: f64) -> Self {
        Self {
            cosine_threshold,
            jaccard_bins: default_jaccard_bins(),
            length_bins: default_length_bins(),
            jaccard_hist_bins: default_jaccard_hist_bins(),
            tokenizer: TokenizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SemanticError> {
        if !(-1.0..=1.0).contains(&self.cosine_threshold) {
            return Err(SemanticError::Config(format!(
                "cosine_threshold {} outside [-1, 1]",
                self.cosine_threshold
            )));
        }
        for (i, b) in self.jaccard_bins.iter().enumerate() {
            if b.lo.partial_cmp(&b.hi) != Some(std::cmp::Ordering::Less) {
                return Err(SemanticError::Config(format!(
                    "jaccard bin {i} is empty or inverted"
                )));
            }
            if i > 0 && self.jaccard_bins[i - 1].hi > b.lo {
                return Err(SemanticError::Config(format!(
                    "jaccard bin {i} overlaps or is out of order"
                )));
            }
        }
        if self.length_bins == 0 || self.jaccard_hist_bins == 0 {
            return Err(SemanticError::Config(
                "histogram bin counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SemanticError> {
    if u.len() != v.len() {
        return Err(SemanticError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>();
    let nv = v.iter().map(|a| a * a).sum::<f64>();
    if nu == 0.0 || nv == 0.0 {
        return Err(SemanticError::ZeroVector);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Fills in cosine similarity to the original and the `retained` flag.
/// Ranks are left alone, so a filtered-out paraphrase leaves a gap.
pub fn apply_cosine_filter(
    mut ranked: Vec<RankedParaphrase>,
    original_text: &str,
    client: &dyn EmbedClient,
    config: &FilterConfig,
) -> Result<Vec<RankedParaphrase>, SemanticError> {
    let mut texts = Vec::with_capacity(ranked.len() + 1);
    texts.push(original_text.to_string());
    texts.extend(ranked.iter().map(|p| p.text.clone()));
    let vectors = client.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(SemanticError::EmbeddingCount {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    let (original, rest) = vectors.split_first().expect("at least the original");
    for (p, v) in ranked.iter_mut().zip(rest) {
        let c = cosine_similarity(original, v)?;
        p.cosine = Some(c);
        p.retained = c >= config.cosine_threshold;
    }
    Ok(ranked)
}

/// Applies a threshold to paraphrases whose cosine has already been filled in.
pub fn retain_above(ranked: &mut [RankedParaphrase], threshold: f64) {
    for p in ranked {
        p.retained = p.cosine.is_some_and(|c| c >= threshold);
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                ..='\u{201F}'
                    | '\u{2026}'
                    | '\u{2013}'
                    | '\u{2014}'
                    | '\u{00AB}'
                    | '\u{00BB}'
                    | '\u{00BF}'
                    | '\u{00A1}'
        )
}

/// Splits on Unicode whitespace, lowercases and strips leading and trailing
/// punctuation from each token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let tok = if config.strip_punctuation {
                raw.trim_matches(is_punctuation)
            } else {
                raw
            };
            if tok.is_empty() {
                return None;
            }
            Some(if config.lowercase {
                tok.to_lowercase()
            } else {
                tok.to_string()
            })
        })
        .collect()
}

/// Set Jaccard overlap of the two token sets.
pub fn jaccard(a: &str, b: &str, config: &TokenizerConfig) -> Result<f64, SemanticError> {
    let sa: BTreeSet<String> = tokenize(a, config).into_iter().collect();
    let sb: BTreeSet<String> = tokenize(b, config).into_iter().collect();
    if sa.is_empty() {
        return Err(SemanticError::NoTokens(a.to_string()));
    }
    if sb.is_empty() {
        return Err(SemanticError::NoTokens(b.to_string()));
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub example_id: String,
    pub rank: usize,
    pub jaccard: f64,
    pub orig_len: usize,
    pub para_len: usize,
}

impl OverlapRecord {
    pub fn compute(
        example_id: &str,
        rank: usize,
        original: &str,
        paraphrase: &str,
        config: &TokenizerConfig,
    ) -> Result<Self, SemanticError> {
        Ok(Self {
            example_id: example_id.to_string(),
            rank,
            jaccard: jaccard(original, paraphrase, config)?,
            orig_len: tokenize(original, config).len(),
            para_len: tokenize(paraphrase, config).len(),
        })
    }
}

/// One histogram row, written as `rank,bin_lo,bin_hi,count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub rank: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistributionTables {
    /// Paraphrase token lengths, keyed by rank.
    pub lengths: BTreeMap<usize, Vec<HistogramRow>>,
    /// Jaccard overlap with the original, keyed by rank.
    pub jaccard: BTreeMap<usize, Vec<HistogramRow>>,
}

impl DistributionTables {
    pub fn length_rows(&self) -> impl Iterator<Item = &HistogramRow> {
        self.lengths.values().flatten()
    }

    pub fn jaccard_rows(&self) -> impl Iterator<Item = &HistogramRow> {
        self.jaccard.values().flatten()
    }
}

/// Binned length and overlap distributions for the selected ranks.
///
/// Length bins have integer edges and are shared across ranks (computed from
/// the range over all records); Jaccard bins split `[0, 1]` evenly with the
/// last bin closed. Ranks with no records produce all-zero tables.
pub fn distribution_tables(
    records: &[OverlapRecord],
    ranks: &BTreeSet<usize>,
    config: &FilterConfig,
) -> DistributionTables {
    let mut out = DistributionTables::default();
    if ranks.is_empty() || records.is_empty() {
        return out;
    }
    let min_len = records.iter().map(|r| r.para_len).min().unwrap_or(0);
    let max_len = records.iter().map(|r| r.para_len).max().unwrap_or(0);
    let span = max_len - min_len + 1;
    let width = span.div_ceil(config.length_bins.max(1));
    let n_len_bins = span.div_ceil(width);

    let jbins = config.jaccard_hist_bins.max(1);
    for &rank in ranks {
        let mut len_counts = vec![0usize; n_len_bins];
        let mut j_counts = vec![0usize; jbins];
        for r in records.iter().filter(|r| r.rank == rank) {
            len_counts[(r.para_len - min_len) / width] += 1;
            let idx = ((r.jaccard * jbins as f64).floor() as usize).min(jbins - 1);
            j_counts[idx] += 1;
        }
        out.lengths.insert(
            rank,
            len_counts
                .into_iter()
                .enumerate()
                .map(|(i, count)| HistogramRow {
                    rank,
                    bin_lo: (min_len + i * width) as f64,
                    bin_hi: (min_len + (i + 1) * width) as f64,
                    count,
                })
                .collect(),
        );
        out.jaccard.insert(
            rank,
            j_counts
                .into_iter()
                .enumerate()
                .map(|(i, count)| HistogramRow {
                    rank,
                    bin_lo: i as f64 / jbins as f64,
                    bin_hi: (i + 1) as f64 / jbins as f64,
                    count,
                })
                .collect(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::FixtureEmbed;
    use crate::tree::{DepNode, DepTree};

    fn tok() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(SemanticError::DimensionMismatch(1, 2))
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(SemanticError::ZeroVector)
        ));
    }

    #[test]
    fn tokenizer_strips_edges_only() {
        let toks = tokenize("How many \"Singers\"?  It's   fine.", &tok());
        assert_eq!(toks, vec!["how", "many", "singers", "it's", "fine"]);
        assert!(tokenize(" ?! ", &tok()).is_empty());
    }

    #[test]
    fn jaccard_cases() {
        let a = "How many singers do we have?";
        let b = "How many singers are recorded in the database?";
        assert!((jaccard(a, b, &tok()).unwrap() - 3.0 / 11.0).abs() < 1e-12);
        assert_eq!(jaccard(a, a, &tok()).unwrap(), 1.0);
        assert_eq!(jaccard("alpha beta", "gamma delta", &tok()).unwrap(), 0.0);
        assert!(matches!(
            jaccard("...", "x", &tok()),
            Err(SemanticError::NoTokens(_))
        ));
    }

    fn paraphrase(text: &str, rank: usize) -> RankedParaphrase {
        let tree = DepTree::new(
            vec![DepNode {
                token_index: 1,
                form: text.into(),
                lemma: None,
                upos: "X".into(),
                deprel: "root".into(),
            }],
            &[0],
        )
        .unwrap();
        RankedParaphrase {
            text: text.into(),
            tree,
            generation_index: rank - 1,
            ted: rank,
            ted_norm: 0.0,
            rank,
            cosine: None,
            retained: true,
        }
    }

    fn fixture_embed() -> FixtureEmbed {
        // cosines against "orig": p1 = 0.9, p2 = 0.7, p3 = 0.95 (unit vectors).
        let unit = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        FixtureEmbed::new(
            "fixture",
            [
                ("orig".to_string(), vec![1.0, 0.0]),
                ("p1".to_string(), unit(0.9)),
                ("p2".to_string(), unit(0.7)),
                ("p3".to_string(), unit(0.95)),
            ]
            .into_iter()
            .collect(),
        )
    }

    #[test]
    fn filter_keeps_ranks_and_leaves_gaps() {
        let ranked = vec![
            paraphrase("p1", 1),
            paraphrase("p2", 2),
            paraphrase("p3", 3),
        ];
        let out =
            apply_cosine_filter(ranked, "orig", &fixture_embed(), &FilterConfig::new(0.8)).unwrap();
        let flags: Vec<bool> = out.iter().map(|p| p.retained).collect();
        assert_eq!(flags, vec![true, false, true]);
        assert_eq!(
            out.iter().map(|p| p.rank).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert!((out[1].cosine.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn filter_threshold_extremes() {
        let ranked = || {
            vec![
                paraphrase("p1", 1),
                paraphrase("p2", 2),
                paraphrase("p3", 3),
            ]
        };
        let all = apply_cosine_filter(ranked(), "orig", &fixture_embed(), &FilterConfig::new(-1.0))
            .unwrap();
        assert!(all.iter().all(|p| p.retained));
        let none = apply_cosine_filter(ranked(), "orig", &fixture_embed(), &FilterConfig::new(1.0))
            .unwrap();
        assert!(none.iter().all(|p| !p.retained));
    }

    #[test]
    fn filter_propagates_client_errors() {
        let ranked = vec![paraphrase("unknown", 1)];
        let err = apply_cosine_filter(ranked, "orig", &fixture_embed(), &FilterConfig::new(0.0));
        assert!(matches!(err, Err(SemanticError::Client(_))));
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::new(0.5).validate().is_ok());
        assert!(FilterConfig::new(1.5).validate().is_err());
        let mut c = FilterConfig::new(0.5);
        c.jaccard_bins = vec![Bin::new(0.0, 0.3), Bin::new(0.2, 0.4)];
        assert!(c.validate().is_err());
    }

    fn record(rank: usize, para_len: usize, jaccard: f64) -> OverlapRecord {
        OverlapRecord {
            example_id: "e".into(),
            rank,
            jaccard,
            orig_len: 5,
            para_len,
        }
    }

    #[test]
    fn degenerate_length_distribution_has_one_nonzero_bin() {
        let records = vec![record(1, 7, 0.1), record(1, 7, 0.3), record(1, 7, 1.0)];
        let t = distribution_tables(&records, &BTreeSet::from([1]), &FilterConfig::new(0.0));
        let nonzero: Vec<_> = t.lengths[&1].iter().filter(|r| r.count > 0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(
            (nonzero[0].bin_lo, nonzero[0].bin_hi, nonzero[0].count),
            (7.0, 8.0, 3)
        );
        let j: Vec<usize> = t.jaccard[&1].iter().map(|r| r.count).collect();
        assert_eq!(j, vec![0, 1, 0, 1, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn tables_keyed_by_selected_ranks() {
        let records: Vec<_> = (1..=10)
            .flat_map(|r| [record(r, 4 + r, 0.5), record(r, 6, 0.2)])
            .collect();
        let t = distribution_tables(
            &records,
            &BTreeSet::from([1, 5, 10]),
            &FilterConfig::new(0.0),
        );
        assert_eq!(
            t.lengths.keys().copied().collect::<Vec<_>>(),
            vec![1, 5, 10]
        );
        assert_eq!(
            t.jaccard.keys().copied().collect::<Vec<_>>(),
            vec![1, 5, 10]
        );
        for rows in t.lengths.values() {
            assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 2);
        }
        assert!(
            distribution_tables(&records, &BTreeSet::new(), &FilterConfig::new(0.0))
                .lengths
                .is_empty()
        );
    }
}
