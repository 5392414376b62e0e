//! Syntactic ranking of paraphrase candidates.

use serde::{Deserialize, Serialize};

use crate::ted::{normalized_ted, ted};
use crate::tree::DepTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedParaphrase {
    pub text: String,
    pub tree: DepTree,
    /// Position in the generator output, 0-based.
    pub generation_index: usize,
    pub ted: usize,
    pub ted_norm: f64,
    /// 1 is syntactically closest to the original.
    pub rank: usize,
    /// Cosine similarity to the original; `None` until the semantic filter runs.
    pub cosine: Option<f64>,
    pub retained: bool,
}

/// Ranks candidates (given in generation order) by edit distance to the
/// original, ascending, breaking ties by generation order.
///
/// # Panics
///
/// Panics if `candidates` is empty.
pub fn rank_paraphrases(
    original: &DepTree,
    candidates: Vec<(String, DepTree)>,
) -> Vec<RankedParaphrase> {
    assert!(
        !candidates.is_empty(),
        "rank_paraphrases needs at least one candidate"
    );
    let mut ranked: Vec<RankedParaphrase> = candidates
        .into_iter()
        .enumerate()
        .map(|(generation_index, (text, tree))| {
            let distance = ted(original, &tree);
            let ted_norm = normalized_ted(distance, original.len(), tree.len());
            RankedParaphrase {
                text,
                tree,
                generation_index,
                ted: distance,
                ted_norm,
                rank: 0,
                cosine: None,
                retained: true,
            }
        })
        .collect();
    ranked.sort_by_key(|p| (p.ted, p.generation_index));
    for (i, p) in ranked.iter_mut().enumerate() {
        p.rank = i + 1;
    }
    ranked
}

/// Rank positions for a list of distances in generation order.
pub fn ranks_for(distances: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by_key(|&i| (distances[i], i));
    let mut ranks = vec![0; distances.len()];
    for (pos, i) in order.into_iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}
