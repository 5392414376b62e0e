//! CoNLL-U reader.
//!
//! Sentences are blank-line separated blocks of 10-column token lines.
//! Multiword-token ranges (`3-4`) and empty nodes (`3.1`) are skipped.
//! Sentence-level comments of the form `# key = value` are kept as metadata;
//! the pipeline relies on `sent_id`, `text`, `parser` and `error`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tree::{DepNode, DepTree, TreeError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConlluError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("sentence starting at line {line}: {source}")]
    Structural { line: usize, source: TreeError },
    #[error("sentence starting at line {line} has no tokens")]
    EmptySentence { line: usize },
}

/// One sentence block and whatever came out of parsing it.
#[derive(Debug, Clone)]
pub struct SentenceBlock {
    /// 1-based line number of the block's first line.
    pub line: usize,
    pub meta: BTreeMap<String, String>,
    pub tree: Result<DepTree, ConlluError>,
}

impl SentenceBlock {
    pub fn sent_id(&self) -> Option<&str> {
        self.meta.get("sent_id").map(String::as_str)
    }

    pub fn text(&self) -> Option<&str> {
        self.meta.get("text").map(String::as_str)
    }
}

/// Reads every sentence, failing on the first malformed or structurally
/// invalid one.
pub fn read_conllu(text: &str) -> Result<Vec<DepTree>, ConlluError> {
    read_blocks(text).into_iter().map(|b| b.tree).collect()
}

/// Reads every sentence block, keeping per-block failures so callers can skip
/// bad sentences instead of the whole document.
pub fn read_blocks(text: &str) -> Vec<SentenceBlock> {
    let mut blocks = Vec::new();
    let mut current: Option<BlockBuilder> = None;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(b) = current.take() {
                blocks.push(b.finish());
            }
            continue;
        }
        let b = current.get_or_insert_with(|| BlockBuilder::new(lineno));
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                b.meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if b.error.is_none() {
            if let Err(e) = b.push_token_line(line, lineno) {
                b.error = Some(e);
            }
        }
    }
    if let Some(b) = current.take() {
        blocks.push(b.finish());
    }
    blocks
}

struct BlockBuilder {
    line: usize,
    meta: BTreeMap<String, String>,
    nodes: Vec<DepNode>,
    heads: Vec<usize>,
    error: Option<ConlluError>,
}

impl BlockBuilder {
    fn new(line: usize) -> Self {
        Self {
            line,
            meta: BTreeMap::new(),
            nodes: Vec::new(),
            heads: Vec::new(),
            error: None,
        }
    }

    fn push_token_line(&mut self, line: &str, lineno: usize) -> Result<(), ConlluError> {
        let malformed = |message: String| ConlluError::Malformed {
            line: lineno,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(malformed(format!(
                "expected 10 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            return Ok(());
        }
        let id: usize = id
            .parse()
            .map_err(|_| malformed(format!("non-numeric ID {id:?}")))?;
        if id != self.nodes.len() + 1 {
            return Err(malformed(format!(
                "expected token ID {}, found {id}",
                self.nodes.len() + 1
            )));
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| malformed(format!("non-numeric HEAD {:?}", cols[6])))?;
        let field = |s: &str| (s != "_").then(|| s.to_string());
        self.nodes.push(DepNode {
            token_index: id,
            form: cols[1].to_string(),
            lemma: field(cols[2]),
            upos: cols[3].to_string(),
            deprel: cols[7].to_string(),
        });
        self.heads.push(head);
        Ok(())
    }

    fn finish(self) -> SentenceBlock {
        let tree = match self.error {
            Some(e) => Err(e),
            None if self.nodes.is_empty() => Err(ConlluError::EmptySentence { line: self.line }),
            None => {
                DepTree::new(self.nodes, &self.heads).map_err(|source| ConlluError::Structural {
                    line: self.line,
                    source,
                })
            }
        };
        SentenceBlock {
            line: self.line,
            meta: self.meta,
            tree,
        }
    }
}
