//! Rooted, ordered, labelled trees.
//!
//! [`OrderedTree`] is the generic shape the edit-distance code works on.
//! [`DepTree`] wraps one built from a dependency parse and keeps the token
//! attributes around so node labels can be derived from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("tree has no nodes")]
    Empty,
    #[error("tree has no root")]
    NoRoot,
    #[error("tree has multiple roots (nodes {first} and {second})")]
    MultipleRoots { first: usize, second: usize },
    #[error("node {node} has out-of-range parent {parent}")]
    ParentOutOfRange { node: usize, parent: usize },
    #[error("node {node} is its own parent")]
    SelfLoop { node: usize },
    #[error("cycle through node {node}")]
    Cycle { node: usize },
}

/// A rooted ordered tree over node indices `0..len`. Sibling order is index
/// order, so a tree built from a parent array keeps children sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedTree<L> {
    labels: Vec<L>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
}

impl<L> OrderedTree<L> {
    /// Builds a tree from per-node labels and parents (`None` marks the root).
    pub fn from_parents(labels: Vec<L>, parent: Vec<Option<usize>>) -> Result<Self, TreeError> {
        assert_eq!(
            labels.len(),
            parent.len(),
            "labels and parents differ in length"
        );
        let n = labels.len();
        if n == 0 {
            return Err(TreeError::Empty);
        }
        let mut root = None;
        let mut children = vec![Vec::new(); n];
        for (node, p) in parent.iter().enumerate() {
            match *p {
                None => match root {
                    None => root = Some(node),
                    Some(first) => {
                        return Err(TreeError::MultipleRoots {
                            first,
                            second: node,
                        })
                    }
                },
                Some(p) if p >= n => return Err(TreeError::ParentOutOfRange { node, parent: p }),
                Some(p) if p == node => return Err(TreeError::SelfLoop { node }),
                Some(p) => children[p].push(node),
            }
        }
        let root = root.ok_or(TreeError::NoRoot)?;

        // Every node must reach the root; with one root and n-1 edges that
        // rules out cycles.
        let mut state = vec![0u8; n]; // 0 unvisited, 1 on path, 2 reaches root
        state[root] = 2;
        for start in 0..n {
            let mut path = Vec::new();
            let mut cur = start;
            while state[cur] == 0 {
                state[cur] = 1;
                path.push(cur);
                cur = parent[cur].expect("non-root node has a parent");
            }
            if state[cur] == 1 {
                return Err(TreeError::Cycle { node: cur });
            }
            for node in path {
                state[node] = 2;
            }
        }

        Ok(Self {
            labels,
            parent,
            children,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn label(&self, node: usize) -> &L {
        &self.labels[node]
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Nodes in postorder (children left to right, then the node).
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![(self.root, 0usize)];
        while let Some((node, next)) = stack.pop() {
            if next < self.children[node].len() {
                stack.push((node, next + 1));
                stack.push((self.children[node][next], 0));
            } else {
                out.push(node);
            }
        }
        out
    }

    /// Nodes in preorder (node, then children left to right).
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![self.root];
        while let Some(node) = stack.pop() {
            out.push(node);
            stack.extend(self.children[node].iter().rev());
        }
        out
    }

    pub fn map_labels<M>(&self, f: impl FnMut(&L) -> M) -> OrderedTree<M> {
        OrderedTree {
            labels: self.labels.iter().map(f).collect(),
            parent: self.parent.clone(),
            children: self.children.clone(),
            root: self.root,
        }
    }
}

/// One token of a dependency parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepNode {
    pub token_index: usize,
    pub form: String,
    pub lemma: Option<String>,
    pub upos: String,
    pub deprel: String,
}

impl DepNode {
    /// Node identity for edit distance: lowercased lemma (or surface form when
    /// the lemma is missing) followed by the UPOS tag, e.g. `have(VERB)`.
    pub fn label(&self) -> String {
        let base = self.lemma.as_deref().unwrap_or(&self.form);
        format!("{}({})", base.to_lowercase(), self.upos)
    }
}

/// Dependency tree of one sentence. Node `i` is the token with
/// `token_index == i + 1`; children are ordered by token index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDepTree", into = "RawDepTree")]
pub struct DepTree {
    nodes: Vec<DepNode>,
    shape: OrderedTree<String>,
}

#[derive(Serialize, Deserialize)]
struct RawDepTree {
    nodes: Vec<DepNode>,
    /// CoNLL-U style heads: 0 for the root, otherwise the 1-based token index.
    heads: Vec<usize>,
}

impl TryFrom<RawDepTree> for DepTree {
    type Error = TreeError;

    fn try_from(raw: RawDepTree) -> Result<Self, TreeError> {
        DepTree::new(raw.nodes, &raw.heads)
    }
}

impl From<DepTree> for RawDepTree {
    fn from(tree: DepTree) -> Self {
        let heads = tree.heads();
        RawDepTree {
            nodes: tree.nodes,
            heads,
        }
    }
}

impl DepTree {
    /// Builds a tree from tokens in sentence order and CoNLL-U heads
    /// (0 = root, otherwise 1-based index of the governing token).
    ///
    /// Token indices are renumbered to `1..=n` following the given order.
    pub fn new(mut nodes: Vec<DepNode>, heads: &[usize]) -> Result<Self, TreeError> {
        assert_eq!(nodes.len(), heads.len(), "nodes and heads differ in length");
        let n = nodes.len();
        let mut parent = Vec::with_capacity(n);
        for (i, &h) in heads.iter().enumerate() {
            parent.push(match h {
                0 => None,
                h if h > n => {
                    return Err(TreeError::ParentOutOfRange {
                        node: i,
                        parent: h - 1,
                    })
                }
                h => Some(h - 1),
            });
        }
        for (i, node) in nodes.iter_mut().enumerate() {
            node.token_index = i + 1;
        }
        let labels = nodes.iter().map(DepNode::label).collect();
        let shape = OrderedTree::from_parents(labels, parent)?;
        Ok(Self { nodes, shape })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[DepNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.shape.root()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.shape.parent(node)
    }

    pub fn children(&self, node: usize) -> &[usize] {
        self.shape.children(node)
    }

    pub fn heads(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| self.shape.parent(i).map_or(0, |p| p + 1))
            .collect()
    }

    /// The labelled shape used for edit distance.
    pub fn shape(&self) -> &OrderedTree<String> {
        &self.shape
    }

    /// Space-joined surface forms.
    pub fn text(&self) -> String {
        self.nodes
            .iter()
            .map(|n| n.form.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}
