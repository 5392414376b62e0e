//! Ordered tree edit distance (Zhang & Shasha, 1989) with unit costs.

use crate::tree::{DepTree, OrderedTree};

/// Edit distance between two dependency trees: unit-cost insert, delete and
/// relabel, where relabelling is free iff the node labels are equal.
pub fn ted(a: &DepTree, b: &DepTree) -> usize {
    tree_edit_distance(a.shape(), b.shape())
}

/// `ted / (|a| + |b|)`, which always falls in `[0, 1]`.
pub fn normalized_ted(distance: usize, a_len: usize, b_len: usize) -> f64 {
    distance as f64 / (a_len + b_len) as f64
}

/// Postorder view of a tree: 1-based postorder ids, leftmost-leaf
/// descendants and keyroots.
struct Postorder<'a, L> {
    labels: Vec<&'a L>,
    /// `lld[i]` is the postorder id of node i's leftmost leaf; index 0 unused.
    lld: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'a, L> Postorder<'a, L> {
    fn new(tree: &'a OrderedTree<L>) -> Self {
        let order = tree.postorder();
        let n = order.len();
        let mut id = vec![0usize; n];
        for (pos, &node) in order.iter().enumerate() {
            id[node] = pos + 1;
        }
        let mut labels = Vec::with_capacity(n + 1);
        let mut lld = vec![0usize; n + 1];
        labels.push(tree.label(order[0]));
        for &node in &order {
            labels.push(tree.label(node));
            lld[id[node]] = match tree.children(node).first() {
                Some(&first) => lld[id[first]],
                None => id[node],
            };
        }
        // A keyroot is the highest node for each distinct leftmost leaf.
        let mut highest = vec![0usize; n + 1];
        for i in 1..=n {
            highest[lld[i]] = i;
        }
        let mut keyroots: Vec<usize> = highest.into_iter().filter(|&k| k != 0).collect();
        keyroots.sort_unstable();
        Self {
            labels,
            lld,
            keyroots,
        }
    }

    fn len(&self) -> usize {
        self.lld.len() - 1
    }
}

/// Unit-cost ordered tree edit distance.
pub fn tree_edit_distance<L: PartialEq>(a: &OrderedTree<L>, b: &OrderedTree<L>) -> usize {
    let a = Postorder::new(a);
    let b = Postorder::new(b);
    let (n, m) = (a.len(), b.len());
    let mut tree_dist = vec![vec![0usize; m + 1]; n + 1];
    let mut forest = vec![vec![0usize; m + 1]; n + 1];

    for &i in &a.keyroots {
        for &j in &b.keyroots {
            let (li, lj) = (a.lld[i], b.lld[j]);
            forest[li - 1][lj - 1] = 0;
            for x in li..=i {
                forest[x][lj - 1] = forest[x - 1][lj - 1] + 1;
            }
            for y in lj..=j {
                forest[li - 1][y] = forest[li - 1][y - 1] + 1;
            }
            for x in li..=i {
                for y in lj..=j {
                    let delete = forest[x - 1][y] + 1;
                    let insert = forest[x][y - 1] + 1;
                    if a.lld[x] == li && b.lld[y] == lj {
                        let relabel =
                            forest[x - 1][y - 1] + usize::from(a.labels[x] != b.labels[y]);
                        let d = delete.min(insert).min(relabel);
                        forest[x][y] = d;
                        tree_dist[x][y] = d;
                    } else {
                        let subtree = forest[a.lld[x] - 1][b.lld[y] - 1] + tree_dist[x][y];
                        forest[x][y] = delete.min(insert).min(subtree);
                    }
                }
            }
        }
    }
    tree_dist[n][m]
}
