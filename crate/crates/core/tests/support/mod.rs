//! Independent oracles and fixture helpers shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use paraprobe::conllu::read_conllu;
use paraprobe::evaluate::Outcome;
use paraprobe::ingest::{Benchmark, BenchmarkFormat, Example};
use paraprobe::tree::{DepTree, OrderedTree};
use proptest::prelude::*;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn e2e_dir() -> PathBuf {
    fixture_dir().join("e2e")
}

/// Edit-script composition of a mapping: substitutions, insertions, deletions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Script {
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
}

impl Script {
    pub fn cost(&self) -> usize {
        self.subs + self.ins + self.dels
    }
}

struct Flat<'a, L> {
    pre: Vec<usize>,
    anc: Vec<Vec<bool>>,
    labels: &'a [L],
}

#[allow(clippy::needless_range_loop)]
fn flatten<L>(t: &OrderedTree<L>) -> Flat<'_, L> {
    let n = t.len();
    let mut pre = vec![0; n];
    for (i, v) in t.preorder().into_iter().enumerate() {
        pre[v] = i;
    }
    let mut anc = vec![vec![false; n]; n];
    for v in 0..n {
        let mut p = t.parent(v);
        while let Some(a) = p {
            anc[a][v] = true;
            p = t.parent(a);
        }
    }
    Flat {
        pre,
        anc,
        labels: t.labels(),
    }
}

/// Exhaustive search over all valid edit mappings (one-to-one, preserving
/// ancestry and left-to-right order). Returns the minimal unit cost and the
/// set of script compositions that attain it.
pub fn brute_force_ted<L: PartialEq>(
    a: &OrderedTree<L>,
    b: &OrderedTree<L>,
) -> (usize, Vec<Script>) {
    let fa = flatten(a);
    let fb = flatten(b);
    let order: Vec<usize> = a.preorder();
    let mut best = usize::MAX;
    let mut scripts: Vec<Script> = Vec::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; b.len()];

    fn consistent<L>(
        fa: &Flat<L>,
        fb: &Flat<L>,
        pairs: &[(usize, usize)],
        v: usize,
        w: usize,
    ) -> bool {
        pairs.iter().all(|&(x, y)| {
            (fa.pre[x] < fa.pre[v]) == (fb.pre[y] < fb.pre[w])
                && fa.anc[x][v] == fb.anc[y][w]
                && fa.anc[v][x] == fb.anc[w][y]
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn search<L: PartialEq>(
        k: usize,
        order: &[usize],
        fa: &Flat<L>,
        fb: &Flat<L>,
        pairs: &mut Vec<(usize, usize)>,
        used: &mut [bool],
        subs: usize,
        best: &mut usize,
        scripts: &mut Vec<Script>,
    ) {
        let (na, nb) = (fa.pre.len(), fb.pre.len());
        if k == order.len() {
            let m = pairs.len();
            let s = Script {
                subs,
                ins: nb - m,
                dels: na - m,
            };
            match s.cost().cmp(best) {
                std::cmp::Ordering::Less => {
                    *best = s.cost();
                    scripts.clear();
                    scripts.push(s);
                }
                std::cmp::Ordering::Equal if !scripts.contains(&s) => scripts.push(s),
                _ => {}
            }
            return;
        }
        // lower bound: remaining nodes of `a` can at best all map for free
        let remaining = order.len() - k;
        let max_m = pairs.len() + remaining.min(nb - pairs.len());
        if subs + (na - max_m) + (nb - max_m) > *best {
            return;
        }
        let v = order[k];
        search(k + 1, order, fa, fb, pairs, used, subs, best, scripts);
        for w in 0..nb {
            if used[w] || !consistent(fa, fb, pairs, v, w) {
                continue;
            }
            used[w] = true;
            pairs.push((v, w));
            let cost = usize::from(fa.labels[v] != fb.labels[w]);
            search(
                k + 1,
                order,
                fa,
                fb,
                pairs,
                used,
                subs + cost,
                best,
                scripts,
            );
            pairs.pop();
            used[w] = false;
        }
    }

    search(
        0,
        &order,
        &fa,
        &fb,
        &mut pairs,
        &mut used,
        0,
        &mut best,
        &mut scripts,
    );
    scripts.sort();
    (best, scripts)
}

/// Kendall tau-a by direct enumeration of all pairs.
pub fn pairwise_tau(points: &[(usize, f64)]) -> (f64, u64, u64) {
    let n = points.len();
    let (mut c, mut d) = (0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dr = (points[i].0 as i64 - points[j].0 as i64).signum();
            let dd = if points[i].1 > points[j].1 {
                1
            } else if points[i].1 < points[j].1 {
                -1
            } else {
                0
            };
            match dr * dd {
                1 => c += 1,
                -1 => d += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    ((c as f64 - d as f64) / pairs, c, d)
}

/// Random ordered tree with `1..=max_nodes` nodes over a small alphabet.
/// Node `i > 0` hangs under a uniformly chosen earlier node, so any shape can
/// occur.
pub fn arb_tree(max_nodes: usize, alphabet: u8) -> impl Strategy<Value = OrderedTree<char>> {
    (1..=max_nodes)
        .prop_flat_map(move |n| {
            let parents: Vec<BoxedStrategy<usize>> = (1..n).map(|i| (0..i).boxed()).collect();
            (proptest::collection::vec(0..alphabet, n), parents)
        })
        .prop_map(|(labels, parents)| {
            let labels: Vec<char> = labels.into_iter().map(|l| (b'a' + l) as char).collect();
            let parent: Vec<Option<usize>> = std::iter::once(None)
                .chain(parents.into_iter().map(Some))
                .collect();
            OrderedTree::from_parents(labels, parent).expect("parents precede children")
        })
}

/// Reference parse of "How many singers do we have?".
pub const SINGER_TREE_A: &str = "\
# text = How many singers do we have?
1\tHow\thow\tSCONJ\t_\t_\t2\tadvmod\t_\t_
2\tmany\tmany\tADJ\t_\t_\t3\tamod\t_\t_
3\tsingers\tsinger\tNOUN\t_\t_\t6\tdobj\t_\t_
4\tdo\tdo\tAUX\t_\t_\t6\taux\t_\t_
5\twe\twe\tPRON\t_\t_\t6\tnsubj\t_\t_
6\thave\thave\tVERB\t_\t_\t0\tROOT\t_\t_
7\t?\t?\tPUNCT\t_\t_\t6\tpunct\t_\t_
";

/// Reference parse of "How many singers are recorded in the database?".
pub const SINGER_TREE_B: &str = "\
# text = How many singers are recorded in the database?
1\tHow\thow\tSCONJ\t_\t_\t2\tadvmod\t_\t_
2\tmany\tmany\tADJ\t_\t_\t3\tamod\t_\t_
3\tsingers\tsinger\tNOUN\t_\t_\t5\tnsubjpass\t_\t_
4\tare\tbe\tAUX\t_\t_\t5\tauxpass\t_\t_
5\trecorded\trecord\tVERB\t_\t_\t0\tROOT\t_\t_
6\tin\tin\tADP\t_\t_\t5\tprep\t_\t_
7\tthe\tthe\tDET\t_\t_\t8\tdet\t_\t_
8\tdatabase\tdatabase\tNOUN\t_\t_\t6\tpobj\t_\t_
9\t?\t?\tPUNCT\t_\t_\t5\tpunct\t_\t_
";

pub fn singer_trees() -> (DepTree, DepTree) {
    let a = read_conllu(SINGER_TREE_A).unwrap().remove(0);
    let b = read_conllu(SINGER_TREE_B).unwrap().remove(0);
    (a, b)
}

/// Proptest configuration without on-disk failure persistence.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}

/// Paraphrase prompt as it must reach the generator, placeholders intact.
pub const EXPECTED_TEMPLATE: &str = "Given the following database schema and an SQL query, generate {num_queries} distinct natural language questions that describe the purpose and output of the SQL query.

{schema_definitions}

SQL Query:
{sql_query}

Instructions:
1. Generate {num_queries} natural language questions that reflect the intent of the SQL query.
2. Each question should vary in phrasing, structure, and wording, but all questions must remain logically equivalent.
3. Do not include explanations, task descriptions, or any additional comments in the output.

Output Format:
1. <First question>
2. <Second question>
...
{num_queries}. <Nth question>.";

/// Splits `prompt` against the template: literal text must match verbatim and
/// each placeholder captures whatever lies between the surrounding literals.
pub fn placeholder_values(template: &str, prompt: &str) -> Option<Vec<(String, String)>> {
    let re = regex::Regex::new(r"\{(num_queries|schema_definitions|sql_query)\}").unwrap();
    let mut pattern = String::from("^");
    let mut names = Vec::new();
    let mut last = 0;
    for m in re.captures_iter(template) {
        let whole = m.get(0).unwrap();
        pattern.push_str(&regex::escape(&template[last..whole.start()]));
        pattern.push_str("((?s).*?)");
        names.push(m[1].to_string());
        last = whole.end();
    }
    pattern.push_str(&regex::escape(&template[last..]));
    pattern.push('$');
    let caps = regex::Regex::new(&pattern).unwrap().captures(prompt)?;
    Some(
        names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, caps[i + 1].to_string()))
            .collect(),
    )
}

const LOOP: &str =
    "WITH RECURSIVE n(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM n) SELECT count(*) FROM n";

/// Scripted (gold, predicted, expected outcome) against the toy concert_singer database.
pub const EXEC_CASES: [(&str, &str, Outcome); 10] = [
    ("SELECT count(*) FROM singer", "SELECT count(singer_id) FROM singer", Outcome::Correct),
    (
        "SELECT name FROM singer WHERE country = 'France'",
        "SELECT name FROM singer WHERE country = 'France' ORDER BY age",
        Outcome::Correct,
    ),
    ("SELECT name FROM singer ORDER BY age DESC", "SELECT name FROM singer ORDER BY age ASC", Outcome::Incorrect),
    ("SELECT name FROM singer ORDER BY age", "SELECT name FROM singer ORDER BY age ASC, name", Outcome::Correct),
    ("SELECT name FROM singer", "SELECT nickname FROM singer", Outcome::ExecutionError),
    ("SELECT count(*) FROM concert", LOOP, Outcome::ExecutionError),
    ("SELECT max(age) FROM singer", "SELECT age FROM singer ORDER BY age DESC LIMIT 1", Outcome::Correct),
    ("SELECT country FROM singer", "SELECT DISTINCT country FROM singer", Outcome::Incorrect),
    ("SELECT avg(capacity) FROM stadium", "SELECT sum(capacity) * 1.0 / count(*) FROM stadium", Outcome::Correct),
    (
        "SELECT T2.name FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id WHERE T1.year = 2015",
        "SELECT name FROM stadium WHERE stadium_id IN (SELECT stadium_id FROM concert WHERE year = 2015)",
        Outcome::Correct,
    ),
];

pub fn toy_benchmark() -> Benchmark {
    let examples = EXEC_CASES
        .iter()
        .enumerate()
        .map(|(i, (gold, _, _))| Example {
            id: format!("toy-{i}"),
            db_id: "concert_singer".into(),
            question: format!("question {i}"),
            context_turns: vec![],
            gold_sql: gold.to_string(),
            schema_text: String::new(),
            evidence: None,
            difficulty: None,
        })
        .collect();
    Benchmark {
        name: "toy".into(),
        release_tag: "test".into(),
        format: BenchmarkFormat::Spider,
        examples,
        db_root: e2e_dir().join("bench/database"),
        skipped: vec![],
    }
}
