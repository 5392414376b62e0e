//! Loading NL2SQL benchmark development sets and rendering schema context.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_ROWS: usize = 3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {message}")]
    DevFile { path: PathBuf, message: String },
    #[error("no database directory found under {0} (looked for database/ and dev_databases/)")]
    MissingDatabaseRoot(PathBuf),
    #[error("unknown benchmark format {0:?} (expected spider, bird, sparc or cosql)")]
    UnknownFormat(String),
}

#[derive(Debug, Error)]
#[error("schema for {db_id}: {message}")]
pub struct SchemaError {
    pub db_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkFormat {
    Spider,
    Bird,
    Sparc,
    Cosql,
}

impl BenchmarkFormat {
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkFormat::Spider => "spider",
            BenchmarkFormat::Bird => "bird",
            BenchmarkFormat::Sparc => "sparc",
            BenchmarkFormat::Cosql => "cosql",
        }
    }

    pub fn is_multi_turn(self) -> bool {
        matches!(self, BenchmarkFormat::Sparc | BenchmarkFormat::Cosql)
    }

    fn dev_file_candidates(self) -> &'static [&'static str] {
        match self {
            BenchmarkFormat::Spider | BenchmarkFormat::Bird | BenchmarkFormat::Sparc => {
                &["dev.json"]
            }
            BenchmarkFormat::Cosql => &[
                "sql_state_tracking/cosql_dev.json",
                "cosql_dev.json",
                "dev.json",
            ],
        }
    }
}

impl fmt::Display for BenchmarkFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spider" => Ok(Self::Spider),
            "bird" => Ok(Self::Bird),
            "sparc" => Ok(Self::Sparc),
            "cosql" => Ok(Self::Cosql),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaText {
    pub db_id: String,
    pub rendered: String,
}

/// One benchmark item. For dialogues `question` is the final user turn and
/// `context_turns` holds the earlier turns in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub db_id: String,
    pub question: String,
    pub context_turns: Vec<String>,
    pub gold_sql: String,
    /// Rendered schema, followed by an `Evidence:` block where the benchmark
    /// provides one.
    pub schema_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    /// BIRD difficulty label; read but not used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedExample {
    pub index: usize,
    pub db_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub release_tag: String,
    pub format: BenchmarkFormat,
    pub examples: Vec<Example>,
    pub db_root: PathBuf,
    pub skipped: Vec<SkippedExample>,
}

impl Benchmark {
    pub fn db_path(&self, db_id: &str) -> PathBuf {
        db_file(&self.db_root, db_id)
    }

    pub fn example(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }
}

fn db_file(root: &Path, db_id: &str) -> PathBuf {
    root.join(db_id).join(format!("{db_id}.sqlite"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    pub name: Option<String>,
    pub release_tag: Option<String>,
    pub sample_rows: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            name: None,
            release_tag: None,
            sample_rows: DEFAULT_SAMPLE_ROWS,
        }
    }
}

// Raw record shapes of the published dev files.

#[derive(Deserialize)]
struct SpiderRecord {
    db_id: Option<String>,
    question: Option<String>,
    query: Option<String>,
}

#[derive(Deserialize)]
struct BirdRecord {
    question_id: Option<serde_json::Value>,
    db_id: Option<String>,
    question: Option<String>,
    #[serde(rename = "SQL")]
    sql: Option<String>,
    evidence: Option<String>,
    difficulty: Option<String>,
}

#[derive(Deserialize)]
struct DialogueTurn {
    utterance: Option<String>,
    query: Option<String>,
}

#[derive(Deserialize)]
struct DialogueRecord {
    database_id: Option<String>,
    #[serde(default)]
    interaction: Vec<DialogueTurn>,
}

struct Draft {
    index: usize,
    id: String,
    db_id: String,
    question: String,
    context_turns: Vec<String>,
    gold_sql: String,
    evidence: Option<String>,
    difficulty: Option<String>,
}

fn parse_array<T: for<'de> Deserialize<'de>>(
    path: &Path,
    text: &str,
) -> Result<Vec<T>, IngestError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    serde_json::from_str(text).map_err(|e| IngestError::DevFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn trimmed(s: Option<String>) -> String {
    s.map(|s| s.trim().to_string()).unwrap_or_default()
}

fn drafts(
    format: BenchmarkFormat,
    tag: &str,
    path: &Path,
    text: &str,
) -> Result<Vec<Draft>, IngestError> {
    Ok(match format {
        BenchmarkFormat::Spider => parse_array::<SpiderRecord>(path, text)?
            .into_iter()
            .enumerate()
            .map(|(index, r)| Draft {
                index,
                id: format!("{tag}-{index}"),
                db_id: trimmed(r.db_id),
                question: trimmed(r.question),
                context_turns: Vec::new(),
                gold_sql: trimmed(r.query),
                evidence: None,
                difficulty: None,
            })
            .collect(),
        BenchmarkFormat::Bird => parse_array::<BirdRecord>(path, text)?
            .into_iter()
            .enumerate()
            .map(|(index, r)| {
                let qid = match r.question_id {
                    Some(serde_json::Value::String(s)) => s,
                    Some(serde_json::Value::Number(n)) => n.to_string(),
                    _ => index.to_string(),
                };
                Draft {
                    index,
                    id: format!("{tag}-{qid}"),
                    db_id: trimmed(r.db_id),
                    question: trimmed(r.question),
                    context_turns: Vec::new(),
                    gold_sql: trimmed(r.sql),
                    evidence: r
                        .evidence
                        .map(|e| e.trim().to_string())
                        .filter(|e| !e.is_empty()),
                    difficulty: r.difficulty,
                }
            })
            .collect(),
        BenchmarkFormat::Sparc | BenchmarkFormat::Cosql => {
            parse_array::<DialogueRecord>(path, text)?
                .into_iter()
                .enumerate()
                .map(|(index, r)| {
                    let mut utterances: Vec<String> = r
                        .interaction
                        .iter()
                        .map(|t| trimmed(t.utterance.clone()))
                        .collect();
                    let gold_sql = r
                        .interaction
                        .last()
                        .map(|t| trimmed(t.query.clone()))
                        .unwrap_or_default();
                    let question = utterances.pop().unwrap_or_default();
                    Draft {
                        index,
                        id: format!("{tag}-{index}"),
                        db_id: trimmed(r.database_id),
                        question,
                        context_turns: utterances,
                        gold_sql,
                        evidence: None,
                        difficulty: None,
                    }
                })
                .collect()
        }
    })
}

/// Loads a benchmark development split from its published directory layout.
///
/// Examples whose database is missing, or whose question or gold SQL is
/// empty, are skipped and listed in [`Benchmark::skipped`].
pub fn load_benchmark(
    dir: &Path,
    format: BenchmarkFormat,
    options: &LoadOptions,
) -> Result<Benchmark, IngestError> {
    let dev_path = format
        .dev_file_candidates()
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| IngestError::DevFile {
            path: dir.join(format.dev_file_candidates()[0]),
            message: "dev file not found".into(),
        })?;
    let text = fs::read_to_string(&dev_path).map_err(|e| IngestError::DevFile {
        path: dev_path.clone(),
        message: e.to_string(),
    })?;
    let db_root = ["database", "dev_databases"]
        .iter()
        .map(|d| dir.join(d))
        .find(|p| p.is_dir())
        .ok_or_else(|| IngestError::MissingDatabaseRoot(dir.to_path_buf()))?;

    let release_tag = options
        .release_tag
        .clone()
        .unwrap_or_else(|| format!("{}-dev", format.name()));
    let name = options
        .name
        .clone()
        .unwrap_or_else(|| format.name().to_string());

    let mut schemas: BTreeMap<String, Result<String, String>> = BTreeMap::new();
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();

    for d in drafts(format, &release_tag, &dev_path, &text)? {
        let mut skip = |reason: String| {
            log::warn!("skipping example {} ({}): {reason}", d.index, d.db_id);
            skipped.push(SkippedExample {
                index: d.index,
                db_id: d.db_id.clone(),
                reason,
            });
        };
        if d.question.is_empty() {
            skip("empty question".into());
            continue;
        }
        if d.gold_sql.is_empty() {
            skip("empty gold SQL".into());
            continue;
        }
        if !seen.insert(d.id.clone()) {
            skip(format!("duplicate example id {}", d.id));
            continue;
        }
        let db_path = db_file(&db_root, &d.db_id);
        if d.db_id.is_empty() || !db_path.is_file() {
            skip(format!(
                "database {:?} not found under the database root",
                d.db_id
            ));
            continue;
        }
        let schema = schemas.entry(d.db_id.clone()).or_insert_with(|| {
            render_schema(&db_path, options.sample_rows)
                .map(|s| s.rendered)
                .map_err(|e| e.to_string())
        });
        let schema = match schema {
            Ok(s) => s.clone(),
            Err(e) => {
                skip(e.clone());
                continue;
            }
        };
        let schema_text = match &d.evidence {
            Some(ev) => format!("{schema}\n\nEvidence:\n{ev}"),
            None => schema,
        };
        examples.push(Example {
            id: d.id,
            db_id: d.db_id,
            question: d.question,
            context_turns: d.context_turns,
            gold_sql: d.gold_sql,
            schema_text,
            evidence: d.evidence,
            difficulty: d.difficulty,
        });
    }

    Ok(Benchmark {
        name,
        release_tag,
        format,
        examples,
        db_root,
        skipped,
    })
}

fn render_value(v: ValueRef<'_>) -> String {
    match v {
        ValueRef::Null => "None".into(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => format!("{f:?}"),
        ValueRef::Text(t) => String::from_utf8_lossy(t).replace(['\t', '\n'], " "),
        ValueRef::Blob(b) => format!("<blob {} bytes>", b.len()),
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Renders `CREATE TABLE` statements (as stored in the catalog) each followed
/// by a comment block with up to `sample_rows` rows, tab separated.
pub fn render_schema(db_path: &Path, sample_rows: usize) -> Result<SchemaText, SchemaError> {
    let db_id = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let err = |message: String| SchemaError {
        db_id: db_id.clone(),
        message,
    };
    let conn = Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| err(e.to_string()))?;

    let mut stmt = conn
        .prepare(
            "SELECT name, sql FROM sqlite_master \
             WHERE type = 'table' AND name NOT LIKE 'sqlite_%' AND sql IS NOT NULL ORDER BY rowid",
        )
        .map_err(|e| err(e.to_string()))?;
    let tables: Vec<(String, String)> = stmt
        .query_map([], |row| Ok((row.get(0)?, row.get(1)?)))
        .and_then(|rows| rows.collect())
        .map_err(|e| err(e.to_string()))?;

    let mut blocks = Vec::with_capacity(tables.len());
    for (name, sql) in tables {
        let mut block = sql.trim().to_string();
        if sample_rows > 0 {
            let mut q = conn
                .prepare(&format!(
                    "SELECT * FROM {} LIMIT {sample_rows}",
                    quote_ident(&name)
                ))
                .map_err(|e| err(e.to_string()))?;
            let columns: Vec<String> = q.column_names().into_iter().map(str::to_string).collect();
            let mut lines = vec![
                format!("{sample_rows} rows from {name} table:"),
                columns.join("\t"),
            ];
            let mut rows = q.query([]).map_err(|e| err(e.to_string()))?;
            while let Some(row) = rows.next().map_err(|e| err(e.to_string()))? {
                let cells: Vec<String> = (0..columns.len())
                    .map(|i| row.get_ref(i).map(render_value))
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(e.to_string()))?;
                lines.push(cells.join("\t"));
            }
            block.push_str(&format!("\n/*\n{}\n*/", lines.join("\n")));
        }
        blocks.push(block);
    }
    Ok(SchemaText {
        db_id,
        rendered: blocks.join("\n\n\n"),
    })
}

/// Table names in the database catalog.
pub fn table_names(db_path: &Path) -> Result<Vec<String>, SchemaError> {
    let db_id = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let err = |e: rusqlite::Error| SchemaError {
        db_id: db_id.clone(),
        message: e.to_string(),
    };
    let conn =
        Connection::open_with_flags(db_path, OpenFlags::SQLITE_OPEN_READ_ONLY).map_err(err)?;
    let mut stmt = conn
        .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")
        .map_err(err)?;
    let names = stmt
        .query_map([], |r| r.get(0))
        .and_then(|rows| rows.collect())
        .map_err(err)?;
    Ok(names)
}
