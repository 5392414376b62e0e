//! Read-only SQL execution against benchmark databases and result-set
//! equivalence for execution accuracy.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::LazyLock;
use std::time::{Duration, Instant};

use regex::Regex;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for comparing real numbers.
pub const REAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("cannot open database {path}: {message}")]
    Open { path: String, message: String },
    #[error("SQL error: {0}")]
    Sql(String),
    #[error("statement is not read-only")]
    NotReadOnly,
    #[error("query exceeded the {0:?} time limit")]
    Timeout(Duration),
    #[error("query returned more than {0} rows")]
    RowCapExceeded(usize),
}

impl ExecError {
    /// Short class name used in the per-item audit log.
    pub fn class(&self) -> &'static str {
        match self {
            ExecError::Open { .. } => "open_error",
            ExecError::Sql(_) => "sql_error",
            ExecError::NotReadOnly => "write_rejected",
            ExecError::Timeout(_) => "timeout",
            ExecError::RowCapExceeded(_) => "row_cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(f) => Value::Real(f),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }

    fn kind(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Integer(_) | Value::Real(_) => 1,
            Value::Text(_) => 2,
            Value::Blob(_) => 3,
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Integer(i) => Some(i as f64),
            Value::Real(f) => Some(f),
            _ => None,
        }
    }

    /// Text, blobs and integers compare exactly; as soon as a real is
    /// involved numbers compare within [`REAL_TOLERANCE`].
    pub fn equivalent(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Blob(a), Value::Blob(b)) => a == b,
            (a, b) => match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => (x - y).abs() <= REAL_TOLERANCE || x == y,
                _ => false,
            },
        }
    }

    /// A total order used to canonicalize rows before multiset comparison.
    fn total_cmp(&self, other: &Value) -> Ordering {
        match (self, other) {
            (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Blob(a), Value::Blob(b)) => a.cmp(b),
            (a, b) if a.kind() == 1 && b.kind() == 1 => a
                .as_f64()
                .unwrap_or(0.0)
                .total_cmp(&b.as_f64().unwrap_or(0.0)),
            (a, b) => a.kind().cmp(&b.kind()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: usize,
    pub rows: Vec<Vec<Value>>,
}

impl ResultSet {
    pub fn new(columns: usize, rows: Vec<Vec<Value>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == columns));
        Self { columns, rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecLimits {
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_row_cap")]
    pub row_cap: usize,
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_row_cap() -> usize {
    100_000
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            timeout_secs: default_timeout_secs(),
            row_cap: default_row_cap(),
        }
    }
}

impl ExecLimits {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.0))
    }
}

pub fn open_read_only(db_path: &Path) -> Result<Connection, ExecError> {
    Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| ExecError::Open {
        path: db_path.display().to_string(),
        message: e.to_string(),
    })
}

/// Opens `db_path` read-only and runs one query.
pub fn execute_sql(
    db_path: &Path,
    sql: &str,
    timeout: Duration,
    row_cap: usize,
) -> Result<ResultSet, ExecError> {
    let conn = open_read_only(db_path)?;
    execute_on(&conn, sql, timeout, row_cap)
}

/// Runs one read-only statement with a wall-clock limit and a row cap.
pub fn execute_on(
    conn: &Connection,
    sql: &str,
    timeout: Duration,
    row_cap: usize,
) -> Result<ResultSet, ExecError> {
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1000, Some(move || Instant::now() > deadline))
        .map_err(|e| ExecError::Sql(e.to_string()))?;
    let result = run_query(conn, sql, row_cap, deadline, timeout);
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    result
}

fn run_query(
    conn: &Connection,
    sql: &str,
    row_cap: usize,
    deadline: Instant,
    timeout: Duration,
) -> Result<ResultSet, ExecError> {
    let map_err = |e: rusqlite::Error| {
        if Instant::now() > deadline
            || matches!(
                e.sqlite_error_code(),
                Some(rusqlite::ErrorCode::OperationInterrupted)
            )
        {
            ExecError::Timeout(timeout)
        } else {
            ExecError::Sql(e.to_string())
        }
    };
    let mut stmt = conn
        .prepare(sql.trim().trim_end_matches(';'))
        .map_err(map_err)?;
    if !stmt.readonly() {
        return Err(ExecError::NotReadOnly);
    }
    let columns = stmt.column_count();
    let mut rows = stmt.query([]).map_err(map_err)?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(map_err)? {
        if out.len() == row_cap {
            return Err(ExecError::RowCapExceeded(row_cap));
        }
        let values = (0..columns)
            .map(|i| row.get_ref(i).map(Value::from_ref))
            .collect::<Result<Vec<_>, _>>()
            .map_err(map_err)?;
        out.push(values);
    }
    Ok(ResultSet::new(columns, out))
}

static ORDER_BY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\border\s+by\b").unwrap());

/// Whether the query has an `ORDER BY` outside string literals.
pub fn has_order_by(sql: &str) -> bool {
    let mut stripped = String::with_capacity(sql.len());
    let mut quote: Option<char> = None;
    for c in sql.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '\'' || c == '"' => quote = Some(c),
            None => stripped.push(c),
        }
    }
    ORDER_BY.is_match(&stripped)
}

fn rows_equivalent(a: &[Value], b: &[Value]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.equivalent(y))
}

fn row_cmp(a: &[Value], b: &[Value]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Column-position sensitive comparison: ordered when the gold query sorts,
/// otherwise as multisets of rows.
pub fn results_equivalent(gold: &ResultSet, pred: &ResultSet, gold_has_order_by: bool) -> bool {
    if gold.columns != pred.columns || gold.rows.len() != pred.rows.len() {
        return false;
    }
    if gold_has_order_by {
        return gold
            .rows
            .iter()
            .zip(&pred.rows)
            .all(|(g, p)| rows_equivalent(g, p));
    }
    let mut g: Vec<&Vec<Value>> = gold.rows.iter().collect();
    let mut p: Vec<&Vec<Value>> = pred.rows.iter().collect();
    g.sort_by(|a, b| row_cmp(a, b));
    p.sort_by(|a, b| row_cmp(a, b));
    g.iter().zip(&p).all(|(a, b)| rows_equivalent(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn fixture() -> (TempDir, std::path::PathBuf) {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("toy.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE singer (id INTEGER, name TEXT, age INTEGER, score REAL);
             INSERT INTO singer VALUES (1,'Ann',30,1.5),(2,'Bob',41,2.25),(3,'Cy',25,NULL),
                                       (4,'Di',52,3.0),(5,'Ed',36,0.1),(6,'Flo',29,4.75);",
        )
        .unwrap();
        (tmp, path)
    }

    const T: Duration = Duration::from_secs(5);

    #[test]
    fn constant_query() {
        let (_tmp, db) = fixture();
        let rs = execute_sql(&db, "SELECT 1", T, 10).unwrap();
        assert_eq!(rs, ResultSet::new(1, vec![vec![Value::Integer(1)]]));
    }

    #[test]
    fn count_rows() {
        let (_tmp, db) = fixture();
        let rs = execute_sql(&db, "SELECT COUNT(*) FROM singer;", T, 10).unwrap();
        assert_eq!(rs.rows, vec![vec![Value::Integer(6)]]);
    }

    #[test]
    fn error_paths() {
        let (_tmp, db) = fixture();
        assert!(matches!(
            execute_sql(&db, "SELEC name FRM singer", T, 10),
            Err(ExecError::Sql(_))
        ));
        assert!(matches!(
            execute_sql(&db, "SELECT nope FROM singer", T, 10),
            Err(ExecError::Sql(_))
        ));
        assert!(matches!(
            execute_sql(&db, "DELETE FROM singer", T, 10),
            Err(ExecError::NotReadOnly)
        ));
        assert!(matches!(
            execute_sql(&db, "SELECT * FROM singer", T, 5),
            Err(ExecError::RowCapExceeded(5))
        ));
        assert_eq!(
            execute_sql(&db, "SELECT * FROM singer", T, 6)
                .unwrap()
                .rows
                .len(),
            6
        );
        let slow = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";
        let err = execute_sql(&db, slow, Duration::from_millis(50), 10).unwrap_err();
        assert_eq!(err, ExecError::Timeout(Duration::from_millis(50)));
        assert_eq!(err.class(), "timeout");
    }

    fn rs(rows: &[&[i64]]) -> ResultSet {
        ResultSet::new(
            rows.first().map_or(0, |r| r.len()),
            rows.iter()
                .map(|r| r.iter().map(|&v| Value::Integer(v)).collect())
                .collect(),
        )
    }

    #[test]
    fn equivalence_semantics() {
        let a = rs(&[&[1, 2], &[3, 4], &[3, 4]]);
        let permuted = rs(&[&[3, 4], &[1, 2], &[3, 4]]);
        assert!(results_equivalent(&a, &a, true));
        assert!(results_equivalent(&a, &permuted, false));
        assert!(!results_equivalent(&a, &permuted, true));
        // multiset, not set
        assert!(!results_equivalent(
            &a,
            &rs(&[&[1, 2], &[1, 2], &[3, 4]]),
            false
        ));
        // column order matters
        assert!(!results_equivalent(&rs(&[&[1, 2]]), &rs(&[&[2, 1]]), false));
        assert!(!results_equivalent(&rs(&[&[1, 2]]), &rs(&[&[1]]), false));
    }

    #[test]
    fn reals_use_absolute_tolerance() {
        let g = ResultSet::new(1, vec![vec![Value::Real(0.3)]]);
        let near = ResultSet::new(1, vec![vec![Value::Real(0.1 + 0.2)]]);
        let far = ResultSet::new(1, vec![vec![Value::Real(0.300_01)]]);
        assert!(results_equivalent(&g, &near, false));
        assert!(!results_equivalent(&g, &far, false));
        let int = ResultSet::new(1, vec![vec![Value::Integer(3)]]);
        assert!(results_equivalent(
            &int,
            &ResultSet::new(1, vec![vec![Value::Real(3.0)]]),
            false
        ));
        assert!(!results_equivalent(
            &int,
            &ResultSet::new(1, vec![vec![Value::Text("3".into())]]),
            false
        ));
    }

    #[test]
    fn order_by_detection_ignores_literals() {
        assert!(has_order_by("SELECT a FROM t ORDER  BY a"));
        assert!(has_order_by("select a from t order\nby a desc"));
        assert!(!has_order_by("SELECT 'order by' FROM t"));
        assert!(!has_order_by("SELECT border, bypass FROM t"));
    }
}
