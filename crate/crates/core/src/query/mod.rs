//! Read-side capabilities over a store snapshot: transaction retrieval by
//! filter, per-key operation history, rich queries over state values and
//! ledger statistics.

mod eval;
mod lang;

use std::collections::BTreeMap;

use rusqlite::types::Value as SqlValue;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use eval::eval_expr;
pub use lang::{parse_query, CmpOp, Condition, Literal, QueryExpr, SyntaxError};

use crate::model::{StateVersion, Timestamp};
use crate::records::{HistoryEntry, ParsedTransaction};
use crate::schema::{SchemaPath, SchemaRecord, SchemaTree, NON_JSON_SCHEMA_ID};
use crate::store::{history_from_row, state_from_row, tx_from_row, Snapshot, StoreError, StoreTable};
use crate::store::{HISTORY_COLUMNS, STATES_IN_SCHEMA, STATE_COLUMNS, STATE_SOURCE, TX_COLUMNS};

pub const DEFAULT_PAGE_LIMIT: u64 = 50;
pub const MAX_PAGE_LIMIT: u64 = 1000;
pub const SAMPLE_PATHS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, QueryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Page {
    pub offset: u64,
    pub limit: u64,
}

impl Default for Page {
    fn default() -> Self {
        Page {
            offset: 0,
            limit: DEFAULT_PAGE_LIMIT,
        }
    }
}

impl Page {
    pub fn new(offset: u64, limit: u64) -> Self {
        Page { offset, limit }
    }

    pub fn validate(&self) -> Result<()> {
        if self.limit == 0 || self.limit > MAX_PAGE_LIMIT {
            return Err(QueryError::InvalidFilter(format!(
                "limit must be between 1 and {MAX_PAGE_LIMIT}, got {}",
                self.limit
            )));
        }
        Ok(())
    }

    fn window<T>(&self, items: Vec<T>) -> Vec<T> {
        items
            .into_iter()
            .skip(self.offset as usize)
            .take(self.limit as usize)
            .collect()
    }
}

/// One page of results and the size of the full result set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PageOf<T> {
    pub items: Vec<T>,
    pub total_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum SortOrder {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TxFilter {
    /// Inclusive block number range.
    pub block_range: Option<(u64, u64)>,
    /// Inclusive client timestamp range.
    pub time_range: Option<(Timestamp, Timestamp)>,
    pub tx_id: Option<String>,
    pub creator_msp: Option<String>,
    pub endorser_msp: Option<String>,
    pub chaincode_name: Option<String>,
    pub function: Option<String>,
    pub channel_id: Option<String>,
    pub valid_only: bool,
    pub page: Page,
    pub sort: SortOrder,
}

impl Default for TxFilter {
    fn default() -> Self {
        TxFilter {
            block_range: None,
            time_range: None,
            tx_id: None,
            creator_msp: None,
            endorser_msp: None,
            chaincode_name: None,
            function: None,
            channel_id: None,
            valid_only: true,
            page: Page::default(),
            sort: SortOrder::Ascending,
        }
    }
}

impl TxFilter {
    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.block_range {
            if lo > hi {
                return Err(QueryError::InvalidFilter(format!("block range {lo}..{hi} is reversed")));
            }
        }
        if let Some((lo, hi)) = self.time_range {
            if lo > hi {
                return Err(QueryError::InvalidFilter(format!("time range {lo}..{hi} is reversed")));
            }
        }
        self.page.validate()
    }

    /// Whether `tx` satisfies every present criterion (pagination aside).
    pub fn matches(&self, tx: &ParsedTransaction) -> bool {
        let eq = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w == have);
        self.block_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&tx.block_num))
            && self.time_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&tx.timestamp))
            && eq(&self.tx_id, &tx.tx_id)
            && eq(&self.creator_msp, &tx.creator_msp)
            && self
                .endorser_msp
                .as_deref()
                .is_none_or(|e| tx.endorser_msps.iter().any(|m| m == e))
            && eq(&self.chaincode_name, &tx.chaincode_name)
            && eq(&self.function, &tx.function)
            && eq(&self.channel_id, &tx.channel_id)
            && (!self.valid_only || tx.is_valid)
    }
}

/// Transactions matching all present filter fields, ordered by
/// `(block_num, tx_num)` and paginated.
pub fn query_transactions(filter: &TxFilter, snap: &Snapshot<'_>) -> Result<PageOf<ParsedTransaction>> {
    filter.validate()?;
    let mut clauses: Vec<String> = Vec::new();
    let mut args: Vec<SqlValue> = Vec::new();
    let mut bind = |clause: &str, v: SqlValue| {
        args.push(v);
        clauses.push(clause.replace('?', &format!("?{}", args.len())));
    };
    if let Some((lo, hi)) = filter.block_range {
        bind("block_num >= ?", SqlValue::Integer(lo.min(i64::MAX as u64) as i64));
        bind("block_num <= ?", SqlValue::Integer(hi.min(i64::MAX as u64) as i64));
    }
    if let Some((lo, hi)) = filter.time_range {
        bind("timestamp >= ?", SqlValue::Integer(lo.as_micros()));
        bind("timestamp <= ?", SqlValue::Integer(hi.as_micros()));
    }
    let text = |s: &Option<String>| s.clone().map(SqlValue::Text);
    for (column, value) in [
        ("tx_id", text(&filter.tx_id)),
        ("creator_msp", text(&filter.creator_msp)),
        ("chaincode_name", text(&filter.chaincode_name)),
        ("function", text(&filter.function)),
        ("channel_id", text(&filter.channel_id)),
    ] {
        if let Some(v) = value {
            bind(&format!("{column} = ?"), v);
        }
    }
    if let Some(e) = &filter.endorser_msp {
        bind(
            "EXISTS (SELECT 1 FROM tx_endorsers e WHERE e.msp_id = ? \
             AND e.block_num = transactions.block_num AND e.tx_num = transactions.tx_num)",
            SqlValue::Text(e.clone()),
        );
    }
    if filter.valid_only {
        clauses.push("is_valid = 1".into());
    }
    let where_sql = if clauses.is_empty() {
        String::new()
    } else {
        format!("WHERE {}", clauses.join(" AND "))
    };
    let conn = snap.conn();
    let total: i64 = conn
        .prepare(&format!("SELECT count(*) FROM transactions {where_sql}"))
        .map_err(StoreError::from)?
        .query_row(rusqlite::params_from_iter(args.iter()), |r| r.get(0))
        .map_err(StoreError::from)?;
    let dir = match filter.sort {
        SortOrder::Ascending => "ASC",
        SortOrder::Descending => "DESC",
    };
    let sql = format!(
        "SELECT {TX_COLUMNS} FROM transactions {where_sql} ORDER BY block_num {dir}, tx_num {dir} LIMIT {} OFFSET {}",
        filter.page.limit,
        filter.page.offset.min(i64::MAX as u64)
    );
    let items = conn
        .prepare(&sql)
        .map_err(StoreError::from)?
        .query_map(rusqlite::params_from_iter(args.iter()), tx_from_row)
        .map_err(StoreError::from)?
        .collect::<rusqlite::Result<Vec<_>>>()
        .map_err(StoreError::from)?;
    Ok(PageOf {
        items,
        total_count: total as u64,
    })
}

/// Every recorded operation on `key`, ascending by
/// `(block_num, tx_num, write_pos)`. Unknown keys yield an empty list.
pub fn state_history(key: &str, include_invalid: bool, snap: &Snapshot<'_>) -> Result<Vec<HistoryEntry>> {
    let mut entries = snap.history(key)?;
    if !include_invalid {
        entries.retain(|e| e.is_valid);
    }
    Ok(entries)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryScope {
    /// Current world state.
    #[default]
    Latest,
    /// Every value ever written by a valid transaction.
    History,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RichQuery {
    pub expr: QueryExpr,
    pub scope: QueryScope,
    pub schema_id: Option<u64>,
    pub page: Page,
}

impl RichQuery {
    pub fn latest(expr: QueryExpr) -> Self {
        RichQuery {
            expr,
            scope: QueryScope::Latest,
            schema_id: None,
            page: Page::default(),
        }
    }

    pub fn parse(text: &str, scope: QueryScope, schema_id: Option<u64>, page: Page) -> Result<Self> {
        Ok(RichQuery {
            expr: parse_query(text)?,
            scope,
            schema_id,
            page,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateMatch {
    pub key: String,
    pub value: Value,
    pub version: StateVersion,
    pub schema_id: Option<u64>,
}

/// States whose value satisfies the query, ordered by key then version.
///
/// With a schema restriction, the latest scope only scans states classified
/// under that schema; the history scope only keys currently classified under
/// it.
pub fn rich_query(q: &RichQuery, snap: &Snapshot<'_>) -> Result<PageOf<StateMatch>> {
    q.page.validate().map_err(|e| match e {
        QueryError::InvalidFilter(m) => QueryError::InvalidQuery(m),
        other => other,
    })?;
    if q.schema_id == Some(NON_JSON_SCHEMA_ID) {
        return Err(QueryError::InvalidQuery(
            "schema 0 holds non-JSON values, which path conditions cannot address".into(),
        ));
    }
    let conn = snap.conn();
    let mut matches = Vec::new();
    match q.scope {
        QueryScope::Latest => {
            let (sql, args): (String, Vec<SqlValue>) = match q.schema_id {
                Some(id) => (
                    format!("SELECT {STATE_COLUMNS} FROM {STATES_IN_SCHEMA} ORDER BY m.key"),
                    vec![SqlValue::Integer(id as i64)],
                ),
                None => (format!("SELECT {STATE_COLUMNS} FROM {STATE_SOURCE} ORDER BY w.key"), vec![]),
            };
            let mut stmt = conn.prepare(&sql).map_err(StoreError::from)?;
            let rows = stmt
                .query_map(rusqlite::params_from_iter(args.iter()), state_from_row)
                .map_err(StoreError::from)?;
            for row in rows {
                let s = row.map_err(StoreError::from)?;
                let Ok(value) = serde_json::from_str::<Value>(&s.latest_value) else {
                    continue;
                };
                if eval_expr(&q.expr, &value) {
                    matches.push(StateMatch {
                        key: s.key,
                        value,
                        version: s.version,
                        schema_id: s.schema_id,
                    });
                }
            }
        }
        QueryScope::History => {
            let cols = HISTORY_COLUMNS
                .split(", ")
                .map(|c| format!("h.{c}"))
                .collect::<Vec<_>>()
                .join(", ");
            let (sql, args): (String, Vec<SqlValue>) = match q.schema_id {
                Some(id) => (
                    format!(
                        "SELECT {cols}, m.schema_id FROM history h JOIN schema_members m ON m.key = h.key \
                         WHERE h.is_valid = 1 AND h.op = 'WRITE' AND m.schema_id = ?1 \
                         ORDER BY h.key, h.block_num, h.tx_num, h.write_pos"
                    ),
                    vec![SqlValue::Integer(id as i64)],
                ),
                None => (
                    format!(
                        "SELECT {cols}, m.schema_id FROM history h LEFT JOIN schema_members m ON m.key = h.key \
                         WHERE h.is_valid = 1 AND h.op = 'WRITE' \
                         ORDER BY h.key, h.block_num, h.tx_num, h.write_pos"
                    ),
                    vec![],
                ),
            };
            let mut stmt = conn.prepare(&sql).map_err(StoreError::from)?;
            let rows = stmt
                .query_map(rusqlite::params_from_iter(args.iter()), |r| {
                    Ok((history_from_row(r)?, r.get::<_, Option<i64>>(8)?))
                })
                .map_err(StoreError::from)?;
            for row in rows {
                let (h, schema_id) = row.map_err(StoreError::from)?;
                let Some(Ok(value)) = h.value.as_deref().map(serde_json::from_str::<Value>) else {
                    continue;
                };
                if eval_expr(&q.expr, &value) {
                    matches.push(StateMatch {
                        version: h.version(),
                        key: h.key,
                        value,
                        schema_id: schema_id.map(|v| v as u64),
                    });
                }
            }
        }
    }
    let total_count = matches.len() as u64;
    Ok(PageOf {
        items: q.page.window(matches),
        total_count,
    })
}

/// Table-style summary of one schema record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemaOverview {
    pub schema_id: u64,
    pub level_count: usize,
    pub props_per_level: Vec<usize>,
    pub member_count: u64,
    pub sample_paths: Vec<SchemaPath>,
}

impl From<&SchemaRecord> for SchemaOverview {
    fn from(r: &SchemaRecord) -> Self {
        SchemaOverview {
            schema_id: r.schema_id,
            level_count: r.level_count,
            props_per_level: r.props_per_level.clone(),
            member_count: r.member_count,
            sample_paths: r.tree.canonical_paths().iter().take(SAMPLE_PATHS).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemaDetail {
    #[serde(flatten)]
    pub overview: SchemaOverview,
    pub tree: SchemaTree,
    pub canonical_paths: Vec<SchemaPath>,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
}

pub fn schema_overview(snap: &Snapshot<'_>) -> Result<Vec<SchemaOverview>> {
    Ok(snap.schemas()?.iter().map(SchemaOverview::from).collect())
}

pub fn schema_detail(id: u64, snap: &Snapshot<'_>) -> Result<SchemaDetail> {
    let r = snap.schema(id)?;
    Ok(SchemaDetail {
        overview: SchemaOverview::from(&r),
        canonical_paths: r.tree.canonical_paths().iter().cloned().collect(),
        created_at: r.created_at,
        updated_at: r.updated_at,
        tree: r.tree,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerStats {
    pub block_count: u64,
    pub tx_count: u64,
    pub valid_tx_count: u64,
    pub state_count: u64,
    pub schema_overview: Vec<SchemaOverview>,
    pub per_chaincode: BTreeMap<String, u64>,
    pub per_creator: BTreeMap<String, u64>,
}

pub fn ledger_stats(snap: &Snapshot<'_>) -> Result<LedgerStats> {
    let conn = snap.conn();
    let grouped = |column: &str| -> Result<BTreeMap<String, u64>> {
        let mut stmt = conn
            .prepare(&format!("SELECT {column}, count(*) FROM transactions GROUP BY {column}"))
            .map_err(StoreError::from)?;
        let rows = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)? as u64)))
            .map_err(StoreError::from)?
            .collect::<rusqlite::Result<BTreeMap<_, _>>>()
            .map_err(StoreError::from)?;
        Ok(rows)
    };
    let valid: i64 = conn
        .query_row("SELECT count(*) FROM transactions WHERE is_valid = 1", [], |r| r.get(0))
        .map_err(StoreError::from)?;
    Ok(LedgerStats {
        block_count: snap.count(StoreTable::Blocks)?,
        tx_count: snap.count(StoreTable::Transactions)?,
        valid_tx_count: valid as u64,
        state_count: snap.count(StoreTable::WorldState)?,
        schema_overview: schema_overview(snap)?,
        per_chaincode: grouped("chaincode_name")?,
        per_creator: grouped("creator_msp")?,
    })
}
