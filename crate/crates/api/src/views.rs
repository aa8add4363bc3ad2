//! Request types and response payloads shared by the HTTP service and the
//! CLI. Every payload is one query-engine call serialized as JSON; the
//! service wraps it in an envelope and the CLI prints it as is.

use std::fmt;

use refiner_core::ingest::QueueGauge;
use refiner_core::model::Timestamp;
use refiner_core::query::{self, Page, QueryError, QueryScope, RichQuery, SortOrder, TxFilter, DEFAULT_PAGE_LIMIT};
use refiner_core::store::{Snapshot, StoreError};
use refiner_core::sync::SyncState;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::sync::Arc;

/// Machine-readable error class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    SyntaxError,
    InvalidFilter,
    InvalidQuery,
    InvalidRequest,
    NotFound,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::SyntaxError => "SYNTAX_ERROR",
            ErrorCode::InvalidFilter => "INVALID_FILTER",
            ErrorCode::InvalidQuery => "INVALID_QUERY",
            ErrorCode::InvalidRequest => "INVALID_REQUEST",
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::Internal => "INTERNAL",
        }
    }

    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::NotFound => 404,
            ErrorCode::Internal => 500,
            _ => 400,
        }
    }

    /// Whether the caller, not the data, is at fault.
    pub fn is_user_error(self) -> bool {
        self.http_status() == 400
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}

impl ViewError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ViewError {
            code,
            message: message.into(),
            offset: None,
        }
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidRequest, message)
    }
}

impl fmt::Display for ViewError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code.as_str(), self.message)?;
        match self.offset {
            Some(offset) if !self.message.contains(&format!("offset {offset}")) => {
                write!(f, " (at offset {offset})")?;
            }
            _ => {}
        }
        Ok(())
    }
}

impl std::error::Error for ViewError {}

impl From<StoreError> for ViewError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ViewError::new(ErrorCode::NotFound, format!("not found: {what}")),
            other => ViewError::new(ErrorCode::Internal, other.to_string()),
        }
    }
}

impl From<QueryError> for ViewError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::InvalidFilter(m) => ViewError::new(ErrorCode::InvalidFilter, m),
            QueryError::InvalidQuery(m) => ViewError::new(ErrorCode::InvalidQuery, m),
            QueryError::Syntax(s) => ViewError {
                code: ErrorCode::SyntaxError,
                message: s.to_string(),
                offset: Some(s.offset),
            },
            QueryError::Store(s) => s.into(),
        }
    }
}

/// The `data` of a response and, for paged results, the full result size.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub data: Value,
    pub total_count: Option<u64>,
}

impl Payload {
    fn of(data: impl Serialize) -> Self {
        Payload {
            data: serde_json::to_value(data).expect("payloads serialize"),
            total_count: None,
        }
    }

    fn counted(data: impl Serialize, total: u64) -> Self {
        Payload {
            total_count: Some(total),
            ..Self::of(data)
        }
    }

    /// The CLI's JSON rendering, identical to the service's `data` field.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.data).expect("values serialize")
    }
}

pub type ViewResult = Result<Payload, ViewError>;

/// Response body: `{data, total_count?, error?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub data: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_count: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ViewError>,
}

impl From<ViewResult> for Envelope {
    fn from(r: ViewResult) -> Self {
        match r {
            Ok(p) => Envelope {
                data: p.data,
                total_count: p.total_count,
                error: None,
            },
            Err(e) => Envelope {
                data: Value::Null,
                total_count: None,
                error: Some(e),
            },
        }
    }
}

fn page(offset: Option<u64>, limit: Option<u64>, limit_max: u64) -> Result<Page, ViewError> {
    let page = Page::new(offset.unwrap_or(0), limit.unwrap_or(DEFAULT_PAGE_LIMIT.min(limit_max)));
    page.validate()?;
    if page.limit > limit_max {
        return Err(ViewError::new(
            ErrorCode::InvalidFilter,
            format!("limit must be between 1 and {limit_max}, got {}", page.limit),
        ));
    }
    Ok(page)
}

fn timestamp(field: &str, text: &str) -> Result<Timestamp, ViewError> {
    Timestamp::parse_rfc3339(text)
        .map_err(|e| ViewError::new(ErrorCode::InvalidFilter, format!("{field} is not an RFC 3339 timestamp: {e}")))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageParams {
    pub offset: Option<u64>,
    pub limit: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocksParams {
    pub from: Option<u64>,
    pub to: Option<u64>,
    pub offset: Option<u64>,
    pub limit: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxParams {
    pub creator: Option<String>,
    pub endorser: Option<String>,
    pub chaincode: Option<String>,
    pub function: Option<String>,
    pub channel: Option<String>,
    /// RFC 3339, inclusive.
    pub time_from: Option<String>,
    /// RFC 3339, inclusive.
    pub time_to: Option<String>,
    pub block_from: Option<u64>,
    pub block_to: Option<u64>,
    /// `false` includes invalid transactions. Defaults to `true`.
    pub valid: Option<bool>,
    /// `asc` (default) or `desc` by `(block_num, tx_num)`.
    pub order: Option<String>,
    pub offset: Option<u64>,
    pub limit: Option<u64>,
}

impl TxParams {
    pub fn to_filter(&self, limit_max: u64) -> Result<TxFilter, ViewError> {
        let time_range = match (&self.time_from, &self.time_to) {
            (None, None) => None,
            (from, to) => Some((
                from.as_deref()
                    .map_or(Ok(Timestamp::from_micros(i64::MIN)), |t| timestamp("time_from", t))?,
                to.as_deref()
                    .map_or(Ok(Timestamp::from_micros(i64::MAX)), |t| timestamp("time_to", t))?,
            )),
        };
        let block_range = match (self.block_from, self.block_to) {
            (None, None) => None,
            (from, to) => Some((from.unwrap_or(0), to.unwrap_or(i64::MAX as u64))),
        };
        let sort = match self.order.as_deref() {
            None | Some("asc") => SortOrder::Ascending,
            Some("desc") => SortOrder::Descending,
            Some(other) => {
                return Err(ViewError::new(
                    ErrorCode::InvalidFilter,
                    format!("order must be asc or desc, got {other:?}"),
                ))
            }
        };
        Ok(TxFilter {
            block_range,
            time_range,
            tx_id: None,
            creator_msp: self.creator.clone(),
            endorser_msp: self.endorser.clone(),
            chaincode_name: self.chaincode.clone(),
            function: self.function.clone(),
            channel_id: self.channel.clone(),
            valid_only: self.valid.unwrap_or(true),
            page: page(self.offset, self.limit, limit_max)?,
            sort,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryParams {
    pub include_invalid: Option<bool>,
}

/// Body of `POST /query`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    pub expr: String,
    #[serde(default)]
    pub scope: QueryScope,
    pub schema_id: Option<u64>,
    pub offset: Option<u64>,
    pub limit: Option<u64>,
}

impl QueryBody {
    pub fn to_query(&self, limit_max: u64) -> Result<RichQuery, ViewError> {
        let page = page(self.offset, self.limit, limit_max)
            .map_err(|e| ViewError::new(ErrorCode::InvalidQuery, e.message))?;
        Ok(RichQuery::parse(&self.expr, self.scope, self.schema_id, page)?)
    }
}

/// Live progress of an in-process synchronizer.
#[derive(Clone)]
pub struct SyncProbe {
    pub state: Arc<SyncState>,
    pub queue: QueueGauge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncStatusView {
    pub recorded_block_height: i64,
    pub last_sync_at: Option<Timestamp>,
    pub source_height: Option<i64>,
    pub schema_queue_depth: u64,
}

pub fn blocks(snap: &Snapshot<'_>, p: &BlocksParams, limit_max: u64) -> ViewResult {
    let (from, to) = (p.from.unwrap_or(0), p.to.unwrap_or(u64::MAX));
    if from > to {
        return Err(ViewError::new(ErrorCode::InvalidFilter, format!("block range {from}..{to} is reversed")));
    }
    let page = page(p.offset, p.limit, limit_max)?;
    let (rows, total) = snap.blocks(from, to, page.offset, page.limit)?;
    Ok(Payload::counted(rows, total))
}

pub fn block(snap: &Snapshot<'_>, number: u64) -> ViewResult {
    Ok(Payload::of(snap.get_block(number)?))
}

pub fn transactions(snap: &Snapshot<'_>, p: &TxParams, limit_max: u64) -> ViewResult {
    let page = query::query_transactions(&p.to_filter(limit_max)?, snap)?;
    Ok(Payload::counted(page.items, page.total_count))
}

pub fn transaction(snap: &Snapshot<'_>, tx_id: &str) -> ViewResult {
    Ok(Payload::of(snap.get_transaction(tx_id)?))
}

pub fn state(snap: &Snapshot<'_>, key: &str) -> ViewResult {
    Ok(Payload::of(snap.state(key)?))
}

pub fn history(snap: &Snapshot<'_>, key: &str, p: &HistoryParams) -> ViewResult {
    let entries = query::state_history(key, p.include_invalid.unwrap_or(false), snap)?;
    let n = entries.len() as u64;
    Ok(Payload::counted(entries, n))
}

pub fn schemas(snap: &Snapshot<'_>) -> ViewResult {
    let rows = query::schema_overview(snap)?;
    let n = rows.len() as u64;
    Ok(Payload::counted(rows, n))
}

pub fn schema(snap: &Snapshot<'_>, id: u64) -> ViewResult {
    Ok(Payload::of(query::schema_detail(id, snap)?))
}

pub fn schema_states(snap: &Snapshot<'_>, id: u64, p: &PageParams, limit_max: u64) -> ViewResult {
    if id != refiner_core::schema::NON_JSON_SCHEMA_ID {
        snap.schema(id)?;
    }
    let page = page(p.offset, p.limit, limit_max)?;
    let (rows, total) = snap.states_by_schema(id, page.offset, page.limit)?;
    Ok(Payload::counted(rows, total))
}

pub fn rich_query(snap: &Snapshot<'_>, body: &QueryBody, limit_max: u64) -> ViewResult {
    let page = query::rich_query(&body.to_query(limit_max)?, snap)?;
    Ok(Payload::counted(page.items, page.total_count))
}

pub fn stats(snap: &Snapshot<'_>) -> ViewResult {
    Ok(Payload::of(query::ledger_stats(snap)?))
}

pub fn sync_status(snap: &Snapshot<'_>, probe: Option<&SyncProbe>) -> ViewResult {
    let view = match probe {
        Some(p) => {
            let s = p.state.status();
            SyncStatusView {
                recorded_block_height: s.recorded_block_height,
                last_sync_at: s.last_sync_at,
                source_height: s.source_height,
                schema_queue_depth: p.queue.depth() as u64,
            }
        }
        None => SyncStatusView {
            recorded_block_height: snap.recorded_height()?,
            last_sync_at: None,
            source_height: None,
            schema_queue_depth: 0,
        },
    };
    Ok(Payload::of(view))
}
