//! Event-log ingestion: parsing, core filtering, time splits, history
//! truncation, and binarization into sparse interaction matrices.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type UserId = String;
pub type ItemId = String;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("input contains no events")]
    EmptyInput,
    #[error("invalid column spec {0:?}: need user, item and timestamp exactly once")]
    BadColumns(String),
    #[error("{0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One consumption event. Timestamps are any totally ordered integers
/// (epoch seconds in practice).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: i64,
    pub user: UserId,
    pub item: ItemId,
}

/// Roles a column of the input file can play.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColumnRole {
    User,
    Item,
    Timestamp,
    Skip,
}

/// Delimited-text input format: delimiter string plus the role of each column.
#[derive(Debug, Clone)]
pub struct InputFormat {
    delimiter: String,
    columns: Vec<ColumnRole>,
    user_pos: usize,
    item_pos: usize,
    ts_pos: usize,
}

impl Default for InputFormat {
    fn default() -> Self {
        InputFormat::new("\t", "user,item,timestamp").unwrap()
    }
}

impl InputFormat {
    /// `columns` is a comma-separated list of `user`, `item`, `timestamp`
    /// and `_` (skip), each role appearing exactly once.
    pub fn new(delimiter: &str, columns: &str) -> Result<Self, IngestError> {
        if delimiter.is_empty() {
            return Err(IngestError::BadConfig("delimiter must be nonempty".into()));
        }
        let mut roles = Vec::new();
        for tok in columns.split(',') {
            roles.push(match tok.trim() {
                "user" => ColumnRole::User,
                "item" => ColumnRole::Item,
                "timestamp" | "time" | "ts" => ColumnRole::Timestamp,
                "_" | "skip" => ColumnRole::Skip,
                _ => return Err(IngestError::BadColumns(columns.into())),
            });
        }
        let pos_of = |role| roles.iter().position(|&r| r == role);
        let count_of = |role| roles.iter().filter(|&&r| r == role).count();
        if count_of(ColumnRole::User) != 1
            || count_of(ColumnRole::Item) != 1
            || count_of(ColumnRole::Timestamp) != 1
        {
            return Err(IngestError::BadColumns(columns.into()));
        }
        Ok(InputFormat {
            delimiter: delimiter.to_string(),
            user_pos: pos_of(ColumnRole::User).unwrap(),
            item_pos: pos_of(ColumnRole::Item).unwrap(),
            ts_pos: pos_of(ColumnRole::Timestamp).unwrap(),
            columns: roles,
        })
    }

    pub fn delimiter(&self) -> &str {
        &self.delimiter
    }
}

/// Time-ordered event log with explicit user/item vocabularies.
///
/// Events are sorted ascending by (timestamp, user, item), so timestamp ties
/// resolve deterministically by lexical id order. Vocabularies are sorted and
/// may be supersets of the ids occurring in `events` (history truncation
/// keeps emptied items in the vocabulary).
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
    users: Vec<UserId>,
    items: Vec<ItemId>,
    user_index: HashMap<UserId, u32>,
    item_index: HashMap<ItemId, u32>,
}

impl EventLog {
    /// Build a log from raw events: deduplicates exact (user, item, timestamp)
    /// triples, sorts, and derives vocabularies from the events.
    pub fn from_events(mut events: Vec<Event>) -> Self {
        events.sort();
        events.dedup();
        let mut users: Vec<UserId> = events.iter().map(|e| e.user.clone()).collect();
        let mut items: Vec<ItemId> = events.iter().map(|e| e.item.clone()).collect();
        users.sort();
        users.dedup();
        items.sort();
        items.dedup();
        Self::with_vocabularies(events, users, items)
    }

    /// Build a log with explicit vocabularies, which must cover every id in
    /// `events`. Panics on uncovered ids or duplicate vocabulary entries.
    pub fn with_vocabularies(mut events: Vec<Event>, users: Vec<UserId>, items: Vec<ItemId>) -> Self {
        events.sort();
        events.dedup();
        let user_index: HashMap<UserId, u32> = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i as u32))
            .collect();
        let item_index: HashMap<ItemId, u32> = items
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i as u32))
            .collect();
        assert_eq!(user_index.len(), users.len(), "duplicate user in vocabulary");
        assert_eq!(item_index.len(), items.len(), "duplicate item in vocabulary");
        for e in &events {
            assert!(user_index.contains_key(&e.user), "event user not in vocabulary");
            assert!(item_index.contains_key(&e.item), "event item not in vocabulary");
        }
        EventLog {
            events,
            users,
            items,
            user_index,
            item_index,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn user_idx(&self, user: &str) -> Option<u32> {
        self.user_index.get(user).copied()
    }

    pub fn item_idx(&self, item: &str) -> Option<u32> {
        self.item_index.get(item).copied()
    }

    /// Per-user event lists in vocabulary order; each inner list keeps the
    /// global (timestamp, user, item) sort order.
    pub fn events_by_user(&self) -> Vec<Vec<&Event>> {
        let mut per_user: Vec<Vec<&Event>> = vec![Vec::new(); self.users.len()];
        for e in &self.events {
            per_user[self.user_index[&e.user] as usize].push(e);
        }
        per_user
    }

    /// Distinct consumed item indices per user, sorted ascending.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); self.users.len()];
        for e in &self.events {
            per_user[self.user_index[&e.user] as usize].push(self.item_index[&e.item]);
        }
        for row in &mut per_user {
            row.sort_unstable();
            row.dedup();
        }
        per_user
    }
}

/// Sparse binary user x item indicator matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    rows: usize,
    cols: usize,
    row_items: Vec<Vec<u32>>,
    nnz: usize,
}

impl InteractionMatrix {
    /// `row_items` holds, per row, the sorted distinct column indices set to 1.
    pub fn new(rows: usize, cols: usize, mut row_items: Vec<Vec<u32>>) -> Self {
        assert_eq!(row_items.len(), rows);
        let mut nnz = 0;
        for row in &mut row_items {
            row.sort_unstable();
            row.dedup();
            if let Some(&max) = row.last() {
                assert!((max as usize) < cols, "column index out of range");
            }
            nnz += row.len();
        }
        InteractionMatrix {
            rows,
            cols,
            row_items,
            nnz,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.row_items[r]
    }

    pub fn contains(&self, r: usize, c: u32) -> bool {
        self.row_items[r].binary_search(&c).is_ok()
    }

    pub fn sparsity(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            1.0
        } else {
            1.0 - self.nnz as f64 / total as f64
        }
    }

    /// Number of rows containing each column.
    pub fn column_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.cols];
        for row in &self.row_items {
            for &c in row {
                counts[c as usize] += 1;
            }
        }
        counts
    }

    /// Row indices containing each column, sorted ascending.
    pub fn column_lists(&self) -> Vec<Vec<u32>> {
        let mut cols: Vec<Vec<u32>> = vec![Vec::new(); self.cols];
        for (r, row) in self.row_items.iter().enumerate() {
            for &c in row {
                cols[c as usize].push(r as u32);
            }
        }
        cols
    }

    /// Keep only the given columns, renumbering them 0..k in the given order.
    pub fn select_columns(&self, cols: &[u32]) -> InteractionMatrix {
        let mut remap = vec![u32::MAX; self.cols];
        for (new, &old) in cols.iter().enumerate() {
            remap[old as usize] = new as u32;
        }
        let row_items = self
            .row_items
            .iter()
            .map(|row| {
                let mut out: Vec<u32> = row
                    .iter()
                    .filter_map(|&c| {
                        let m = remap[c as usize];
                        (m != u32::MAX).then_some(m)
                    })
                    .collect();
                out.sort_unstable();
                out
            })
            .collect();
        InteractionMatrix::new(self.rows, cols.len(), row_items)
    }

    /// Serialize as a sparse coordinate list: header `rows cols nnz`, then one
    /// `row col` pair per line.
    pub fn write_coo<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.rows, self.cols, self.nnz)?;
        for (r, row) in self.row_items.iter().enumerate() {
            for &c in row {
                writeln!(w, "{} {}", r, c)?;
            }
        }
        Ok(())
    }

    pub fn read_coo<R: BufRead>(r: R) -> Result<InteractionMatrix, IngestError> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(IngestError::EmptyInput)?;
        let header = header?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad = |line: usize, reason: &str| IngestError::Malformed {
            line: line + 1,
            reason: reason.to_string(),
        };
        if parts.len() != 3 {
            return Err(bad(0, "expected header `rows cols nnz`"));
        }
        let rows: usize = parts[0].parse().map_err(|_| bad(0, "bad row count"))?;
        let cols: usize = parts[1].parse().map_err(|_| bad(0, "bad col count"))?;
        let nnz: usize = parts[2].parse().map_err(|_| bad(0, "bad nnz"))?;
        let mut row_items: Vec<Vec<u32>> = vec![Vec::new(); rows];
        let mut seen = 0usize;
        for (lineno, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let r: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(lineno, "bad row index"))?;
            let c: u32 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(lineno, "bad col index"))?;
            if r >= rows || c as usize >= cols {
                return Err(bad(lineno, "index out of range"));
            }
            row_items[r].push(c);
            seen += 1;
        }
        if seen != nnz {
            return Err(IngestError::Malformed {
                line: 0,
                reason: format!("header claims {} entries, found {}", nnz, seen),
            });
        }
        Ok(InteractionMatrix::new(rows, cols, row_items))
    }
}

/// Parse delimited text into an [`EventLog`]. Exact duplicate triples are
/// dropped; the same (user, item) at different timestamps is kept.
pub fn parse_events<R: BufRead>(reader: R, format: &InputFormat) -> Result<EventLog, IngestError> {
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter.as_str()).collect();
        let bad = |reason: String| IngestError::Malformed {
            line: lineno + 1,
            reason,
        };
        if fields.len() < format.columns.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                format.columns.len(),
                fields.len()
            )));
        }
        let user = fields[format.user_pos].trim();
        let item = fields[format.item_pos].trim();
        let ts_field = fields[format.ts_pos].trim();
        if user.is_empty() {
            return Err(bad("empty user id".into()));
        }
        if item.is_empty() {
            return Err(bad("empty item id".into()));
        }
        let timestamp: i64 = ts_field
            .parse()
            .map_err(|_| bad(format!("bad timestamp {:?}", ts_field)))?;
        events.push(Event {
            timestamp,
            user: user.to_string(),
            item: item.to_string(),
        });
    }
    if events.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    Ok(EventLog::from_events(events))
}

/// Write a log back out in the same schema the parser accepts.
pub fn write_events<W: std::io::Write>(
    log: &EventLog,
    format: &InputFormat,
    mut w: W,
) -> std::io::Result<()> {
    for e in log.events() {
        let mut fields: Vec<&str> = Vec::with_capacity(format.columns.len());
        let ts = e.timestamp.to_string();
        for role in &format.columns {
            fields.push(match role {
                ColumnRole::User => &e.user,
                ColumnRole::Item => &e.item,
                ColumnRole::Timestamp => &ts,
                ColumnRole::Skip => "0",
            });
        }
        writeln!(w, "{}", fields.join(&format.delimiter))?;
    }
    Ok(())
}

/// Iteratively drop users then items with fewer events than the thresholds
/// until a fixpoint; vocabularies are rebuilt from the surviving events.
pub fn core_filter(log: &EventLog, min_user_events: usize, min_item_events: usize) -> EventLog {
    let mut events: Vec<Event> = log.events().to_vec();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *user_counts.entry(e.user.as_str()).or_default() += 1;
        }
        let keep_users: HashSet<String> = user_counts
            .iter()
            .filter(|(_, &c)| c >= min_user_events)
            .map(|(u, _)| u.to_string())
            .collect();
        let before = events.len();
        events.retain(|e| keep_users.contains(&e.user));

        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *item_counts.entry(e.item.as_str()).or_default() += 1;
        }
        let keep_items: HashSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c >= min_item_events)
            .map(|(i, _)| i.to_string())
            .collect();
        events.retain(|e| keep_items.contains(&e.item));

        if events.len() == before {
            break;
        }
    }
    EventLog::from_events(events)
}

/// Partition events by global time order into train/validation/test. Sizes
/// are ceil(f*n) for train and validation, remainder for test, so every
/// training event precedes every test event.
pub fn split_by_time(
    log: &EventLog,
    fractions: (f64, f64, f64),
) -> Result<(EventLog, EventLog, EventLog), IngestError> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 {
        return Err(IngestError::BadConfig(
            "split fractions must all be positive".into(),
        ));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(IngestError::BadConfig(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = log.len();
    // Guard against float error pushing an exact product over its ceiling.
    let take = |f: f64| ((f * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_train = take(ft).min(n);
    let n_valid = take(fv).min(n - n_train);
    let events = log.events();
    let train = EventLog::from_events(events[..n_train].to_vec());
    let valid = EventLog::from_events(events[n_train..n_train + n_valid].to_vec());
    let test = EventLog::from_events(events[n_train + n_valid..].to_vec());
    Ok((train, valid, test))
}

/// Keep at most the `h` most recent events per user (ties resolved by the
/// log's deterministic sort order). Vocabularies are preserved, so items left
/// with zero events keep their column.
pub fn truncate_history(log: &EventLog, h: usize) -> Result<EventLog, IngestError> {
    if h == 0 {
        return Err(IngestError::BadConfig(
            "history length must be at least 1".into(),
        ));
    }
    let mut kept = Vec::with_capacity(log.len());
    for user_events in log.events_by_user() {
        let start = user_events.len().saturating_sub(h);
        kept.extend(user_events[start..].iter().map(|&e| e.clone()));
    }
    Ok(EventLog::with_vocabularies(
        kept,
        log.users().to_vec(),
        log.items().to_vec(),
    ))
}

/// Collapse the log to a binary user x item indicator matrix over the log's
/// vocabularies.
pub fn binarize(log: &EventLog) -> InteractionMatrix {
    InteractionMatrix::new(log.users().len(), log.items().len(), log.items_by_user())
}
