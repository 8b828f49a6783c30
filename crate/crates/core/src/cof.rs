//! Conformative filtering: characterize each taste group by the aggregated
//! recent consumption of its (soft) members, characterize a user by her
//! group memberships, and score items by the inner product of the two.
//! Includes the group-coverage bound calculator and its Monte-Carlo check.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::eval::{EvalUser, Scorer};
use crate::ingest::{EventLog, ItemId, UserId};
use crate::ltm::{Evidence, LatentTreeModel, LtmError};

#[derive(Debug, Error)]
pub enum CofError {
    #[error("item {0:?} has no leaf in the model")]
    UnknownItem(String),
    #[error("history contains user {0:?} not present in the training log")]
    UnknownUser(String),
    #[error("group {0} has zero total membership")]
    EmptyGroup(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("coverage bound out of domain: {0}")]
    OutOfDomain(String),
    #[error("{0}")]
    BadConfig(String),
    #[error(transparent)]
    Ltm(#[from] LtmError),
}

/// How much per-user history feeds group characterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryWindow {
    /// The latest `n` events of each user.
    Latest(usize),
    /// Entire history.
    Full,
}

impl HistoryWindow {
    /// Truncate a log accordingly; `Full` is the identity.
    pub fn apply(&self, log: &EventLog) -> Result<EventLog, CofError> {
        match *self {
            HistoryWindow::Full => Ok(log.clone()),
            HistoryWindow::Latest(n) => crate::ingest::truncate_history(log, n)
                .map_err(|e| CofError::BadConfig(e.to_string())),
        }
    }
}

impl PartialOrd for HistoryWindow {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HistoryWindow {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use HistoryWindow::*;
        match (self, other) {
            (Latest(a), Latest(b)) => a.cmp(b),
            (Latest(_), Full) => std::cmp::Ordering::Less,
            (Full, Latest(_)) => std::cmp::Ordering::Greater,
            (Full, Full) => std::cmp::Ordering::Equal,
        }
    }
}

impl fmt::Display for HistoryWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HistoryWindow::Latest(n) => write!(f, "{n}"),
            HistoryWindow::Full => write!(f, "full"),
        }
    }
}

impl Serialize for HistoryWindow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for HistoryWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(HistoryWindow::Full);
        }
        let n: usize = s
            .parse()
            .map_err(|_| format!("bad history window {s:?}: expected a count or `full`"))?;
        if n == 0 {
            return Err("history window must be at least 1".into());
        }
        Ok(HistoryWindow::Latest(n))
    }
}

/// Per-group item preferences p(i | G_k, D_H): the membership-weighted
/// fraction of users who consumed item i within the history window.
#[derive(Debug, Clone)]
pub struct GroupProfiles {
    pub level: u32,
    /// Metadata only: the window the history log was truncated with. The
    /// profile math sees just the truncated log, so builders that know the
    /// window set this field.
    pub window: HistoryWindow,
    group_count: usize,
    item_count: usize,
    /// Row-major, groups x items.
    values: Vec<f64>,
}

impl GroupProfiles {
    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn get(&self, group: usize, item: usize) -> f64 {
        self.values[group * self.item_count + item]
    }

    pub fn row(&self, group: usize) -> &[f64] {
        &self.values[group * self.item_count..(group + 1) * self.item_count]
    }
}

/// Membership vector: P(Z_k = s1 | user evidence) over one level's latents.
#[derive(Debug, Clone, PartialEq)]
pub struct UserVector {
    pub level: u32,
    pub values: Vec<f64>,
}

/// P(V = s1 | closed-world user evidence) for every model variable, one row
/// per training user. Computed once, sliced per level afterwards.
pub fn posterior_table(
    model: &LatentTreeModel,
    train: &EventLog,
) -> Result<Vec<Vec<f64>>, CofError> {
    let consumed = mapped_user_items(model, train)?;
    consumed
        .par_chunks(64)
        .map(|chunk| {
            chunk
                .iter()
                .map(|items| {
                    let post = if items.is_empty() {
                        model.propagate(&Evidence::empty(model), false)?
                    } else {
                        model.propagate(&Evidence::closed_world(model, items), false)?
                    };
                    Ok(post.node_p1)
                })
                .collect::<Result<Vec<_>, LtmError>>()
        })
        .collect::<Result<Vec<_>, LtmError>>()
        .map(|chunks| chunks.into_iter().flatten().collect())
        .map_err(CofError::from)
}

/// Distinct consumed items per user, as model leaf columns.
fn mapped_user_items(model: &LatentTreeModel, log: &EventLog) -> Result<Vec<Vec<u32>>, CofError> {
    let col_of: Vec<u32> = log
        .items()
        .iter()
        .map(|item| {
            model
                .item_column(item)
                .ok_or_else(|| CofError::UnknownItem(item.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(log
        .items_by_user()
        .into_iter()
        .map(|items| items.into_iter().map(|i| col_of[i as usize]).collect())
        .collect())
}

/// Memberships of every training user in one level's groups, from the full
/// training history (closed-world evidence; empty history keeps the prior).
pub fn membership_matrix(
    model: &LatentTreeModel,
    train: &EventLog,
    level: u32,
) -> Result<Vec<Vec<f64>>, CofError> {
    let latents = model.latents_at(level)?.to_vec();
    let table = posterior_table(model, train)?;
    Ok(table
        .into_iter()
        .map(|row| latents.iter().map(|&v| row[v]).collect())
        .collect())
}

/// Group profiles (one row per level-`level` latent) with indicators from the
/// `history` log and memberships from the full training history.
pub fn group_profiles(
    model: &LatentTreeModel,
    level: u32,
    history: &EventLog,
    full_train: &EventLog,
) -> Result<GroupProfiles, CofError> {
    let memberships = membership_matrix(model, full_train, level)?;
    group_profiles_from_memberships(model, level, history, full_train, &memberships)
}

/// Same as [`group_profiles`] with memberships supplied by the caller, so a
/// grid over (level, H) can reuse one inference pass.
pub fn group_profiles_from_memberships(
    model: &LatentTreeModel,
    level: u32,
    history: &EventLog,
    full_train: &EventLog,
    memberships: &[Vec<f64>],
) -> Result<GroupProfiles, CofError> {
    let latents = model.latents_at(level)?;
    let k = latents.len();
    let items = model.leaf_count();
    if memberships.len() != full_train.users().len() {
        return Err(CofError::DimensionMismatch(format!(
            "{} membership rows for {} training users",
            memberships.len(),
            full_train.users().len()
        )));
    }
    for user in history.users() {
        if full_train.user_idx(user).is_none() {
            return Err(CofError::UnknownUser(user.clone()));
        }
    }

    let history_items = mapped_user_items(model, history)?;
    let mut numer = vec![0.0f64; k * items];
    let mut denom = vec![0.0f64; k];
    for (u, user) in full_train.users().iter().enumerate() {
        let m = &memberships[u];
        if m.len() != k {
            return Err(CofError::DimensionMismatch(format!(
                "membership row has {} entries for {} groups",
                m.len(),
                k
            )));
        }
        for g in 0..k {
            denom[g] += m[g];
        }
        // The window may have dropped the user entirely; an absent user
        // simply contributes no indicators.
        if let Some(hu) = history.user_idx(user) {
            for &item in &history_items[hu as usize] {
                for g in 0..k {
                    numer[g * items + item as usize] += m[g];
                }
            }
        }
    }
    let mut values = vec![0.0f64; k * items];
    for g in 0..k {
        if denom[g] <= 0.0 {
            return Err(CofError::EmptyGroup(model.var(latents[g]).id.clone()));
        }
        for i in 0..items {
            values[g * items + i] = numer[g * items + i] / denom[g];
        }
    }
    Ok(GroupProfiles {
        level,
        window: HistoryWindow::Full,
        group_count: k,
        item_count: items,
        values,
    })
}

/// Membership vector for one (possibly unseen) user from her consumed items.
/// An empty history yields the prior marginals.
pub fn user_vector(
    model: &LatentTreeModel,
    level: u32,
    consumed: &[ItemId],
) -> Result<UserVector, CofError> {
    let latents = model.latents_at(level)?;
    let cols: Vec<u32> = consumed
        .iter()
        .map(|item| {
            model
                .item_column(item)
                .ok_or_else(|| CofError::UnknownItem(item.clone()))
        })
        .collect::<Result<_, _>>()?;
    let post = if cols.is_empty() {
        model.propagate(&Evidence::empty(model), false)?
    } else {
        model.propagate(&Evidence::closed_world(model, &cols), false)?
    };
    Ok(UserVector {
        level,
        values: latents.iter().map(|&v| post.node_p1[v]).collect(),
    })
}

/// Score every item for one user: the inner product of the membership vector
/// with each item's column of group preferences.
pub fn score_all(user: &UserVector, profiles: &GroupProfiles) -> Result<Vec<f64>, CofError> {
    if user.values.len() != profiles.group_count() {
        return Err(CofError::DimensionMismatch(format!(
            "user vector has {} entries, profiles have {} groups",
            user.values.len(),
            profiles.group_count()
        )));
    }
    if user.level != profiles.level {
        return Err(CofError::DimensionMismatch(format!(
            "user vector level {} vs profile level {}",
            user.level, profiles.level
        )));
    }
    let items = profiles.item_count();
    let mut scores = vec![0.0f64; items];
    for (g, &m) in user.values.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let row = profiles.row(g);
        for (s, &p) in scores.iter_mut().zip(row) {
            *s += m * p;
        }
    }
    Ok(scores)
}

/// One scored item; `item` indexes the model's leaf columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem {
    pub item: u32,
    pub score: f64,
}

/// A user's ranked recommendations (training-consumed items excluded).
#[derive(Debug, Clone)]
pub struct ScoredList {
    pub user: UserId,
    pub entries: Vec<ScoredItem>,
}

/// Rank every candidate item (all items minus `consumed`) by descending
/// score, ties broken by ascending item index.
pub fn rank_candidates(scores: &[f64], consumed: &[u32]) -> Vec<ScoredItem> {
    let consumed: std::collections::HashSet<u32> = consumed.iter().copied().collect();
    let mut entries: Vec<ScoredItem> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !consumed.contains(&(*i as u32)))
        .map(|(i, &score)| ScoredItem {
            item: i as u32,
            score,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.item.cmp(&b.item))
    });
    entries
}

/// Top-R recommendations. Asking for more items than remain unconsumed
/// returns all of them.
pub fn recommend(scores: &[f64], consumed: &[u32], top: usize) -> Result<Vec<ScoredItem>, CofError> {
    if top == 0 {
        return Err(CofError::BadConfig("top must be at least 1".into()));
    }
    let mut ranked = rank_candidates(scores, consumed);
    ranked.truncate(top);
    Ok(ranked)
}

/// Inputs of the group-coverage question: with `items` items in total and
/// each of m group members picking `picks` items uniformly with replacement,
/// how large must m be so that at least a `coverage` fraction of the items is
/// picked by someone, with probability at least `confidence`?
#[derive(Debug, Clone, Copy)]
pub struct CoverageQuery {
    pub items: u64,
    pub picks: u64,
    pub coverage: f64,
    pub confidence: f64,
}

impl CoverageQuery {
    fn validate(&self) -> Result<(), CofError> {
        if self.items < 1 || self.picks < 1 {
            return Err(CofError::BadConfig(
                "items and picks must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.coverage) || !(0.0..1.0).contains(&self.confidence) {
            return Err(CofError::BadConfig(
                "coverage and confidence must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Smallest group size m with P(X >= coverage * items) >= confidence, where
/// X is the number of distinct items picked. Natural logs throughout;
/// rounded up because m counts people.
pub fn coverage_bound(query: &CoverageQuery) -> Result<u64, CofError> {
    query.validate()?;
    let n_items = query.items as f64;
    let slack = (-(1.0 - query.confidence).ln() / (2.0 * n_items)).sqrt();
    let arg = 1.0 - query.coverage - slack;
    if arg <= 0.0 {
        return Err(CofError::OutOfDomain(format!(
            "1 - q - sqrt(-ln(1-p)/(2N)) = {arg:.6} <= 0; the bound is vacuous"
        )));
    }
    let m = arg.ln() / (query.picks as f64 * (1.0 - 1.0 / n_items).ln());
    Ok(m.ceil().max(0.0) as u64)
}

/// Monte-Carlo estimate of the coverage event for a concrete group size.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageSim {
    /// Fraction of trials with X >= coverage * items.
    pub success_rate: f64,
    /// Mean distinct-item count over trials.
    pub mean_distinct: f64,
    /// Sample standard deviation of the distinct-item count.
    pub std_distinct: f64,
    /// Analytic E(X) = N (1 - (1 - 1/N)^(m n)).
    pub expected_distinct: f64,
    pub trials: u64,
}

/// Simulate `group_size` people each picking `picks` of `items` uniformly
/// with replacement; deterministic for a given seed.
pub fn coverage_simulate(
    items: u64,
    picks: u64,
    group_size: u64,
    coverage: f64,
    trials: u64,
    seed: u64,
) -> Result<CoverageSim, CofError> {
    if items < 1 || picks < 1 {
        return Err(CofError::BadConfig(
            "items and picks must be at least 1".into(),
        ));
    }
    if trials < 1 {
        return Err(CofError::BadConfig("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = items as usize;
    let threshold = coverage * items as f64 - 1e-9;
    let mut stamp = vec![0u64; n];
    let mut successes = 0u64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for trial in 1..=trials {
        let mut distinct = 0u64;
        for _ in 0..group_size.saturating_mul(picks) {
            let item = rng.gen_range(0..n);
            if stamp[item] != trial {
                stamp[item] = trial;
                distinct += 1;
            }
        }
        if distinct as f64 >= threshold {
            successes += 1;
        }
        sum += distinct as f64;
        sum_sq += (distinct as f64) * (distinct as f64);
    }
    let t = trials as f64;
    let mean = sum / t;
    let var = ((sum_sq - sum * sum / t) / (t - 1.0).max(1.0)).max(0.0);
    let mn = (group_size as f64) * (picks as f64);
    let expected = items as f64 * (1.0 - (1.0 - 1.0 / items as f64).powf(mn));
    Ok(CoverageSim {
        success_rate: successes as f64 / t,
        mean_distinct: mean,
        std_distinct: var.sqrt(),
        expected_distinct: expected,
        trials,
    })
}

/// Conformative-filtering scorer over the shared evaluation path: looks up
/// the user's precomputed membership vector and takes the inner product with
/// the group profiles.
pub struct CofScorer {
    profiles: GroupProfiles,
    memberships: HashMap<UserId, UserVector>,
}

impl CofScorer {
    pub fn new(
        model: &LatentTreeModel,
        train: &EventLog,
        level: u32,
        window: HistoryWindow,
    ) -> Result<CofScorer, CofError> {
        let memberships = membership_matrix(model, train, level)?;
        Self::with_memberships(model, train, level, window, memberships)
    }

    /// Build from a precomputed membership matrix (one row per train user).
    pub fn with_memberships(
        model: &LatentTreeModel,
        train: &EventLog,
        level: u32,
        window: HistoryWindow,
        memberships: Vec<Vec<f64>>,
    ) -> Result<CofScorer, CofError> {
        let history = window.apply(train)?;
        let mut profiles =
            group_profiles_from_memberships(model, level, &history, train, &memberships)?;
        profiles.window = window;
        let memberships = train
            .users()
            .iter()
            .zip(memberships)
            .map(|(u, values)| (u.clone(), UserVector { level, values }))
            .collect();
        Ok(CofScorer {
            profiles,
            memberships,
        })
    }

    pub fn profiles(&self) -> &GroupProfiles {
        &self.profiles
    }

    pub fn membership(&self, user: &str) -> Option<&UserVector> {
        self.memberships.get(user)
    }
}

impl Scorer for CofScorer {
    fn label(&self) -> String {
        format!(
            "cof(l={},H={})",
            self.profiles.level, self.profiles.window
        )
    }

    fn score(&self, user: &EvalUser) -> Vec<f64> {
        match self.memberships.get(&user.user) {
            Some(vector) => score_all(vector, &self.profiles)
                .expect("membership vector matches profile dimensions"),
            None => vec![0.0; self.profiles.item_count()],
        }
    }
}
