//! Method-agnostic top-N evaluation: Recall@R, NDCG over the full candidate
//! ranking, global diversity, the popularity/user-kNN/item-kNN reference
//! baselines, and the validation grid search over (level, H).

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cof::{self, rank_candidates, CofError, CofScorer, HistoryWindow};
use crate::ingest::{binarize, EventLog, InteractionMatrix, UserId};
use crate::ltm::LatentTreeModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("grid search needs at least one level and one history window")]
    EmptyGrid,
    #[error("scorer returned {got} scores for {want} items")]
    DimensionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Cof(#[from] CofError),
}

/// One user eligible for evaluation: present in training, with at least one
/// non-cold, not-already-consumed test item.
#[derive(Debug, Clone)]
pub struct EvalUser {
    pub user: UserId,
    /// Training-consumed item columns (candidate exclusions and evidence).
    pub train_items: Vec<u32>,
    /// Test-consumed item columns counted as relevant.
    pub relevant: Vec<u32>,
}

/// Evaluation roster derived from a training log and a held-out split.
#[derive(Debug)]
pub struct EvalSetup {
    pub item_count: usize,
    pub users: Vec<EvalUser>,
    /// Held-out users that could not be evaluated: absent from training, or
    /// all their held-out items are cold or already consumed in training.
    pub skipped_users: usize,
}

/// Build the roster. Held-out items missing from the training vocabulary are
/// dropped (they have no leaf and no candidate slot); held-out items the same
/// user already consumed in training are dropped too, since candidates
/// exclude training consumption.
pub fn eval_setup(train: &EventLog, held_out: &EventLog) -> EvalSetup {
    let train_items_by_user = train.items_by_user();
    let mut users = Vec::new();
    let mut skipped = 0usize;
    let held_by_user = held_out.items_by_user();
    for (hu, user) in held_out.users().iter().enumerate() {
        let Some(tu) = train.user_idx(user) else {
            skipped += 1;
            continue;
        };
        let train_items = &train_items_by_user[tu as usize];
        let mut relevant = Vec::new();
        for &hi in &held_by_user[hu] {
            let item = &held_out.items()[hi as usize];
            if let Some(ti) = train.item_idx(item) {
                if train_items.binary_search(&ti).is_err() {
                    relevant.push(ti);
                }
            }
        }
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        relevant.sort_unstable();
        users.push(EvalUser {
            user: user.clone(),
            train_items: train_items.clone(),
            relevant,
        });
    }
    EvalSetup {
        item_count: train.items().len(),
        users,
        skipped_users: skipped,
    }
}

/// Anything that can score every training-vocabulary item for a user.
pub trait Scorer: Sync {
    fn label(&self) -> String;
    fn score(&self, user: &EvalUser) -> Vec<f64>;
}

/// Fraction of the user's relevant items found in the top-R positions.
pub fn recall_at(top_r: &[u32], relevant: &[u32]) -> f64 {
    assert!(!relevant.is_empty(), "recall needs at least one relevant item");
    let hits = top_r
        .iter()
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// NDCG over a full candidate ranking with binary relevance and 1-based
/// positions: DCG = sum of 1/log2(rank+1) over relevant positions, divided
/// by the ideal DCG (all in-list relevant items ranked first).
pub fn ndcg(ranking: &[u32], relevant: &[u32]) -> f64 {
    let mut dcg = 0.0;
    let mut found = 0usize;
    for (pos, item) in ranking.iter().enumerate() {
        if relevant.binary_search(item).is_ok() {
            dcg += 1.0 / ((pos + 2) as f64).log2();
            found += 1;
        }
    }
    if found == 0 {
        return 0.0;
    }
    let idcg: f64 = (0..found).map(|j| 1.0 / ((j + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Number of distinct items appearing in any of the lists.
pub fn diversity_at<'a, I>(lists: I) -> usize
where
    I: IntoIterator<Item = &'a [u32]>,
{
    let mut seen = HashSet::new();
    for list in lists {
        seen.extend(list.iter().copied());
    }
    seen.len()
}

/// Aggregated evaluation of one method.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg: f64,
    pub diversity_at: BTreeMap<usize, usize>,
    pub evaluated_users: usize,
    pub skipped_users: usize,
}

/// Score, rank and aggregate over every evaluable user. `tops` are the R
/// cutoffs for Recall@R and Diversity@R; NDCG uses the full candidate
/// ranking.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    setup: &EvalSetup,
    tops: &[usize],
) -> Result<EvalReport, EvalError> {
    let max_top = tops.iter().copied().max().unwrap_or(0);
    let per_user: Vec<(Vec<f64>, f64, Vec<u32>)> = setup
        .users
        .par_chunks(32)
        .map(|chunk| {
            chunk
                .iter()
                .map(|user| {
                    let scores = scorer.score(user);
                    if scores.len() != setup.item_count {
                        return Err(EvalError::DimensionMismatch {
                            got: scores.len(),
                            want: setup.item_count,
                        });
                    }
                    let ranking: Vec<u32> = rank_candidates(&scores, &user.train_items)
                        .into_iter()
                        .map(|s| s.item)
                        .collect();
                    let recalls = tops
                        .iter()
                        .map(|&r| recall_at(&ranking[..r.min(ranking.len())], &user.relevant))
                        .collect();
                    let n = ndcg(&ranking, &user.relevant);
                    let top_list = ranking[..max_top.min(ranking.len())].to_vec();
                    Ok((recalls, n, top_list))
                })
                .collect::<Result<Vec<_>, EvalError>>()
        })
        .collect::<Result<Vec<_>, EvalError>>()?
        .into_iter()
        .flatten()
        .collect();

    let evaluated = per_user.len();
    let mut recall_at_map = BTreeMap::new();
    let mut diversity_map = BTreeMap::new();
    for (ti, &r) in tops.iter().enumerate() {
        let mean = if evaluated == 0 {
            0.0
        } else {
            per_user.iter().map(|(rec, _, _)| rec[ti]).sum::<f64>() / evaluated as f64
        };
        recall_at_map.insert(r, mean);
        let diversity = diversity_at(
            per_user
                .iter()
                .map(|(_, _, list)| &list[..list.len().min(r)]),
        );
        diversity_map.insert(r, diversity);
    }
    let mean_ndcg = if evaluated == 0 {
        0.0
    } else {
        per_user.iter().map(|(_, n, _)| n).sum::<f64>() / evaluated as f64
    };
    Ok(EvalReport {
        method: scorer.label(),
        recall_at: recall_at_map,
        ndcg: mean_ndcg,
        diversity_at: diversity_map,
        evaluated_users: evaluated,
        skipped_users: setup.skipped_users,
    })
}

/// Popularity baseline: an item's score is its training consumption count.
pub struct PopularityScorer {
    counts: Vec<f64>,
}

pub fn baseline_popularity(train: &InteractionMatrix) -> PopularityScorer {
    PopularityScorer {
        counts: train.column_counts().iter().map(|&c| c as f64).collect(),
    }
}

impl Scorer for PopularityScorer {
    fn label(&self) -> String {
        "pop".to_string()
    }

    fn score(&self, _user: &EvalUser) -> Vec<f64> {
        self.counts.clone()
    }
}

/// Weighted user-kNN over cosine similarity of binary rows: the score of
/// item i is the similarity-weighted count of the k nearest neighbors that
/// consumed i. A user with an empty row falls back to popularity.
pub struct UserKnnScorer {
    k: usize,
    rows: Vec<Vec<u32>>,
    inverted: Vec<Vec<u32>>,
    user_index: HashMap<UserId, usize>,
    popularity: Vec<f64>,
    item_count: usize,
}

pub fn baseline_user_knn(train: &InteractionMatrix, users: &[UserId], k: usize) -> UserKnnScorer {
    assert!(k >= 1, "k must be at least 1");
    assert_eq!(train.rows(), users.len());
    let rows: Vec<Vec<u32>> = (0..train.rows()).map(|r| train.row(r).to_vec()).collect();
    UserKnnScorer {
        k,
        inverted: train.column_lists(),
        user_index: users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect(),
        popularity: train.column_counts().iter().map(|&c| c as f64).collect(),
        item_count: train.cols(),
        rows,
    }
}

impl Scorer for UserKnnScorer {
    fn label(&self) -> String {
        format!("uknn(k={})", self.k)
    }

    fn score(&self, user: &EvalUser) -> Vec<f64> {
        if user.train_items.is_empty() {
            return self.popularity.clone();
        }
        let exclude = self.user_index.get(&user.user).copied();
        let mut overlap: HashMap<u32, u32> = HashMap::new();
        for &item in &user.train_items {
            for &v in &self.inverted[item as usize] {
                *overlap.entry(v).or_default() += 1;
            }
        }
        let norm_u = (user.train_items.len() as f64).sqrt();
        let mut sims: Vec<(f64, u32)> = overlap
            .into_iter()
            .filter(|&(v, _)| Some(v as usize) != exclude)
            .map(|(v, shared)| {
                let norm_v = (self.rows[v as usize].len() as f64).sqrt();
                (shared as f64 / (norm_u * norm_v), v)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        sims.truncate(self.k);

        let mut scores = vec![0.0f64; self.item_count];
        for &(sim, v) in &sims {
            for &item in &self.rows[v as usize] {
                scores[item as usize] += sim;
            }
        }
        scores
    }
}

/// Weighted item-kNN over cosine similarity of binary columns: the score of
/// item i sums sim(i, j) over i's k nearest items j that the user consumed.
pub struct ItemKnnScorer {
    k: usize,
    /// reverse[j] lists (i, sim(i, j)) for every item i having j among its
    /// k nearest neighbors.
    reverse: Vec<Vec<(u32, f64)>>,
    item_count: usize,
}

pub fn baseline_item_knn(train: &InteractionMatrix, k: usize) -> ItemKnnScorer {
    assert!(k >= 1, "k must be at least 1");
    let cols = train.column_lists();
    let counts = train.column_counts();
    let n = train.cols();
    let neighbor_lists: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cooc: HashMap<u32, u32> = HashMap::new();
            for &r in &cols[i] {
                for &j in train.row(r as usize) {
                    if j as usize != i {
                        *cooc.entry(j).or_default() += 1;
                    }
                }
            }
            let mut sims: Vec<(f64, u32)> = cooc
                .into_iter()
                .map(|(j, shared)| {
                    let denom = (counts[i] as f64).sqrt() * (counts[j as usize] as f64).sqrt();
                    (shared as f64 / denom, j)
                })
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            sims.truncate(k);
            sims.into_iter().map(|(s, j)| (j, s)).collect()
        })
        .collect();

    let mut reverse: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (i, neighbors) in neighbor_lists.iter().enumerate() {
        for &(j, sim) in neighbors {
            reverse[j as usize].push((i as u32, sim));
        }
    }
    ItemKnnScorer {
        k,
        reverse,
        item_count: n,
    }
}

impl Scorer for ItemKnnScorer {
    fn label(&self) -> String {
        format!("iknn(k={})", self.k)
    }

    fn score(&self, user: &EvalUser) -> Vec<f64> {
        let mut scores = vec![0.0f64; self.item_count];
        for &j in &user.train_items {
            for &(i, sim) in &self.reverse[j as usize] {
                scores[i as usize] += sim;
            }
        }
        scores
    }
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub levels: Vec<u32>,
    pub windows: Vec<HistoryWindow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub level: u32,
    pub window: HistoryWindow,
    pub recall10: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridOutcome {
    pub best_level: u32,
    pub best_window: HistoryWindow,
    pub points: Vec<GridPoint>,
}

/// Validation-driven selection of (level, H): evaluate Recall@10 on the
/// validation split for every grid point and return the argmax, ties broken
/// toward the smaller level, then the smaller window.
pub fn grid_search(
    model: &LatentTreeModel,
    train: &EventLog,
    valid: &EventLog,
    grid: &GridSpec,
) -> Result<GridOutcome, EvalError> {
    if grid.levels.is_empty() || grid.windows.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let setup = eval_setup(train, valid);
    let table = cof::posterior_table(model, train)?;
    let mut points = Vec::new();
    for &level in &grid.levels {
        let latents = model
            .latents_at(level)
            .map_err(|e| EvalError::Cof(CofError::Ltm(e)))?
            .to_vec();
        let memberships: Vec<Vec<f64>> = table
            .iter()
            .map(|row| latents.iter().map(|&v| row[v]).collect())
            .collect();
        for &window in &grid.windows {
            let scorer = CofScorer::with_memberships(
                model,
                train,
                level,
                window,
                memberships.clone(),
            )?;
            let report = evaluate(&scorer, &setup, &[10])?;
            points.push(GridPoint {
                level,
                window,
                recall10: report.recall_at[&10],
            });
        }
    }
    let best = points
        .iter()
        .min_by(|a, b| {
            b.recall10
                .partial_cmp(&a.recall10)
                .unwrap()
                .then(a.level.cmp(&b.level))
                .then(a.window.cmp(&b.window))
        })
        .unwrap();
    Ok(GridOutcome {
        best_level: best.level,
        best_window: best.window,
        points: points.clone(),
    })
}

/// Convenience: binarized training matrix plus the shared roster, the usual
/// inputs of a baseline evaluation.
pub fn baseline_inputs(train: &EventLog, held_out: &EventLog) -> (InteractionMatrix, EvalSetup) {
    (binarize(train), eval_setup(train, held_out))
}
