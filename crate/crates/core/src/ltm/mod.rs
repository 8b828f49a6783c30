//! Binary latent tree models: representation, exact two-pass inference,
//! latent-class EM, forward sampling, and joint-preserving rerooting.
//!
//! A model is an undirected tree with observed item indicators at the leaves
//! and binary latent variables inside. For parameterization it is rooted at
//! an arbitrary latent: the root carries a marginal over {s0, s1}, every
//! other variable a 2x2 conditional given its parent. Rerooting changes the
//! parameterization but not the joint over the observed variables.

mod infer;
mod io;
mod lcm;

pub use infer::TreePosteriors;
pub use lcm::{fit_lcm, LcmConfig, LcmFit};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{InteractionMatrix, ItemId};

#[derive(Debug, Error)]
pub enum LtmError {
    #[error("model structure is not a tree: {0}")]
    NotATree(String),
    #[error("invalid CPT for {var}: {reason}")]
    BadCpt { var: String, reason: String },
    #[error("invalid variable {var}: {reason}")]
    BadVariable { var: String, reason: String },
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("variable {0} is not a latent")]
    NotALatent(String),
    #[error("level {level} out of range (model has levels 1..={max})")]
    InvalidLevel { level: u32, max: u32 },
    #[error("evidence assigns non-leaf variable {0}")]
    EvidenceOnLatent(String),
    #[error("data has {got} columns, model has {want} leaves")]
    DimensionMismatch { got: usize, want: usize },
    #[error("evidence has probability zero{}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    ZeroProbabilityEvidence { record: Option<usize> },
    #[error("{0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarKind {
    /// Observed indicator bound to an item.
    Leaf { item: ItemId },
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelVariable {
    pub id: String,
    pub kind: VarKind,
    /// 0 for observed leaves, >= 1 for latents.
    pub level: u32,
}

impl ModelVariable {
    pub fn leaf(item: impl Into<ItemId>) -> Self {
        let item = item.into();
        ModelVariable {
            id: item.clone(),
            kind: VarKind::Leaf { item },
            level: 0,
        }
    }

    pub fn latent(id: impl Into<String>, level: u32) -> Self {
        ModelVariable {
            id: id.into(),
            kind: VarKind::Latent,
            level,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, VarKind::Leaf { .. })
    }
}

/// Conditional tables under the rooted orientation. Rows are indexed by the
/// parent state, columns by this variable's state.
#[derive(Debug, Clone, PartialEq)]
pub enum Cpt {
    Root([f64; 2]),
    Conditional([[f64; 2]; 2]),
}

impl Cpt {
    fn rows(&self) -> &[[f64; 2]] {
        match self {
            Cpt::Root(row) => std::slice::from_ref(row),
            Cpt::Conditional(rows) => rows,
        }
    }
}

/// Partial assignment of observed leaves, dense over the model's variables.
#[derive(Debug, Clone)]
pub struct Evidence {
    states: Vec<Option<bool>>,
}

impl Evidence {
    pub fn empty(model: &LatentTreeModel) -> Evidence {
        Evidence {
            states: vec![None; model.var_count()],
        }
    }

    pub fn set(&mut self, model: &LatentTreeModel, var: usize, value: bool) -> Result<(), LtmError> {
        if !model.vars[var].is_leaf() {
            return Err(LtmError::EvidenceOnLatent(model.vars[var].id.clone()));
        }
        self.states[var] = Some(value);
        Ok(())
    }

    /// Closed-world evidence: every leaf observed, the given columns as s1
    /// and all remaining leaves as s0. Columns index the model's leaf order.
    pub fn closed_world(model: &LatentTreeModel, consumed_cols: &[u32]) -> Evidence {
        let mut states = vec![None; model.var_count()];
        for &v in &model.leaf_vars {
            states[v] = Some(false);
        }
        for &c in consumed_cols {
            states[model.leaf_vars[c as usize]] = Some(true);
        }
        Evidence { states }
    }

    pub fn get(&self, var: usize) -> Option<bool> {
        self.states[var]
    }

    pub fn is_empty(&self) -> bool {
        self.states.iter().all(|s| s.is_none())
    }
}

/// Posterior P(Z = s1 | evidence) for every latent of one level, in the
/// model's latent order for that level.
#[derive(Debug, Clone)]
pub struct PosteriorVector {
    pub level: u32,
    /// Variable indices of the level's latents.
    pub latents: Vec<usize>,
    pub values: Vec<f64>,
}

const CPT_FLOOR: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LatentTreeModel {
    vars: Vec<ModelVariable>,
    edges: Vec<(usize, usize)>,
    root: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Root first, every parent before its children.
    topo: Vec<usize>,
    cpts: Vec<Cpt>,
    /// Leaf variable indices in column order.
    leaf_vars: Vec<usize>,
    item_col: HashMap<ItemId, u32>,
    /// Latent variable indices per level, 1-based levels.
    latents_by_level: Vec<Vec<usize>>,
    id_index: HashMap<String, usize>,
}

impl LatentTreeModel {
    /// Validates and roots the model. Leaves are assigned columns in the
    /// order they appear in `vars`.
    pub fn new(
        vars: Vec<ModelVariable>,
        edges: Vec<(usize, usize)>,
        root: usize,
        cpts: Vec<Cpt>,
    ) -> Result<Self, LtmError> {
        let n = vars.len();
        if n == 0 {
            return Err(LtmError::NotATree("no variables".into()));
        }
        if cpts.len() != n {
            return Err(LtmError::NotATree(format!(
                "{} variables but {} CPTs",
                n,
                cpts.len()
            )));
        }
        if edges.len() != n - 1 {
            return Err(LtmError::NotATree(format!(
                "{} variables need {} edges, got {}",
                n,
                n - 1,
                edges.len()
            )));
        }
        if root >= n || vars[root].is_leaf() {
            return Err(LtmError::NotALatent(
                vars.get(root).map(|v| v.id.clone()).unwrap_or_default(),
            ));
        }

        let mut id_index = HashMap::new();
        for (i, v) in vars.iter().enumerate() {
            if id_index.insert(v.id.clone(), i).is_some() {
                return Err(LtmError::BadVariable {
                    var: v.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
            let bad_level = if v.is_leaf() { v.level != 0 } else { v.level == 0 };
            if bad_level {
                return Err(LtmError::BadVariable {
                    var: v.id.clone(),
                    reason: "leaves live at level 0, latents at levels >= 1".into(),
                });
            }
        }

        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b {
                return Err(LtmError::NotATree(format!("bad edge ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }

        // Root the tree by BFS; connectivity check falls out of the visit count.
        let mut parent = vec![None; n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut topo = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(root);
        seen[root] = true;
        while let Some(v) = queue.pop_front() {
            topo.push(v);
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(v);
                    children[v].push(w);
                    queue.push_back(w);
                }
            }
        }
        if topo.len() != n {
            return Err(LtmError::NotATree("graph is disconnected".into()));
        }

        let mut leaf_vars = Vec::new();
        let mut item_col = HashMap::new();
        let mut latents_by_level: Vec<Vec<usize>> = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            match &v.kind {
                VarKind::Leaf { item } => {
                    if adj[i].len() != 1 {
                        return Err(LtmError::BadVariable {
                            var: v.id.clone(),
                            reason: "observed variables must be tree leaves".into(),
                        });
                    }
                    if item_col.insert(item.clone(), leaf_vars.len() as u32).is_some() {
                        return Err(LtmError::BadVariable {
                            var: v.id.clone(),
                            reason: format!("item {item:?} bound to more than one leaf"),
                        });
                    }
                    leaf_vars.push(i);
                }
                VarKind::Latent => {
                    let lvl = v.level as usize;
                    if latents_by_level.len() < lvl {
                        latents_by_level.resize(lvl, Vec::new());
                    }
                    latents_by_level[lvl - 1].push(i);
                }
            }
        }
        if latents_by_level.iter().any(|l| l.is_empty()) {
            return Err(LtmError::NotATree("empty latent level".into()));
        }

        for (i, cpt) in cpts.iter().enumerate() {
            let want_root = i == root;
            let is_root_cpt = matches!(cpt, Cpt::Root(_));
            if want_root != is_root_cpt {
                return Err(LtmError::BadCpt {
                    var: vars[i].id.clone(),
                    reason: "root takes a marginal, non-roots a conditional".into(),
                });
            }
            for row in cpt.rows() {
                if row.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
                    return Err(LtmError::BadCpt {
                        var: vars[i].id.clone(),
                        reason: format!("probability outside [0,1] in {row:?}"),
                    });
                }
                if ((row[0] + row[1]) - 1.0).abs() > ROW_SUM_TOL {
                    return Err(LtmError::BadCpt {
                        var: vars[i].id.clone(),
                        reason: format!("row {row:?} does not sum to 1"),
                    });
                }
            }
        }

        Ok(LatentTreeModel {
            vars,
            edges,
            root,
            parent,
            children,
            topo,
            cpts,
            leaf_vars,
            item_col,
            latents_by_level,
            id_index,
        })
    }

    pub fn var_count(&self) -> usize {
        self.vars.len()
    }

    pub fn vars(&self) -> &[ModelVariable] {
        &self.vars
    }

    pub fn var(&self, idx: usize) -> &ModelVariable {
        &self.vars[idx]
    }

    pub fn var_by_id(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn cpt(&self, v: usize) -> &Cpt {
        &self.cpts[v]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_vars.len()
    }

    /// Leaf variable indices in column order.
    pub fn leaf_vars(&self) -> &[usize] {
        &self.leaf_vars
    }

    /// Column index of an item's leaf.
    pub fn item_column(&self, item: &str) -> Option<u32> {
        self.item_col.get(item).copied()
    }

    /// Item ids in column order.
    pub fn items(&self) -> Vec<&ItemId> {
        self.leaf_vars
            .iter()
            .map(|&v| match &self.vars[v].kind {
                VarKind::Leaf { item } => item,
                VarKind::Latent => unreachable!(),
            })
            .collect()
    }

    pub fn max_level(&self) -> u32 {
        self.latents_by_level.len() as u32
    }

    /// Latent variable indices at a 1-based level.
    pub fn latents_at(&self, level: u32) -> Result<&[usize], LtmError> {
        if level == 0 || level > self.max_level() {
            return Err(LtmError::InvalidLevel {
                level,
                max: self.max_level(),
            });
        }
        Ok(&self.latents_by_level[level as usize - 1])
    }

    /// Exact posterior marginals for one level via a single collect/distribute
    /// pass over the tree (time linear in the variable count).
    pub fn posterior_marginals(
        &self,
        evidence: &Evidence,
        level: u32,
    ) -> Result<PosteriorVector, LtmError> {
        let latents = self.latents_at(level)?.to_vec();
        let post = infer::propagate(self, evidence, false)?;
        let values = latents.iter().map(|&v| post.node_p1[v]).collect();
        Ok(PosteriorVector {
            level,
            latents,
            values,
        })
    }

    /// Full two-pass posterior (all node marginals, optional edge pairwise
    /// marginals) for one evidence set.
    pub fn propagate(
        &self,
        evidence: &Evidence,
        want_pairwise: bool,
    ) -> Result<TreePosteriors, LtmError> {
        infer::propagate(self, evidence, want_pairwise)
    }

    /// No-evidence marginals P(V = s1) for every variable.
    pub fn marginals(&self) -> Result<Vec<f64>, LtmError> {
        Ok(infer::propagate(self, &Evidence::empty(self), false)?.node_p1)
    }

    /// ln P(row | model) for every record, closed-world over all leaves.
    /// A record the model assigns probability zero yields -inf.
    pub fn record_log_likelihoods(&self, data: &InteractionMatrix) -> Result<Vec<f64>, LtmError> {
        if data.cols() != self.leaf_count() {
            return Err(LtmError::DimensionMismatch {
                got: data.cols(),
                want: self.leaf_count(),
            });
        }
        let rows: Vec<usize> = (0..data.rows()).collect();
        rows.par_chunks(256)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&r| {
                        let ev = Evidence::closed_world(self, data.row(r));
                        infer::log_evidence(self, &ev)
                    })
                    .collect::<Result<Vec<f64>, LtmError>>()
            })
            .collect::<Result<Vec<Vec<f64>>, LtmError>>()
            .map(|chunks| chunks.into_iter().flatten().collect())
    }

    /// Total data log-likelihood in nats, marginalized over all latents by
    /// exact tree elimination.
    pub fn log_likelihood(&self, data: &InteractionMatrix) -> Result<f64, LtmError> {
        Ok(self.record_log_likelihoods(data)?.iter().sum())
    }

    /// Forward-sample `n` i.i.d. records; deterministic for a given seed.
    pub fn sample(&self, n: usize, seed: u64) -> InteractionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut leaf_col = vec![u32::MAX; self.var_count()];
        for (c, &v) in self.leaf_vars.iter().enumerate() {
            leaf_col[v] = c as u32;
        }
        let mut rows = Vec::with_capacity(n);
        let mut states = vec![false; self.var_count()];
        for _ in 0..n {
            let mut row = Vec::new();
            for &v in &self.topo {
                let p1 = match (&self.cpts[v], self.parent[v]) {
                    (Cpt::Root(row), None) => row[1],
                    (Cpt::Conditional(rows), Some(p)) => rows[states[p] as usize][1],
                    _ => unreachable!(),
                };
                let s = rand::Rng::gen::<f64>(&mut rng) < p1;
                states[v] = s;
                if s && leaf_col[v] != u32::MAX {
                    row.push(leaf_col[v]);
                }
            }
            rows.push(row);
        }
        InteractionMatrix::new(n, self.leaf_count(), rows)
    }

    /// Re-parameterize the same undirected tree with `new_root` as the root.
    /// The joint over observed variables is preserved.
    pub fn reroot(&self, new_root_id: &str) -> Result<LatentTreeModel, LtmError> {
        let new_root = self
            .var_by_id(new_root_id)
            .ok_or_else(|| LtmError::UnknownVariable(new_root_id.to_string()))?;
        if self.vars[new_root].is_leaf() {
            return Err(LtmError::NotALatent(new_root_id.to_string()));
        }
        if new_root == self.root {
            return Ok(self.clone());
        }
        let post = infer::propagate(self, &Evidence::empty(self), true)?;
        let pairwise = post.edge_pairwise.as_ref().unwrap();

        // New orientation by BFS from the new root.
        let mut new_parent = vec![None; self.var_count()];
        let mut seen = vec![false; self.var_count()];
        let mut queue = std::collections::VecDeque::new();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.var_count()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        queue.push_back(new_root);
        seen[new_root] = true;
        let mut order = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    new_parent[w] = Some(v);
                    queue.push_back(w);
                }
            }
        }

        // P(a, b) for the undirected edge {a, b}; stored on the old child.
        let joint_of = |a: usize, b: usize| -> [[f64; 2]; 2] {
            if self.parent[b] == Some(a) {
                pairwise[b]
            } else {
                debug_assert_eq!(self.parent[a], Some(b));
                let j = pairwise[a];
                [[j[0][0], j[1][0]], [j[0][1], j[1][1]]]
            }
        };

        let mut cpts = self.cpts.clone();
        for &v in &order {
            cpts[v] = match new_parent[v] {
                None => {
                    let p1 = post.node_p1[v];
                    Cpt::Root([1.0 - p1, p1])
                }
                Some(p) => {
                    let joint = joint_of(p, v);
                    let mut rows = [[0.5, 0.5]; 2];
                    for a in 0..2 {
                        let mass = joint[a][0] + joint[a][1];
                        if mass > 0.0 {
                            rows[a] = [joint[a][0] / mass, joint[a][1] / mass];
                        }
                    }
                    Cpt::Conditional(rows)
                }
            };
        }
        LatentTreeModel::new(self.vars.clone(), self.edges.clone(), new_root, cpts)
    }

    /// One full EM sweep over all CPTs with the structure held fixed:
    /// expected root and edge counts from exact inference, then an M-step
    /// with a probability floor.
    pub fn refresh_parameters(&self, data: &InteractionMatrix) -> Result<LatentTreeModel, LtmError> {
        if data.cols() != self.leaf_count() {
            return Err(LtmError::DimensionMismatch {
                got: data.cols(),
                want: self.leaf_count(),
            });
        }
        let n = self.var_count();
        let rows: Vec<usize> = (0..data.rows()).collect();
        let partials: Vec<(usize, [f64; 2], Vec<[[f64; 2]; 2]>)> = rows
            .par_chunks(128)
            .map(|chunk| {
                let mut root_acc = [0.0f64; 2];
                let mut edge_acc = vec![[[0.0f64; 2]; 2]; n];
                for &r in chunk {
                    let ev = Evidence::closed_world(self, data.row(r));
                    let post = infer::propagate(self, &ev, true).map_err(|e| match e {
                        LtmError::ZeroProbabilityEvidence { .. } => {
                            LtmError::ZeroProbabilityEvidence { record: Some(r) }
                        }
                        other => other,
                    })?;
                    let p1 = post.node_p1[self.root];
                    root_acc[0] += 1.0 - p1;
                    root_acc[1] += p1;
                    let pairwise = post.edge_pairwise.as_ref().unwrap();
                    for v in 0..n {
                        if self.parent[v].is_some() {
                            for a in 0..2 {
                                for b in 0..2 {
                                    edge_acc[v][a][b] += pairwise[v][a][b];
                                }
                            }
                        }
                    }
                }
                Ok((chunk[0], root_acc, edge_acc))
            })
            .collect::<Result<Vec<_>, LtmError>>()?;

        // Merge chunk partials in row order so the sweep stays deterministic
        // regardless of thread scheduling.
        let mut partials = partials;
        partials.sort_by_key(|(first_row, _, _)| *first_row);
        let mut root_acc = [0.0f64; 2];
        let mut edge_acc = vec![[[0.0f64; 2]; 2]; n];
        for (_, r, e) in &partials {
            root_acc[0] += r[0];
            root_acc[1] += r[1];
            for v in 0..n {
                for a in 0..2 {
                    for b in 0..2 {
                        edge_acc[v][a][b] += e[v][a][b];
                    }
                }
            }
        }

        let mut cpts = Vec::with_capacity(n);
        for v in 0..n {
            if v == self.root {
                cpts.push(Cpt::Root(floored_row(root_acc)));
            } else {
                cpts.push(Cpt::Conditional([
                    floored_row(edge_acc[v][0]),
                    floored_row(edge_acc[v][1]),
                ]));
            }
        }
        LatentTreeModel::new(self.vars.clone(), self.edges.clone(), self.root, cpts)
    }
}

/// Normalize a row of expected counts, flooring each cell at `CPT_FLOOR`.
fn floored_row(counts: [f64; 2]) -> [f64; 2] {
    let sum = counts[0] + counts[1];
    let row = if sum > 0.0 {
        [counts[0] / sum, counts[1] / sum]
    } else {
        [0.5, 0.5]
    };
    let floored = [row[0].max(CPT_FLOOR), row[1].max(CPT_FLOOR)];
    let z = floored[0] + floored[1];
    [floored[0] / z, floored[1] / z]
}
