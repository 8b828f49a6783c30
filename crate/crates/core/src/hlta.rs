//! Hierarchy construction over binarized consumption data: pairwise mutual
//! information, greedy sibling clustering, per-cluster latent class fits,
//! hard-assignment stacking, and a maximum-spanning-tree bridge across the
//! top level.

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{InteractionMatrix, ItemId};
use crate::ltm::{fit_lcm, Cpt, LatentTreeModel, LcmConfig, LcmFit, LtmError, ModelVariable};

#[derive(Debug, Error)]
pub enum HltaError {
    #[error("need at least {want} variables, got {got}")]
    TooFewVariables { got: usize, want: usize },
    #[error("{0}")]
    BadConfig(String),
    #[error(transparent)]
    Ltm(#[from] LtmError),
}

/// Symmetric matrix of pairwise empirical mutual information in nats,
/// stored as the strict upper triangle.
#[derive(Debug, Clone)]
pub struct MiMatrix {
    n: usize,
    tri: Vec<f64>,
}

impl MiMatrix {
    pub fn from_values(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> MiMatrix {
        let mut tri = vec![0.0; n * (n - 1) / 2];
        for i in 0..n {
            for j in (i + 1)..n {
                tri[Self::tri_idx(n, i, j)] = f(i, j);
            }
        }
        MiMatrix { n, tri }
    }

    fn tri_idx(n: usize, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < n);
        i * n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.tri[Self::tri_idx(self.n, a, b)]
    }
}

/// Empirical mutual information between every pair of columns, from 2x2
/// contingency tables with add-one smoothing.
pub fn pairwise_mi(data: &InteractionMatrix) -> Result<MiMatrix, HltaError> {
    let n = data.cols();
    if n < 2 {
        return Err(HltaError::TooFewVariables { got: n, want: 2 });
    }
    let records = data.rows();
    let col_counts = data.column_counts();

    // Co-occurrence counts; integer accumulation commutes exactly, so the
    // parallel fold is deterministic.
    let tri_len = n * (n - 1) / 2;
    let rows: Vec<usize> = (0..records).collect();
    let cooc = rows
        .par_chunks(512)
        .fold(
            || vec![0u32; tri_len],
            |mut acc, chunk| {
                for &r in chunk {
                    let row = data.row(r);
                    for (a, &i) in row.iter().enumerate() {
                        for &j in &row[a + 1..] {
                            acc[MiMatrix::tri_idx(n, i as usize, j as usize)] += 1;
                        }
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0u32; tri_len],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    let total = records as f64 + 4.0;
    let mut tri = vec![0.0f64; tri_len];
    for i in 0..n {
        for j in (i + 1)..n {
            let n11 = cooc[MiMatrix::tri_idx(n, i, j)] as f64 + 1.0;
            let n10 = col_counts[i] as f64 - (n11 - 1.0) + 1.0;
            let n01 = col_counts[j] as f64 - (n11 - 1.0) + 1.0;
            let n00 = records as f64 - col_counts[i] as f64 - col_counts[j] as f64
                + (n11 - 1.0)
                + 1.0;
            let cells = [[n00, n01], [n10, n11]];
            let pi = [(n00 + n01) / total, (n10 + n11) / total];
            let pj = [(n00 + n10) / total, (n01 + n11) / total];
            let mut mi = 0.0;
            for (a, row) in cells.iter().enumerate() {
                for (b, &c) in row.iter().enumerate() {
                    let p = c / total;
                    mi += p * (p / (pi[a] * pj[b])).ln();
                }
            }
            debug_assert!(mi > -1e-9, "MI {mi} at ({i},{j})");
            tri[MiMatrix::tri_idx(n, i, j)] = mi.max(0.0);
        }
    }
    Ok(MiMatrix { n, tri })
}

/// A partition of the current level's variables into sibling groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiblingClustering {
    /// Each cluster's member indices, sorted; clusters in creation order.
    pub clusters: Vec<Vec<u32>>,
}

/// Greedy agglomeration: seed each cluster with the globally highest-MI
/// unassigned pair, grow it with the unassigned variable of highest average
/// MI to the members until `max_cluster_size`, and merge a final leftover
/// singleton into the cluster of its highest-MI neighbor. Ties break by
/// variable index.
pub fn sibling_clusters(
    mi: &MiMatrix,
    max_cluster_size: usize,
) -> Result<SiblingClustering, HltaError> {
    let n = mi.dim();
    if n < 2 {
        return Err(HltaError::TooFewVariables { got: n, want: 2 });
    }
    if max_cluster_size < 2 {
        return Err(HltaError::BadConfig(
            "max_cluster_size must be at least 2".into(),
        ));
    }

    // All pairs, best first; ties by index for determinism.
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    pairs.sort_by(|&(a1, b1), &(a2, b2)| {
        mi.get(a2, b2)
            .partial_cmp(&mi.get(a1, b1))
            .unwrap()
            .then(a1.cmp(&a2))
            .then(b1.cmp(&b2))
    });

    let mut assigned = vec![usize::MAX; n];
    let mut clusters: Vec<Vec<u32>> = Vec::new();
    let mut pair_cursor = 0;
    let mut remaining = n;

    while remaining >= 2 {
        while assigned[pairs[pair_cursor].0] != usize::MAX
            || assigned[pairs[pair_cursor].1] != usize::MAX
        {
            pair_cursor += 1;
        }
        let (sa, sb) = pairs[pair_cursor];
        let cluster_id = clusters.len();
        let mut members = vec![sa, sb];
        assigned[sa] = cluster_id;
        assigned[sb] = cluster_id;
        remaining -= 2;

        let mut link: Vec<f64> = (0..n).map(|v| mi.get(v, sa) + mi.get(v, sb)).collect();
        while members.len() < max_cluster_size && remaining > 0 {
            let mut best: Option<usize> = None;
            for v in 0..n {
                if assigned[v] != usize::MAX {
                    continue;
                }
                if best.map_or(true, |b| link[v] > link[b]) {
                    best = Some(v);
                }
            }
            let v = best.unwrap();
            assigned[v] = cluster_id;
            remaining -= 1;
            members.push(v);
            for u in 0..n {
                link[u] += mi.get(u, v);
            }
        }
        members.sort_unstable();
        clusters.push(members.iter().map(|&m| m as u32).collect());
    }

    if remaining == 1 {
        let v = (0..n).find(|&v| assigned[v] == usize::MAX).unwrap();
        let mut best = 0;
        for u in 1..n {
            if u != v && (best == v || mi.get(v, u) > mi.get(v, best)) {
                best = u;
            }
        }
        if best == v {
            best = if v == 0 { 1 } else { 0 };
        }
        let cluster = &mut clusters[assigned[best]];
        cluster.push(v as u32);
        cluster.sort_unstable();
    }

    Ok(SiblingClustering { clusters })
}

/// Maximum-weight spanning tree over the MI matrix (Kruskal), ties broken by
/// index order. A single variable yields no edges.
pub fn mst_connect(mi: &MiMatrix) -> Vec<(u32, u32)> {
    let n = mi.dim();
    if n <= 1 {
        return Vec::new();
    }
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    pairs.sort_by(|&(a1, b1), &(a2, b2)| {
        mi.get(a2, b2)
            .partial_cmp(&mi.get(a1, b1))
            .unwrap()
            .then(a1.cmp(&a2))
            .then(b1.cmp(&b2))
    });

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    let mut edges = Vec::with_capacity(n - 1);
    for (a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            edges.push((a as u32, b as u32));
            if edges.len() == n - 1 {
                break;
            }
        }
    }
    edges
}

#[derive(Debug, Clone)]
pub struct HierarchyConfig {
    /// Largest sibling cluster (a leftover merge may exceed it by one).
    pub max_cluster_size: usize,
    /// Stop stacking once a level has at most this many latents.
    pub top_level_max: usize,
    pub em_restarts: usize,
    pub em_tol: f64,
    pub em_max_iters: usize,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            max_cluster_size: 5,
            top_level_max: 15,
            em_restarts: 5,
            em_tol: 1e-4,
            em_max_iters: 200,
            seed: 0,
        }
    }
}

impl HierarchyConfig {
    fn validate(&self) -> Result<(), HltaError> {
        if self.max_cluster_size < 2 || self.max_cluster_size > 62 {
            return Err(HltaError::BadConfig(
                "max_cluster_size must be between 2 and 62".into(),
            ));
        }
        if self.top_level_max < 1 {
            return Err(HltaError::BadConfig("top_level_max must be >= 1".into()));
        }
        if self.em_restarts < 1 || self.em_max_iters < 1 || !(self.em_tol > 0.0) {
            return Err(HltaError::BadConfig(
                "EM settings must have restarts >= 1, max_iters >= 1, tol > 0".into(),
            ));
        }
        Ok(())
    }

    fn lcm(&self) -> LcmConfig {
        LcmConfig {
            restarts: self.em_restarts,
            max_iters: self.em_max_iters,
            tol: self.em_tol,
        }
    }
}

/// Output of one stacking step: the clustering, one LCM fit per cluster, and
/// the hard-assigned latent states forming the next level's data.
#[derive(Debug)]
pub struct LevelBuild {
    pub clustering: SiblingClustering,
    pub fits: Vec<LcmFit>,
    pub completed: InteractionMatrix,
}

/// Cluster the current level's variables, fit a two-state LCM per cluster,
/// and complete the data by assigning each record's latent to its
/// maximum-posterior state.
pub fn build_level(
    data: &InteractionMatrix,
    level: u32,
    cfg: &HierarchyConfig,
) -> Result<LevelBuild, HltaError> {
    cfg.validate()?;
    let mi = pairwise_mi(data)?;
    let clustering = sibling_clusters(&mi, cfg.max_cluster_size)?;
    let lcm_cfg = cfg.lcm();

    let fits: Vec<LcmFit> = clustering
        .clusters
        .par_iter()
        .enumerate()
        .map(|(k, members)| fit_lcm(data, members, &lcm_cfg, derive_seed(cfg.seed, level, k)))
        .collect::<Result<Vec<_>, LtmError>>()?;

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); data.rows()];
    for (r, row) in rows.iter_mut().enumerate() {
        for (k, members) in clustering.clusters.iter().enumerate() {
            let mut mask = 0u64;
            for (j, &c) in members.iter().enumerate() {
                if data.contains(r, c) {
                    mask |= 1 << j;
                }
            }
            if fits[k].posterior1(mask) > 0.5 {
                row.push(k as u32);
            }
        }
    }
    let completed = InteractionMatrix::new(data.rows(), clustering.clusters.len(), rows);
    Ok(LevelBuild {
        clustering,
        fits,
        completed,
    })
}

fn derive_seed(base: u64, level: u32, cluster: usize) -> u64 {
    // splitmix64 over a simple combination; stable across runs and platforms.
    let mut z = base
        .wrapping_add((level as u64) << 32)
        .wrapping_add(cluster as u64)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Build the full hierarchy: stack levels until the latent count reaches
/// `top_level_max`, bridge the top level with a maximum-spanning tree over
/// its MI, then refresh all parameters with one full-model EM sweep.
pub fn build_hierarchy(
    data: &InteractionMatrix,
    items: &[ItemId],
    cfg: &HierarchyConfig,
) -> Result<LatentTreeModel, HltaError> {
    cfg.validate()?;
    if data.cols() != items.len() {
        return Err(HltaError::BadConfig(format!(
            "data has {} columns but {} item names given",
            data.cols(),
            items.len()
        )));
    }
    if items.len() < 2 {
        return Err(HltaError::TooFewVariables {
            got: items.len(),
            want: 2,
        });
    }

    let mut vars: Vec<ModelVariable> = items.iter().map(ModelVariable::leaf).collect();
    // CPT slot per variable; the root slot is fixed up at the end.
    let mut cpts: Vec<Option<Cpt>> = vec![None; vars.len()];
    let mut edges: Vec<(usize, usize)> = Vec::new();

    // Variables forming the current level's data columns.
    let mut level_vars: Vec<usize> = (0..vars.len()).collect();
    let mut level_data = data.clone();
    let mut level = 0u32;
    let mut top_fit_priors: Vec<[f64; 2]> = Vec::new();

    loop {
        level += 1;
        let built = build_level(&level_data, level, cfg)?;
        let mut new_level_vars = Vec::with_capacity(built.clustering.clusters.len());
        top_fit_priors.clear();
        for (k, members) in built.clustering.clusters.iter().enumerate() {
            let latent = vars.len();
            vars.push(ModelVariable::latent(format!("Z{}_{}", level, k + 1), level));
            cpts.push(None);
            let fit = &built.fits[k];
            for (j, &m) in members.iter().enumerate() {
                let child = level_vars[m as usize];
                edges.push((latent, child));
                cpts[child] = Some(Cpt::Conditional(fit.emissions[j]));
            }
            top_fit_priors.push(fit.prior);
            new_level_vars.push(latent);
        }
        level_vars = new_level_vars;
        level_data = built.completed;
        if level_vars.len() <= cfg.top_level_max || level_vars.len() < 2 {
            break;
        }
    }

    // Bridge the top-level latents into one tree and parameterize the bridge
    // edges from the completed data (add-one smoothing); orientation follows
    // the final BFS from the root.
    let root = level_vars[0];
    if level_vars.len() > 1 {
        let top_mi = pairwise_mi(&level_data)?;
        let mst = mst_connect(&top_mi);
        let adj: Vec<Vec<usize>> = {
            let mut adj = vec![Vec::new(); level_vars.len()];
            for &(a, b) in &mst {
                adj[a as usize].push(b as usize);
                adj[b as usize].push(a as usize);
            }
            adj
        };
        // Orient MST edges away from the root's top-level slot.
        let mut order = vec![0usize];
        let mut seen = vec![false; level_vars.len()];
        seen[0] = true;
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    edges.push((level_vars[v], level_vars[w]));
                    cpts[level_vars[w]] = Some(Cpt::Conditional(conditional_from_columns(
                        &level_data,
                        v as u32,
                        w as u32,
                    )));
                    order.push(w);
                }
            }
        }
    }
    cpts[root] = Some(Cpt::Root(top_fit_priors[0]));

    let cpts: Vec<Cpt> = cpts
        .into_iter()
        .map(|c| c.expect("every variable parameterized"))
        .collect();
    let model = LatentTreeModel::new(vars, edges, root, cpts)?;
    Ok(model.refresh_parameters(data)?)
}

/// P(child = b | parent = a) from two binary columns with add-one smoothing.
fn conditional_from_columns(data: &InteractionMatrix, parent: u32, child: u32) -> [[f64; 2]; 2] {
    let mut counts = [[1.0f64; 2]; 2];
    for r in 0..data.rows() {
        let a = data.contains(r, parent) as usize;
        let b = data.contains(r, child) as usize;
        counts[a][b] += 1.0;
    }
    let mut rows = [[0.0; 2]; 2];
    for a in 0..2 {
        let z = counts[a][0] + counts[a][1];
        rows[a] = [counts[a][0] / z, counts[a][1] / z];
    }
    rows
}

/// One report row: a latent, one of its children, and the child's emission
/// probabilities under each latent state.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub latent: String,
    pub level: u32,
    pub marginal_p1: f64,
    pub child: String,
    /// P(child = 1 | latent = s1).
    pub p1_given_s1: f64,
    /// P(child = 1 | latent = s0).
    pub p1_given_s0: f64,
}

/// Per-latent emission summary, children sorted by descending contrast
/// P(child=1|s1) - P(child=1|s0).
pub fn hierarchy_report(model: &LatentTreeModel) -> Result<Vec<ReportRow>, HltaError> {
    let marginals = model.marginals()?;
    let mut rows = Vec::new();
    for level in 1..=model.max_level() {
        for &latent in model.latents_at(level)? {
            let mut children: Vec<ReportRow> = model
                .children(latent)
                .iter()
                .map(|&c| {
                    let (p0, p1) = match model.cpt(c) {
                        Cpt::Conditional(rows) => (rows[0][1], rows[1][1]),
                        Cpt::Root(_) => unreachable!("children are never the root"),
                    };
                    ReportRow {
                        latent: model.var(latent).id.clone(),
                        level,
                        marginal_p1: marginals[latent],
                        child: model.var(c).id.clone(),
                        p1_given_s1: p1,
                        p1_given_s0: p0,
                    }
                })
                .collect();
            children.sort_by(|a, b| {
                let ca = a.p1_given_s1 - a.p1_given_s0;
                let cb = b.p1_given_s1 - b.p1_given_s0;
                cb.partial_cmp(&ca).unwrap().then(a.child.cmp(&b.child))
            });
            rows.extend(children);
        }
    }
    Ok(rows)
}
