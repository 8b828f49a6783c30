//! Two-pass sum-product message passing on the rooted tree.
//!
//! Messages are normalized as they go and the normalizers accumulated in log
//! space, so evidence over thousands of leaves cannot underflow. One collect
//! pass (leaves to root) and one distribute pass (root to leaves) yield every
//! node marginal, and optionally the pairwise marginal across each edge.

use super::{Cpt, Evidence, LatentTreeModel, LtmError};

/// Result of a full propagation for one evidence set.
#[derive(Debug, Clone)]
pub struct TreePosteriors {
    /// ln P(evidence).
    pub log_evidence: f64,
    /// P(V = s1 | evidence) per variable.
    pub node_p1: Vec<f64>,
    /// P(parent = a, V = b | evidence) per non-root variable, when requested.
    pub edge_pairwise: Option<Vec<[[f64; 2]; 2]>>,
    /// Messages computed; exactly two per edge.
    pub edge_visits: usize,
}

struct Upward {
    /// Evidence indicator times the product of child messages, per variable.
    alpha: Vec<[f64; 2]>,
    /// Normalized message from each non-root variable to its parent, indexed
    /// by the parent's state.
    lambda: Vec<[f64; 2]>,
    /// Accumulated log message normalizers.
    log_norm: f64,
    /// Unnormalized P(evidence) at the root after normalization above.
    root_mass: f64,
    visits: usize,
}

fn indicator(evidence: &Evidence, v: usize) -> [f64; 2] {
    match evidence.get(v) {
        None => [1.0, 1.0],
        Some(false) => [1.0, 0.0],
        Some(true) => [0.0, 1.0],
    }
}

fn upward(model: &LatentTreeModel, evidence: &Evidence) -> Option<Upward> {
    let n = model.var_count();
    let mut alpha = vec![[1.0f64; 2]; n];
    let mut lambda = vec![[1.0f64; 2]; n];
    let mut log_norm = 0.0;
    let mut visits = 0;

    for &v in model.topo.iter().rev() {
        let mut a = indicator(evidence, v);
        for &c in model.children(v) {
            a[0] *= lambda[c][0];
            a[1] *= lambda[c][1];
        }
        alpha[v] = a;
        if model.parent(v).is_some() {
            let rows = match model.cpt(v) {
                Cpt::Conditional(rows) => rows,
                Cpt::Root(_) => unreachable!(),
            };
            let mut msg = [0.0; 2];
            for parent_state in 0..2 {
                msg[parent_state] =
                    rows[parent_state][0] * a[0] + rows[parent_state][1] * a[1];
            }
            let norm = msg[0] + msg[1];
            if norm <= 0.0 {
                return None;
            }
            lambda[v] = [msg[0] / norm, msg[1] / norm];
            log_norm += norm.ln();
            visits += 1;
        }
    }

    let pi = match model.cpt(model.root()) {
        Cpt::Root(pi) => pi,
        Cpt::Conditional(_) => unreachable!(),
    };
    let root_mass = pi[0] * alpha[model.root()][0] + pi[1] * alpha[model.root()][1];
    if root_mass <= 0.0 {
        return None;
    }
    Some(Upward {
        alpha,
        lambda,
        log_norm,
        root_mass,
        visits,
    })
}

/// ln P(evidence); -inf when the evidence has probability zero.
pub(super) fn log_evidence(model: &LatentTreeModel, evidence: &Evidence) -> Result<f64, LtmError> {
    Ok(match upward(model, evidence) {
        Some(up) => up.root_mass.ln() + up.log_norm,
        None => f64::NEG_INFINITY,
    })
}

pub(super) fn propagate(
    model: &LatentTreeModel,
    evidence: &Evidence,
    want_pairwise: bool,
) -> Result<TreePosteriors, LtmError> {
    let n = model.var_count();
    let up = upward(model, evidence)
        .ok_or(LtmError::ZeroProbabilityEvidence { record: None })?;
    let mut visits = up.visits;

    // Distribute pass. kappa[v] is the normalized prior-side message into v.
    let mut kappa = vec![[0.0f64; 2]; n];
    let mut node_p1 = vec![0.0f64; n];
    let mut pairwise = want_pairwise.then(|| vec![[[0.0f64; 2]; 2]; n]);

    let pi = match model.cpt(model.root()) {
        Cpt::Root(pi) => *pi,
        Cpt::Conditional(_) => unreachable!(),
    };
    kappa[model.root()] = pi;

    for &v in &model.topo {
        let k = kappa[v];
        let a = up.alpha[v];
        let belief = [k[0] * a[0], k[1] * a[1]];
        let mass = belief[0] + belief[1];
        if mass <= 0.0 {
            return Err(LtmError::ZeroProbabilityEvidence { record: None });
        }
        node_p1[v] = belief[1] / mass;

        let children = model.children(v);
        if children.is_empty() {
            continue;
        }
        // Exclusion products over child messages via prefix/suffix scans, so
        // no division by a possibly-zero lambda.
        let ind = indicator(evidence, v);
        let m = children.len();
        let mut prefix = vec![[0.0f64; 2]; m + 1];
        prefix[0] = [k[0] * ind[0], k[1] * ind[1]];
        for (i, &c) in children.iter().enumerate() {
            prefix[i + 1] = [
                prefix[i][0] * up.lambda[c][0],
                prefix[i][1] * up.lambda[c][1],
            ];
        }
        let mut suffix = [1.0f64; 2];
        for (i, &c) in children.iter().enumerate().rev() {
            let msg_in = [prefix[i][0] * suffix[0], prefix[i][1] * suffix[1]];
            let norm = msg_in[0] + msg_in[1];
            if norm <= 0.0 {
                return Err(LtmError::ZeroProbabilityEvidence { record: None });
            }
            let msg = [msg_in[0] / norm, msg_in[1] / norm];
            let rows = match model.cpt(c) {
                Cpt::Conditional(rows) => rows,
                Cpt::Root(_) => unreachable!(),
            };
            kappa[c] = [
                msg[0] * rows[0][0] + msg[1] * rows[1][0],
                msg[0] * rows[0][1] + msg[1] * rows[1][1],
            ];
            visits += 1;

            if let Some(pw) = pairwise.as_mut() {
                let ac = up.alpha[c];
                let mut table = [[0.0f64; 2]; 2];
                let mut z = 0.0;
                for parent_state in 0..2 {
                    for child_state in 0..2 {
                        let val = msg[parent_state] * rows[parent_state][child_state]
                            * ac[child_state];
                        table[parent_state][child_state] = val;
                        z += val;
                    }
                }
                if z <= 0.0 {
                    return Err(LtmError::ZeroProbabilityEvidence { record: None });
                }
                for row in &mut table {
                    row[0] /= z;
                    row[1] /= z;
                }
                pw[c] = table;
            }
            suffix = [suffix[0] * up.lambda[c][0], suffix[1] * up.lambda[c][1]];
        }
    }

    Ok(TreePosteriors {
        log_evidence: up.root_mass.ln() + up.log_norm,
        node_p1,
        edge_pairwise: pairwise,
        edge_visits: visits,
    })
}
