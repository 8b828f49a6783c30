//! Shared test oracles: exhaustive joint enumeration for small models,
//! brute-force group profiles/memberships/scores, adjusted Rand index, and
//! planted-model generators. Everything here is independent of the library's
//! inference and aggregation paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cof_core::ingest::{Event, EventLog};
use cof_core::ltm::{Cpt, LatentTreeModel, ModelVariable};

/// Joint probability of one full assignment under the rooted factorization.
pub fn joint_prob(model: &LatentTreeModel, assignment: &[bool]) -> f64 {
    let mut p = 1.0;
    for v in 0..model.var_count() {
        let s = assignment[v] as usize;
        p *= match model.cpt(v) {
            Cpt::Root(row) => row[s],
            Cpt::Conditional(rows) => {
                let parent = model.parent(v).expect("non-root has a parent");
                rows[assignment[parent] as usize][s]
            }
        };
    }
    p
}

/// P(evidence) by summing the joint over all assignments consistent with the
/// (possibly partial) evidence.
pub fn enum_evidence_prob(model: &LatentTreeModel, evidence: &[Option<bool>]) -> f64 {
    let n = model.var_count();
    assert!(n <= 20, "enumeration oracle is for small models");
    let mut total = 0.0;
    let mut assignment = vec![false; n];
    for mask in 0u32..(1 << n) {
        let mut ok = true;
        for v in 0..n {
            let bit = (mask >> v) & 1 == 1;
            if let Some(want) = evidence[v] {
                if bit != want {
                    ok = false;
                    break;
                }
            }
            assignment[v] = bit;
        }
        if ok {
            total += joint_prob(model, &assignment);
        }
    }
    total
}

/// P(V = s1 | evidence) for every variable, by enumeration.
pub fn enum_posteriors(model: &LatentTreeModel, evidence: &[Option<bool>]) -> Vec<f64> {
    let n = model.var_count();
    let z = enum_evidence_prob(model, evidence);
    assert!(z > 0.0, "oracle: evidence has probability zero");
    (0..n)
        .map(|v| {
            if let Some(val) = evidence[v] {
                return if val { 1.0 } else { 0.0 };
            }
            let mut with_v = evidence.to_vec();
            with_v[v] = Some(true);
            enum_evidence_prob(model, &with_v) / z
        })
        .collect()
}

/// Closed-world evidence vector over the oracle's dense layout: all leaves
/// observed, the given columns true. An empty history means no evidence.
pub fn closed_world_evidence(model: &LatentTreeModel, consumed_cols: &[u32]) -> Vec<Option<bool>> {
    let mut ev = vec![None; model.var_count()];
    if consumed_cols.is_empty() {
        return ev;
    }
    for &lv in model.leaf_vars() {
        ev[lv] = Some(false);
    }
    for &c in consumed_cols {
        ev[model.leaf_vars()[c as usize]] = Some(true);
    }
    ev
}

/// Brute-force memberships P(Z = s1 | user's closed-world evidence) over one
/// level, one row per training user.
pub fn brute_memberships(model: &LatentTreeModel, train: &EventLog, level: u32) -> Vec<Vec<f64>> {
    let latents = model.latents_at(level).unwrap();
    let items_by_user = train.items_by_user();
    train
        .users()
        .iter()
        .enumerate()
        .map(|(u, _)| {
            let cols: Vec<u32> = items_by_user[u]
                .iter()
                .map(|&i| model.item_column(&train.items()[i as usize]).unwrap())
                .collect();
            let posts = enum_posteriors(model, &closed_world_evidence(model, &cols));
            latents.iter().map(|&v| posts[v]).collect()
        })
        .collect()
}

/// Brute-force group profiles: membership-weighted consumption fractions
/// with indicators from `history` and memberships from `full_train`.
pub fn brute_group_profiles(
    model: &LatentTreeModel,
    level: u32,
    history: &EventLog,
    full_train: &EventLog,
) -> Vec<Vec<f64>> {
    let memberships = brute_memberships(model, full_train, level);
    let k = memberships[0].len();
    let items = model.leaf_count();
    let history_items = history.items_by_user();
    let mut numer = vec![vec![0.0f64; items]; k];
    let mut denom = vec![0.0f64; k];
    for (u, user) in full_train.users().iter().enumerate() {
        for g in 0..k {
            denom[g] += memberships[u][g];
        }
        if let Some(hu) = history.user_idx(user) {
            for &hi in &history_items[hu as usize] {
                let col = model
                    .item_column(&history.items()[hi as usize])
                    .expect("history item known to the model");
                for g in 0..k {
                    numer[g][col as usize] += memberships[u][g];
                }
            }
        }
    }
    (0..k)
        .map(|g| numer[g].iter().map(|&x| x / denom[g]).collect())
        .collect()
}

/// Adjusted Rand index between two partitions of 0..n.
pub fn adjusted_rand_index(a: &[Vec<u32>], b: &[Vec<u32>]) -> f64 {
    let n: usize = a.iter().map(|c| c.len()).sum();
    assert_eq!(n, b.iter().map(|c| c.len()).sum::<usize>());
    let label = |clusters: &[Vec<u32>]| {
        let mut labels = vec![usize::MAX; n];
        for (k, cluster) in clusters.iter().enumerate() {
            for &v in cluster {
                labels[v as usize] = k;
            }
        }
        labels
    };
    let la = label(a);
    let lb = label(b);
    let mut contingency = vec![vec![0u64; b.len()]; a.len()];
    for v in 0..n {
        contingency[la[v]][lb[v]] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = contingency
        .iter()
        .flat_map(|row| row.iter().map(|&c| choose2(c)))
        .sum();
    let sum_a: f64 = a.iter().map(|c| choose2(c.len() as u64)).sum();
    let sum_b: f64 = b.iter().map(|c| choose2(c.len() as u64)).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}

/// A two-level planted hierarchy: one root over `blocks` level-1 latents,
/// each emitting a disjoint block of `items_per_block` items.
pub fn planted_hierarchy(
    blocks: usize,
    items_per_block: usize,
    emission_hi: f64,
    emission_lo: f64,
) -> LatentTreeModel {
    let mut vars = vec![ModelVariable::latent("Z2_1", 2)];
    let mut edges = Vec::new();
    let mut cpts = vec![Cpt::Root([0.5, 0.5])];
    for b in 0..blocks {
        let latent = vars.len();
        vars.push(ModelVariable::latent(format!("Z1_{}", b + 1), 1));
        edges.push((0, latent));
        cpts.push(Cpt::Conditional([[0.8, 0.2], [0.2, 0.8]]));
        for j in 0..items_per_block {
            let leaf = vars.len();
            vars.push(ModelVariable::leaf(format!("b{b}i{j}")));
            edges.push((latent, leaf));
            cpts.push(Cpt::Conditional([
                [1.0 - emission_lo, emission_lo],
                [1.0 - emission_hi, emission_hi],
            ]));
        }
    }
    LatentTreeModel::new(vars, edges, 0, cpts).unwrap()
}

/// Planted blocks as item-column partitions, for comparing clusterings.
pub fn planted_blocks(blocks: usize, items_per_block: usize) -> Vec<Vec<u32>> {
    (0..blocks)
        .map(|b| {
            (0..items_per_block)
                .map(|j| (b * items_per_block + j) as u32)
                .collect()
        })
        .collect()
}

/// Sample an event log from a planted model: each user is one record, each
/// consumed item becomes an event at a uniformly random time, so a time
/// split holds out a random tail of every user's consumption.
pub fn planted_event_log(model: &LatentTreeModel, users: usize, seed: u64) -> EventLog {
    let data = model.sample(users, seed);
    let items = model.items();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut events = Vec::new();
    for u in 0..users {
        for &c in data.row(u) {
            events.push(Event {
                timestamp: rng.gen_range(0..1_000_000),
                user: format!("u{u:04}"),
                item: items[c as usize].clone(),
            });
        }
    }
    EventLog::from_events(events)
}

/// Non-stationary consumption scenario with a taste drift at 80% of the
/// timeline.
///
/// Six taste groups of 12 light plus 3 heavy users. Before the drift, light
/// users consume their group's small "old" pool plus a little of a shared
/// background pool, while heavy users sweep the background pool broadly.
/// After the drift everyone switches to the group's private pool of new
/// items (with a hot/cold popularity skew). Event rates are uniform in time,
/// so count-based splits line up with the timeline.
///
/// The shape this produces: with a tiny history window the group profiles
/// see too few post-drift events to separate hot new items from noise; a
/// window of around ten captures the post-drift tastes cleanly; long windows
/// drown the profiles in pre-drift background consumption shared across all
/// groups, which tanks recall and collapses diversity.
pub fn drift_event_log(seed: u64) -> EventLog {
    const GROUPS: usize = 10;
    const USERS_PER_GROUP: usize = 20;
    const NEW_PER_GROUP: usize = 45;
    const HOT_ITEMS: usize = 15;
    const HOT_WEIGHT: u32 = 5;
    const BACKGROUND: usize = 25;
    const PRE_EVENTS: usize = 40;
    const POST_EVENTS: usize = 32;
    const DRIFT_T: i64 = 800_000;
    const END_T: i64 = 1_000_000;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();

    // Popularity-skewed pick from a group's new pool.
    let total_weight = HOT_ITEMS as u32 * HOT_WEIGHT + (NEW_PER_GROUP - HOT_ITEMS) as u32;
    let mut new_item = |rng: &mut ChaCha8Rng, group: usize| -> String {
        let pick = rng.gen_range(0..total_weight);
        let j = if pick < HOT_ITEMS as u32 * HOT_WEIGHT {
            (pick / HOT_WEIGHT) as usize
        } else {
            HOT_ITEMS + (pick - HOT_ITEMS as u32 * HOT_WEIGHT) as usize
        };
        format!("g{group}_new{j:02}")
    };

    for group in 0..GROUPS {
        for u in 0..USERS_PER_GROUP {
            let user = format!("g{group}_u{u:02}");
            for _ in 0..PRE_EVENTS {
                events.push(Event {
                    timestamp: rng.gen_range(0..DRIFT_T),
                    user: user.clone(),
                    item: format!("bg{:02}", rng.gen_range(0..BACKGROUND)),
                });
            }
            for _ in 0..POST_EVENTS {
                // A residual background habit keeps a slow, window-sized
                // stream of shared items flowing into the profiles.
                let item = if rng.gen_bool(0.2) {
                    format!("bg{:02}", rng.gen_range(0..BACKGROUND))
                } else {
                    new_item(&mut rng, group)
                };
                events.push(Event {
                    timestamp: rng.gen_range(DRIFT_T..END_T),
                    user: user.clone(),
                    item,
                });
            }
        }
    }
    EventLog::from_events(events)
}

/// Uniform random tree model: latents first (attached uniformly to earlier
/// latents), then leaves attached to uniform random latents. All latents sit
/// at level 1 so `posterior_marginals(1)` covers them.
pub fn random_tree_model(n_latents: usize, n_leaves: usize, rng: &mut ChaCha8Rng) -> LatentTreeModel {
    assert!(n_latents >= 1 && n_leaves >= 1);
    let mut vars = Vec::new();
    let mut edges = Vec::new();
    for l in 0..n_latents {
        vars.push(ModelVariable::latent(format!("Z1_{}", l + 1), 1));
        if l > 0 {
            edges.push((rng.gen_range(0..l), l));
        }
    }
    for x in 0..n_leaves {
        let v = vars.len();
        vars.push(ModelVariable::leaf(format!("x{x}")));
        edges.push((rng.gen_range(0..n_latents), v));
    }
    let mut rand_row = |rng: &mut ChaCha8Rng| {
        let p1: f64 = rng.gen_range(0.05..0.95);
        [1.0 - p1, p1]
    };
    let cpts = (0..vars.len())
        .map(|v| {
            if v == 0 {
                Cpt::Root(rand_row(rng))
            } else {
                Cpt::Conditional([rand_row(rng), rand_row(rng)])
            }
        })
        .collect();
    LatentTreeModel::new(vars, edges, 0, cpts).unwrap()
}

/// Random partial evidence over the model's leaves.
pub fn random_evidence(
    model: &LatentTreeModel,
    density: f64,
    rng: &mut ChaCha8Rng,
) -> (cof_core::ltm::Evidence, Vec<Option<bool>>) {
    let mut ev = cof_core::ltm::Evidence::empty(model);
    let mut dense = vec![None; model.var_count()];
    for &leaf in model.leaf_vars() {
        if rng.gen_bool(density) {
            let value = rng.gen_bool(0.5);
            ev.set(model, leaf, value).unwrap();
            dense[leaf] = Some(value);
        }
    }
    (ev, dense)
}
