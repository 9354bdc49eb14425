//! Poisoning engine: reverse the surrogate's optimization to craft fake
//! user profiles that promote target items.
//!
//! For each controlled user the attack (1) finds, per target, the embedding
//! shift that maximizes the target's Horn-clause truth score over a sample
//! of legitimate users, then (2) alternates between gradient-ascending the
//! fake user's embedding and greedily filling its interaction set so the
//! shifted targets score as true as possible. The shift never touches the
//! victim; it only steers crafting inside the surrogate's frozen geometry.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionMatrix, PopularityTable};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::substrate::ops;
use crate::substrate::tensor::Tensor1;
use crate::surrogate::{
    branch_backward, branch_forward, chain_backward, chain_forward, mlp2_forward, ExprSinks,
    SurrogateModel, EVENT, NOT, OR, P_ITEM_EMB, P_USER_EMB,
};

/// A controlled user: its surrogate-side embedding and crafted interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeUserProfile {
    pub user: u32,
    /// Embedding optimized inside the surrogate; empty for baselines.
    pub embedding: Vec<f64>,
    /// Interaction set, ascending. Always contains every target item.
    pub items: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub targets: Vec<u32>,
    /// Number of controlled users to generate.
    pub budget: usize,
    /// Max interactions per controlled user.
    pub profile_size: usize,
    /// Shift-ball radius; defaults to half the median item-embedding norm.
    pub shift_radius: Option<f64>,
    pub shift_steps: usize,
    pub shift_lr: f64,
    /// Alternating optimization rounds per fake user.
    pub craft_rounds: usize,
    pub embed_steps: usize,
    pub embed_lr: f64,
    /// Legitimate users sampled per iteration for the shift objective.
    pub user_sample: usize,
    /// Popular-item candidate pool size for greedy filling.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            targets: Vec::new(),
            budget: 1,
            profile_size: 100,
            shift_radius: None,
            shift_steps: 30,
            shift_lr: 0.1,
            craft_rounds: 3,
            embed_steps: 20,
            embed_lr: 0.1,
            user_sample: 64,
            pool_size: 500,
            seed: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("attack needs at least one target item".into()));
        }
        if self.profile_size < self.targets.len() {
            return Err(Error::Config(format!(
                "profile_size {} smaller than target count {}",
                self.profile_size,
                self.targets.len()
            )));
        }
        if let Some(r) = self.shift_radius {
            if !(r >= 0.0) {
                return Err(Error::Config(format!("shift_radius must be >= 0, got {r}")));
            }
        }
        Ok(())
    }

    fn sorted_targets(&self) -> Vec<u32> {
        let mut t = self.targets.clone();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Optimal perturbation of one target's embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingShift {
    pub target: u32,
    pub epsilon: Tensor1,
    pub objective: f64,
}

/// Half the median item-embedding norm: keeps shifted embeddings
/// in-distribution.
pub fn default_shift_radius(model: &SurrogateModel) -> f64 {
    let d = model.config().embedding_dim;
    let items = model.store().raw(P_ITEM_EMB);
    let n = model.num_items();
    let mut norms: Vec<f64> = (0..n)
        .map(|i| ops::dot(&items[i * d..(i + 1) * d], &items[i * d..(i + 1) * d]).sqrt())
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    0.5 * norms[n / 2]
}

fn project_ball(v: &mut [f64], radius: f64) {
    let norm = ops::dot(v, v).sqrt();
    if norm > radius {
        let scale = if radius == 0.0 { 0.0 } else { radius / norm };
        for x in v.iter_mut() {
            *x *= scale;
        }
    }
}

/// Precomputed antecedent chains for a sample of legitimate users.
struct SampleChains {
    user_vecs: Vec<Vec<f64>>,
    accs: Vec<Vec<f64>>,
}

fn sample_chains(model: &SurrogateModel, users: &[u32], exclude: u32) -> Result<SampleChains> {
    let store = model.store();
    let cap = model.config().max_history;
    let mut user_vecs = Vec::with_capacity(users.len());
    let mut accs = Vec::with_capacity(users.len());
    for &u in users {
        let hist = model.observed().history(u);
        let ants: Vec<u32> = hist
            .iter()
            .copied()
            .filter(|&i| i != exclude)
            .take(cap)
            .collect();
        if ants.is_empty() {
            return Err(Error::Precondition(format!(
                "sampled user {u} has no usable history"
            )));
        }
        let user_vec = store.matrix_row(P_USER_EMB, u as usize).to_vec();
        let items: Vec<(Option<u32>, &[f64])> = ants
            .iter()
            .map(|&i| (Some(i), store.matrix_row(P_ITEM_EMB, i as usize)))
            .collect();
        let chain = chain_forward(store, &user_vec, &items);
        accs.push(chain.acc().to_vec());
        user_vecs.push(user_vec);
    }
    Ok(SampleChains { user_vecs, accs })
}

/// Mean truth score of the shifted target over the sampled users, plus its
/// gradient w.r.t. the shift when requested.
fn shift_objective(
    model: &SurrogateModel,
    chains: &SampleChains,
    shifted: &[f64],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let store = model.store();
    let anchor = model.anchor();
    let d = anchor.len();
    let count = chains.user_vecs.len() as f64;
    let mut total = 0.0;
    for (user_vec, acc) in chains.user_vecs.iter().zip(&chains.accs) {
        let branch = branch_forward(store, user_vec, acc, None, shifted);
        let s = ops::sim_hat(branch.expression(), anchor).expect("anchor nonzero");
        total += s;
        if let Some(g) = grad.as_deref_mut() {
            let mut d_expr = vec![0.0; d];
            let mut scratch = vec![0.0; d];
            ops::sim_hat_backward(branch.expression(), anchor, 1.0 / count, &mut d_expr, &mut scratch)
                .expect("sim grad");
            let mut sinks = ExprSinks {
                grads: None,
                user_row: None,
                d_user: None,
                d_candidate: Some(g),
            };
            let mut d_acc = vec![0.0; d];
            branch_backward(store, &branch, &d_expr, d, &mut sinks, &mut d_acc);
        }
    }
    total / count
}

/// Shift objective at an explicit perturbation: the mean truth score of
/// `t + epsilon` over the sampled users, plus its gradient w.r.t. epsilon.
/// Verification hook for gradient checking the ascent path.
pub fn shift_objective_at(
    model: &SurrogateModel,
    t: u32,
    user_sample: &[u32],
    epsilon: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if epsilon.len() != model.config().embedding_dim {
        return Err(Error::Shape(format!(
            "epsilon dim {} vs embedding dim {}",
            epsilon.len(),
            model.config().embedding_dim
        )));
    }
    let chains = sample_chains(model, user_sample, t)?;
    let mut shifted = model.store().matrix_row(P_ITEM_EMB, t as usize).to_vec();
    ops::axpy(1.0, epsilon, &mut shifted);
    let mut grad = vec![0.0; epsilon.len()];
    let value = shift_objective(model, &chains, &shifted, Some(&mut grad));
    Ok((value, grad))
}

/// Projected gradient ascent for the optimal target-embedding shift, with
/// backtracking halving so the objective never decreases.
pub fn optimal_shift(
    model: &SurrogateModel,
    t: u32,
    user_sample: &[u32],
    cfg: &AttackConfig,
) -> Result<EmbeddingShift> {
    if user_sample.is_empty() {
        return Err(Error::Precondition("user sample must be nonempty".into()));
    }
    if t as usize >= model.num_items() {
        return Err(Error::IdRange(format!("target {t} out of range")));
    }
    let radius = cfg
        .shift_radius
        .unwrap_or_else(|| default_shift_radius(model));
    let d = model.config().embedding_dim;
    let chains = sample_chains(model, user_sample, t)?;
    let base = model.store().matrix_row(P_ITEM_EMB, t as usize).to_vec();

    let mut eps = vec![0.0; d];
    let mut shifted = base.clone();
    let mut grad = vec![0.0; d];
    let mut objective = shift_objective(model, &chains, &shifted, Some(&mut grad));

    if radius > 0.0 {
        let mut lr = cfg.shift_lr;
        for _ in 0..cfg.shift_steps {
            let gnorm = ops::dot(&grad, &grad).sqrt();
            if gnorm == 0.0 {
                break;
            }
            let mut accepted = false;
            while lr >= 1e-9 {
                let mut cand = eps.clone();
                ops::axpy(lr, &grad, &mut cand);
                project_ball(&mut cand, radius);
                let mut cand_shifted = base.clone();
                ops::axpy(1.0, &cand, &mut cand_shifted);
                let mut cand_grad = vec![0.0; d];
                let cand_obj =
                    shift_objective(model, &chains, &cand_shifted, Some(&mut cand_grad));
                if cand_obj >= objective {
                    eps = cand;
                    shifted = cand_shifted;
                    grad = cand_grad;
                    objective = cand_obj;
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }
    let _ = shifted;
    Ok(EmbeddingShift {
        target: t,
        epsilon: Tensor1::new(eps)?,
        objective,
    })
}

/// Mean truth score of all shifted targets for a fake user with embedding
/// `m_vec` and interaction order `items` (crafting order, not sorted).
pub fn profile_objective(
    model: &SurrogateModel,
    m_vec: &[f64],
    items: &[u32],
    shifts: &[EmbeddingShift],
) -> f64 {
    let store = model.store();
    let anchor = model.anchor();
    assert!(!items.is_empty());
    let ants: Vec<(Option<u32>, &[f64])> = items
        .iter()
        .map(|&i| (Some(i), store.matrix_row(P_ITEM_EMB, i as usize)))
        .collect();
    let chain = chain_forward(store, m_vec, &ants);
    let mut total = 0.0;
    for shift in shifts {
        let mut shifted = store.matrix_row(P_ITEM_EMB, shift.target as usize).to_vec();
        ops::axpy(1.0, shift.epsilon.data(), &mut shifted);
        let branch = branch_forward(store, m_vec, chain.acc(), None, &shifted);
        total += ops::sim_hat(branch.expression(), anchor).expect("anchor nonzero");
    }
    total / shifts.len() as f64
}

/// Same objective with its gradient w.r.t. the fake embedding.
fn profile_objective_grad(
    model: &SurrogateModel,
    m_vec: &[f64],
    items: &[u32],
    shifts: &[EmbeddingShift],
    grad: &mut [f64],
) -> f64 {
    let store = model.store();
    let anchor = model.anchor();
    let d = anchor.len();
    grad.fill(0.0);
    let ants: Vec<(Option<u32>, &[f64])> = items
        .iter()
        .map(|&i| (Some(i), store.matrix_row(P_ITEM_EMB, i as usize)))
        .collect();
    let chain = chain_forward(store, m_vec, &ants);
    let mut total = 0.0;
    let mut d_acc = vec![0.0; d];
    let count = shifts.len() as f64;
    for shift in shifts {
        let mut shifted = store.matrix_row(P_ITEM_EMB, shift.target as usize).to_vec();
        ops::axpy(1.0, shift.epsilon.data(), &mut shifted);
        let branch = branch_forward(store, m_vec, chain.acc(), None, &shifted);
        total += ops::sim_hat(branch.expression(), anchor).expect("anchor nonzero");
        let mut d_expr = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        ops::sim_hat_backward(branch.expression(), anchor, 1.0 / count, &mut d_expr, &mut scratch)
            .expect("sim grad");
        let mut sinks = ExprSinks {
            grads: None,
            user_row: None,
            d_user: Some(grad),
            d_candidate: None,
        };
        branch_backward(store, &branch, &d_expr, d, &mut sinks, &mut d_acc);
    }
    // One chain backward with the accumulated head gradient.
    let mut sinks = ExprSinks {
        grads: None,
        user_row: None,
        d_user: Some(grad),
        d_candidate: None,
    };
    chain_backward(store, &chain, &d_acc, d, &mut sinks);
    total / count
}

/// Crafts one controlled user by alternating (a) gradient ascent on its
/// embedding with (b) greedy filler selection from the candidate pool.
/// Filler items are only accepted while they do not decrease the objective.
pub fn craft_fake_user(
    model: &SurrogateModel,
    shifts: &[EmbeddingShift],
    pool: &[u32],
    cfg: &AttackConfig,
    rng: &mut Rng,
    user_id: u32,
) -> Result<FakeUserProfile> {
    cfg.validate()?;
    let targets = cfg.sorted_targets();
    for t in &targets {
        if !pool.contains(t) {
            return Err(Error::Precondition(format!("pool missing target {t}")));
        }
    }
    if pool.len() < cfg.profile_size {
        return Err(Error::Size(format!(
            "pool of {} items cannot fill profiles of size {}",
            pool.len(),
            cfg.profile_size
        )));
    }
    if shifts.is_empty() {
        return Err(Error::Precondition("craft needs at least one shift".into()));
    }
    let d = model.config().embedding_dim;
    let store = model.store();

    let mut m_vec: Vec<f64> = (0..d).map(|_| rng.normal() * 0.1).collect();
    let mut order: Vec<u32> = targets.clone();

    for _round in 0..cfg.craft_rounds.max(1) {
        // (a) Continuous: ascend the embedding with backtracking halving.
        let mut grad = vec![0.0; d];
        let mut obj = profile_objective_grad(model, &m_vec, &order, shifts, &mut grad);
        let mut lr = cfg.embed_lr;
        for _ in 0..cfg.embed_steps {
            let gnorm = ops::dot(&grad, &grad).sqrt();
            if gnorm == 0.0 {
                break;
            }
            let mut accepted = false;
            while lr >= 1e-9 {
                let mut cand = m_vec.clone();
                ops::axpy(lr, &grad, &mut cand);
                let mut cand_grad = vec![0.0; d];
                let cand_obj =
                    profile_objective_grad(model, &cand, &order, shifts, &mut cand_grad);
                if cand_obj >= obj {
                    m_vec = cand;
                    grad = cand_grad;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
        }

        // (b) Discrete: rebuild the filler set greedily under the new
        // embedding. The shifted target events stay fixed while m is fixed.
        order = targets.clone();
        let anchor = model.anchor();
        let shifted_events: Vec<Vec<f64>> = shifts
            .iter()
            .map(|s| {
                let mut shifted = store.matrix_row(P_ITEM_EMB, s.target as usize).to_vec();
                ops::axpy(1.0, s.epsilon.data(), &mut shifted);
                mlp2_forward(store, EVENT, concat_vec(&m_vec, &shifted)).out
            })
            .collect();

        // Incremental chain over the crafting order.
        let mut acc: Option<Vec<f64>> = None;
        for &i in &order {
            let ev = mlp2_forward(
                store,
                EVENT,
                concat_vec(&m_vec, store.matrix_row(P_ITEM_EMB, i as usize)),
            );
            let not = mlp2_forward(store, NOT, ev.out).out;
            acc = Some(match acc {
                None => not,
                Some(prev) => mlp2_forward(store, OR, concat_vec(&prev, &not)).out,
            });
        }
        let mut acc = acc.expect("targets nonempty");
        let objective_of = |acc: &[f64]| -> f64 {
            let mut total = 0.0;
            for ev in &shifted_events {
                let c = mlp2_forward(store, OR, concat_vec(acc, ev)).out;
                total += ops::sim_hat(&c, anchor).expect("anchor nonzero");
            }
            total / shifted_events.len() as f64
        };
        let mut current = objective_of(&acc);
        while order.len() < cfg.profile_size {
            let mut best: Option<(f64, u32, Vec<f64>)> = None;
            for &c in pool {
                if order.contains(&c) {
                    continue;
                }
                let ev = mlp2_forward(
                    store,
                    EVENT,
                    concat_vec(&m_vec, store.matrix_row(P_ITEM_EMB, c as usize)),
                );
                let not = mlp2_forward(store, NOT, ev.out).out;
                let acc_new = mlp2_forward(store, OR, concat_vec(&acc, &not)).out;
                let obj_new = objective_of(&acc_new);
                let better = match &best {
                    None => true,
                    Some((bo, bc, _)) => obj_new > *bo || (obj_new == *bo && c < *bc),
                };
                if better {
                    best = Some((obj_new, c, acc_new));
                }
            }
            match best {
                Some((obj_new, c, acc_new)) if obj_new >= current => {
                    order.push(c);
                    acc = acc_new;
                    current = obj_new;
                }
                _ => break,
            }
        }
    }

    let mut items = order;
    items.sort_unstable();
    items.dedup();
    Ok(FakeUserProfile {
        user: user_id,
        embedding: m_vec,
        items,
    })
}

fn concat_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Full poisoning loop: per controlled user, resample legitimate users,
/// recompute the per-target shifts, and craft one profile.
pub fn run_hcars(
    model: &SurrogateModel,
    observed: &InteractionMatrix,
    cfg: &AttackConfig,
) -> Result<Vec<FakeUserProfile>> {
    cfg.validate()?;
    let targets = cfg.sorted_targets();
    for &t in &targets {
        if t as usize >= model.num_items() {
            return Err(Error::IdRange(format!("target {t} out of range")));
        }
    }
    if cfg.budget == 0 {
        return Ok(Vec::new());
    }
    let usable: Vec<u32> = (0..observed.num_users() as u32)
        .filter(|&u| observed.history(u).iter().any(|i| !targets.contains(i)))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("no legitimate users with history".into()));
    }

    // Candidate pool: most popular items plus every target.
    let pop = crate::data::popularity(observed);
    let mut pool: Vec<u32> = pop
        .ranking
        .iter()
        .copied()
        .take(cfg.pool_size.max(cfg.profile_size))
        .collect();
    for &t in &targets {
        if !pool.contains(&t) {
            pool.push(t);
        }
    }

    let root = Rng::new(cfg.seed).derive(streams::ATTACK);
    let mut profiles = Vec::with_capacity(cfg.budget);
    for iter in 0..cfg.budget {
        let iter_rng = root.derive(iter as u64);
        let mut sample_rng = iter_rng.derive(1);
        let take = cfg.user_sample.min(usable.len());
        let sample: Vec<u32> = sample_rng
            .sample_distinct(usable.len(), take)
            .into_iter()
            .map(|i| usable[i])
            .collect();
        let mut shifts = Vec::with_capacity(targets.len());
        for &t in &targets {
            shifts.push(optimal_shift(model, t, &sample, cfg)?);
        }
        let mut craft_rng = iter_rng.derive(2);
        let user_id = observed.num_users() as u32 + iter as u32;
        profiles.push(craft_fake_user(
            model, &shifts, &pool, cfg, &mut craft_rng, user_id,
        )?);
    }
    Ok(profiles)
}

/// Outcome of the loss-decrease condition measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConditionReport {
    pub target: u32,
    pub before: f64,
    pub after: f64,
    /// after - before; the condition holds when this is >= 0.
    pub delta: f64,
    pub passed: bool,
}

/// Measures whether the summed truth score of target `t` over the given
/// legitimate users did not decrease after retraining the surrogate on the
/// poisoned data (the loss-decrease condition, stated on the negated sums).
pub fn shift_condition_check(
    before: &SurrogateModel,
    after: &SurrogateModel,
    t: u32,
    users: &[u32],
) -> Result<ShiftConditionReport> {
    if users.is_empty() {
        return Err(Error::Precondition("shift condition needs users".into()));
    }
    if before.config().embedding_dim != after.config().embedding_dim
        || before.num_items() != after.num_items()
    {
        return Err(Error::Precondition(
            "surrogates do not share an architecture".into(),
        ));
    }
    let mut sum_before = 0.0;
    let mut sum_after = 0.0;
    for &u in users {
        sum_before += before.score(u, t)?;
        sum_after += after.score(u, t)?;
    }
    let delta = sum_after - sum_before;
    Ok(ShiftConditionReport {
        target: t,
        before: sum_before,
        after: sum_after,
        delta,
        passed: delta >= 0.0,
    })
}

/// Bandwagon baseline: targets plus fillers sampled uniformly from the
/// top-10% most popular items (falling back to the full ranking when that
/// pool is too small).
pub fn bandwagon(
    observed: &InteractionMatrix,
    popularity: &PopularityTable,
    cfg: &AttackConfig,
) -> Result<Vec<FakeUserProfile>> {
    cfg.validate()?;
    let targets = cfg.sorted_targets();
    let need = cfg.profile_size - targets.len();
    let top: Vec<u32> = popularity
        .top_fraction(0.1)
        .iter()
        .copied()
        .filter(|i| !targets.contains(i))
        .collect();
    let pool: Vec<u32> = if top.len() >= need {
        top
    } else {
        popularity
            .ranking
            .iter()
            .copied()
            .filter(|i| !targets.contains(i))
            .collect()
    };
    if pool.len() < need {
        return Err(Error::Size(format!(
            "only {} filler candidates for profiles of size {}",
            pool.len(),
            cfg.profile_size
        )));
    }
    let root = Rng::new(cfg.seed).derive(streams::ATTACK);
    let mut profiles = Vec::with_capacity(cfg.budget);
    for b in 0..cfg.budget {
        let mut rng = root.derive(b as u64);
        let mut items = targets.clone();
        items.extend(
            rng.sample_distinct(pool.len(), need)
                .into_iter()
                .map(|i| pool[i]),
        );
        items.sort_unstable();
        profiles.push(FakeUserProfile {
            user: observed.num_users() as u32 + b as u32,
            embedding: Vec::new(),
            items,
        });
    }
    Ok(profiles)
}

/// Floor baseline: targets plus uniform-random fillers.
pub fn random_attack(
    observed: &InteractionMatrix,
    cfg: &AttackConfig,
) -> Result<Vec<FakeUserProfile>> {
    cfg.validate()?;
    let targets = cfg.sorted_targets();
    let need = cfg.profile_size - targets.len();
    let pool: Vec<u32> = (0..observed.num_items() as u32)
        .filter(|i| !targets.contains(i))
        .collect();
    if pool.len() < need {
        return Err(Error::Size(format!(
            "only {} filler candidates for profiles of size {}",
            pool.len(),
            cfg.profile_size
        )));
    }
    let root = Rng::new(cfg.seed).derive(streams::ATTACK);
    let mut profiles = Vec::with_capacity(cfg.budget);
    for b in 0..cfg.budget {
        let mut rng = root.derive(b as u64);
        let mut items = targets.clone();
        items.extend(
            rng.sample_distinct(pool.len(), need)
                .into_iter()
                .map(|i| pool[i]),
        );
        items.sort_unstable();
        profiles.push(FakeUserProfile {
            user: observed.num_users() as u32 + b as u32,
            embedding: Vec::new(),
            items,
        });
    }
    Ok(profiles)
}

#[derive(Serialize, Deserialize)]
struct FakeRecord {
    fake_user: u32,
    items: Vec<u32>,
}

/// Newline-delimited JSON archive of fake profiles.
pub fn write_fake_archive(path: impl AsRef<Path>, profiles: &[FakeUserProfile]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in profiles {
        let rec = FakeRecord {
            fake_user: p.user,
            items: p.items.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fake_archive(path: impl AsRef<Path>) -> Result<Vec<FakeUserProfile>> {
    let file = std::fs::File::open(path)?;
    let mut profiles = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FakeRecord = serde_json::from_str(&line)?;
        profiles.push(FakeUserProfile {
            user: rec.fake_user,
            embedding: Vec::new(),
            items: rec.items,
        });
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::popularity;
    use crate::surrogate::{train_surrogate, SurrogateTrainConfig};
    use crate::synth;

    fn toy_surrogate(d: usize, dh: usize, seed: u64) -> SurrogateModel {
        let mut rng = Rng::new(90 + seed);
        let matrix = synth::block_dataset(12, 20, 5, &mut rng);
        let cfg = SurrogateTrainConfig {
            embedding_dim: d,
            hidden_dim: dh,
            epochs: 4,
            batch_size: 16,
            lr: 5e-3,
            max_history: 4,
            lambda_cf: 0.0,
            lambda_reg: 0.1,
            seed,
            ..SurrogateTrainConfig::default()
        };
        train_surrogate(&matrix, &[], &cfg).unwrap()
    }

    fn base_cfg(targets: Vec<u32>) -> AttackConfig {
        AttackConfig {
            targets,
            budget: 2,
            profile_size: 8,
            shift_radius: Some(0.3),
            shift_steps: 15,
            shift_lr: 0.1,
            craft_rounds: 2,
            embed_steps: 10,
            embed_lr: 0.1,
            user_sample: 6,
            pool_size: 12,
            seed: 77,
        }
    }

    #[test]
    fn zero_radius_returns_zero_shift() {
        let model = toy_surrogate(8, 12, 1);
        let cfg = AttackConfig {
            shift_radius: Some(0.0),
            ..base_cfg(vec![3])
        };
        let users: Vec<u32> = (0..6).collect();
        let shift = optimal_shift(&model, 3, &users, &cfg).unwrap();
        assert!(shift.epsilon.data().iter().all(|&x| x == 0.0));
        // Objective equals the unshifted mean score.
        let chains = sample_chains(&model, &users, 3).unwrap();
        let base = model.store().matrix_row(P_ITEM_EMB, 3).to_vec();
        let unshifted = shift_objective(&model, &chains, &base, None);
        assert!((shift.objective - unshifted).abs() < 1e-12);
    }

    #[test]
    fn ascent_never_loses_to_zero_shift() {
        let model = toy_surrogate(8, 12, 2);
        let cfg = base_cfg(vec![5]);
        let users: Vec<u32> = (0..8).collect();
        let chains = sample_chains(&model, &users, 5).unwrap();
        let base = model.store().matrix_row(P_ITEM_EMB, 5).to_vec();
        let at_zero = shift_objective(&model, &chains, &base, None);
        let shift = optimal_shift(&model, 5, &users, &cfg).unwrap();
        assert!(shift.objective >= at_zero);
        let norm = shift.epsilon.norm();
        assert!(norm <= 0.3 + 1e-9, "projection violated: {norm}");
    }

    #[test]
    fn shift_matches_grid_search_in_2d() {
        let model = toy_surrogate(2, 6, 3);
        let cfg = AttackConfig {
            shift_radius: Some(0.25),
            shift_steps: 60,
            shift_lr: 0.05,
            ..base_cfg(vec![7])
        };
        let users: Vec<u32> = (0..6).collect();
        let shift = optimal_shift(&model, 7, &users, &cfg).unwrap();

        let chains = sample_chains(&model, &users, 7).unwrap();
        let base = model.store().matrix_row(P_ITEM_EMB, 7).to_vec();
        let mut best = f64::NEG_INFINITY;
        let steps = 50i64; // 0.005 grid over [-0.25, 0.25]^2
        for ix in -steps..=steps {
            for iy in -steps..=steps {
                let e = [ix as f64 * 0.005, iy as f64 * 0.005];
                if ops::dot(&e, &e).sqrt() > 0.25 {
                    continue;
                }
                let shifted = [base[0] + e[0], base[1] + e[1]];
                let obj = shift_objective(&model, &chains, &shifted, None);
                if obj > best {
                    best = obj;
                }
            }
        }
        assert!(
            shift.objective >= best - 1e-2,
            "ascent {} vs grid {best}",
            shift.objective
        );
    }

    #[test]
    fn craft_with_no_filler_capacity_returns_targets() {
        let model = toy_surrogate(8, 12, 4);
        let cfg = AttackConfig {
            profile_size: 2,
            ..base_cfg(vec![3, 9])
        };
        let users: Vec<u32> = (0..6).collect();
        let shifts: Vec<EmbeddingShift> = [3u32, 9]
            .iter()
            .map(|&t| optimal_shift(&model, t, &users, &cfg).unwrap())
            .collect();
        let pool: Vec<u32> = (0..12).collect();
        let mut rng = Rng::new(5);
        let profile = craft_fake_user(&model, &shifts, &pool, &cfg, &mut rng, 100).unwrap();
        assert_eq!(profile.items, vec![3, 9]);
    }

    #[test]
    fn greedy_close_to_exhaustive_on_tiny_pool() {
        let model = toy_surrogate(6, 10, 5);
        let cfg = AttackConfig {
            profile_size: 5,
            pool_size: 8,
            ..base_cfg(vec![2])
        };
        let users: Vec<u32> = (0..6).collect();
        let shifts = vec![optimal_shift(&model, 2, &users, &cfg).unwrap()];
        let pool: Vec<u32> = (0..8).collect();
        let mut rng = Rng::new(6);
        let profile = craft_fake_user(&model, &shifts, &pool, &cfg, &mut rng, 100).unwrap();
        assert!(profile.items.contains(&2));
        assert!(profile.items.len() <= 5);

        // Exhaustive oracle over filler subsets (size <= 4) at the crafted
        // embedding, evaluated in ascending order like the stored profile.
        let fillers: Vec<u32> = pool.iter().copied().filter(|&c| c != 2).collect();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << fillers.len()) {
            if mask.count_ones() as usize > 4 {
                continue;
            }
            let mut items = vec![2u32];
            for (bit, &f) in fillers.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    items.push(f);
                }
            }
            items.sort_unstable();
            let obj = profile_objective(&model, &profile.embedding, &items, &shifts);
            if obj > best {
                best = obj;
            }
        }
        let greedy_obj = profile_objective(&model, &profile.embedding, &profile.items, &shifts);
        assert!(
            greedy_obj >= 0.9 * best,
            "greedy {greedy_obj} vs exhaustive {best}"
        );
    }

    #[test]
    fn run_hcars_contract_and_determinism() {
        let model = toy_surrogate(8, 12, 6);
        let observed = model.observed().clone();
        let cfg = AttackConfig {
            budget: 0,
            ..base_cfg(vec![3, 15])
        };
        assert!(run_hcars(&model, &observed, &cfg).unwrap().is_empty());

        let cfg = AttackConfig {
            budget: 3,
            ..base_cfg(vec![3, 15])
        };
        let profiles = run_hcars(&model, &observed, &cfg).unwrap();
        assert_eq!(profiles.len(), 3);
        for (i, p) in profiles.iter().enumerate() {
            assert_eq!(p.user, 12 + i as u32);
            assert!(p.items.contains(&3) && p.items.contains(&15));
            assert!(p.items.len() <= cfg.profile_size);
        }
        let again = run_hcars(&model, &observed, &cfg).unwrap();
        assert_eq!(profiles, again);
    }

    #[test]
    fn identical_models_pass_shift_condition_with_zero_delta() {
        let model = toy_surrogate(8, 12, 7);
        let users: Vec<u32> = (0..6).collect();
        let report = shift_condition_check(&model, &model, 4, &users).unwrap();
        assert_eq!(report.delta, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn bandwagon_contract() {
        let mut rng = Rng::new(8);
        let matrix = synth::block_dataset(20, 40, 8, &mut rng);
        let pop = popularity(&matrix);
        // profile_size == |targets|: only targets.
        let cfg = AttackConfig {
            budget: 3,
            profile_size: 2,
            seed: 9,
            ..base_cfg(vec![1, 30])
        };
        for p in bandwagon(&matrix, &pop, &cfg).unwrap() {
            assert_eq!(p.items, vec![1, 30]);
        }
        // Fillers come from the top-10% popularity pool.
        let cfg = AttackConfig {
            budget: 5,
            profile_size: 5,
            seed: 9,
            ..base_cfg(vec![1, 30])
        };
        let top: Vec<u32> = pop.top_fraction(0.1).to_vec();
        for p in bandwagon(&matrix, &pop, &cfg).unwrap() {
            assert!(p.items.contains(&1) && p.items.contains(&30));
            for &i in p.items.iter().filter(|&&i| i != 1 && i != 30) {
                assert!(top.contains(&i), "filler {i} not in top-10%");
            }
        }
    }

    #[test]
    fn bandwagon_falls_back_to_full_ranking() {
        // 2 users, 10 items: the top-10% pool is a single item, too small
        // for 4 fillers.
        let matrix =
            InteractionMatrix::from_pairs(2, 10, vec![(0u32, 0u32), (1, 0), (0, 1)]).unwrap();
        let pop = popularity(&matrix);
        let cfg = AttackConfig {
            budget: 2,
            profile_size: 5,
            seed: 3,
            ..base_cfg(vec![9])
        };
        let profiles = bandwagon(&matrix, &pop, &cfg).unwrap();
        for p in &profiles {
            assert_eq!(p.items.len(), 5);
            assert!(p.items.contains(&9));
        }
    }

    #[test]
    fn random_attack_is_seeded_and_uniform_ish() {
        let mut rng = Rng::new(10);
        let matrix = synth::block_dataset(20, 40, 8, &mut rng);
        let cfg = AttackConfig {
            budget: 200,
            profile_size: 5,
            seed: 4,
            ..base_cfg(vec![7])
        };
        let a = random_attack(&matrix, &cfg).unwrap();
        let b = random_attack(&matrix, &cfg).unwrap();
        assert_eq!(a, b);
        // Mean filler popularity approximates the corpus mean.
        let pop = popularity(&matrix);
        let corpus_mean = pop.counts.iter().sum::<u64>() as f64 / matrix.num_items() as f64;
        let mut filler_pop = 0.0;
        let mut count = 0;
        for p in &a {
            assert!(p.items.contains(&7));
            for &i in p.items.iter().filter(|&&i| i != 7) {
                filler_pop += pop.counts[i as usize] as f64;
                count += 1;
            }
        }
        let mean = filler_pop / count as f64;
        assert!(
            (mean - corpus_mean).abs() < 0.35 * corpus_mean,
            "filler mean {mean} vs corpus {corpus_mean}"
        );
    }

    #[test]
    fn fake_archive_roundtrip() {
        let profiles = vec![
            FakeUserProfile {
                user: 20,
                embedding: Vec::new(),
                items: vec![1, 5, 9],
            },
            FakeUserProfile {
                user: 21,
                embedding: Vec::new(),
                items: vec![2],
            },
        ];
        let dir = std::env::temp_dir().join("hcars-attack-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fakes.jsonl");
        write_fake_archive(&path, &profiles).unwrap();
        assert_eq!(read_fake_archive(&path).unwrap(), profiles);
    }
}
