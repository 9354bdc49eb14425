//! Neural-logic surrogate of the black-box recommender.
//!
//! Interactions are encoded into event vectors; learned NOT/AND/OR modules
//! assemble them into Horn-clause expression vectors, and an item's score is
//! the similarity between its expression vector and a frozen "true" anchor.
//! Training combines a pairwise ranking loss on observed interactions, a
//! counterfactual loss that contrasts factual expressions against
//! explanation-reduced ones, and a regularizer pushing the modules toward
//! Boolean-algebra identities.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::explainer::CounterfactualExplanation;
use crate::rng::{streams, Rng};
use crate::substrate::ops;
use crate::substrate::store::{Gradients, ParamStore};
use crate::substrate::tensor::{Tensor1, Tensor2};
use crate::target::{rank_candidates, RankedList};

pub const P_USER_EMB: &str = "user_emb";
pub const P_ITEM_EMB: &str = "item_emb";

/// Parameter-name tuple of one two-layer module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleNames {
    pub w1: &'static str,
    pub b1: &'static str,
    pub w2: &'static str,
    pub b2: &'static str,
}

pub const EVENT: ModuleNames = ModuleNames {
    w1: "ev_w1",
    b1: "ev_b1",
    w2: "ev_w2",
    b2: "ev_b2",
};
pub const NOT: ModuleNames = ModuleNames {
    w1: "not_w1",
    b1: "not_b1",
    w2: "not_w2",
    b2: "not_b2",
};
pub const AND: ModuleNames = ModuleNames {
    w1: "and_w1",
    b1: "and_b1",
    w2: "and_w2",
    b2: "and_b2",
};
pub const OR: ModuleNames = ModuleNames {
    w1: "or_w1",
    b1: "or_b1",
    w2: "or_w2",
    b2: "or_b2",
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfLossMode {
    /// Push factual and counterfactual expressions apart in expression
    /// space.
    Contrast,
    /// Maximize the pair's similarity, following the printed formula.
    PaperLiteral,
    /// Rank the factual expression above its counterfactual against the
    /// true anchor (default): the explanation certifies that the
    /// recommendation held with the full history and fails without the
    /// removed items, so sim(c+, T) should exceed sim(cCF, T).
    TruthMargin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateTrainConfig {
    /// Weight of the counterfactual loss.
    pub lambda_cf: f64,
    /// Weight of the logical-law regularizer.
    pub lambda_reg: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Cap on antecedent events per expression.
    pub max_history: usize,
    /// Scale applied to the similarity difference inside the ranking loss.
    pub bpr_scale: f64,
    /// Event/expression vectors sampled per batch for the regularizer.
    pub reg_sample: usize,
    pub cf_loss_mode: CfLossMode,
    pub seed: u64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig {
            lambda_cf: 0.76,
            lambda_reg: 1e-4,
            lr: 1e-3,
            epochs: 8,
            batch_size: 128,
            embedding_dim: 64,
            hidden_dim: 128,
            max_history: 8,
            bpr_scale: 10.0,
            reg_sample: 8,
            cf_loss_mode: CfLossMode::TruthMargin,
            seed: 1,
        }
    }
}

impl SurrogateTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cf < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::Config("lambda weights must be non-negative".into()));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.max_history == 0 {
            return Err(Error::Config("dims and max_history must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("epochs, batch_size, lr must be positive".into()));
        }
        Ok(())
    }
}

/// Learned event-encoder weights, extractable as standalone tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventParams {
    pub w1: Tensor2,
    pub b1: Tensor1,
    pub w2: Tensor2,
    pub b2: Tensor1,
}

/// e = W2 relu(W1 concat(u, j) + b1) + b2.
pub fn encode_event(u: &Tensor1, j: &Tensor1, p: &EventParams) -> Result<Tensor1> {
    if u.len() != j.len() || p.w1.cols() != u.len() + j.len() {
        return Err(Error::Shape(format!(
            "encode_event: |u|={} |j|={} W1 is {}x{}",
            u.len(),
            j.len(),
            p.w1.rows(),
            p.w1.cols()
        )));
    }
    let mut input = Vec::with_capacity(u.len() * 2);
    input.extend_from_slice(u.data());
    input.extend_from_slice(j.data());
    let x = Tensor1::new(input)?;
    let hidden = ops::relu(&ops::affine(&x, &p.w1, &p.b1)?);
    ops::affine(&hidden, &p.w2, &p.b2)
}

/// Per-epoch loss components written to the loss CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub l_fa: f64,
    pub l_cf: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SurrogateModel {
    store: ParamStore,
    /// Frozen unit-norm "true" anchor.
    anchor: Vec<f64>,
    cfg: SurrogateTrainConfig,
    num_users: usize,
    num_items: usize,
    observed: InteractionMatrix,
    loss_curve: Vec<LossRow>,
    #[serde(skip)]
    ev_item_cache: OnceLock<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Two-layer module forward/backward with caches.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct Mlp2Cache {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

pub(crate) fn mlp2_forward(store: &ParamStore, names: ModuleNames, input: Vec<f64>) -> Mlp2Cache {
    let w1 = store.raw(names.w1);
    let b1 = store.raw(names.b1);
    let w2 = store.raw(names.w2);
    let b2 = store.raw(names.b2);
    let dh = b1.len();
    let dout = b2.len();
    let din = input.len();
    debug_assert_eq!(w1.len(), dh * din);
    let mut z1 = vec![0.0; dh];
    ops::matvec_into(w1, din, &input, b1, &mut z1);
    let mut a1 = vec![0.0; dh];
    ops::relu_into(&z1, &mut a1);
    let mut out = vec![0.0; dout];
    ops::matvec_into(w2, dh, &a1, b2, &mut out);
    Mlp2Cache { input, z1, a1, out }
}

/// Backpropagates `d_out`; accumulates parameter gradients into `grads`
/// (when given) and the input gradient into `d_input` (when given).
pub(crate) fn mlp2_backward(
    store: &ParamStore,
    names: ModuleNames,
    cache: &Mlp2Cache,
    d_out: &[f64],
    mut grads: Option<&mut Gradients>,
    d_input: Option<&mut [f64]>,
) {
    let w1 = store.raw(names.w1);
    let w2 = store.raw(names.w2);
    let dh = cache.z1.len();
    let din = cache.input.len();

    // da1 = W2^T d_out
    let mut da1 = vec![0.0; dh];
    for r in 0..d_out.len() {
        let g = d_out[r];
        if g != 0.0 {
            ops::axpy(g, &w2[r * dh..(r + 1) * dh], &mut da1);
        }
    }
    if let Some(g) = grads.as_deref_mut() {
        let gw2 = g.get_mut(names.w2).unwrap();
        for r in 0..d_out.len() {
            if d_out[r] != 0.0 {
                ops::axpy(d_out[r], &cache.a1, &mut gw2[r * dh..(r + 1) * dh]);
            }
        }
        let gb2 = g.get_mut(names.b2).unwrap();
        for r in 0..d_out.len() {
            gb2[r] += d_out[r];
        }
    }
    // dz1 = da1 * relu'(z1)
    let mut dz1 = vec![0.0; dh];
    ops::relu_backward_into(&cache.z1, &da1, &mut dz1);
    if let Some(g) = grads.as_deref_mut() {
        let gw1 = g.get_mut(names.w1).unwrap();
        for r in 0..dh {
            if dz1[r] != 0.0 {
                ops::axpy(dz1[r], &cache.input, &mut gw1[r * din..(r + 1) * din]);
            }
        }
        let gb1 = g.get_mut(names.b1).unwrap();
        for r in 0..dh {
            gb1[r] += dz1[r];
        }
    }
    if let Some(dx) = d_input {
        for r in 0..dh {
            if dz1[r] != 0.0 {
                ops::axpy(dz1[r], &w1[r * din..(r + 1) * din], dx);
            }
        }
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

// ---------------------------------------------------------------------------
// Expression chains: OR(¬e_1, ¬e_2, ..., ¬e_j) folded left, then a final
// OR with the candidate event.
// ---------------------------------------------------------------------------

/// Forward trace of the antecedent chain for one (user, history) pair.
pub(crate) struct ChainTrace {
    pub(crate) antecedent_ids: Vec<Option<u32>>,
    events: Vec<Mlp2Cache>,
    nots: Vec<Mlp2Cache>,
    ors: Vec<Mlp2Cache>,
}

impl ChainTrace {
    pub(crate) fn acc(&self) -> &[f64] {
        match self.ors.last() {
            Some(or) => &or.out,
            None => &self.nots[0].out,
        }
    }

}

/// Builds the NOT/OR chain over antecedent item vectors (paired with their
/// item ids when they live in the embedding table).
pub(crate) fn chain_forward(
    store: &ParamStore,
    user_vec: &[f64],
    antecedents: &[(Option<u32>, &[f64])],
) -> ChainTrace {
    assert!(!antecedents.is_empty(), "chain needs >= 1 antecedent");
    let mut events = Vec::with_capacity(antecedents.len());
    let mut nots = Vec::with_capacity(antecedents.len());
    let mut ors: Vec<Mlp2Cache> = Vec::with_capacity(antecedents.len().saturating_sub(1));
    for &(_, item_vec) in antecedents {
        let ev = mlp2_forward(store, EVENT, concat(user_vec, item_vec));
        let not = mlp2_forward(store, NOT, ev.out.clone());
        events.push(ev);
        nots.push(not);
    }
    for i in 1..antecedents.len() {
        let left: &[f64] = if i == 1 { &nots[0].out } else { &ors[i - 2].out };
        let or = mlp2_forward(store, OR, concat(left, &nots[i].out));
        ors.push(or);
    }
    ChainTrace {
        antecedent_ids: antecedents.iter().map(|&(id, _)| id).collect(),
        events,
        nots,
        ors,
    }
}

/// One expression head: the candidate event and the final OR with the chain.
pub(crate) struct BranchTrace {
    pub(crate) candidate_id: Option<u32>,
    event: Mlp2Cache,
    or: Mlp2Cache,
}

impl BranchTrace {
    pub(crate) fn expression(&self) -> &[f64] {
        &self.or.out
    }

    pub(crate) fn event_out(&self) -> &[f64] {
        &self.event.out
    }
}

pub(crate) fn branch_forward(
    store: &ParamStore,
    user_vec: &[f64],
    chain_acc: &[f64],
    candidate_id: Option<u32>,
    candidate_vec: &[f64],
) -> BranchTrace {
    let event = mlp2_forward(store, EVENT, concat(user_vec, candidate_vec));
    let or = mlp2_forward(store, OR, concat(chain_acc, &event.out));
    BranchTrace {
        candidate_id,
        event,
        or,
    }
}

/// Gradient sinks for chain/branch backward passes.
pub(crate) struct ExprSinks<'a> {
    /// Parameter and embedding-table gradients (training).
    pub grads: Option<&'a mut Gradients>,
    /// The user id whose embedding row receives the user-side gradient.
    pub user_row: Option<u32>,
    /// Extra sink for the user-side gradient (attack's fake embedding).
    pub d_user: Option<&'a mut [f64]>,
    /// Extra sink for the candidate item gradient (attack's shift).
    pub d_candidate: Option<&'a mut [f64]>,
}

fn route_user_item(
    d_input: &[f64],
    d_user_dim: usize,
    item_id: Option<u32>,
    sinks: &mut ExprSinks<'_>,
    d_candidate_here: bool,
) {
    let (du, di) = d_input.split_at(d_user_dim);
    if let Some(g) = sinks.grads.as_deref_mut() {
        if let Some(u) = sinks.user_row {
            let gu = g.get_mut(P_USER_EMB).unwrap();
            ops::axpy(1.0, du, &mut gu[u as usize * d_user_dim..(u as usize + 1) * d_user_dim]);
        }
        if let Some(i) = item_id {
            let gi = g.get_mut(P_ITEM_EMB).unwrap();
            let d = di.len();
            ops::axpy(1.0, di, &mut gi[i as usize * d..(i as usize + 1) * d]);
        }
    }
    if let Some(buf) = sinks.d_user.as_deref_mut() {
        ops::axpy(1.0, du, buf);
    }
    if d_candidate_here {
        if let Some(buf) = sinks.d_candidate.as_deref_mut() {
            ops::axpy(1.0, di, buf);
        }
    }
}

/// Backward through a branch: returns the gradient w.r.t. the chain value.
pub(crate) fn branch_backward(
    store: &ParamStore,
    branch: &BranchTrace,
    d_expr: &[f64],
    d_user_dim: usize,
    sinks: &mut ExprSinks<'_>,
    d_acc: &mut [f64],
) {
    let d = branch.event.out.len();
    let mut d_or_input = vec![0.0; d_acc.len() + d];
    mlp2_backward(
        store,
        OR,
        &branch.or,
        d_expr,
        sinks.grads.as_deref_mut(),
        Some(&mut d_or_input),
    );
    let (da, de) = d_or_input.split_at(d_acc.len());
    ops::axpy(1.0, da, d_acc);
    let mut d_ev_input = vec![0.0; branch.event.input.len()];
    mlp2_backward(
        store,
        EVENT,
        &branch.event,
        de,
        sinks.grads.as_deref_mut(),
        Some(&mut d_ev_input),
    );
    route_user_item(&d_ev_input, d_user_dim, branch.candidate_id, sinks, true);
}

/// Backward through the antecedent chain given d(acc).
pub(crate) fn chain_backward(
    store: &ParamStore,
    chain: &ChainTrace,
    d_acc: &[f64],
    d_user_dim: usize,
    sinks: &mut ExprSinks<'_>,
) {
    let n = chain.events.len();
    let d = d_acc.len();
    // d into each NOT output, accumulated while unwinding the OR folds.
    let mut d_nots: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; d]).collect();
    let mut d_carry = d_acc.to_vec();
    for i in (1..n).rev() {
        let or = &chain.ors[i - 1];
        let mut d_input = vec![0.0; 2 * d];
        mlp2_backward(
            store,
            OR,
            or,
            &d_carry,
            sinks.grads.as_deref_mut(),
            Some(&mut d_input),
        );
        let (dl, dr) = d_input.split_at(d);
        ops::axpy(1.0, dr, &mut d_nots[i]);
        d_carry.copy_from_slice(dl);
    }
    ops::axpy(1.0, &d_carry, &mut d_nots[0]);

    for i in 0..n {
        let mut d_event = vec![0.0; d];
        mlp2_backward(
            store,
            NOT,
            &chain.nots[i],
            &d_nots[i],
            sinks.grads.as_deref_mut(),
            Some(&mut d_event),
        );
        let mut d_ev_input = vec![0.0; chain.events[i].input.len()];
        mlp2_backward(
            store,
            EVENT,
            &chain.events[i],
            &d_event,
            sinks.grads.as_deref_mut(),
            Some(&mut d_ev_input),
        );
        route_user_item(&d_ev_input, d_user_dim, chain.antecedent_ids[i], sinks, false);
    }
}

// ---------------------------------------------------------------------------
// Initialization and training.
// ---------------------------------------------------------------------------

fn init_module(store: &mut ParamStore, names: ModuleNames, din: usize, dh: usize, dout: usize, rng: &mut Rng) {
    store.insert_matrix(names.w1, Tensor2::gaussian(dh, din, (2.0 / din as f64).sqrt(), rng));
    store.insert_vector(names.b1, Tensor1::from_fn(dh, |_| 0.01));
    store.insert_matrix(names.w2, Tensor2::gaussian(dout, dh, (1.0 / dh as f64).sqrt(), rng));
    // Nonzero output bias: a dead hidden layer then yields a constant
    // vector instead of an exact zero, which the similarity ops reject.
    store.insert_vector(names.b2, Tensor1::from_fn(dout, |_| 0.01));
}

fn init_surrogate(
    observed: &InteractionMatrix,
    cfg: &SurrogateTrainConfig,
) -> (ParamStore, Vec<f64>) {
    let m = observed.num_users();
    let n = observed.num_items();
    let d = cfg.embedding_dim;
    let dh = cfg.hidden_dim;
    let root = Rng::new(cfg.seed);
    let rng = root.derive(streams::INIT);
    let mut store = ParamStore::new();
    // Per-row and per-module streams: initialization is independent of the
    // matrix dimensions, so retraining on a poisoned matrix starts from the
    // same geometry for every shared entity.
    store.insert_matrix(P_USER_EMB, crate::target::gaussian_rows(m, d, 0.1, &rng, 1));
    store.insert_matrix(P_ITEM_EMB, crate::target::gaussian_rows(n, d, 0.1, &rng, 2));
    init_module(&mut store, EVENT, 2 * d, dh, d, &mut rng.derive(3));
    init_module(&mut store, NOT, d, dh, d, &mut rng.derive(4));
    init_module(&mut store, AND, 2 * d, dh, d, &mut rng.derive(5));
    init_module(&mut store, OR, 2 * d, dh, d, &mut rng.derive(6));
    // Frozen unit-norm anchor.
    let mut anchor_rng = rng.derive(7);
    let mut anchor: Vec<f64> = (0..d).map(|_| anchor_rng.normal()).collect();
    let norm = ops::dot(&anchor, &anchor).sqrt();
    for v in &mut anchor {
        *v /= norm;
    }
    (store, anchor)
}

/// Antecedent items for training: the (shuffled) history minus the candidate,
/// capped at `max_history`.
fn training_antecedents(history: &[u32], exclude: u32, cap: usize, rng: &mut Rng) -> Vec<u32> {
    let mut pool: Vec<u32> = history.iter().copied().filter(|&i| i != exclude).collect();
    rng.shuffle(&mut pool);
    pool.truncate(cap);
    pool
}

/// Antecedents at inference: ascending item-id order, capped.
fn inference_antecedents(history: &[u32], exclude: Option<u32>, cap: usize) -> Vec<u32> {
    history
        .iter()
        .copied()
        .filter(|&i| Some(i) != exclude)
        .take(cap)
        .collect()
}

struct FaPairOutcome {
    loss: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    sim_pos: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    sim_neg: f64,
}

/// Forward+backward of one ranking pair; gradient scaled by `scale`.
#[allow(clippy::too_many_arguments)]
fn fa_pair(
    store: &ParamStore,
    anchor: &[f64],
    alpha: f64,
    u: u32,
    antecedents: &[u32],
    pos: u32,
    neg: u32,
    scale: f64,
    grads: Option<&mut Gradients>,
    mut reg_pool: Option<&mut Vec<Vec<f64>>>,
) -> FaPairOutcome {
    let d = anchor.len();
    let user_vec = store.matrix_row(P_USER_EMB, u as usize).to_vec();
    let items: Vec<(Option<u32>, &[f64])> = antecedents
        .iter()
        .map(|&i| (Some(i), store.matrix_row(P_ITEM_EMB, i as usize)))
        .collect();
    let chain = chain_forward(store, &user_vec, &items);
    let pos_branch = branch_forward(
        store,
        &user_vec,
        chain.acc(),
        Some(pos),
        store.matrix_row(P_ITEM_EMB, pos as usize),
    );
    let neg_branch = branch_forward(
        store,
        &user_vec,
        chain.acc(),
        Some(neg),
        store.matrix_row(P_ITEM_EMB, neg as usize),
    );
    let sim_pos = ops::sim_hat(pos_branch.expression(), anchor).expect("anchor nonzero");
    let sim_neg = ops::sim_hat(neg_branch.expression(), anchor).expect("anchor nonzero");
    let z = alpha * (sim_pos - sim_neg);
    let loss = -ops::sigmoid(z).max(1e-300).ln();

    if let Some(reg_pool) = reg_pool.as_deref_mut() {
        reg_pool.push(pos_branch.event_out().to_vec());
        reg_pool.push(neg_branch.event_out().to_vec());
        reg_pool.push(chain.acc().to_vec());
    }

    if let Some(grads) = grads {
        // dL/d sim_pos = -alpha (1 - sigmoid(z)); opposite sign for neg.
        let coeff = alpha * (1.0 - ops::sigmoid(z)) * scale;
        let mut d_pos = vec![0.0; d];
        let mut d_neg = vec![0.0; d];
        let mut scratch_anchor = vec![0.0; d];
        ops::sim_hat_backward(pos_branch.expression(), anchor, -coeff, &mut d_pos, &mut scratch_anchor)
            .expect("sim grad");
        scratch_anchor.fill(0.0);
        ops::sim_hat_backward(neg_branch.expression(), anchor, coeff, &mut d_neg, &mut scratch_anchor)
            .expect("sim grad");

        let mut sinks = ExprSinks {
            grads: Some(grads),
            user_row: Some(u),
            d_user: None,
            d_candidate: None,
        };
        let mut d_acc = vec![0.0; d];
        branch_backward(store, &pos_branch, &d_pos, d, &mut sinks, &mut d_acc);
        branch_backward(store, &neg_branch, &d_neg, d, &mut sinks, &mut d_acc);
        chain_backward(store, &chain, &d_acc, d, &mut sinks);
    }
    FaPairOutcome {
        loss,
        sim_pos,
        sim_neg,
    }
}

struct CfSampleOutcome {
    loss: f64,
    similarity: f64,
}

/// Forward+backward of one counterfactual sample. `alpha` only enters the
/// truth-margin mode.
#[allow(clippy::too_many_arguments)]
fn cf_sample(
    store: &ParamStore,
    mode: CfLossMode,
    anchor: &[f64],
    alpha: f64,
    u: u32,
    full_antecedents: &[u32],
    reduced_antecedents: &[u32],
    target: u32,
    scale: f64,
    grads: Option<&mut Gradients>,
) -> CfSampleOutcome {
    let user_vec = store.matrix_row(P_USER_EMB, u as usize).to_vec();
    let to_items = |ids: &[u32]| -> Vec<(Option<u32>, &[f64])> {
        ids.iter()
            .map(|&i| (Some(i), store.matrix_row(P_ITEM_EMB, i as usize)))
            .collect()
    };
    let full_chain = chain_forward(store, &user_vec, &to_items(full_antecedents));
    let red_chain = chain_forward(store, &user_vec, &to_items(reduced_antecedents));
    let cand_vec = store.matrix_row(P_ITEM_EMB, target as usize);
    let full_branch = branch_forward(store, &user_vec, full_chain.acc(), Some(target), cand_vec);
    let red_branch = branch_forward(store, &user_vec, red_chain.acc(), Some(target), cand_vec);

    let s = ops::sim_hat(full_branch.expression(), red_branch.expression()).expect("nonzero");
    let d = full_branch.expression().len();
    let mut d_full = vec![0.0; d];
    let mut d_red = vec![0.0; d];
    let want_grads = grads.is_some();
    let loss = match mode {
        // -log(1 - s): pushes the expressions apart.
        CfLossMode::Contrast => {
            if want_grads {
                ops::sim_hat_backward(
                    full_branch.expression(),
                    red_branch.expression(),
                    scale / (1.0 - s),
                    &mut d_full,
                    &mut d_red,
                )
                .expect("sim grad");
            }
            -(1.0 - s).ln()
        }
        // -log(s): pulls them together.
        CfLossMode::PaperLiteral => {
            if want_grads {
                ops::sim_hat_backward(
                    full_branch.expression(),
                    red_branch.expression(),
                    -scale / s,
                    &mut d_full,
                    &mut d_red,
                )
                .expect("sim grad");
            }
            -s.ln()
        }
        // -log sigmoid(alpha * (sim(c+, T) - sim(cCF, T))).
        CfLossMode::TruthMargin => {
            let s_full = ops::sim_hat(full_branch.expression(), anchor).expect("anchor nonzero");
            let s_red = ops::sim_hat(red_branch.expression(), anchor).expect("anchor nonzero");
            let z = alpha * (s_full - s_red);
            if want_grads {
                let coeff = alpha * (1.0 - ops::sigmoid(z)) * scale;
                let mut scratch = vec![0.0; d];
                ops::sim_hat_backward(
                    full_branch.expression(),
                    anchor,
                    -coeff,
                    &mut d_full,
                    &mut scratch,
                )
                .expect("sim grad");
                scratch.fill(0.0);
                ops::sim_hat_backward(
                    red_branch.expression(),
                    anchor,
                    coeff,
                    &mut d_red,
                    &mut scratch,
                )
                .expect("sim grad");
            }
            -ops::sigmoid(z).max(1e-300).ln()
        }
    };

    if let Some(grads) = grads {
        let mut sinks = ExprSinks {
            grads: Some(grads),
            user_row: Some(u),
            d_user: None,
            d_candidate: None,
        };
        let mut d_acc_full = vec![0.0; d];
        branch_backward(store, &full_branch, &d_full, d, &mut sinks, &mut d_acc_full);
        chain_backward(store, &full_chain, &d_acc_full, d, &mut sinks);
        let mut d_acc_red = vec![0.0; d];
        branch_backward(store, &red_branch, &d_red, d, &mut sinks, &mut d_acc_red);
        chain_backward(store, &red_chain, &d_acc_red, d, &mut sinks);
    }
    CfSampleOutcome { loss, similarity: s }
}

const N_LAWS: usize = 9;

pub const LAW_NAMES: [&str; N_LAWS] = [
    "double_negation",
    "or_idempotence",
    "and_idempotence",
    "or_true_annihilates",
    "and_true_identity",
    "or_false_identity",
    "or_complement",
    "and_complement",
    "negation_distinct",
];

/// Residuals of the nine logical laws for one input vector `w`:
/// `1 - sim_hat(lhs, rhs)` for the eight equality laws, and
/// `sim_hat(w, NOT(w))` for the distinctness law.
fn law_residuals_one(store: &ParamStore, anchor: &[f64], w: &[f64]) -> [f64; N_LAWS] {
    let nw = mlp2_forward(store, NOT, w.to_vec());
    let nnw = mlp2_forward(store, NOT, nw.out.clone());
    let f = mlp2_forward(store, NOT, anchor.to_vec());
    let or_ww = mlp2_forward(store, OR, concat(w, w));
    let and_ww = mlp2_forward(store, AND, concat(w, w));
    let or_wt = mlp2_forward(store, OR, concat(w, anchor));
    let and_wt = mlp2_forward(store, AND, concat(w, anchor));
    let or_wf = mlp2_forward(store, OR, concat(w, &f.out));
    let or_wnw = mlp2_forward(store, OR, concat(w, &nw.out));
    let and_wnw = mlp2_forward(store, AND, concat(w, &nw.out));
    let s = |a: &[f64], b: &[f64]| ops::sim_hat(a, b).expect("law vectors nonzero");
    [
        1.0 - s(&nnw.out, w),
        1.0 - s(&or_ww.out, w),
        1.0 - s(&and_ww.out, w),
        1.0 - s(&or_wt.out, anchor),
        1.0 - s(&and_wt.out, w),
        1.0 - s(&or_wf.out, w),
        1.0 - s(&or_wnw.out, anchor),
        1.0 - s(&and_wnw.out, &f.out),
        s(w, &nw.out),
    ]
}

/// L_reg over a sample of vectors: mean over the eight equality-law
/// residuals plus the distinctness term, averaged over the sample. Gradients
/// flow through the logic modules only; the sampled vectors are detached.
fn reg_loss(
    store: &ParamStore,
    anchor: &[f64],
    ws: &[Vec<f64>],
    scale: f64,
    mut grads: Option<&mut Gradients>,
) -> f64 {
    if ws.is_empty() {
        return 0.0;
    }
    let d = anchor.len();
    let per_w = scale / ws.len() as f64;
    let eq_w = per_w / 8.0;
    let mut total = 0.0;

    // F = NOT(anchor) is shared across the sample; accumulate its gradient.
    let f = mlp2_forward(store, NOT, anchor.to_vec());
    let mut d_f = vec![0.0; d];

    for w in ws {
        let nw = mlp2_forward(store, NOT, w.clone());
        let nnw = mlp2_forward(store, NOT, nw.out.clone());
        let or_ww = mlp2_forward(store, OR, concat(w, w));
        let and_ww = mlp2_forward(store, AND, concat(w, w));
        let or_wt = mlp2_forward(store, OR, concat(w, anchor));
        let and_wt = mlp2_forward(store, AND, concat(w, anchor));
        let or_wf = mlp2_forward(store, OR, concat(w, &f.out));
        let or_wnw = mlp2_forward(store, OR, concat(w, &nw.out));
        let and_wnw = mlp2_forward(store, AND, concat(w, &nw.out));

        let s = |a: &[f64], b: &[f64]| ops::sim_hat(a, b).expect("law vectors nonzero");
        let residuals = [
            1.0 - s(&nnw.out, w),
            1.0 - s(&or_ww.out, w),
            1.0 - s(&and_ww.out, w),
            1.0 - s(&or_wt.out, anchor),
            1.0 - s(&and_wt.out, w),
            1.0 - s(&or_wf.out, w),
            1.0 - s(&or_wnw.out, anchor),
            1.0 - s(&and_wnw.out, &f.out),
        ];
        let distinct = s(w, &nw.out);
        total += residuals.iter().sum::<f64>() / 8.0 + distinct;

        let Some(g) = grads.as_deref_mut() else {
            continue;
        };
        let mut scratch = vec![0.0; d];
        let mut d_nw = vec![0.0; d];

        // Equality laws: d residual / d lhs = -d sim_hat.
        let mut d_nnw = vec![0.0; d];
        scratch.fill(0.0);
        ops::sim_hat_backward(&nnw.out, w, -eq_w, &mut d_nnw, &mut scratch).unwrap();
        mlp2_backward(store, NOT, &nnw, &d_nnw, Some(g), Some(&mut d_nw));

        let back_pair = |names: ModuleNames, cache: &Mlp2Cache, rhs: &[f64], g: &mut Gradients, d_rhs: Option<&mut [f64]>| {
            let mut d_out = vec![0.0; d];
            let mut d_other = vec![0.0; d];
            ops::sim_hat_backward(&cache.out, rhs, -eq_w, &mut d_out, &mut d_other).unwrap();
            if let Some(sink) = d_rhs {
                ops::axpy(1.0, &d_other, sink);
            }
            mlp2_backward(store, names, cache, &d_out, Some(g), None);
        };
        back_pair(OR, &or_ww, w, g, None);
        back_pair(AND, &and_ww, w, g, None);
        back_pair(OR, &or_wt, anchor, g, None);
        back_pair(AND, &and_wt, w, g, None);
        back_pair(OR, &or_wf, w, g, None);
        // w ∨ ¬w = T: input side feeds nw.
        {
            let mut d_out = vec![0.0; d];
            scratch.fill(0.0);
            ops::sim_hat_backward(&or_wnw.out, anchor, -eq_w, &mut d_out, &mut scratch).unwrap();
            let mut d_in = vec![0.0; 2 * d];
            mlp2_backward(store, OR, &or_wnw, &d_out, Some(g), Some(&mut d_in));
            ops::axpy(1.0, &d_in[d..], &mut d_nw);
        }
        // w ∧ ¬w = F: rhs is F, input side feeds nw.
        {
            let mut d_out = vec![0.0; d];
            let mut d_rhs = vec![0.0; d];
            ops::sim_hat_backward(&and_wnw.out, &f.out, -eq_w, &mut d_out, &mut d_rhs).unwrap();
            ops::axpy(1.0, &d_rhs, &mut d_f);
            let mut d_in = vec![0.0; 2 * d];
            mlp2_backward(store, AND, &and_wnw, &d_out, Some(g), Some(&mut d_in));
            ops::axpy(1.0, &d_in[d..], &mut d_nw);
        }
        // Distinctness: +sim_hat(w, nw).
        {
            scratch.fill(0.0);
            ops::sim_hat_backward(w, &nw.out, per_w, &mut scratch, &mut d_nw).unwrap();
        }
        // Laws 6 also feeds F through its input.
        {
            // or_wf input second half is F.
            let mut d_out = vec![0.0; d];
            scratch.fill(0.0);
            ops::sim_hat_backward(&or_wf.out, w, -eq_w, &mut d_out, &mut scratch).unwrap();
            let mut d_in = vec![0.0; 2 * d];
            mlp2_backward(store, OR, &or_wf, &d_out, None, Some(&mut d_in));
            ops::axpy(1.0, &d_in[d..], &mut d_f);
        }
        mlp2_backward(store, NOT, &nw, &d_nw, Some(g), None);
    }
    if let Some(g) = grads.as_deref_mut() {
        mlp2_backward(store, NOT, &f, &d_f, Some(g), None);
    }
    total / ws.len() as f64
}

/// Usable counterfactual samples: ids in range, removal a proper subset.
struct CfSample {
    user: u32,
    target: u32,
    reduced: Vec<u32>,
    removed: Vec<u32>,
}

fn prepare_cf_samples(
    observed: &InteractionMatrix,
    cfs: &[CounterfactualExplanation],
) -> Vec<CfSample> {
    let m = observed.num_users();
    let n = observed.num_items();
    let mut out = Vec::new();
    for cf in cfs {
        if cf.user as usize >= m || cf.target as usize >= n {
            continue;
        }
        let hist = observed.history(cf.user);
        if hist.is_empty() || cf.removed.is_empty() {
            continue;
        }
        let removed: Vec<u32> = cf
            .removed
            .iter()
            .copied()
            .filter(|i| hist.contains(i))
            .collect();
        let reduced: Vec<u32> = hist
            .iter()
            .copied()
            .filter(|i| !removed.contains(i))
            .collect();
        // Counterfactual expressions need at least one remaining event.
        if reduced.is_empty() || removed.is_empty() {
            continue;
        }
        out.push(CfSample {
            user: cf.user,
            target: cf.target,
            reduced,
            removed,
        });
    }
    out
}

/// Antecedent pair for a counterfactual sample. The two chains share the
/// reduced events as a common prefix and differ exactly by the removed
/// events, so the contrast isolates the explanation's marginal effect.
/// Returns (full, reduced); empty vectors mean the sample is unusable under
/// this cap.
fn cf_antecedent_pair(
    reduced: &[u32],
    removed: &[u32],
    cap: usize,
    rng: Option<&mut Rng>,
) -> (Vec<u32>, Vec<u32>) {
    let removed_take = removed.len().min(cap.saturating_sub(1));
    let reduced_take = (cap - removed_take).min(reduced.len());
    if removed_take == 0 || reduced_take == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut reduced_pool: Vec<u32> = reduced.to_vec();
    let mut removed_pool: Vec<u32> = removed.to_vec();
    if let Some(rng) = rng {
        rng.shuffle(&mut reduced_pool);
        rng.shuffle(&mut removed_pool);
    }
    let reduced_used: Vec<u32> = reduced_pool.into_iter().take(reduced_take).collect();
    let mut full = reduced_used.clone();
    full.extend(removed_pool.into_iter().take(removed_take));
    (full, reduced_used)
}

pub fn train_surrogate(
    observed: &InteractionMatrix,
    cfs: &[CounterfactualExplanation],
    cfg: &SurrogateTrainConfig,
) -> Result<SurrogateModel> {
    cfg.validate()?;
    if observed.num_interactions() == 0 {
        return Err(Error::EmptyDataset("observed matrix has no interactions".into()));
    }
    let (mut store, anchor) = init_surrogate(observed, cfg);
    let n = observed.num_items();
    let alpha = cfg.bpr_scale;
    let root = Rng::new(cfg.seed);

    // Ranking pairs need at least one antecedent besides the positive.
    let pairs: Vec<(u32, u32)> = observed
        .pairs()
        .filter(|&(u, _)| observed.history(u).len() >= 2)
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(
            "no user has the >= 2 interactions surrogate training needs".into(),
        ));
    }
    let cf_samples = prepare_cf_samples(observed, cfs);
    let use_cf = cfg.lambda_cf > 0.0 && !cf_samples.is_empty();
    let use_reg = cfg.lambda_reg > 0.0;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cf_order: Vec<usize> = (0..cf_samples.len()).collect();
    let mut grads = store.zero_gradients();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let ep = root.derive(streams::EPOCH).derive(epoch as u64);
        let mut rng_order = ep.derive(1);
        let mut rng_neg = ep.derive(2);
        let mut rng_cf = ep.derive(3);
        let mut rng_reg = ep.derive(4);
        rng_order.shuffle(&mut order);
        if use_cf {
            rng_cf.shuffle(&mut cf_order);
        }

        let n_batches = order.len().div_ceil(cfg.batch_size);
        let mut fa_sum = 0.0;
        let mut cf_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut cf_count = 0usize;
        let mut cf_cursor = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.zero();
            let mut reg_pool: Vec<Vec<f64>> = Vec::new();
            let fa_scale = 1.0 / chunk.len() as f64;
            for &pi in chunk {
                let (u, x) = pairs[pi];
                let hist = observed.history(u);
                let antecedents =
                    training_antecedents(hist, x, cfg.max_history, &mut rng_order);
                debug_assert!(!antecedents.is_empty());
                let mut z = rng_neg.below(n) as u32;
                while observed.contains(u, z) {
                    z = rng_neg.below(n) as u32;
                }
                let out = fa_pair(
                    &store,
                    &anchor,
                    alpha,
                    u,
                    &antecedents,
                    x,
                    z,
                    fa_scale,
                    Some(&mut grads),
                    if use_reg { Some(&mut reg_pool) } else { None },
                );
                fa_sum += out.loss;
            }

            if use_cf {
                // Spread the archive round-robin over the epoch's batches.
                let share = cf_samples.len().div_ceil(n_batches);
                let hi = ((batch_idx + 1) * share).min(cf_order.len());
                let lo = cf_cursor.min(hi);
                let slice = &cf_order[lo..hi];
                cf_cursor = hi;
                if !slice.is_empty() {
                    // Both data losses are sums over their datasets; sharing
                    // the ranking batch's normalizer keeps the archive's
                    // total weight at lambda_cf * |cfs| / |pairs|.
                    let cf_scale = cfg.lambda_cf / chunk.len() as f64;
                    for &ci in slice {
                        let sample = &cf_samples[ci];
                        let (full_ants, red_ants) = cf_antecedent_pair(
                            &sample.reduced,
                            &sample.removed,
                            cfg.max_history,
                            Some(&mut rng_cf),
                        );
                        if full_ants.is_empty() {
                            continue;
                        }
                        let out = cf_sample(
                            &store,
                            cfg.cf_loss_mode,
                            &anchor,
                            alpha,
                            sample.user,
                            &full_ants,
                            &red_ants,
                            sample.target,
                            cf_scale,
                            Some(&mut grads),
                        );
                        cf_sum += out.loss;
                        cf_count += 1;
                    }
                }
            }

            if use_reg && !reg_pool.is_empty() {
                // Sample the regularizer inputs from the batch's vectors.
                let take = cfg.reg_sample.min(reg_pool.len());
                let picks = rng_reg.sample_distinct(reg_pool.len(), take);
                let ws: Vec<Vec<f64>> = picks.into_iter().map(|i| reg_pool[i].clone()).collect();
                reg_sum += reg_loss(&store, &anchor, &ws, cfg.lambda_reg, Some(&mut grads));
            }

            store.adam_step(&grads, cfg.lr)?;
        }

        let l_fa = fa_sum / order.len() as f64;
        let l_cf = if cf_count > 0 { cf_sum / cf_count as f64 } else { 0.0 };
        let l_reg = reg_sum / n_batches as f64;
        let total = l_fa + cfg.lambda_cf * l_cf + cfg.lambda_reg * l_reg;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "surrogate training diverged at epoch {epoch}"
            )));
        }
        loss_curve.push(LossRow {
            epoch,
            l_fa,
            l_cf,
            l_reg,
            total,
        });
    }
    store.assert_finite()?;

    Ok(SurrogateModel {
        store,
        anchor,
        cfg: cfg.clone(),
        num_users: observed.num_users(),
        num_items: observed.num_items(),
        observed: observed.clone(),
        loss_curve,
        ev_item_cache: OnceLock::new(),
    })
}

/// The untrained model at the same initialization `train_surrogate` starts
/// from; used to measure epoch-0 baselines.
pub fn untrained_surrogate(
    observed: &InteractionMatrix,
    cfg: &SurrogateTrainConfig,
) -> Result<SurrogateModel> {
    cfg.validate()?;
    let (store, anchor) = init_surrogate(observed, cfg);
    Ok(SurrogateModel {
        store,
        anchor,
        cfg: cfg.clone(),
        num_users: observed.num_users(),
        num_items: observed.num_items(),
        observed: observed.clone(),
        loss_curve: Vec::new(),
        ev_item_cache: OnceLock::new(),
    })
}

impl SurrogateModel {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn config(&self) -> &SurrogateTrainConfig {
        &self.cfg
    }

    pub fn observed(&self) -> &InteractionMatrix {
        &self.observed
    }

    pub fn loss_curve(&self) -> &[LossRow] {
        &self.loss_curve
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn event_params(&self) -> EventParams {
        EventParams {
            w1: self.store.get_matrix(EVENT.w1).unwrap(),
            b1: self.store.get_vector(EVENT.b1).unwrap(),
            w2: self.store.get_matrix(EVENT.w2).unwrap(),
            b2: self.store.get_vector(EVENT.b2).unwrap(),
        }
    }

    fn check_dim(&self, v: &Tensor1) -> Result<()> {
        if v.len() != self.cfg.embedding_dim {
            return Err(Error::Shape(format!(
                "expected dim {}, got {}",
                self.cfg.embedding_dim,
                v.len()
            )));
        }
        Ok(())
    }

    /// Event vector for explicit embedding inputs.
    pub fn event_vector(&self, u: &Tensor1, j: &Tensor1) -> Result<Tensor1> {
        self.check_dim(u)?;
        self.check_dim(j)?;
        let cache = mlp2_forward(&self.store, EVENT, concat(u.data(), j.data()));
        Tensor1::new(cache.out)
    }

    pub fn logic_not(&self, e: &Tensor1) -> Result<Tensor1> {
        self.check_dim(e)?;
        Tensor1::new(mlp2_forward(&self.store, NOT, e.data().to_vec()).out)
    }

    pub fn logic_and(&self, a: &Tensor1, b: &Tensor1) -> Result<Tensor1> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        Tensor1::new(mlp2_forward(&self.store, AND, concat(a.data(), b.data())).out)
    }

    pub fn logic_or(&self, a: &Tensor1, b: &Tensor1) -> Result<Tensor1> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        Tensor1::new(mlp2_forward(&self.store, OR, concat(a.data(), b.data())).out)
    }

    /// Horn-clause expression vector: OR-fold of negated history events,
    /// then OR with the candidate event. Events are consumed in the order
    /// given; callers shuffle for training and sort for inference.
    pub fn build_expression(&self, events: &[Tensor1], candidate: &Tensor1) -> Result<Tensor1> {
        if events.is_empty() {
            return Err(Error::Precondition(
                "build_expression needs at least one history event".into(),
            ));
        }
        let mut acc = self.logic_not(&events[0])?;
        for e in &events[1..] {
            acc = self.logic_or(&acc, &self.logic_not(e)?)?;
        }
        self.logic_or(&acc, candidate)
    }

    fn user_history(&self, u: u32) -> Result<&[u32]> {
        if u as usize >= self.num_users {
            return Err(Error::IdRange(format!(
                "user {u} outside [0,{})",
                self.num_users
            )));
        }
        let hist = self.observed.history(u);
        if hist.is_empty() {
            return Err(Error::Precondition(format!(
                "user {u} has no observed history"
            )));
        }
        Ok(hist)
    }

    /// Truth score of candidate `x` for user `u`: sim_hat of the expression
    /// vector against the anchor, with fixed ascending event order.
    pub fn score(&self, u: u32, x: u32) -> Result<f64> {
        let hist = self.user_history(u)?;
        if x as usize >= self.num_items {
            return Err(Error::IdRange(format!(
                "item {x} outside [0,{})",
                self.num_items
            )));
        }
        let ants = inference_antecedents(hist, Some(x), self.cfg.max_history);
        if ants.is_empty() {
            return Err(Error::Precondition(format!(
                "user {u} has no antecedent events besides {x}"
            )));
        }
        let user_vec = self.store.matrix_row(P_USER_EMB, u as usize).to_vec();
        let items: Vec<(Option<u32>, &[f64])> = ants
            .iter()
            .map(|&i| (Some(i), self.store.matrix_row(P_ITEM_EMB, i as usize)))
            .collect();
        let chain = chain_forward(&self.store, &user_vec, &items);
        let branch = branch_forward(
            &self.store,
            &user_vec,
            chain.acc(),
            Some(x),
            self.store.matrix_row(P_ITEM_EMB, x as usize),
        );
        ops::sim_hat(branch.expression(), &self.anchor)
    }

    /// Item-side halves of the event encoder's first layer, cached per
    /// model: entry `i` is `ev_w1[:, d..2d] * item_emb[i]`.
    fn ev_item_cache(&self) -> &[f64] {
        self.ev_item_cache.get_or_init(|| {
            let d = self.cfg.embedding_dim;
            let dh = self.cfg.hidden_dim;
            let w1 = self.store.raw(EVENT.w1);
            let items = self.store.raw(P_ITEM_EMB);
            let mut cache = vec![0.0; self.num_items * dh];
            for i in 0..self.num_items {
                let iv = &items[i * d..(i + 1) * d];
                let out = &mut cache[i * dh..(i + 1) * dh];
                for (r, o) in out.iter_mut().enumerate() {
                    *o = ops::dot(&w1[r * 2 * d + d..r * 2 * d + 2 * d], iv);
                }
            }
            cache
        })
    }

    /// Scores of every item for user `u` (fast path; identical values to
    /// [`SurrogateModel::score`]).
    pub fn scores_all(&self, u: u32) -> Result<Vec<f64>> {
        let hist = self.user_history(u)?;
        let d = self.cfg.embedding_dim;
        let dh = self.cfg.hidden_dim;
        let ants = inference_antecedents(hist, None, self.cfg.max_history);
        let user_vec = self.store.matrix_row(P_USER_EMB, u as usize).to_vec();
        let items: Vec<(Option<u32>, &[f64])> = ants
            .iter()
            .map(|&i| (Some(i), self.store.matrix_row(P_ITEM_EMB, i as usize)))
            .collect();
        let chain = chain_forward(&self.store, &user_vec, &items);
        let acc = chain.acc();

        // Candidate-independent halves.
        let w1 = self.store.raw(EVENT.w1);
        let b1 = self.store.raw(EVENT.b1);
        let mut ev_user = vec![0.0; dh];
        for (r, o) in ev_user.iter_mut().enumerate() {
            *o = b1[r] + ops::dot(&w1[r * 2 * d..r * 2 * d + d], &user_vec);
        }
        let or_w1 = self.store.raw(OR.w1);
        let or_b1 = self.store.raw(OR.b1);
        let mut or_left = vec![0.0; dh];
        for (r, o) in or_left.iter_mut().enumerate() {
            *o = or_b1[r] + ops::dot(&or_w1[r * 2 * d..r * 2 * d + d], acc);
        }

        let ev_w2 = self.store.raw(EVENT.w2);
        let ev_b2 = self.store.raw(EVENT.b2);
        let or_w2 = self.store.raw(OR.w2);
        let or_b2 = self.store.raw(OR.b2);
        let cache = self.ev_item_cache();

        let mut a1 = vec![0.0; dh];
        let mut e = vec![0.0; d];
        let mut or_a1 = vec![0.0; dh];
        let mut c = vec![0.0; d];
        let mut out = Vec::with_capacity(self.num_items);
        for i in 0..self.num_items {
            let ci = &cache[i * dh..(i + 1) * dh];
            for r in 0..dh {
                let z = ev_user[r] + ci[r];
                a1[r] = if z > 0.0 { z } else { 0.0 };
            }
            for r in 0..d {
                e[r] = ev_b2[r] + ops::dot(&ev_w2[r * dh..(r + 1) * dh], &a1);
            }
            for r in 0..dh {
                let z = or_left[r] + ops::dot(&or_w1[r * 2 * d + d..r * 2 * d + 2 * d], &e);
                or_a1[r] = if z > 0.0 { z } else { 0.0 };
            }
            for r in 0..d {
                c[r] = or_b2[r] + ops::dot(&or_w2[r * dh..(r + 1) * dh], &or_a1);
            }
            out.push(ops::sim_hat(&c, &self.anchor)?);
        }
        Ok(out)
    }

    /// Top-k unrated items by surrogate score.
    pub fn top_k(&self, u: u32, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Precondition("top_k requires k >= 1".into()));
        }
        let scores = self.scores_all(u)?;
        Ok(rank_candidates(u, k, &scores, self.observed.history(u)))
    }

    /// Ranking loss value on explicit (user, positive, negative) triples,
    /// with fixed inference event order.
    pub fn loss_fa(&self, triples: &[(u32, u32, u32)]) -> Result<f64> {
        let mut total = 0.0;
        for &(u, x, z) in triples {
            let hist = self.user_history(u)?;
            let ants = inference_antecedents(hist, Some(x), self.cfg.max_history);
            if ants.is_empty() {
                return Err(Error::Precondition(format!(
                    "user {u}: no antecedents for positive {x}"
                )));
            }
            let out = fa_pair(
                &self.store,
                &self.anchor,
                self.cfg.bpr_scale,
                u,
                &ants,
                x,
                z,
                1.0,
                None,
                None,
            );
            total += out.loss;
        }
        Ok(total)
    }

    /// Counterfactual loss value over an archive, fixed inference order.
    pub fn loss_cf(&self, cfs: &[CounterfactualExplanation]) -> Result<f64> {
        let samples = prepare_cf_samples(&self.observed, cfs);
        let mut total = 0.0;
        for sample in &samples {
            let (full, red) =
                cf_antecedent_pair(&sample.reduced, &sample.removed, self.cfg.max_history, None);
            if full.is_empty() {
                continue;
            }
            let out = cf_sample(
                &self.store,
                self.cfg.cf_loss_mode,
                &self.anchor,
                self.cfg.bpr_scale,
                sample.user,
                &full,
                &red,
                sample.target,
                1.0,
                None,
            );
            total += out.loss;
        }
        Ok(total)
    }

    /// Mean sim_hat(c+, cCF) over an archive; the contrast audit measures
    /// this before and after training.
    pub fn mean_cf_similarity(&self, cfs: &[CounterfactualExplanation]) -> Result<f64> {
        let samples = prepare_cf_samples(&self.observed, cfs);
        let mut total = 0.0;
        let mut count = 0usize;
        for sample in &samples {
            let (full, red) =
                cf_antecedent_pair(&sample.reduced, &sample.removed, self.cfg.max_history, None);
            if full.is_empty() {
                continue;
            }
            let out = cf_sample(
                &self.store,
                self.cfg.cf_loss_mode,
                &self.anchor,
                self.cfg.bpr_scale,
                sample.user,
                &full,
                &red,
                sample.target,
                1.0,
                None,
            );
            total += out.similarity;
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyDataset("no usable counterfactual samples".into()));
        }
        Ok(total / count as f64)
    }

    /// Regularizer value on explicit vectors.
    pub fn loss_reg(&self, ws: &[Vec<f64>]) -> Result<f64> {
        if ws.is_empty() {
            return Err(Error::EmptyDataset("loss_reg needs a nonempty sample".into()));
        }
        Ok(reg_loss(&self.store, &self.anchor, ws, 1.0, None))
    }

    /// Mean residual per logical law over a vector sample.
    pub fn law_residuals(&self, ws: &[Vec<f64>]) -> [f64; N_LAWS] {
        let mut acc = [0.0; N_LAWS];
        for w in ws {
            let r = law_residuals_one(&self.store, &self.anchor, w);
            for i in 0..N_LAWS {
                acc[i] += r[i];
            }
        }
        for v in &mut acc {
            *v /= ws.len().max(1) as f64;
        }
        acc
    }

    /// Event vectors for a sample of observed (user, item) pairs; the law
    /// audits run on these.
    pub fn sample_event_vectors(&self, pairs: &[(u32, u32)]) -> Result<Vec<Vec<f64>>> {
        let d = self.cfg.embedding_dim;
        let mut out = Vec::with_capacity(pairs.len());
        for &(u, i) in pairs {
            if u as usize >= self.num_users || i as usize >= self.num_items {
                return Err(Error::IdRange(format!("pair ({u},{i}) out of range")));
            }
            let user_vec = self.store.matrix_row(P_USER_EMB, u as usize);
            let item_vec = self.store.matrix_row(P_ITEM_EMB, i as usize);
            debug_assert_eq!(user_vec.len(), d);
            let cache = mlp2_forward(&self.store, EVENT, concat(user_vec, item_vec));
            out.push(cache.out);
        }
        Ok(out)
    }

    /// Ranking-loss value and analytic gradients over an explicit store
    /// with fixed antecedent sets; verification hook for gradient checks.
    /// Batch entries are (user, antecedents, positive, negative).
    pub fn fa_loss_at(
        &self,
        store: &ParamStore,
        batch: &[(u32, Vec<u32>, u32, u32)],
    ) -> (f64, Gradients) {
        let mut grads = store.zero_gradients();
        let mut total = 0.0;
        for (u, ants, x, z) in batch {
            total += fa_pair(
                store,
                &self.anchor,
                self.cfg.bpr_scale,
                *u,
                ants,
                *x,
                *z,
                1.0,
                Some(&mut grads),
                None,
            )
            .loss;
        }
        (total, grads)
    }

    pub fn fa_loss_value_at(&self, store: &ParamStore, batch: &[(u32, Vec<u32>, u32, u32)]) -> f64 {
        batch
            .iter()
            .map(|(u, ants, x, z)| {
                fa_pair(
                    store,
                    &self.anchor,
                    self.cfg.bpr_scale,
                    *u,
                    ants,
                    *x,
                    *z,
                    1.0,
                    None,
                    None,
                )
                .loss
            })
            .sum()
    }

    /// Counterfactual-loss value and gradients over an explicit store with
    /// fixed antecedent pairs; entries are (user, full, reduced, target).
    pub fn cf_loss_at(
        &self,
        store: &ParamStore,
        batch: &[(u32, Vec<u32>, Vec<u32>, u32)],
    ) -> (f64, Gradients) {
        let mut grads = store.zero_gradients();
        let mut total = 0.0;
        for (u, full, red, t) in batch {
            total += cf_sample(
                store,
                self.cfg.cf_loss_mode,
                &self.anchor,
                self.cfg.bpr_scale,
                *u,
                full,
                red,
                *t,
                1.0,
                Some(&mut grads),
            )
            .loss;
        }
        (total, grads)
    }

    pub fn cf_loss_value_at(
        &self,
        store: &ParamStore,
        batch: &[(u32, Vec<u32>, Vec<u32>, u32)],
    ) -> f64 {
        batch
            .iter()
            .map(|(u, full, red, t)| {
                cf_sample(
                    store,
                    self.cfg.cf_loss_mode,
                    &self.anchor,
                    self.cfg.bpr_scale,
                    *u,
                    full,
                    red,
                    *t,
                    1.0,
                    None,
                )
                .loss
            })
            .sum()
    }

    /// Regularizer value and gradients over an explicit store.
    pub fn reg_loss_at(&self, store: &ParamStore, ws: &[Vec<f64>]) -> (f64, Gradients) {
        let mut grads = store.zero_gradients();
        let total = reg_loss(store, &self.anchor, ws, 1.0, Some(&mut grads));
        (total, grads)
    }

    pub fn reg_loss_value_at(&self, store: &ParamStore, ws: &[Vec<f64>]) -> f64 {
        reg_loss(store, &self.anchor, ws, 1.0, None)
    }

    /// Clone of the parameter store, for verification code that perturbs
    /// parameters.
    pub fn store_clone(&self) -> ParamStore {
        self.store.clone()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: SurrogateModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.store.assert_finite()?;
        Ok(model)
    }

    /// Writes the per-epoch loss components as `epoch,l_fa,l_cf,l_reg,total`.
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,l_fa,l_cf,l_reg,total")?;
        for row in &self.loss_curve {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.epoch, row.l_fa, row.l_cf, row.l_reg, row.total
            )?;
        }
        out.flush()?;
        Ok(())
    }
}
