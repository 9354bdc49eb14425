//! The black-box victim: an NCF-style recommender over implicit feedback.
//!
//! Architecture: concat(user, item) embeddings -> dense(2d->d, ReLU) ->
//! dense(d->d/2, ReLU) -> dense(d/2->1, sigmoid). Trained with pointwise
//! binary cross-entropy over observed positives plus sampled negatives.
//! A trained model is immutable; the attacker only touches `score`,
//! `top_k`, and retraining with injected profiles.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::attack::FakeUserProfile;
use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::substrate::ops;
use crate::substrate::store::{Gradients, ParamStore};
use crate::substrate::tensor::{Tensor1, Tensor2};

pub const P_USER_EMB: &str = "user_emb";
pub const P_ITEM_EMB: &str = "item_emb";
pub const P_W1: &str = "w1";
pub const P_B1: &str = "b1";
pub const P_W2: &str = "w2";
pub const P_B2: &str = "b2";
pub const P_W3: &str = "w3";
pub const P_B3: &str = "b3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetTrainConfig {
    pub embedding_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        TargetTrainConfig {
            embedding_dim: 64,
            epochs: 12,
            lr: 1e-3,
            negatives_per_positive: 4,
            batch_size: 256,
            seed: 1,
        }
    }
}

impl TargetTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 || self.embedding_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding_dim must be an even number >= 2, got {}",
                self.embedding_dim
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Top-k recommendations for one user: scores strictly non-increasing,
/// ties broken by ascending item id, training-history items excluded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedList {
    pub user: u32,
    pub k: usize,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

impl RankedList {
    pub fn contains(&self, item: u32) -> bool {
        self.items.contains(&item)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NcfModel {
    store: ParamStore,
    cfg: TargetTrainConfig,
    num_users: usize,
    num_items: usize,
    loss_curve: Vec<f64>,
    #[serde(skip)]
    item_cache: OnceLock<Vec<f64>>,
}

/// Reusable forward/backward buffers for one training example.
struct Scratch {
    x0: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    dz1: Vec<f64>,
    dz2: Vec<f64>,
    da1: Vec<f64>,
    da2: Vec<f64>,
    dx0: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        let h = d / 2;
        Scratch {
            x0: vec![0.0; 2 * d],
            z1: vec![0.0; d],
            a1: vec![0.0; d],
            z2: vec![0.0; h],
            a2: vec![0.0; h],
            dz1: vec![0.0; d],
            dz2: vec![0.0; h],
            da1: vec![0.0; d],
            da2: vec![0.0; h],
            dx0: vec![0.0; 2 * d],
        }
    }
}

/// Embedding table whose row r is drawn from its own derived stream, so a
/// row's initialization does not depend on how many rows the table has.
/// Retraining with appended users then reproduces the original rows
/// exactly, which keeps before/after models comparable.
pub(crate) fn gaussian_rows(rows: usize, cols: usize, std: f64, rng: &Rng, label: u64) -> Tensor2 {
    let base = rng.derive(label);
    let mut t = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let mut row_rng = base.derive(r as u64);
        for v in t.row_mut(r) {
            *v = row_rng.normal() * std;
        }
    }
    t
}

fn init_store(m: usize, n: usize, d: usize, rng: &Rng) -> ParamStore {
    let h = d / 2;
    let mut store = ParamStore::new();
    store.insert_matrix(P_USER_EMB, gaussian_rows(m, d, 0.1, rng, 1));
    store.insert_matrix(P_ITEM_EMB, gaussian_rows(n, d, 0.1, rng, 2));
    let mut mlp_rng = rng.derive(3);
    store.insert_matrix(
        P_W1,
        Tensor2::gaussian(d, 2 * d, (2.0 / (2 * d) as f64).sqrt(), &mut mlp_rng),
    );
    // Small positive hidden biases keep ReLU units alive at init.
    store.insert_vector(P_B1, Tensor1::from_fn(d, |_| 0.01));
    store.insert_matrix(P_W2, Tensor2::gaussian(h, d, (2.0 / d as f64).sqrt(), &mut mlp_rng));
    store.insert_vector(P_B2, Tensor1::from_fn(h, |_| 0.01));
    store.insert_matrix(P_W3, Tensor2::gaussian(1, h, (1.0 / h as f64).sqrt(), &mut mlp_rng));
    store.insert_vector(P_B3, Tensor1::zeros(1));
    store
}

/// Pre-sigmoid logit for (user_vec, item_vec), filling the caches needed by
/// the backward pass.
fn forward_logit(store: &ParamStore, d: usize, user_vec: &[f64], item_vec: &[f64], s: &mut Scratch) -> f64 {
    s.x0[..d].copy_from_slice(user_vec);
    s.x0[d..].copy_from_slice(item_vec);
    ops::matvec_into(store.raw(P_W1), 2 * d, &s.x0, store.raw(P_B1), &mut s.z1);
    ops::relu_into(&s.z1, &mut s.a1);
    ops::matvec_into(store.raw(P_W2), d, &s.a1, store.raw(P_B2), &mut s.z2);
    ops::relu_into(&s.z2, &mut s.a2);
    store.raw(P_B3)[0] + ops::dot(store.raw(P_W3), &s.a2)
}

/// Backpropagates d(loss)/d(logit) into all parameters, reusing the caches
/// left by [`forward_logit`].
fn backward_logit(
    store: &ParamStore,
    d: usize,
    u: u32,
    i: u32,
    dz3: f64,
    s: &mut Scratch,
    grads: &mut Gradients,
) {
    let h = d / 2;
    // Output layer.
    {
        let gw3 = grads.get_mut(P_W3).unwrap();
        ops::axpy(dz3, &s.a2, gw3);
        grads.get_mut(P_B3).unwrap()[0] += dz3;
    }
    s.da2.copy_from_slice(store.raw(P_W3));
    for v in s.da2.iter_mut() {
        *v *= dz3;
    }
    s.dz2.fill(0.0);
    ops::relu_backward_into(&s.z2, &s.da2, &mut s.dz2);
    // Second hidden layer.
    s.da1.fill(0.0);
    {
        let w2 = store.raw(P_W2);
        let gw2 = grads.get_mut(P_W2).unwrap();
        for r in 0..h {
            let g = s.dz2[r];
            if g != 0.0 {
                ops::axpy(g, &s.a1, &mut gw2[r * d..(r + 1) * d]);
                ops::axpy(g, &w2[r * d..(r + 1) * d], &mut s.da1);
            }
        }
        let gb2 = grads.get_mut(P_B2).unwrap();
        for r in 0..h {
            gb2[r] += s.dz2[r];
        }
    }
    s.dz1.fill(0.0);
    ops::relu_backward_into(&s.z1, &s.da1, &mut s.dz1);
    // First hidden layer.
    s.dx0.fill(0.0);
    {
        let w1 = store.raw(P_W1);
        let gw1 = grads.get_mut(P_W1).unwrap();
        for r in 0..d {
            let g = s.dz1[r];
            if g != 0.0 {
                ops::axpy(g, &s.x0, &mut gw1[r * 2 * d..(r + 1) * 2 * d]);
                ops::axpy(g, &w1[r * 2 * d..(r + 1) * 2 * d], &mut s.dx0);
            }
        }
        let gb1 = grads.get_mut(P_B1).unwrap();
        for r in 0..d {
            gb1[r] += s.dz1[r];
        }
    }
    // Embedding rows.
    {
        let gu = grads.get_mut(P_USER_EMB).unwrap();
        ops::axpy(1.0, &s.dx0[..d], &mut gu[u as usize * d..(u as usize + 1) * d]);
    }
    {
        let gi = grads.get_mut(P_ITEM_EMB).unwrap();
        ops::axpy(1.0, &s.dx0[d..], &mut gi[i as usize * d..(i as usize + 1) * d]);
    }
}

/// Binary cross-entropy of a sigmoid logit against label y in {0,1}.
fn bce(z: f64, y: f64) -> f64 {
    let p = ops::sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// A freshly initialized model with random parameters and no training.
pub fn untrained_target(
    num_users: usize,
    num_items: usize,
    cfg: &TargetTrainConfig,
) -> Result<NcfModel> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let store = init_store(
        num_users,
        num_items,
        cfg.embedding_dim,
        &root.derive(streams::INIT),
    );
    Ok(NcfModel {
        store,
        cfg: cfg.clone(),
        num_users,
        num_items,
        loss_curve: Vec::new(),
        item_cache: OnceLock::new(),
    })
}

/// Mean BCE of labelled (user, item, label) examples over an explicit
/// parameter store, with the matching analytic gradients. Verification hook
/// for gradient checking the training path.
pub fn bce_batch(
    store: &ParamStore,
    embedding_dim: usize,
    examples: &[(u32, u32, f64)],
) -> Result<(f64, Gradients)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("bce_batch needs examples".into()));
    }
    let mut scratch = Scratch::new(embedding_dim);
    let mut grads = store.zero_gradients();
    let mut total = 0.0;
    for &(u, i, y) in examples {
        let uv = store.matrix_row(P_USER_EMB, u as usize).to_vec();
        let iv = store.matrix_row(P_ITEM_EMB, i as usize).to_vec();
        let z = forward_logit(store, embedding_dim, &uv, &iv, &mut scratch);
        total += bce(z, y);
        backward_logit(
            store,
            embedding_dim,
            u,
            i,
            ops::sigmoid(z) - y,
            &mut scratch,
            &mut grads,
        );
    }
    grads.scale(1.0 / examples.len() as f64);
    Ok((total / examples.len() as f64, grads))
}

/// Value-only companion of [`bce_batch`], usable as a finite-difference
/// closure.
pub fn bce_batch_value(
    store: &ParamStore,
    embedding_dim: usize,
    examples: &[(u32, u32, f64)],
) -> Result<f64> {
    let mut scratch = Scratch::new(embedding_dim);
    let mut total = 0.0;
    for &(u, i, y) in examples {
        let uv = store.matrix_row(P_USER_EMB, u as usize).to_vec();
        let iv = store.matrix_row(P_ITEM_EMB, i as usize).to_vec();
        let z = forward_logit(store, embedding_dim, &uv, &iv, &mut scratch);
        total += bce(z, y);
    }
    Ok(total / examples.len().max(1) as f64)
}

/// A store with freshly initialized parameters for the given shape; pairs
/// with [`bce_batch`] in verification code.
pub fn init_target_store(num_users: usize, num_items: usize, d: usize, seed: u64) -> ParamStore {
    init_store(num_users, num_items, d, &Rng::new(seed))
}

/// Trains a fresh model. The loss is mean BCE over positives plus
/// `negatives_per_positive` uniformly sampled unseen items per positive.
pub fn train_target(train: &InteractionMatrix, cfg: &TargetTrainConfig) -> Result<NcfModel> {
    cfg.validate()?;
    if train.num_interactions() == 0 {
        return Err(Error::EmptyDataset("train matrix has no interactions".into()));
    }
    let m = train.num_users();
    let n = train.num_items();
    let d = cfg.embedding_dim;
    let root = Rng::new(cfg.seed);
    let mut store = init_store(m, n, d, &root.derive(streams::INIT));

    let positives: Vec<(u32, u32)> = train.pairs().collect();
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut scratch = Scratch::new(d);
    let mut grads = store.zero_gradients();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut ep_rng = root.derive(streams::EPOCH).derive(epoch as u64);
        ep_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_count = 0usize;
            for &idx in chunk {
                let (u, i) = positives[idx];
                let user_vec = store.matrix_row(P_USER_EMB, u as usize).to_vec();
                let item_vec = store.matrix_row(P_ITEM_EMB, i as usize).to_vec();
                let z = forward_logit(&store, d, &user_vec, &item_vec, &mut scratch);
                epoch_loss += bce(z, 1.0);
                backward_logit(&store, d, u, i, ops::sigmoid(z) - 1.0, &mut scratch, &mut grads);
                batch_count += 1;

                let hist_len = train.history(u).len();
                if hist_len >= n {
                    continue; // user saw everything; no negatives exist
                }
                for _ in 0..cfg.negatives_per_positive {
                    let mut j = ep_rng.below(n) as u32;
                    while train.contains(u, j) {
                        j = ep_rng.below(n) as u32;
                    }
                    let neg_vec = store.matrix_row(P_ITEM_EMB, j as usize).to_vec();
                    let z = forward_logit(&store, d, &user_vec, &neg_vec, &mut scratch);
                    epoch_loss += bce(z, 0.0);
                    backward_logit(&store, d, u, j, ops::sigmoid(z), &mut scratch, &mut grads);
                    batch_count += 1;
                }
            }
            if batch_count > 0 {
                grads.scale(1.0 / batch_count as f64);
                store.adam_step(&grads, cfg.lr)?;
            }
            epoch_count += batch_count;
        }

        let mean_loss = epoch_loss / epoch_count.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}: loss {mean_loss}"
            )));
        }
        loss_curve.push(mean_loss);
    }
    store.assert_finite()?;

    Ok(NcfModel {
        store,
        cfg: cfg.clone(),
        num_users: m,
        num_items: n,
        loss_curve,
        item_cache: OnceLock::new(),
    })
}

/// Retrains from scratch on the union of the legitimate matrix and the
/// injected fake profiles. Fake users are appended after legitimate ids and
/// receive fresh embedding rows.
pub fn inject_and_retrain(
    train: &InteractionMatrix,
    fakes: &[FakeUserProfile],
    cfg: &TargetTrainConfig,
) -> Result<NcfModel> {
    let histories: Vec<Vec<u32>> = fakes.iter().map(|f| f.items.clone()).collect();
    let union = train.with_appended_users(&histories)?;
    train_target(&union, cfg)
}

impl NcfModel {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn config(&self) -> &TargetTrainConfig {
        &self.cfg
    }

    pub fn loss_curve(&self) -> &[f64] {
        &self.loss_curve
    }

    pub fn user_row(&self, u: u32) -> &[f64] {
        self.store.matrix_row(P_USER_EMB, u as usize)
    }

    fn check_ids(&self, u: u32, i: u32) -> Result<()> {
        if u as usize >= self.num_users {
            return Err(Error::IdRange(format!(
                "user {u} outside [0,{})",
                self.num_users
            )));
        }
        if i as usize >= self.num_items {
            return Err(Error::IdRange(format!(
                "item {i} outside [0,{})",
                self.num_items
            )));
        }
        Ok(())
    }

    /// Item-side first-layer products, computed once per trained model:
    /// entry `i` is `W1[:, d..2d] * item_emb[i]`.
    fn item_cache(&self) -> &[f64] {
        self.item_cache.get_or_init(|| {
            let d = self.cfg.embedding_dim;
            let w1 = self.store.raw(P_W1);
            let items = self.store.raw(P_ITEM_EMB);
            let n = self.num_items;
            let mut cache = vec![0.0; n * d];
            for i in 0..n {
                let item_vec = &items[i * d..(i + 1) * d];
                let out = &mut cache[i * d..(i + 1) * d];
                for (r, o) in out.iter_mut().enumerate() {
                    *o = ops::dot(&w1[r * 2 * d + d..r * 2 * d + 2 * d], item_vec);
                }
            }
            cache
        })
    }

    /// Preference score in (0,1). Deterministic.
    pub fn score(&self, u: u32, i: u32) -> Result<f64> {
        self.check_ids(u, i)?;
        Ok(self.score_all_with_user_vec(self.user_row(u))[i as usize])
    }

    /// Scores of every item for user `u`.
    pub fn score_all(&self, u: u32) -> Result<Vec<f64>> {
        self.check_ids(u, 0)?;
        Ok(self.score_all_with_user_vec(self.user_row(u)))
    }

    /// Scores of every item against an arbitrary user representation (the
    /// explainer's masked-history fine-tuning swaps in its own row here).
    pub fn score_all_with_user_vec(&self, user_vec: &[f64]) -> Vec<f64> {
        let d = self.cfg.embedding_dim;
        let h = d / 2;
        let cache = self.item_cache();
        let w1 = self.store.raw(P_W1);
        let b1 = self.store.raw(P_B1);
        // User-side half of layer 1, shared across items.
        let mut zu = vec![0.0; d];
        for (r, z) in zu.iter_mut().enumerate() {
            *z = b1[r] + ops::dot(&w1[r * 2 * d..r * 2 * d + d], user_vec);
        }
        let w2 = self.store.raw(P_W2);
        let b2 = self.store.raw(P_B2);
        let w3 = self.store.raw(P_W3);
        let b3 = self.store.raw(P_B3)[0];
        let mut a1 = vec![0.0; d];
        let mut a2 = vec![0.0; h];
        let mut out = Vec::with_capacity(self.num_items);
        for i in 0..self.num_items {
            let ci = &cache[i * d..(i + 1) * d];
            for r in 0..d {
                let z = zu[r] + ci[r];
                a1[r] = if z > 0.0 { z } else { 0.0 };
            }
            for r in 0..h {
                let z = b2[r] + ops::dot(&w2[r * d..(r + 1) * d], &a1);
                a2[r] = if z > 0.0 { z } else { 0.0 };
            }
            out.push(ops::sigmoid(b3 + ops::dot(w3, &a2)));
        }
        out
    }

    /// Mean BCE over `(item, label)` examples and its gradient w.r.t. the
    /// user representation alone (model parameters stay fixed). Used by the
    /// explainer's masked-history fine-tuning.
    pub fn user_bce_grad(
        &self,
        user_vec: &[f64],
        examples: &[(u32, f64)],
        grad_user: &mut [f64],
    ) -> f64 {
        let d = self.cfg.embedding_dim;
        let h = d / 2;
        let cache = self.item_cache();
        let w1 = self.store.raw(P_W1);
        let b1 = self.store.raw(P_B1);
        let w2 = self.store.raw(P_W2);
        let b2 = self.store.raw(P_B2);
        let w3 = self.store.raw(P_W3);
        let b3 = self.store.raw(P_B3)[0];

        let mut zu = vec![0.0; d];
        for (r, z) in zu.iter_mut().enumerate() {
            *z = b1[r] + ops::dot(&w1[r * 2 * d..r * 2 * d + d], user_vec);
        }
        grad_user.fill(0.0);
        let mut z1 = vec![0.0; d];
        let mut a1 = vec![0.0; d];
        let mut z2 = vec![0.0; h];
        let mut a2 = vec![0.0; h];
        let mut dz1 = vec![0.0; d];
        let mut dz2 = vec![0.0; h];
        let mut da1 = vec![0.0; d];
        let mut loss = 0.0;
        for &(item, y) in examples {
            let ci = &cache[item as usize * d..(item as usize + 1) * d];
            for r in 0..d {
                z1[r] = zu[r] + ci[r];
                a1[r] = if z1[r] > 0.0 { z1[r] } else { 0.0 };
            }
            for r in 0..h {
                z2[r] = b2[r] + ops::dot(&w2[r * d..(r + 1) * d], &a1);
                a2[r] = if z2[r] > 0.0 { z2[r] } else { 0.0 };
            }
            let z3 = b3 + ops::dot(w3, &a2);
            loss += bce(z3, y);
            let dz3 = ops::sigmoid(z3) - y;
            dz2.fill(0.0);
            for r in 0..h {
                if z2[r] > 0.0 {
                    dz2[r] = dz3 * w3[r];
                }
            }
            da1.fill(0.0);
            for r in 0..h {
                if dz2[r] != 0.0 {
                    ops::axpy(dz2[r], &w2[r * d..(r + 1) * d], &mut da1);
                }
            }
            dz1.fill(0.0);
            ops::relu_backward_into(&z1, &da1, &mut dz1);
            for r in 0..d {
                if dz1[r] != 0.0 {
                    ops::axpy(dz1[r], &w1[r * 2 * d..r * 2 * d + d], grad_user);
                }
            }
        }
        let scale = 1.0 / examples.len().max(1) as f64;
        for g in grad_user.iter_mut() {
            *g *= scale;
        }
        loss * scale
    }

    /// The k highest-scoring items outside the user's training history,
    /// ties broken by ascending item id. Returns fewer than k when the
    /// candidate set is smaller.
    pub fn top_k(&self, u: u32, k: usize, history: &InteractionMatrix) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Precondition("top_k requires k >= 1".into()));
        }
        self.check_ids(u, 0)?;
        let scores = self.score_all_with_user_vec(self.user_row(u));
        Ok(rank_candidates(u, k, &scores, history.history(u)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: NcfModel = serde_json::from_str(&text)?;
        model.store.assert_finite()?;
        Ok(model)
    }
}

/// Shared ranking helper: given all item scores and a history to exclude,
/// returns the top-k list with (score desc, id asc) ordering.
pub fn rank_candidates(u: u32, k: usize, scores: &[f64], history: &[u32]) -> RankedList {
    let mut cands: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| history.binary_search(i).is_err())
        .collect();
    cands.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    cands.truncate(k);
    let item_scores = cands.iter().map(|&i| scores[i as usize]).collect();
    RankedList {
        user: u,
        k,
        items: cands,
        scores: item_scores,
    }
}
