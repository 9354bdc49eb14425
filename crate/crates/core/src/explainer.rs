//! Counterfactual explanations for the victim's rankings.
//!
//! A counterfactual for a recommended pair (u, t) is a subset of the user's
//! history whose removal evicts t from the top-k list. "Removal" is realized
//! by fine-tuning a copy of the user's embedding row on the reduced history
//! for a fixed number of steps and re-ranking; the model itself is never
//! modified. A greedy generator produces explanations at scale, and a
//! subset-enumeration oracle certifies minimum cardinality on short
//! histories.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::substrate::store::{Gradients, ParamStore};
use crate::substrate::tensor::Tensor1;
use crate::target::NcfModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    /// Adam steps used to re-fit the user row on a reduced history.
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    /// Negatives sampled per history item for the fine-tuning loss.
    pub negative_ratio: usize,
    pub min_negatives: usize,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            fine_tune_steps: 20,
            fine_tune_lr: 0.05,
            negative_ratio: 4,
            min_negatives: 8,
            seed: 1,
        }
    }
}

/// A certified counterfactual explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualExplanation {
    pub user: u32,
    pub target: u32,
    /// Removed history items, ascending. Never empty for a valid CF.
    pub removed: Vec<u32>,
    pub k: usize,
    pub valid: bool,
}

/// Re-ranking context for one (model, user) pair. The negative sample is
/// fixed per user so margins stay comparable across candidate removals.
pub struct MaskedScorer<'a> {
    model: &'a NcfModel,
    history: Vec<u32>,
    negatives: Vec<u32>,
    cfg: &'a ExplainerConfig,
    user: u32,
}

impl<'a> MaskedScorer<'a> {
    pub fn new(
        model: &'a NcfModel,
        u: u32,
        full_history: &InteractionMatrix,
        cfg: &'a ExplainerConfig,
    ) -> Self {
        let history = full_history.history(u).to_vec();
        let n = model.num_items();
        let want = (cfg.negative_ratio * history.len()).max(cfg.min_negatives);
        let mut rng = Rng::new(cfg.seed)
            .derive(streams::EXPLAIN)
            .derive(u as u64);
        let mut negatives = Vec::with_capacity(want);
        let mut guard = 0;
        while negatives.len() < want && guard < want * 50 {
            let j = rng.below(n) as u32;
            if history.binary_search(&j).is_err() && !negatives.contains(&j) {
                negatives.push(j);
            }
            guard += 1;
        }
        MaskedScorer {
            model,
            history,
            negatives,
            cfg,
            user: u,
        }
    }

    /// Item scores after removing `removed` from the user's history. With
    /// nothing removed the model's own representation is used unchanged.
    pub fn scores_after_removal(&self, removed: &[u32]) -> Vec<f64> {
        if removed.is_empty() {
            return self
                .model
                .score_all_with_user_vec(self.model.user_row(self.user));
        }
        let reduced: Vec<u32> = self
            .history
            .iter()
            .copied()
            .filter(|i| !removed.contains(i))
            .collect();
        let mut examples: Vec<(u32, f64)> = Vec::with_capacity(reduced.len() + self.negatives.len());
        examples.extend(reduced.iter().map(|&i| (i, 1.0)));
        examples.extend(self.negatives.iter().map(|&i| (i, 0.0)));

        // Fine-tune a private copy of the user row; Adam state is local.
        let mut store = ParamStore::new();
        store.insert_vector(
            "row",
            Tensor1::new(self.model.user_row(self.user).to_vec()).expect("finite row"),
        );
        let mut grads = Gradients::new();
        grads.insert("row", vec![0.0; self.model.user_row(self.user).len()]);
        for _ in 0..self.cfg.fine_tune_steps {
            let g = grads.get_mut("row").unwrap();
            self.model.user_bce_grad(store.raw("row"), &examples, g);
            store
                .adam_step(&grads, self.cfg.fine_tune_lr)
                .expect("row shapes fixed");
        }
        self.model.score_all_with_user_vec(store.raw("row"))
    }

    /// Candidate items for re-ranking: everything outside the reduced
    /// history (removed items become candidates again).
    fn reduced_history(&self, removed: &[u32]) -> Vec<u32> {
        self.history
            .iter()
            .copied()
            .filter(|i| !removed.contains(i))
            .collect()
    }

    /// (margin, evicted): margin is score(t) minus the (k+1)-th best
    /// candidate score; eviction is the exact rank test used everywhere.
    pub fn margin_and_eviction(&self, t: u32, k: usize, removed: &[u32]) -> (f64, bool) {
        let scores = self.scores_after_removal(removed);
        let reduced = self.reduced_history(removed);
        margin_and_eviction_from_scores(&scores, &reduced, t, k)
    }
}

fn margin_and_eviction_from_scores(
    scores: &[f64],
    reduced_history: &[u32],
    t: u32,
    k: usize,
) -> (f64, bool) {
    let st = scores[t as usize];
    // Rank of t among candidates under (score desc, id asc).
    let mut better = 0usize;
    let mut cand_scores: Vec<f64> = Vec::with_capacity(scores.len());
    for i in 0..scores.len() as u32 {
        if reduced_history.binary_search(&i).is_ok() {
            continue;
        }
        let s = scores[i as usize];
        if i != t {
            if s > st || (s == st && i < t) {
                better += 1;
            }
        }
        cand_scores.push(s);
    }
    let evicted = better >= k;
    // Margin against the (k+1)-th best score in the candidate list
    // (including t itself), as a smooth-ish progress signal for greedy.
    let margin = if cand_scores.len() <= k {
        f64::INFINITY
    } else {
        let idx = k; // 0-based (k+1)-th
        let mut sorted = cand_scores;
        sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        st - sorted[idx]
    };
    (margin, evicted)
}

/// True iff `t` leaves the top-k once `removed` is deleted from the user's
/// history. `removed` must be a subset of the history.
pub fn is_valid_cf(
    model: &NcfModel,
    u: u32,
    t: u32,
    k: usize,
    history: &InteractionMatrix,
    removed: &[u32],
    cfg: &ExplainerConfig,
) -> Result<bool> {
    check_removed_subset(history, u, removed)?;
    let scorer = MaskedScorer::new(model, u, history, cfg);
    Ok(scorer.margin_and_eviction(t, k, removed).1)
}

fn check_removed_subset(history: &InteractionMatrix, u: u32, removed: &[u32]) -> Result<()> {
    for &x in removed {
        if history.history(u).binary_search(&x).is_err() {
            return Err(Error::Precondition(format!(
                "removed item {x} not in user {u}'s history"
            )));
        }
    }
    Ok(())
}

fn ensure_recommended(
    model: &NcfModel,
    u: u32,
    t: u32,
    k: usize,
    history: &InteractionMatrix,
) -> Result<()> {
    let top = model.top_k(u, k, history)?;
    if !top.contains(t) {
        return Err(Error::Precondition(format!(
            "item {t} is not in user {u}'s top-{k}"
        )));
    }
    Ok(())
}

/// Greedy counterfactual generation: repeatedly remove the history item
/// whose removal most lowers t's margin over the rank-(k+1) item, then
/// prune to subset-minimality.
pub fn explain(
    model: &NcfModel,
    u: u32,
    t: u32,
    k: usize,
    history: &InteractionMatrix,
    cfg: &ExplainerConfig,
) -> Result<CounterfactualExplanation> {
    ensure_recommended(model, u, t, k, history)?;
    let full: Vec<u32> = history.history(u).to_vec();
    if full.is_empty() {
        return Err(Error::Precondition(format!("user {u} has empty history")));
    }
    let scorer = MaskedScorer::new(model, u, history, cfg);

    let mut removed: Vec<u32> = Vec::new();
    let mut evicted = false;
    while removed.len() < full.len() {
        let mut best: Option<(f64, u32, bool)> = None;
        for &x in full.iter().filter(|x| !removed.contains(x)) {
            let mut trial = removed.clone();
            trial.push(x);
            let (margin, ev) = scorer.margin_and_eviction(t, k, &trial);
            let better = match &best {
                None => true,
                Some((bm, bx, _)) => margin < *bm || (margin == *bm && x < *bx),
            };
            if better {
                best = Some((margin, x, ev));
            }
        }
        let (_, x, ev) = best.expect("at least one remaining candidate");
        removed.push(x);
        if ev {
            evicted = true;
            break;
        }
    }
    if !evicted {
        return Err(Error::InfeasibleExplanation(format!(
            "no subset of user {u}'s history evicts item {t} from the top-{k}"
        )));
    }

    // Prune to subset-minimality: drop any element whose absence keeps the
    // explanation valid, repeating until a full pass removes nothing.
    loop {
        let mut dropped = false;
        let snapshot = removed.clone();
        for &x in snapshot.iter() {
            if removed.len() == 1 {
                break;
            }
            let trial: Vec<u32> = removed.iter().copied().filter(|&y| y != x).collect();
            if scorer.margin_and_eviction(t, k, &trial).1 {
                removed = trial;
                dropped = true;
            }
        }
        if !dropped {
            break;
        }
    }

    removed.sort_unstable();
    Ok(CounterfactualExplanation {
        user: u,
        target: t,
        removed,
        k,
        valid: true,
    })
}

/// Minimum-cardinality counterfactual by size-ordered subset enumeration.
/// Only usable on short histories; ties resolve to the lexicographically
/// smallest subset.
pub fn brute_force_cf(
    model: &NcfModel,
    u: u32,
    t: u32,
    k: usize,
    history: &InteractionMatrix,
    cfg: &ExplainerConfig,
    max_history: usize,
) -> Result<CounterfactualExplanation> {
    let full: Vec<u32> = history.history(u).to_vec();
    if full.len() > max_history {
        return Err(Error::Size(format!(
            "history of {} items exceeds brute-force cap {max_history}",
            full.len()
        )));
    }
    ensure_recommended(model, u, t, k, history)?;
    let scorer = MaskedScorer::new(model, u, history, cfg);
    let mut memo: HashMap<Vec<u32>, bool> = HashMap::new();

    for size in 1..=full.len() {
        let mut subset_idx: Vec<usize> = (0..size).collect();
        loop {
            let removed: Vec<u32> = subset_idx.iter().map(|&i| full[i]).collect();
            let valid = *memo
                .entry(removed.clone())
                .or_insert_with(|| scorer.margin_and_eviction(t, k, &removed).1);
            if valid {
                return Ok(CounterfactualExplanation {
                    user: u,
                    target: t,
                    removed,
                    k,
                    valid: true,
                });
            }
            if !next_combination(&mut subset_idx, full.len()) {
                break;
            }
        }
    }
    Err(Error::InfeasibleExplanation(format!(
        "no subset of user {u}'s history evicts item {t} from the top-{k}"
    )))
}

/// Advances `idx` to the next k-combination of [0, n) in lexicographic
/// order. Returns false when exhausted.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - (k - i) {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Outcome counters for a harvest sweep.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HarvestStats {
    pub attempted: usize,
    pub harvested: usize,
    pub infeasible: usize,
    pub skipped_empty_topk: usize,
}

/// Harvests one explanation per sampled user, covering users until their
/// histories account for `fraction` of the observed interactions. The
/// explained target is drawn uniformly from the user's current top-k.
pub fn harvest_cfs(
    model: &NcfModel,
    observed: &InteractionMatrix,
    fraction: f64,
    k: usize,
    cfg: &ExplainerConfig,
    rng: &mut Rng,
) -> Result<(Vec<CounterfactualExplanation>, HarvestStats)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "cf fraction must be in (0,1], got {fraction}"
        )));
    }
    let total = observed.num_interactions();
    let mut users: Vec<u32> = (0..observed.num_users() as u32)
        .filter(|&u| !observed.history(u).is_empty())
        .collect();
    rng.shuffle(&mut users);

    let mut stats = HarvestStats::default();
    let mut cfs = Vec::new();
    let mut covered = 0usize;
    let want = (fraction * total as f64).ceil() as usize;
    for u in users {
        if covered >= want {
            break;
        }
        covered += observed.history(u).len();
        stats.attempted += 1;
        let top = model.top_k(u, k, observed)?;
        if top.items.is_empty() {
            stats.skipped_empty_topk += 1;
            continue;
        }
        let t = top.items[rng.below(top.items.len())];
        match explain(model, u, t, k, observed, cfg) {
            Ok(cf) => {
                stats.harvested += 1;
                cfs.push(cf);
            }
            Err(Error::InfeasibleExplanation(_)) => {
                stats.infeasible += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((cfs, stats))
}

#[derive(Serialize, Deserialize)]
struct CfRecord {
    user: u32,
    target: u32,
    removed: Vec<u32>,
    k: usize,
}

/// Newline-delimited JSON archive consumed by surrogate training.
pub fn write_cf_archive(path: impl AsRef<Path>, cfs: &[CounterfactualExplanation]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for cf in cfs {
        let rec = CfRecord {
            user: cf.user,
            target: cf.target,
            removed: cf.removed.clone(),
            k: cf.k,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cf_archive(path: impl AsRef<Path>) -> Result<Vec<CounterfactualExplanation>> {
    let file = std::fs::File::open(path)?;
    let mut cfs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CfRecord = serde_json::from_str(&line)?;
        cfs.push(CounterfactualExplanation {
            user: rec.user,
            target: rec.target,
            removed: rec.removed,
            k: rec.k,
            valid: true,
        });
    }
    Ok(cfs)
}
