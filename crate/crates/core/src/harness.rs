//! End-to-end experiment orchestration: per-seed pipelines, ranking
//! metrics, the attack-cell sweep, and report emission.
//!
//! Every stage writes its artifact under the output directory and reloads it
//! on rerun, so interrupted sweeps resume per completed cell. Checkpoints
//! round-trip bit-exactly, which makes resumed runs indistinguishable from
//! fresh ones.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{
    bandwagon, random_attack, run_hcars, shift_condition_check, write_fake_archive,
    FakeUserProfile, ShiftConditionReport,
};
use crate::config::{AttackMethod, ExperimentConfig};
use crate::data::{load_interactions, popularity, split, InteractionMatrix, Split};
use crate::error::{Error, Result};
use crate::explainer::{harvest_cfs, read_cf_archive, write_cf_archive, CounterfactualExplanation};
use crate::rng::{streams, Rng};
use crate::surrogate::{train_surrogate, SurrogateModel};
use crate::target::{inject_and_retrain, train_target, NcfModel};

/// Fraction of users whose top-k contains at least one target item.
pub fn hit_ratio(
    model: &NcfModel,
    users: &[u32],
    targets: &[u32],
    k: usize,
    history: &InteractionMatrix,
) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Precondition("hit_ratio needs users".into()));
    }
    let mut hits = 0usize;
    for &u in users {
        let top = model.top_k(u, k, history)?;
        if targets.iter().any(|&t| top.contains(t)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / users.len() as f64)
}

/// Hit ratio of each target item separately.
pub fn hit_ratio_per_target(
    model: &NcfModel,
    users: &[u32],
    targets: &[u32],
    k: usize,
    history: &InteractionMatrix,
) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; targets.len()];
    for &u in users {
        let top = model.top_k(u, k, history)?;
        for (slot, &t) in targets.iter().enumerate() {
            if top.contains(t) {
                hits[slot] += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / users.len().max(1) as f64)
        .collect())
}

/// Mean overlap between surrogate and victim top-k lists: the extraction
/// fidelity measure.
pub fn precision_at_k(
    surrogate: &SurrogateModel,
    target_model: &NcfModel,
    users: &[u32],
    k: usize,
    history: &InteractionMatrix,
) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Precondition("precision_at_k needs users".into()));
    }
    let mut total = 0.0;
    for &u in users {
        let surr_top = surrogate.top_k(u, k)?;
        let tgt_top = target_model.top_k(u, k, history)?;
        let overlap = surr_top
            .items
            .iter()
            .filter(|i| tgt_top.items.contains(i))
            .count();
        total += overlap as f64 / k as f64;
    }
    Ok(total / users.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { reason: String },
}

/// Per-seed extraction summary (one per seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCell {
    pub seed: u64,
    pub targets: Vec<u32>,
    pub hr_pre: f64,
    pub hr_pre_per_target: Vec<f64>,
    /// Fidelity of the explanation-trained surrogate.
    pub p_at_k: Option<f64>,
    /// Fidelity of the ablation surrogate trained without explanations.
    pub p_at_k_nocf: Option<f64>,
    pub cf_harvested: usize,
    pub cf_infeasible: usize,
    #[serde(flatten)]
    pub status: CellStatus,
}

/// One (method, budget, seed) attack outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub method: AttackMethod,
    pub budget_pct: f64,
    pub budget_users: usize,
    pub seed: u64,
    pub hr_pre: f64,
    pub hr_post: f64,
    pub hr_post_per_target: Vec<f64>,
    /// Post-attack hit ratio over users whose clean top-k had no target.
    pub hr_post_excluding_prehits: Option<f64>,
    pub p_at_k: Option<f64>,
    pub shift_deltas: Option<Vec<ShiftConditionReport>>,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportLine {
    Fidelity(FidelityCell),
    Attack(AttackCell),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub label: String,
    pub seconds: f64,
}

/// Everything a sweep produced. The JSONL/CSV report files are
/// deterministic; wall-clock timings go to a separate sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub lines: Vec<ReportLine>,
    pub timings: Vec<TimingRecord>,
}

impl Report {
    pub fn fidelity(&self, seed: u64) -> Option<&FidelityCell> {
        self.lines.iter().find_map(|l| match l {
            ReportLine::Fidelity(c) if c.seed == seed => Some(c),
            _ => None,
        })
    }

    pub fn attack_cell(
        &self,
        method: AttackMethod,
        budget_pct: f64,
        seed: u64,
    ) -> Option<&AttackCell> {
        self.lines.iter().find_map(|l| match l {
            ReportLine::Attack(c)
                if c.method == method && c.budget_pct == budget_pct && c.seed == seed =>
            {
                Some(c)
            }
            _ => None,
        })
    }
}

fn subseed(seed: u64, label: u64) -> u64 {
    Rng::new(seed).derive(label).next_u64()
}

fn pct_to_users(pct: f64, num_users: usize) -> usize {
    ((pct / 100.0) * num_users as f64).ceil() as usize
}

/// Orchestrates one output directory. Artifacts are cached per seed; a
/// directory must always be driven by configs sharing the same
/// [`ExperimentConfig::artifact_fingerprint`].
pub struct ExperimentRunner {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
    timings: std::sync::Mutex<Vec<TimingRecord>>,
}

impl ExperimentRunner {
    pub fn new(cfg: ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<Self> {
        cfg.validate()?;
        let out_dir = out_dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&out_dir)?;
        let fp_path = out_dir.join("config.fingerprint.json");
        let fp = cfg.artifact_fingerprint();
        if fp_path.exists() {
            let existing = std::fs::read_to_string(&fp_path)?;
            if existing != fp {
                return Err(Error::Config(format!(
                    "output directory {} was produced by an incompatible config; use a fresh one",
                    out_dir.display()
                )));
            }
        } else {
            std::fs::write(&fp_path, &fp)?;
        }
        Ok(ExperimentRunner {
            cfg,
            out_dir,
            timings: std::sync::Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn time<T>(&self, label: String, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.lock().unwrap().push(TimingRecord {
            label,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }

    /// Loads, binarizes, and persists the full interaction matrix.
    pub fn ensure_dataset(&self) -> Result<InteractionMatrix> {
        let dir = self.out_dir.join("data");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("full.tsv");
        if path.exists() {
            let (matrix, _) = InteractionMatrix::load(&path)?;
            return Ok(matrix);
        }
        self.time("prepare-data".into(), || {
            let raw = load_interactions(&self.cfg.dataset.path, self.cfg.dataset.data_format()?)?;
            let (matrix, kept_users) = InteractionMatrix::from_binarized(&raw);
            if matrix.num_interactions() == 0 {
                return Err(Error::EmptyDataset(
                    "no positive interactions after binarization".into(),
                ));
            }
            matrix.save(&path, &kept_users, &raw.item_ids)?;
            let pop = popularity(&matrix);
            std::fs::write(dir.join("popularity.json"), serde_json::to_string(&pop)?)?;
            Ok(matrix)
        })
    }

    /// Per-seed train/test split of the full matrix.
    pub fn ensure_split(&self, seed: u64) -> Result<Split> {
        let dir = self.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let train_path = dir.join("train.tsv");
        let test_path = dir.join("test.tsv");
        if train_path.exists() && test_path.exists() {
            let (train, _) = InteractionMatrix::load(&train_path)?;
            let (test, _) = InteractionMatrix::load(&test_path)?;
            return Ok(Split {
                train,
                test,
                observed_fraction: self.cfg.experiment.train_fraction,
            });
        }
        let full = self.ensure_dataset()?;
        let mut rng = Rng::new(seed).derive(streams::SPLIT);
        let s = split(&full, self.cfg.experiment.train_fraction, &mut rng)?;
        let no_ids: Vec<u64> = Vec::new();
        s.train.save(&train_path, &no_ids, &no_ids)?;
        s.test.save(&test_path, &no_ids, &no_ids)?;
        Ok(s)
    }

    /// Target items promoted this seed: uniform distinct items.
    pub fn ensure_targets(&self, seed: u64) -> Result<Vec<u32>> {
        let path = self.seed_dir(seed).join("targets.json");
        if path.exists() {
            return Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?);
        }
        std::fs::create_dir_all(self.seed_dir(seed))?;
        let full = self.ensure_dataset()?;
        let mut rng = Rng::new(seed).derive(streams::TARGET_ITEMS);
        let mut targets: Vec<u32> = rng
            .sample_distinct(full.num_items(), self.cfg.experiment.num_targets)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        targets.sort_unstable();
        std::fs::write(&path, serde_json::to_string(&targets)?)?;
        Ok(targets)
    }

    /// The clean victim for one seed.
    pub fn ensure_target_model(&self, seed: u64) -> Result<NcfModel> {
        let path = self.seed_dir(seed).join("target.json");
        if path.exists() {
            return NcfModel::load(&path);
        }
        let s = self.ensure_split(seed)?;
        let mut cfg = self.cfg.target.clone();
        cfg.seed = subseed(seed, streams::TARGET);
        let model = self.time(format!("seed-{seed}/train-target"), || {
            train_target(&s.train, &cfg)
        })?;
        model.save(&path)?;
        Ok(model)
    }

    /// Harvested counterfactual archive for one seed.
    pub fn ensure_cfs(&self, seed: u64) -> Result<Vec<CounterfactualExplanation>> {
        let path = self.seed_dir(seed).join("cfs.jsonl");
        let stats_path = self.seed_dir(seed).join("cf_stats.json");
        if path.exists() {
            return read_cf_archive(&path);
        }
        let s = self.ensure_split(seed)?;
        let model = self.ensure_target_model(seed)?;
        let mut explain_cfg = self.cfg.explainer.clone();
        explain_cfg.seed = subseed(seed, streams::EXPLAIN);
        let mut rng = Rng::new(seed).derive(streams::HARVEST);
        let (cfs, stats) = self.time(format!("seed-{seed}/harvest-cfs"), || {
            harvest_cfs(
                &model,
                &s.train,
                self.cfg.experiment.cf_fraction,
                self.cfg.experiment.k,
                &explain_cfg,
                &mut rng,
            )
        })?;
        write_cf_archive(&path, &cfs)?;
        std::fs::write(&stats_path, serde_json::to_string(&stats)?)?;
        Ok(cfs)
    }

    /// The extraction surrogate; `with_cf=false` trains the ablation twin
    /// on an empty archive at the same seed.
    pub fn ensure_surrogate(&self, seed: u64, with_cf: bool) -> Result<SurrogateModel> {
        let name = if with_cf {
            "surrogate.json"
        } else {
            "surrogate_nocf.json"
        };
        let path = self.seed_dir(seed).join(name);
        if path.exists() {
            return SurrogateModel::load(&path);
        }
        let s = self.ensure_split(seed)?;
        let cfs = if with_cf {
            self.ensure_cfs(seed)?
        } else {
            Vec::new()
        };
        let mut cfg = self.cfg.surrogate.clone();
        cfg.seed = subseed(seed, streams::SURROGATE);
        let label = format!(
            "seed-{seed}/train-surrogate{}",
            if with_cf { "" } else { "-nocf" }
        );
        let model = self.time(label, || train_surrogate(&s.train, &cfs, &cfg))?;
        model.save(&path)?;
        let csv = if with_cf {
            "surrogate_loss.csv"
        } else {
            "surrogate_nocf_loss.csv"
        };
        model.write_loss_csv(self.seed_dir(seed).join(csv))?;
        Ok(model)
    }

    /// Users scored during fidelity evaluation: a deterministic sample.
    pub fn fidelity_users(&self, seed: u64, train: &InteractionMatrix) -> Vec<u32> {
        let m = train.num_users();
        let take = self.cfg.experiment.fidelity_users.min(m);
        let mut rng = Rng::new(seed).derive(streams::EVAL);
        let mut users: Vec<u32> = rng
            .sample_distinct(m, take)
            .into_iter()
            .map(|u| u as u32)
            .filter(|&u| !train.history(u).is_empty())
            .collect();
        users.sort_unstable();
        users
    }

    fn legit_users(train: &InteractionMatrix) -> Vec<u32> {
        (0..train.num_users() as u32).collect()
    }

    /// Crafted fake profiles for one (method, budget) cell.
    pub fn ensure_fakes(
        &self,
        seed: u64,
        method: AttackMethod,
        budget_pct: f64,
    ) -> Result<Vec<FakeUserProfile>> {
        let path = self
            .seed_dir(seed)
            .join(format!("fakes-{method}-{budget_pct}.jsonl"));
        if path.exists() {
            return crate::attack::read_fake_archive(&path);
        }
        let s = self.ensure_split(seed)?;
        let targets = self.ensure_targets(seed)?;
        let budget_users = pct_to_users(budget_pct, s.train.num_users());
        let mut attack_cfg = self.cfg.attack.clone();
        attack_cfg.targets = targets;
        attack_cfg.budget = budget_users;
        attack_cfg.seed = subseed(seed, streams::ATTACK)
            ^ (method as u64).wrapping_mul(0x9e37_79b9)
            ^ budget_pct.to_bits();
        let label = format!("seed-{seed}/attack-{method}-{budget_pct}");
        let fakes = self.time(label, || match method {
            AttackMethod::Hcars => {
                let surrogate = self.ensure_surrogate(seed, true)?;
                run_hcars(&surrogate, &s.train, &attack_cfg)
            }
            AttackMethod::Bandwagon => {
                let pop = popularity(&s.train);
                bandwagon(&s.train, &pop, &attack_cfg)
            }
            AttackMethod::Random => random_attack(&s.train, &attack_cfg),
        })?;
        write_fake_archive(&path, &fakes)?;
        Ok(fakes)
    }

    fn cells_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("cells.jsonl")
    }

    fn load_cells(&self, seed: u64) -> Result<Vec<ReportLine>> {
        let path = self.cells_path(seed);
        let mut lines = Vec::new();
        if path.exists() {
            for line in std::fs::read_to_string(&path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                lines.push(serde_json::from_str(line)?);
            }
        }
        Ok(lines)
    }

    fn append_cell(&self, seed: u64, line: &ReportLine) -> Result<()> {
        std::fs::create_dir_all(self.seed_dir(seed))?;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.cells_path(seed))?;
        writeln!(file, "{}", serde_json::to_string(line)?)?;
        Ok(())
    }

    /// The per-seed extraction summary: clean-model hit ratios plus
    /// surrogate fidelity (and its no-CF ablation when configured).
    pub fn ensure_fidelity_cell(&self, seed: u64) -> Result<FidelityCell> {
        for line in self.load_cells(seed)? {
            if let ReportLine::Fidelity(c) = line {
                return Ok(c);
            }
        }
        let cell = self.compute_fidelity_cell(seed)?;
        self.append_cell(seed, &ReportLine::Fidelity(cell.clone()))?;
        Ok(cell)
    }

    fn compute_fidelity_cell(&self, seed: u64) -> Result<FidelityCell> {
        let s = self.ensure_split(seed)?;
        let targets = self.ensure_targets(seed)?;
        let model = self.ensure_target_model(seed)?;
        let k = self.cfg.experiment.k;
        let legit = Self::legit_users(&s.train);
        let hr_pre = hit_ratio(&model, &legit, &targets, k, &s.train)?;
        let hr_pre_per_target = hit_ratio_per_target(&model, &legit, &targets, k, &s.train)?;

        self.ensure_cfs(seed)?;
        let stats: crate::explainer::HarvestStats = serde_json::from_str(
            &std::fs::read_to_string(self.seed_dir(seed).join("cf_stats.json"))?,
        )?;

        let eval_users = self.fidelity_users(seed, &s.train);
        let surrogate = self.ensure_surrogate(seed, true)?;
        let p_at_k = Some(precision_at_k(&surrogate, &model, &eval_users, k, &s.train)?);
        let p_at_k_nocf = if self.cfg.experiment.ablate_cf {
            let nocf = self.ensure_surrogate(seed, false)?;
            Some(precision_at_k(&nocf, &model, &eval_users, k, &s.train)?)
        } else {
            None
        };

        Ok(FidelityCell {
            seed,
            targets,
            hr_pre,
            hr_pre_per_target,
            p_at_k,
            p_at_k_nocf,
            cf_harvested: stats.harvested,
            cf_infeasible: stats.infeasible,
            status: CellStatus::Ok,
        })
    }

    /// One (method, budget) attack cell: craft, inject, retrain, evaluate.
    pub fn ensure_attack_cell(
        &self,
        seed: u64,
        method: AttackMethod,
        budget_pct: f64,
    ) -> Result<AttackCell> {
        for line in self.load_cells(seed)? {
            if let ReportLine::Attack(c) = line {
                if c.method == method && c.budget_pct == budget_pct {
                    return Ok(c);
                }
            }
        }
        let cell = match self.compute_attack_cell(seed, method, budget_pct) {
            Ok(cell) => cell,
            Err(e) => AttackCell {
                method,
                budget_pct,
                budget_users: 0,
                seed,
                hr_pre: f64::NAN,
                hr_post: f64::NAN,
                hr_post_per_target: Vec::new(),
                hr_post_excluding_prehits: None,
                p_at_k: None,
                shift_deltas: None,
                status: CellStatus::Failed {
                    reason: e.to_string(),
                },
            },
        };
        self.append_cell(seed, &ReportLine::Attack(cell.clone()))?;
        Ok(cell)
    }

    fn compute_attack_cell(
        &self,
        seed: u64,
        method: AttackMethod,
        budget_pct: f64,
    ) -> Result<AttackCell> {
        let s = self.ensure_split(seed)?;
        let targets = self.ensure_targets(seed)?;
        let fidelity = self.ensure_fidelity_cell(seed)?;
        let k = self.cfg.experiment.k;
        let fakes = self.ensure_fakes(seed, method, budget_pct)?;
        let budget_users = fakes.len();

        let mut retrain_cfg = self.cfg.target.clone();
        retrain_cfg.seed = subseed(seed, streams::TARGET);
        let label = format!("seed-{seed}/retrain-{method}-{budget_pct}");
        let poisoned = self.time(label, || inject_and_retrain(&s.train, &fakes, &retrain_cfg))?;

        let legit = Self::legit_users(&s.train);
        let histories: Vec<Vec<u32>> = fakes.iter().map(|f| f.items.clone()).collect();
        let union = s.train.with_appended_users(&histories)?;
        let hr_post = hit_ratio(&poisoned, &legit, &targets, k, &union)?;
        let hr_post_per_target = hit_ratio_per_target(&poisoned, &legit, &targets, k, &union)?;

        // Secondary figure: users the clean model had not already converted.
        let clean = self.ensure_target_model(seed)?;
        let mut unconverted = Vec::new();
        for &u in &legit {
            let top = clean.top_k(u, k, &s.train)?;
            if !targets.iter().any(|&t| top.contains(t)) {
                unconverted.push(u);
            }
        }
        let hr_post_excluding_prehits = if unconverted.is_empty() {
            None
        } else {
            Some(hit_ratio(&poisoned, &unconverted, &targets, k, &union)?)
        };

        let shift_deltas = if self.cfg.experiment.measure_shift_condition
            && method == AttackMethod::Hcars
        {
            Some(self.measure_shift_condition(seed, &s, &targets, &fakes)?)
        } else {
            None
        };

        Ok(AttackCell {
            method,
            budget_pct,
            budget_users,
            seed,
            hr_pre: fidelity.hr_pre,
            hr_post,
            hr_post_per_target,
            hr_post_excluding_prehits,
            p_at_k: fidelity.p_at_k,
            shift_deltas,
            status: CellStatus::Ok,
        })
    }

    /// Retrains the surrogate on the poisoned matrix and measures the
    /// loss-decrease condition per target over the fidelity user sample.
    fn measure_shift_condition(
        &self,
        seed: u64,
        s: &Split,
        targets: &[u32],
        fakes: &[FakeUserProfile],
    ) -> Result<Vec<ShiftConditionReport>> {
        let before = self.ensure_surrogate(seed, true)?;
        let cfs = self.ensure_cfs(seed)?;
        let histories: Vec<Vec<u32>> = fakes.iter().map(|f| f.items.clone()).collect();
        let union = s.train.with_appended_users(&histories)?;
        let mut cfg = self.cfg.surrogate.clone();
        cfg.seed = subseed(seed, streams::SURROGATE);
        let after = train_surrogate(&union, &cfs, &cfg)?;
        let users: Vec<u32> = self
            .fidelity_users(seed, &s.train)
            .into_iter()
            .filter(|&u| {
                let hist = s.train.history(u);
                targets
                    .iter()
                    .all(|&t| hist.iter().any(|&i| i != t))
            })
            .collect();
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            out.push(shift_condition_check(&before, &after, t, &users)?);
        }
        Ok(out)
    }

    /// Runs every configured cell. `threads` > 1 distributes seeds across
    /// worker threads; report files come out identical either way.
    pub fn run_all(&self, threads: usize) -> Result<Report> {
        let seeds = self.cfg.experiment.seeds.clone();
        if threads <= 1 || seeds.len() <= 1 {
            for &seed in &seeds {
                self.run_seed(seed)?;
            }
        } else {
            let next = std::sync::atomic::AtomicUsize::new(0);
            let first_err: std::sync::Mutex<Option<Error>> = std::sync::Mutex::new(None);
            std::thread::scope(|scope| {
                for _ in 0..threads.min(seeds.len()) {
                    scope.spawn(|| loop {
                        let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if idx >= seeds.len() {
                            break;
                        }
                        if let Err(e) = self.run_seed(seeds[idx]) {
                            first_err.lock().unwrap().get_or_insert(e);
                            break;
                        }
                    });
                }
            });
            if let Some(e) = first_err.into_inner().unwrap().take() {
                return Err(e);
            }
        }
        self.assemble_report()
    }

    fn run_seed(&self, seed: u64) -> Result<()> {
        self.ensure_fidelity_cell(seed)?;
        for &budget in &self.cfg.experiment.budgets_pct {
            for &method in &self.cfg.experiment.methods {
                self.ensure_attack_cell(seed, method, budget)?;
            }
        }
        Ok(())
    }

    /// Collects every completed cell into deterministic report files:
    /// `report.jsonl` plus the CSV pivot
    /// `method,budget,seed,hr_pre,hr_post,p_at_10`.
    pub fn assemble_report(&self) -> Result<Report> {
        let mut lines = Vec::new();
        for &seed in &self.cfg.experiment.seeds {
            let mut cells = self.load_cells(seed)?;
            cells.sort_by(|a, b| report_line_key(a).cmp(&report_line_key(b)));
            lines.extend(cells);
        }

        let jsonl_path = self.out_dir.join("report.jsonl");
        let mut jsonl = String::new();
        for line in &lines {
            jsonl.push_str(&serde_json::to_string(line)?);
            jsonl.push('\n');
        }
        std::fs::write(&jsonl_path, jsonl)?;

        let mut csv = String::from("method,budget,seed,hr_pre,hr_post,p_at_10\n");
        let mut attack_rows: Vec<&AttackCell> = lines
            .iter()
            .filter_map(|l| match l {
                ReportLine::Attack(c) => Some(c),
                _ => None,
            })
            .collect();
        attack_rows.sort_by(|a, b| {
            (a.method, a.seed)
                .cmp(&(b.method, b.seed))
                .then(a.budget_pct.partial_cmp(&b.budget_pct).unwrap())
        });
        for c in attack_rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.method,
                c.budget_pct,
                c.seed,
                c.hr_pre,
                c.hr_post,
                c.p_at_k.map_or(String::new(), |p| p.to_string()),
            ));
        }
        std::fs::write(self.out_dir.join("report.csv"), csv)?;

        let timings = self.timings.lock().unwrap().clone();
        std::fs::write(
            self.out_dir.join("timings.json"),
            serde_json::to_string_pretty(&timings)?,
        )?;
        Ok(Report { lines, timings })
    }
}

fn report_line_key(line: &ReportLine) -> (u8, String, u64, u64) {
    match line {
        ReportLine::Fidelity(c) => (0, String::new(), 0, c.seed),
        ReportLine::Attack(c) => (
            1,
            c.method.to_string(),
            c.budget_pct.to_bits(),
            c.seed,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::target::TargetTrainConfig;

    fn block_model_and_matrix() -> (InteractionMatrix, NcfModel) {
        let mut rng = Rng::new(61);
        let matrix = synth::block_dataset(20, 40, 8, &mut rng);
        let cfg = TargetTrainConfig {
            embedding_dim: 16,
            epochs: 50,
            lr: 5e-3,
            negatives_per_positive: 4,
            batch_size: 64,
            seed: 19,
        };
        let model = train_target(&matrix, &cfg).unwrap();
        (matrix, model)
    }

    #[test]
    fn hit_ratio_matches_membership_scan() {
        let (matrix, model) = block_model_and_matrix();
        let users: Vec<u32> = (0..20).collect();
        let targets = vec![3u32, 25];
        let hr = hit_ratio(&model, &users, &targets, 5, &matrix).unwrap();
        let mut hits = 0;
        for &u in &users {
            let top = model.top_k(u, 5, &matrix).unwrap();
            if top.contains(3) || top.contains(25) {
                hits += 1;
            }
        }
        assert_eq!(hr, hits as f64 / 20.0);
        // Targets in everyone's top-k means HR = 1.
        let all_items: Vec<u32> = (0..40).collect();
        let hr_all = hit_ratio(&model, &users, &all_items, 5, &matrix).unwrap();
        assert_eq!(hr_all, 1.0);
    }

    #[test]
    fn precision_of_model_against_itself_is_one() {
        let (matrix, model) = block_model_and_matrix();
        // Surrogate replaced by the target itself via a trivial adapter is
        // not expressible here; instead check bounds and self-consistency on
        // a trained surrogate.
        let surr_cfg = crate::surrogate::SurrogateTrainConfig {
            embedding_dim: 8,
            hidden_dim: 12,
            epochs: 3,
            batch_size: 16,
            max_history: 4,
            seed: 5,
            ..Default::default()
        };
        let surrogate = crate::surrogate::train_surrogate(&matrix, &[], &surr_cfg).unwrap();
        let users: Vec<u32> = (0..20).collect();
        let p = precision_at_k(&surrogate, &model, &users, 5, &matrix).unwrap();
        assert!((0.0..=1.0).contains(&p));
        let p2 = precision_at_k(&surrogate, &model, &users, 5, &matrix).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn pct_rounds_up() {
        assert_eq!(pct_to_users(5.0, 943), 48);
        assert_eq!(pct_to_users(0.5, 943), 5);
        assert_eq!(pct_to_users(1.0, 100), 1);
        assert_eq!(pct_to_users(0.1, 100), 1);
    }
}
