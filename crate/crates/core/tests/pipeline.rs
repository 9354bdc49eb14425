//! End-to-end pipeline tests on small synthetic data, plus dataset-level
//! checks against the bundled MovieLens-shaped ratings file.

use std::path::PathBuf;

use hcars::attack::{random_attack, AttackConfig};
use hcars::config::{AttackMethod, ExperimentConfig};
use hcars::data::{load_interactions, popularity, DataFormat, InteractionMatrix};
use hcars::harness::{hit_ratio_per_target, CellStatus, ExperimentRunner, ReportLine};
use hcars::synth;
use hcars::target::{inject_and_retrain, train_target, TargetTrainConfig};
use hcars::Rng;

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// The MovieLens-100K ratings file: the real one when present, otherwise
/// the bundled deterministic stand-in with the same shape.
fn ml_data_path() -> PathBuf {
    let path = workspace_root().join("data/ml-100k/u.data");
    if !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        synth::write_movielens_shaped(&path, synth::ML_STAND_IN_SEED).unwrap();
    }
    path
}

fn block_config(out_name: &str) -> (ExperimentConfig, PathBuf) {
    let dir = workspace_root().join("target/pipeline-tests").join(out_name);
    let data = dir.join("block.csv");
    std::fs::create_dir_all(&dir).unwrap();
    if !data.exists() {
        synth::write_block_csv(&data, 20, 40, 8, 3).unwrap();
    }
    let toml = format!(
        r#"
[dataset]
path = "{}"
format = "pair-csv"

[experiment]
train_fraction = 0.8
cf_fraction = 0.6
k = 5
num_targets = 2
budgets_pct = [10.0]
seeds = [1]
methods = ["hcars", "bandwagon", "random"]
ablate_cf = true
fidelity_users = 20

[target]
embedding_dim = 16
epochs = 40
lr = 0.005
negatives_per_positive = 4
batch_size = 64

[surrogate]
embedding_dim = 16
hidden_dim = 24
epochs = 10
batch_size = 16
lr = 0.005
max_history = 4
lambda_reg = 0.1

[attack]
profile_size = 6
shift_steps = 10
embed_steps = 8
user_sample = 10
pool_size = 20
"#,
        data.display()
    );
    (
        ExperimentConfig::from_toml_str(&toml).unwrap(),
        dir.join("out"),
    )
}

#[test]
fn movielens_file_has_expected_shape() {
    let raw = load_interactions(ml_data_path(), DataFormat::MovielensTsv).unwrap();
    assert_eq!(raw.num_users, 943);
    assert_eq!(raw.num_items, 1682);
    assert_eq!(raw.records.len(), 100_000);
}

#[test]
fn movielens_top_popularity_matches_column_sum_oracle() {
    let raw = load_interactions(ml_data_path(), DataFormat::MovielensTsv).unwrap();
    let (matrix, _) = InteractionMatrix::from_binarized(&raw);
    let pop = popularity(&matrix);
    // Brute-force column sums.
    let mut sums = vec![0u64; matrix.num_items()];
    for (_, i) in matrix.pairs() {
        sums[i as usize] += 1;
    }
    let best = *sums.iter().max().unwrap();
    assert_eq!(pop.counts[pop.ranking[0] as usize], best);
    assert_eq!(sums, pop.counts);
}

#[test]
fn full_experiment_produces_complete_cells_and_resumes() {
    let (cfg, out_dir) = block_config("full-run");
    let _ = std::fs::remove_dir_all(&out_dir);
    let runner = ExperimentRunner::new(cfg.clone(), &out_dir).unwrap();
    let report = runner.run_all(1).unwrap();

    // One fidelity line + one attack line per (method, budget).
    let fidelity: Vec<_> = report
        .lines
        .iter()
        .filter(|l| matches!(l, ReportLine::Fidelity(_)))
        .collect();
    assert_eq!(fidelity.len(), 1);
    let attacks: Vec<_> = report
        .lines
        .iter()
        .filter_map(|l| match l {
            ReportLine::Attack(c) => Some(c),
            _ => None,
        })
        .collect();
    assert_eq!(attacks.len(), 3);
    for cell in &attacks {
        assert_eq!(cell.status, CellStatus::Ok);
        assert!(cell.hr_post >= 0.0 && cell.hr_post <= 1.0);
    }
    // Pre-attack HR identical across methods within the seed.
    let pre: Vec<f64> = attacks.iter().map(|c| c.hr_pre).collect();
    assert!(pre.windows(2).all(|w| w[0] == w[1]));

    // Resume: a second run reuses every artifact and reproduces the report
    // byte for byte.
    let jsonl = std::fs::read(out_dir.join("report.jsonl")).unwrap();
    let csv = std::fs::read(out_dir.join("report.csv")).unwrap();
    let runner2 = ExperimentRunner::new(cfg, &out_dir).unwrap();
    runner2.run_all(1).unwrap();
    assert_eq!(jsonl, std::fs::read(out_dir.join("report.jsonl")).unwrap());
    assert_eq!(csv, std::fs::read(out_dir.join("report.csv")).unwrap());
}

#[test]
fn incompatible_config_is_rejected_for_existing_dir() {
    let (cfg, out_dir) = block_config("fingerprint-guard");
    let _ = std::fs::remove_dir_all(&out_dir);
    ExperimentRunner::new(cfg.clone(), &out_dir).unwrap();
    let mut other = cfg;
    other.experiment.train_fraction = 0.3;
    assert!(ExperimentRunner::new(other, &out_dir).is_err());
}

#[test]
fn injected_profiles_promote_the_target_item() {
    // Fakes that all contain an unseen target raise its hit ratio after
    // retraining.
    let mut rng = Rng::new(17);
    let matrix = synth::block_dataset(20, 40, 8, &mut rng);
    let cfg = TargetTrainConfig {
        embedding_dim: 16,
        epochs: 40,
        lr: 5e-3,
        negatives_per_positive: 4,
        batch_size: 64,
        seed: 23,
    };
    let clean = train_target(&matrix, &cfg).unwrap();
    let users: Vec<u32> = (0..20).collect();
    // A target nobody interacted with (block datasets leave none, so use
    // the least popular item of block 0).
    let pop = popularity(&matrix);
    let target = *pop.ranking.last().unwrap();
    let pre = hit_ratio_per_target(&clean, &users, &[target], 10, &matrix).unwrap()[0];

    let attack_cfg = AttackConfig {
        targets: vec![target],
        budget: 5,
        profile_size: 10,
        seed: 5,
        ..AttackConfig::default()
    };
    let fakes = random_attack(&matrix, &attack_cfg).unwrap();
    let poisoned = inject_and_retrain(&matrix, &fakes, &cfg).unwrap();
    let histories: Vec<Vec<u32>> = fakes.iter().map(|f| f.items.clone()).collect();
    let union = matrix.with_appended_users(&histories).unwrap();
    let post = hit_ratio_per_target(&poisoned, &users, &[target], 10, &union).unwrap()[0];
    assert!(
        post > pre,
        "target {target}: HR did not increase ({pre} -> {post})"
    );
}

#[test]
fn copied_histories_shift_popularity_counts_exactly() {
    let mut rng = Rng::new(29);
    let matrix = synth::block_dataset(10, 20, 5, &mut rng);
    let template: Vec<u32> = matrix.history(0).to_vec();
    let copies = 4;
    let histories: Vec<Vec<u32>> = (0..copies).map(|_| template.clone()).collect();
    let union = matrix.with_appended_users(&histories).unwrap();
    let before = popularity(&matrix);
    let after = popularity(&union);
    for i in 0..20u32 {
        let expected = before.counts[i as usize]
            + if template.contains(&i) { copies as u64 } else { 0 };
        assert_eq!(after.counts[i as usize], expected, "item {i}");
    }
}

#[test]
fn cli_method_strings_cover_spec_surface() {
    for (s, m) in [
        ("hcars", AttackMethod::Hcars),
        ("bandwagon", AttackMethod::Bandwagon),
        ("random", AttackMethod::Random),
    ] {
        assert_eq!(s.parse::<AttackMethod>().unwrap(), m);
        assert_eq!(m.to_string(), s);
    }
}
