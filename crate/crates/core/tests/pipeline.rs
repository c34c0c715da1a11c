use adpo_core::config::{Method, TrainConfig};
use adpo_core::datagen::{
    flip_labels, sample_dataset, swap_pairs, Dataset, LabelMode, RewardOracle,
};
use adpo_core::eval::pairwise_accuracy;
use adpo_core::experiment::{self, generate_data, DataSpec};
use adpo_core::mlp::Mlp;
use adpo_core::policy::{PairModel, ScorerModel};
use adpo_core::trainer::train_run;

fn small_spec(seed: u64) -> DataSpec {
    DataSpec {
        n_train: 300,
        n_heldout: 100,
        seed,
        ..DataSpec::default()
    }
}

fn anti(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    let all: Vec<usize> = (0..out.pairs.len()).collect();
    swap_pairs(&mut out.pairs, &all);
    out
}

#[test]
fn oracle_shaped_scorer_ranks_every_pair() {
    let oracle = RewardOracle::new(5, 4, 8).unwrap();
    let ds = sample_dataset(&oracle, 400, (4, 8), LabelMode::Deterministic, 1).unwrap();
    // 3 r* + 1 is a monotone transform of the oracle.
    let mut theta = oracle.network().clone();
    let n = theta.params().len();
    let hidden = 16;
    for p in &mut theta.params_mut()[n - hidden - 1..] {
        *p *= 3.0;
    }
    theta.params_mut()[n - 1] += 1.0;
    let reference = Mlp::zeros(theta.architecture().clone());
    assert_eq!(
        pairwise_accuracy(&ScorerModel, &theta, &reference, &ds, 0).unwrap(),
        1.0
    );
    assert_eq!(
        pairwise_accuracy(&ScorerModel, &theta, &reference, &anti(&ds), 0).unwrap(),
        0.0
    );
}

#[test]
fn accuracy_on_labels_and_anti_labels_sums_to_one() {
    let (train, heldout) = generate_data(&small_spec(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = train_run(&ScorerModel, &cfg, &train, &heldout).unwrap();
    let (theta, reference) = (run.state.theta(), &run.state.reference);
    let a = pairwise_accuracy(&ScorerModel, theta, reference, &heldout, 0).unwrap();
    let b = pairwise_accuracy(&ScorerModel, theta, reference, &anti(&heldout), 0).unwrap();
    assert!((a + b - 1.0).abs() < 0.01, "{a} + {b}");
}

#[test]
fn flipping_twice_restores_winners() {
    let (train, _) = generate_data(&small_spec(3)).unwrap();
    let once = flip_labels(&train, 0.3, 4).unwrap();
    let idx = adpo_core::datagen::flip_indices(train.len(), 0.3, 4).unwrap();
    let mut twice = once.pairs.clone();
    swap_pairs(&mut twice, &idx);
    for (a, b) in twice.iter().zip(&train.pairs) {
        assert_eq!(a.winner, b.winner);
        assert_eq!(a.loser, b.loser);
    }
    assert_eq!(once.flipped_count(), 90);
}

#[test]
fn artifacts_carry_headers_and_reload() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    experiment::write_data_dir(&data_dir, &small_spec(6)).unwrap();
    let (train, heldout) = experiment::load_data_dir(&data_dir).unwrap();
    assert_eq!((train.len(), heldout.len()), (300, 100));
    assert_eq!(heldout.flipped_count(), 0);

    let mut cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    cfg.set_method(Method::AdaptiveDpo);
    let out = tmp.path().join("run");
    let summary = experiment::run_training(&cfg, &train, &heldout, 0.2, &out).unwrap();
    for f in [
        experiment::RUN_LOG_FILE,
        experiment::METRICS_FILE,
        experiment::FINAL_METRICS_FILE,
    ] {
        let h = experiment::read_jsonl_header(&out.join(f)).unwrap();
        assert_eq!(h["seed"], 9);
        assert_eq!(h["method"], "adaptive-dpo");
        assert_eq!(h["flip_rate"], 0.2);
    }

    let eval = experiment::evaluate_run(&out, &heldout).unwrap();
    assert_eq!(eval.acc, summary.acc);
    assert_eq!(eval.auc, summary.auc);

    let (header, bins) =
        experiment::bins_from_metrics(&out.join(experiment::FINAL_METRICS_FILE), 10).unwrap();
    assert_eq!(header["config"]["seed"], 9);
    assert_eq!(bins.total(), 300);
    assert_eq!(bins.bins.iter().map(|b| b.flipped_count).sum::<usize>(), 60);
}

#[test]
fn diffusion_backend_trains_end_to_end() {
    let spec = DataSpec {
        backend: adpo_core::Backend::Diffusion,
        ..small_spec(1)
    };
    let (train, heldout) = generate_data(&spec).unwrap();
    let mut cfg = TrainConfig {
        backend: adpo_core::Backend::Diffusion,
        epochs: 1,
        ..TrainConfig::default()
    };
    cfg.learning_rate = adpo_core::config::default_learning_rate(cfg.backend);
    let a = experiment::train_in_memory(&cfg, &train, &heldout, 0.1).unwrap();
    let b = experiment::train_in_memory(&cfg, &train, &heldout, 0.1).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.theta.architecture().output, 2);
    assert!((0.0..=1.0).contains(&a.summary.acc));
    let init =
        adpo_core::diffusion::DiffusionModel::default().init_network(2, 2, &cfg.hidden, cfg.seed);
    assert_ne!(a.theta, init);
}
