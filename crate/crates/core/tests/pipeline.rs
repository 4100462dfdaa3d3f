use std::sync::OnceLock;

use pdettc_core::euler::{
    generate_dataset, Dataset, DatasetSpec, Family, GridSpec, ICSpec, Normalization, Primitive,
    Snapshot, SolverConfig, Split, SplitFractions, Trajectory,
};
use pdettc_core::metrics::{aggregate_gain, evaluate, mse, EvalCase, EvalEntry};
use pdettc_core::nn::LrSchedule;
use pdettc_core::par::Exec;
use pdettc_core::rewards::{build_prm_triplets, build_triplets_for, train_prm, PrmConfig};
use pdettc_core::rng::RngStream;
use pdettc_core::surrogate::{
    finetune, fit, train, ForwardMode, ModelConfig, PairSet, Surrogate, TimeAxis, TrainConfig,
};
use pdettc_core::ttc::{
    greedy_rollout, one_step_selection, rollout_sweep, ArmReward, OracleMse, RewardKind,
    RewardModel, SweepCase, TTCConfig,
};

fn tiny_config(n: usize, dropout_p: f64) -> ModelConfig {
    ModelConfig {
        patch_size: 5,
        in_channels: 5,
        embed_dim: 16,
        depth: 1,
        n_heads: 2,
        mlp_ratio: 2,
        dropout_p,
        height: n,
        width: n,
    }
}

fn quick_train(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 8,
        epochs,
        loss_power: 2.0,
        seed,
        schedule: LrSchedule::Constant,
        grad_clip: Some(1.0),
        exec: Exec::Parallel,
    }
}

fn rp_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let spec = DatasetSpec {
            families: vec![Family::Rp],
            n_per_family: 12,
            grid: GridSpec::square(16).unwrap(),
            seed: 42,
            splits: SplitFractions::default(),
            solver: SolverConfig::default(),
        };
        generate_dataset(&spec, Exec::Parallel).unwrap()
    })
}

fn trained_model() -> &'static Surrogate {
    static MODEL: OnceLock<Surrogate> = OnceLock::new();
    MODEL.get_or_init(|| {
        train(rp_dataset(), &tiny_config(16, 0.1), &quick_train(1, 3))
            .unwrap()
            .0
    })
}

fn assert_bits_equal(a: &Snapshot, b: &Snapshot) {
    let (x, y) = (a.to_channel_major(), b.to_channel_major());
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn steady_trajectories_are_learned_to_high_accuracy() {
    let grid = GridSpec::square(8).unwrap();
    let mut rng = RngStream::new(3, 0);
    let trajs: Vec<Trajectory> = (0..16)
        .map(|k| {
            let w = Primitive::new(
                rng.uniform_in(0.5, 2.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(0.5, 2.0),
            );
            let snaps = (0..3)
                .map(|t| Snapshot::uniform(grid, 0.05 * t as f64, w))
                .collect();
            Trajectory::new(ICSpec::sample(Family::Rp, k), snaps).unwrap()
        })
        .collect();
    let norm = Normalization::from_trajectories(&trajs);
    let cfg = ModelConfig {
        patch_size: 3,
        embed_dim: 16,
        ..tiny_config(8, 0.0)
    };
    let mut model = Surrogate::new(cfg, norm, TimeAxis::default(), 1).unwrap();
    let pairs = PairSet::new(&trajs, &model);
    let tc = TrainConfig {
        lr: 1e-2,
        epochs: 2000,
        schedule: LrSchedule::Cosine {
            warmup_steps: 20,
            final_factor: 0.01,
        },
        grad_clip: None,
        ..quick_train(1, 0)
    };
    let report = fit(&mut model, &pairs, &pairs, &tc).unwrap();
    assert!(
        report.best_val_mse < 1e-6,
        "one-step MSE {}",
        report.best_val_mse
    );
}

#[test]
fn training_is_reproducible() {
    let ds = rp_dataset();
    let (a, ra) = train(ds, &tiny_config(16, 0.1), &quick_train(9, 2)).unwrap();
    let mut seq = quick_train(9, 2);
    seq.exec = Exec::Sequential;
    let (b, rb) = train(ds, &tiny_config(16, 0.1), &seq).unwrap();
    assert_eq!(ra.best_val_mse.to_bits(), rb.best_val_mse.to_bits());
    for (pa, pb) in a.params().params().iter().zip(b.params().params()) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
}

#[test]
fn training_reduces_validation_error() {
    let ds = rp_dataset();
    let (_, report) = train(ds, &tiny_config(16, 0.1), &quick_train(1, 3)).unwrap();
    assert!(report.best_val_mse < report.init_val_mse);
}

#[test]
fn deterministic_inference_is_bit_identical() {
    let m = trained_model();
    let u = rp_dataset().trajectories[0].get(3);
    let a = m
        .forward(
            u,
            0.15,
            ForwardMode::DeterministicInfer,
            &mut RngStream::new(1, 0),
        )
        .unwrap();
    let b = m
        .forward(
            u,
            0.15,
            ForwardMode::DeterministicInfer,
            &mut RngStream::new(2, 5),
        )
        .unwrap();
    assert_bits_equal(&a, &b);
}

#[test]
fn distinct_streams_give_distinct_samples() {
    let ds = rp_dataset();
    let cfg = ModelConfig {
        embed_dim: 64,
        ..tiny_config(16, 0.1)
    };
    let m = Surrogate::new(cfg, ds.normalization, TimeAxis::default(), 4).unwrap();
    let u = ds.trajectories[1].get(0);
    for pair in 0..20u64 {
        let a = m
            .forward(
                u,
                0.0,
                ForwardMode::StochasticInfer,
                &mut RngStream::new(pair, 2 * pair),
            )
            .unwrap();
        let b = m
            .forward(
                u,
                0.0,
                ForwardMode::StochasticInfer,
                &mut RngStream::new(pair, 2 * pair + 1),
            )
            .unwrap();
        assert_ne!(a.to_channel_major(), b.to_channel_major(), "pair {pair}");
    }
}

#[test]
fn zero_dropout_sampling_is_deterministic_inference() {
    let ds = rp_dataset();
    let m = Surrogate::new(
        tiny_config(16, 0.0),
        ds.normalization,
        TimeAxis::default(),
        4,
    )
    .unwrap();
    let u = ds.trajectories[2].get(4);
    let det = m
        .forward(
            u,
            0.2,
            ForwardMode::DeterministicInfer,
            &mut RngStream::new(0, 0),
        )
        .unwrap();
    for c in m.sample_candidates(u, 0.2, 5, 77, Exec::Parallel).unwrap() {
        assert_bits_equal(&c, &det);
    }
}

#[test]
fn zero_dropout_yields_no_triplets() {
    let ds = rp_dataset();
    let m = Surrogate::new(
        tiny_config(16, 0.0),
        ds.normalization,
        TimeAxis::default(),
        4,
    )
    .unwrap();
    let trajs = [(0usize, &ds.trajectories[0])];
    assert!(build_triplets_for(&m, &trajs, 5, 1, Exec::Parallel)
        .unwrap()
        .is_empty());
}

#[test]
fn triplets_are_ordered_by_error() {
    let ds = rp_dataset();
    let m = trained_model();
    let trip = build_prm_triplets(m, ds, 3, 5, Some(2), Exec::Parallel).unwrap();
    assert_eq!(trip.len(), 2 * 20);
    let norm = m.normalization();
    for t in &trip {
        assert!(t.mse[0] <= t.mse[1] && t.mse[1] <= t.mse[2]);
        let truth = ds.trajectories[t.trajectory].get(t.step + 1);
        assert!((mse(&t.best, truth, norm).unwrap() - t.mse[0]).abs() < 1e-12);
        assert!((mse(&t.worst, truth, norm).unwrap() - t.mse[2]).abs() < 1e-12);
    }
    let again = build_prm_triplets(m, ds, 3, 5, Some(2), Exec::Sequential).unwrap();
    assert_eq!(trip.len(), again.len());
    for (a, b) in trip.iter().zip(&again) {
        assert_eq!(a.candidate, b.candidate);
        assert_eq!(a.mse, b.mse);
    }
}

#[test]
fn prm_training_runs_and_scores_deterministically() {
    let ds = rp_dataset();
    let m = trained_model();
    let trip = build_prm_triplets(m, ds, 8, 5, Some(3), Exec::Parallel).unwrap();
    let mut cfg = PrmConfig::new(tiny_config(16, 0.1));
    cfg.train.epochs = 2;
    let (prm, report) = train_prm(&trip, &cfg, &ds.normalization, m.time_axis()).unwrap();
    assert!(report.n_train > 0 && report.n_val > 0);
    let acc = prm.ranking_accuracy(&trip, Exec::Parallel).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let (u, c) = (&trip[0].u_t, &trip[0].best);
    assert_eq!(
        prm.score(u, c).unwrap().to_bits(),
        prm.score(u, c).unwrap().to_bits()
    );
}

#[test]
fn rollouts_are_reproducible_across_execution_modes() {
    let m = trained_model();
    let truth = &rp_dataset().trajectories[0];
    let reward = ArmReward::new(RewardKind::ArmMass).unwrap();
    let mut cfg = TTCConfig::new(4, RewardKind::ArmMass, 11);
    let a = greedy_rollout(m, &reward, truth.get(0), &cfg).unwrap();
    cfg.exec = Exec::Sequential;
    let b = greedy_rollout(m, &reward, truth.get(0), &cfg).unwrap();
    assert!(a.same_outcome(&b));
    assert_eq!(a.chosen, b.chosen);
    assert!(a.is_complete());
    a.check_selection().unwrap();
}

#[test]
fn every_reward_satisfies_the_selection_contract() {
    let ds = rp_dataset();
    let m = trained_model();
    let truth = &ds.trajectories[1];
    for kind in [
        RewardKind::ArmMass,
        RewardKind::ArmMomentumX,
        RewardKind::ArmMomentumY,
        RewardKind::ArmEnergy,
    ] {
        let r = ArmReward::new(kind).unwrap();
        let rec = greedy_rollout(m, &r, truth.get(0), &TTCConfig::new(6, kind, 3)).unwrap();
        rec.check_selection().unwrap();
    }
    let oracle = OracleMse::new(truth, &ds.normalization);
    let rec = greedy_rollout(
        m,
        &oracle,
        truth.get(0),
        &TTCConfig::new(6, RewardKind::OracleMse, 3),
    )
    .unwrap();
    rec.check_selection().unwrap();
}

#[test]
fn shared_streams_make_small_candidate_sets_a_prefix() {
    let m = trained_model();
    let truth = &rp_dataset().trajectories[2];
    let reward = ArmReward::new(RewardKind::ArmEnergy).unwrap();
    let mut cfg = TTCConfig::new(1, RewardKind::ArmEnergy, 5);
    cfg.keep_candidates = true;
    cfg.steps = 1;
    let one = greedy_rollout(m, &reward, truth.get(0), &cfg).unwrap();
    cfg.b = 8;
    let eight = greedy_rollout(m, &reward, truth.get(0), &cfg).unwrap();
    assert_eq!(one.candidates[0][0], eight.candidates[0][0]);
    assert_eq!(one.steps[0].rewards[0], eight.steps[0].rewards[0]);
}

#[test]
fn oracle_selection_error_never_grows_with_branching() {
    let ds = rp_dataset();
    let m = trained_model();
    for truth in ds.split(Split::Test) {
        let oracle = OracleMse::new(truth, &ds.normalization);
        let mut prev: Option<Vec<f64>> = None;
        for b in [1, 4, 16] {
            let rec = one_step_selection(
                m,
                &oracle,
                truth,
                &TTCConfig::new(b, RewardKind::OracleMse, 8),
            )
            .unwrap();
            let errs: Vec<f64> = rec
                .steps
                .iter()
                .map(|s| -s.selected_reward().unwrap())
                .collect();
            if let Some(p) = &prev {
                for (k, (now, before)) in errs.iter().zip(p).enumerate() {
                    assert!(now <= before, "B {b} step {k}: {now} > {before}");
                }
            }
            prev = Some(errs);
        }
    }
}

#[test]
fn single_candidate_sample_gain_is_one() {
    let ds = rp_dataset();
    let m = trained_model();
    let tests = ds.split(Split::Test);
    let cases: Vec<SweepCase> = tests
        .iter()
        .enumerate()
        .map(|(id, t)| SweepCase { id, truth: t })
        .collect();
    let base = TTCConfig::new(1, RewardKind::ArmMass, 0);
    let recs = rollout_sweep(
        m,
        |_| Ok(Box::new(ArmReward::new(RewardKind::ArmMass)?) as Box<dyn RewardModel>),
        &cases,
        &[1, 4],
        &[0, 1],
        &base,
    )
    .unwrap();
    assert_eq!(recs.len(), cases.len() * 2 * 2);
    let eval_cases: Vec<EvalCase> = tests
        .iter()
        .map(|t| EvalCase {
            dataset: "rp".into(),
            family: Family::Rp,
            ic_seed: t.ic().seed,
            truth: t,
        })
        .collect();
    let entries: Vec<EvalEntry> = recs
        .iter()
        .map(|r| EvalEntry {
            case: r.case_id.unwrap(),
            model: "tiny",
            record: r,
        })
        .collect();
    let report = evaluate(&eval_cases, &entries, &ds.normalization, 1.4).unwrap();
    let ones: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.b == 1)
        .map(|r| r.sg.unwrap())
        .collect();
    assert_eq!(ones.len(), cases.len() * 2 * 20);
    assert!(ones.iter().all(|&s| s == 1.0));
    assert_eq!(aggregate_gain(&ones).unwrap(), 0.0);
    assert_eq!(
        report.group("tiny", "arm_mass", 1).unwrap().aggregate_gain,
        Some(0.0)
    );
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with(
        "dataset,family,ic_seed,model,reward,B,t,mse,sg,mass_arm,mom_x_arm,mom_y_arm,energy_arm\n"
    ));
    assert_eq!(text.lines().count(), report.rows.len() + 1);
}

#[test]
fn finetuning_zero_trajectories_keeps_the_model() {
    let ds = rp_dataset();
    let m = trained_model();
    let (same, _) = finetune(m, ds, 0, &quick_train(3, 1)).unwrap();
    for (a, b) in same.params().params().iter().zip(m.params().params()) {
        assert_eq!(a.value, b.value);
    }
    let (a, _) = finetune(m, ds, 3, &quick_train(3, 1)).unwrap();
    let (b, _) = finetune(m, ds, 3, &quick_train(3, 1)).unwrap();
    for (pa, pb) in a.params().params().iter().zip(b.params().params()) {
        assert_eq!(pa.value, pb.value);
    }
    assert!(finetune(m, ds, 1000, &quick_train(3, 1)).is_err());
}
