use std::sync::Arc;

use mino_core::flow::{
    generate, integrate, linear_assignment, ot_couple, LossHistory, SolverConfig, TrainConfig, TrainState, Trainer,
};
use mino_core::gaussian_field::{sample_gp, GpSpec, Smoothness};
use mino_core::geometry::{Domain, LatentGridSpec, PointSet};
use mino_core::model::{read_checkpoint, write_checkpoint, ModelConfig, VelocityModel};
use mino_core::{FunctionBatch, MinoError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn line(n: usize) -> Arc<PointSet> {
    Arc::new(PointSet::regular_grid(n, 1, Domain::unit_box(1)).unwrap())
}

fn small_model() -> ModelConfig {
    ModelConfig {
        l_dim: 8,
        m1: 1,
        m2: 1,
        heads: 2,
        radius: 0.3,
        latent_grid: LatentGridSpec::Regular {
            nx: 4,
            ny: 1,
            lower: vec![0.0],
            upper: vec![1.0],
        },
        pos_embed_dim: 4,
        time_embed_dim: 4,
        gno_hidden: 8,
        mixer_hidden: 8,
        ..ModelConfig::desk_1d(4)
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-3,
        base_gp: GpSpec::new(0.1, Smoothness::Half),
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn assignment_of_identity_and_permuted_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = line(5);
    let base = FunctionBatch::<f64>::new(pts.clone(), 1, (0..30).map(|_| rng.random::<f64>()).collect()).unwrap();
    let plan = ot_couple(&base, &base).unwrap();
    assert_eq!(plan.permutation, (0..6).collect::<Vec<_>>());
    assert!(plan.total_cost.abs() < 1e-12);

    let perm = [3, 0, 5, 1, 4, 2];
    let shuffled = base.select(&perm);
    let plan = ot_couple(&base, &shuffled).unwrap();
    for (i, &j) in plan.permutation.iter().enumerate() {
        assert_eq!(perm[j], i);
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn three_by_three_assignment_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let all = permutations(3);
    for _ in 0..100 {
        let cost: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * 10.0).collect();
        let (perm, total) = linear_assignment(&cost, 3).unwrap();
        let best = all
            .iter()
            .map(|p| (0..3).map(|i| cost[i * 3 + p[i]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let direct: f64 = (0..3).map(|i| cost[i * 3 + perm[i]]).sum();
        assert!((total - best).abs() < 1e-12, "{total} vs {best}");
        assert!((direct - best).abs() < 1e-12);
    }
}

#[test]
fn assignment_never_costs_more_than_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 7, 16, 33] {
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let (perm, total) = linear_assignment(&cost, n).unwrap();
        let identity: f64 = (0..n).map(|i| cost[i * n + i]).sum();
        assert!(total <= identity + 1e-12);
        let mut seen = perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn coupling_rejects_mismatched_batches() {
    let pts = line(4);
    let a = FunctionBatch::<f64>::new(pts.clone(), 1, vec![0.0; 12]).unwrap();
    let b = FunctionBatch::<f64>::new(pts, 1, vec![0.0; 8]).unwrap();
    assert!(ot_couple(&a, &b).is_err());
    assert!(linear_assignment(&[1.0, 2.0, 3.0], 2).is_err());
}

fn decay_error(steps: usize) -> f64 {
    let field = |_t: f64, y: &[f64], dy: &mut [f64]| -> mino_core::Result<()> {
        dy[0] = -y[0];
        Ok(())
    };
    let (y, _) = integrate(&field, &[1.0], 0.0, 1.0, &SolverConfig::Rk4Fixed { steps }).unwrap();
    (y[0] - (-1.0f64).exp()).abs()
}

#[test]
fn rk4_convergence_order() {
    for steps in [4, 8] {
        let order = (decay_error(steps) / decay_error(2 * steps)).log2();
        assert!((3.7..=4.3).contains(&order), "order {order} at {steps} steps");
    }
}

#[test]
fn dopri_matches_analytic_solution() {
    let field = |t: f64, y: &[f64], dy: &mut [f64]| -> mino_core::Result<()> {
        dy[0] = -y[0];
        dy[1] = (2.0 * std::f64::consts::PI * t).cos();
        Ok(())
    };
    let solver = SolverConfig::DormandPrince { rtol: 1e-5, atol: 1e-5 };
    let (y, stats) = integrate(&field, &[1.0, 0.0], 0.0, 1.0, &solver).unwrap();
    let exact = (-1.0f64).exp();
    assert!(((y[0] - exact) / exact).abs() < 1e-5);
    assert!(y[1].abs() < 1e-5);
    assert!(stats.accepted > 0);
}

#[test]
fn initial_loss_matches_path_velocity_energy() {
    // The zero-initialized output layer predicts 0, so the first loss is E|f1 - f0|^2 / N.
    let pts = line(16);
    let data = sample_gp::<f64>(&GpSpec::new(0.3, Smoothness::ThreeHalves), pts.clone(), 64, 5).unwrap();
    let base_spec = GpSpec::new(0.1, Smoothness::Half);
    let mut model = VelocityModel::<f64>::new(small_model(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        use_ot_coupling: false,
        learning_rate: 1e-12,
        ..quick_train()
    };
    let mut trainer = Trainer::new(&mut model, &data, cfg).unwrap();
    let loss = trainer.run_epoch().unwrap();

    let base = sample_gp::<f64>(&base_spec, pts, 4000, 6).unwrap();
    let per_pair: Vec<f64> = (0..4000)
        .map(|s| {
            let y = data.sample(s % 64);
            base.sample(s).iter().zip(y).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / 16.0
        })
        .collect();
    let mean = per_pair.iter().sum::<f64>() / 4000.0;
    let var = per_pair.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3999.0;
    // One 64-pair minibatch estimate against the Monte Carlo mean.
    let se = (var / 64.0).sqrt();
    assert!((loss - mean).abs() < 3.0 * se, "loss {loss} mean {mean} se {se}");
}

#[test]
fn training_is_deterministic() {
    let pts = line(12);
    let data = sample_gp::<f64>(&GpSpec::new(0.3, Smoothness::ThreeHalves), pts, 24, 7).unwrap();
    let run = || {
        let mut model = VelocityModel::<f64>::new(small_model(), 2).unwrap();
        let mut t = Trainer::new(&mut model, &data, quick_train()).unwrap();
        t.run().unwrap().clone()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.epochs.len(), 2);
    assert!(a.losses().iter().all(|l| l.is_finite()));
    assert_eq!(LossHistory::from_table(&a.to_table()).unwrap(), a);
}

#[test]
fn resume_reproduces_the_next_epoch() {
    let pts = line(12);
    let data = sample_gp::<f32>(&GpSpec::new(0.3, Smoothness::ThreeHalves), pts, 24, 8).unwrap();
    let cfg = TrainConfig { epochs: 3, ..quick_train() };

    let mut straight = VelocityModel::<f32>::new(small_model(), 4).unwrap();
    let full = {
        let mut t = Trainer::new(&mut straight, &data, cfg.clone()).unwrap();
        t.run().unwrap().clone()
    };

    let mut first = VelocityModel::<f32>::new(small_model(), 4).unwrap();
    let (ckpt, state) = {
        let mut t = Trainer::new(&mut first, &data, TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
        t.run().unwrap();
        let mut s = Vec::new();
        t.state().write(&mut s).unwrap();
        let mut c = Vec::new();
        write_checkpoint(t.model(), &mut c).unwrap();
        (c, s)
    };
    let path = std::path::Path::new("mem");
    let mut resumed = read_checkpoint::<f32, _>(&ckpt[..], path).unwrap();
    let state = TrainState::read(&state[..], path, cfg.weight_decay).unwrap();
    let mut t = Trainer::resume(&mut resumed, &data, cfg, state).unwrap();
    let history = t.run().unwrap().clone();
    assert_eq!(history, full);
    assert_eq!(resumed.params().values(), straight.params().values());
}

#[test]
fn generation_edge_cases() {
    let model = VelocityModel::<f64>::new(small_model(), 5).unwrap();
    let base = GpSpec::new(0.1, Smoothness::Half);
    let solver = SolverConfig::Rk4Fixed { steps: 4 };
    let empty = generate(&model, &base, line(16), 0, &solver, 1).unwrap();
    assert!(empty.is_empty());

    let a = generate(&model, &base, line(16), 3, &solver, 1).unwrap();
    let b = generate(&model, &base, line(16), 3, &solver, 1).unwrap();
    assert_eq!(a.values(), b.values());
    let fine = generate(&model, &base, line(32), 3, &solver, 1).unwrap();
    assert_eq!(fine.n_points(), 32);
    assert!(fine.values().iter().all(|v| v.is_finite()));
}

#[test]
fn adaptive_and_fixed_solvers_agree_on_a_trained_model() {
    let pts = line(12);
    let data = sample_gp::<f64>(&GpSpec::new(0.3, Smoothness::ThreeHalves), pts.clone(), 24, 9).unwrap();
    let mut model = VelocityModel::<f64>::new(small_model(), 6).unwrap();
    mino_core::flow::train(&mut model, &data, &quick_train()).unwrap();
    let base = GpSpec::new(0.1, Smoothness::Half);
    let dopri = generate(&model, &base, pts.clone(), 4, &SolverConfig::default(), 3).unwrap();
    let rk4 = generate(&model, &base, pts, 4, &SolverConfig::Rk4Fixed { steps: 100 }, 3).unwrap();
    let diff = dopri.values().iter().zip(rk4.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-3, "max difference {diff}");
}

#[test]
fn training_without_coupling_reduces_loss() {
    let pts = line(12);
    let data = sample_gp::<f32>(&GpSpec::new(0.3, Smoothness::ThreeHalves), pts, 64, 10).unwrap();
    let mut model = VelocityModel::<f32>::new(small_model(), 7).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        use_ot_coupling: false,
        learning_rate: 3e-3,
        ..quick_train()
    };
    let h = mino_core::flow::train(&mut model, &data, &cfg).unwrap();
    let l = h.losses();
    assert!(l.last().unwrap() < &l[0], "{l:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let pts = line(8);
    let data = sample_gp::<f64>(&GpSpec::new(0.3, Smoothness::ThreeHalves), pts, 4, 1).unwrap();
    let mut model = VelocityModel::<f64>::new(small_model(), 1).unwrap();
    let bad = TrainConfig { batch_size: 0, ..quick_train() };
    assert!(matches!(Trainer::new(&mut model, &data, bad), Err(MinoError::InvalidArgument(_))));
    assert!(SolverConfig::Rk4Fixed { steps: 0 }.validate().is_err());
}
