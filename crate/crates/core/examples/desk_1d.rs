//! Trains the reduced model on a 1D Gaussian-process target and compares
//! generated samples with held-out data.
//!
//! `cargo run --release -p mino-core --example desk_1d -- [epochs] [lr] [batch] [rk4_steps] [model.toml]`
//!
//! `rk4_steps = 0` selects the adaptive solver.

use std::sync::Arc;
use std::time::Instant;

use mino_core::flow::{generate, train, SolverConfig, TrainConfig};
use mino_core::gaussian_field::{sample_gp, GpSpec, Smoothness};
use mino_core::geometry::{Domain, PointSet};
use mino_core::metrics::averaged_swd;
use mino_core::model::{ModelConfig, VelocityModel};

fn main() -> mino_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch_size = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let n_eval = 2000;
    let rk4_steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let solver = if rk4_steps > 0 { SolverConfig::Rk4Fixed { steps: rk4_steps } } else { SolverConfig::default() };

    let points = Arc::new(PointSet::regular_grid(64, 1, Domain::unit_box(1))?);
    let target = GpSpec::new(0.2, Smoothness::ThreeHalves);
    let base = GpSpec::new(0.05, Smoothness::Half);
    let data = sample_gp::<f32>(&target, points.clone(), 2000, 1)?;
    let test = sample_gp::<f32>(&target, points.clone(), n_eval, 2)?;

    let config = match args.get(5) {
        Some(path) => toml::from_str(&std::fs::read_to_string(path).expect("readable model config")).expect("valid model config"),
        None => ModelConfig {
            heads: 2,
            radius: 0.15,
            pos_embed_dim: 32,
            time_embed_dim: 64,
            ..ModelConfig::desk_1d(16)
        },
    };
    let mut model = VelocityModel::<f32>::new(config, 3)?;
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size,
        base_gp: base.clone(),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let history = train(&mut model, &data, &cfg)?;
    println!("trained {} params in {:.1?}", model.num_params(), start.elapsed());
    print!("{}", history.to_table());

    let start = Instant::now();
    let generated = generate(&model, &base, points.clone(), n_eval, &solver, 4)?;
    println!("generated in {:.1?}", start.elapsed());
    let noise = sample_gp::<f32>(&base, points.clone(), n_eval, 5)?;
    let (gen_swd, _) = averaged_swd(&generated, &test, 256, 10, 2, 6)?;
    let (base_swd, _) = averaged_swd(&noise, &test, 256, 10, 2, 6)?;
    let fresh = sample_gp::<f32>(&target, points.clone(), n_eval, 7)?;
    let (floor, _) = averaged_swd(&fresh, &test, 256, 10, 2, 6)?;
    for (name, b) in [("test", &test), ("generated", &generated), ("base", &noise)] {
        let (var, rough) = moments(b);
        println!("{name}: pointwise variance {var:.4} mean squared increment {rough:.4}");
    }
    println!("swd target-vs-target floor {floor:.4}");
    println!("swd generated {gen_swd:.4} base {base_swd:.4} ratio {:.3}", gen_swd / base_swd);
    Ok(())
}

fn moments(b: &mino_core::FunctionBatch<f32>) -> (f64, f64) {
    let n = b.n_points();
    let (mut var, mut rough) = (0.0, 0.0);
    for s in 0..b.len() {
        let x = b.sample(s);
        var += x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n as f64;
        rough += x.windows(2).map(|w| ((w[1] - w[0]) as f64).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    (var / b.len() as f64, rough / b.len() as f64)
}
