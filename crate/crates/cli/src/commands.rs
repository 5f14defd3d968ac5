use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mino_core::data_io::{gen_gp_split, read_container, write_container};
use mino_core::flow::{generate, LossHistory, TrainState, Trainer};
use mino_core::gaussian_field::sample_gp;
use mino_core::geometry::{Domain, PointSet};
use mino_core::metrics::{averaged_swd, evaluate, median_bandwidth, mmd_unbiased, power_spectrum, radial_spectrum};
use mino_core::model::{load_checkpoint, save_checkpoint, VelocityModel};
use mino_core::FunctionBatch;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PointsKind, RunConfig};
use crate::plot::{heatmap_svg, sample_csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.mck";
pub const STATE_FILE: &str = "train_state.mts";
pub const LOSS_FILE: &str = "loss.txt";
pub const CONFIG_FILE: &str = "config.toml";

/// Creates the output directory and echoes the resolved config into it.
fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn build_points(cfg: &RunConfig) -> Result<Arc<PointSet>> {
    let p = &cfg.points;
    let points = match p.kind {
        PointsKind::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            PointSet::uniform_random(p.n, Domain::unit_box(p.dim), &mut rng)?
        }
        PointsKind::RegularGrid => {
            let dim = if p.ny == 1 { 1 } else { 2 };
            PointSet::regular_grid(p.nx, p.ny, Domain::unit_box(dim))?
        }
        PointsKind::File => {
            if p.file.as_os_str().is_empty() {
                bail!("points.kind = \"file\" needs points.file");
            }
            return Ok(read_container::<f32>(&p.file)?.points().clone());
        }
    };
    Ok(Arc::new(points))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let points = build_points(cfg)?;
    let d = &cfg.data;
    let (train, test) = gen_gp_split::<f32>(&d.gp, points.clone(), d.n_train, d.n_test, d.seed)?;
    let notes = format!(
        "Matern GP length_scale={} nu={} seed={}",
        d.gp.length_scale,
        d.gp.smoothness.nu(),
        d.seed
    );
    write_container(dir.join("train.mfs"), &train, &notes)?;
    write_container(dir.join("test.mfs"), &test, &notes)?;
    write_container(dir.join("mesh.mfs"), &FunctionBatch::<f32>::empty(points.clone(), 1), "mesh")?;
    log::info!("wrote {} train and {} test samples on {} points to {}", train.len(), test.len(), points.len(), dir.display());
    Ok(())
}

pub fn sample_gp_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let points = build_points(cfg)?;
    let s = &cfg.sample_gp;
    let batch = sample_gp::<f32>(&s.gp, points, s.n, s.seed)?;
    let notes = format!("Matern GP length_scale={} nu={} seed={}", s.gp.length_scale, s.gp.smoothness.nu(), s.seed);
    write_container(dir.join(&s.output), &batch, &notes)?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let data = read_container::<f32>(&cfg.data.train)?;
    let resume = &cfg.resume.from;
    let (mut model, state) = if resume.as_os_str().is_empty() {
        (VelocityModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?, None)
    } else {
        let model = load_checkpoint::<f32>(resume.join(CHECKPOINT_FILE))?;
        let state = TrainState::load(resume.join(STATE_FILE), cfg.train.weight_decay)?;
        if model.config() != &cfg.model {
            log::warn!("resuming with the checkpoint's model config; [model] is ignored");
        }
        (model, Some(state))
    };
    if model.config().p_dim() != data.points().dim() {
        bail!(
            "model latent grid is {}D but the training points are {}D",
            model.config().p_dim(),
            data.points().dim()
        );
    }
    let mut trainer = match state {
        Some(s) => Trainer::resume(&mut model, &data, cfg.train.clone(), s)?,
        None => Trainer::new(&mut model, &data, cfg.train.clone())?,
    };
    while !trainer.is_done() {
        trainer
            .run_epoch()
            .with_context(|| format!("training aborted in epoch {}", trainer.state().epoch))?;
        save_checkpoint(trainer.model(), dir.join(CHECKPOINT_FILE))?;
        trainer.state().save(dir.join(STATE_FILE))?;
        write_text(&dir.join(LOSS_FILE), &trainer.history().to_table())?;
    }
    Ok(())
}

pub fn generate_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let g = &cfg.generate;
    let model = load_checkpoint::<f32>(&g.checkpoint)?;
    let points = if g.positions.as_os_str().is_empty() {
        read_container::<f32>(&cfg.data.train)?.points().clone()
    } else {
        read_container::<f32>(&g.positions)?.points().clone()
    };
    let out = generate(&model, &cfg.train.base_gp, points, g.n, &cfg.solver.solver(), g.seed)?;
    let notes = format!("generated from {} with seed {}", g.checkpoint.display(), g.seed);
    write_container(dir.join(&g.output), &out, &notes)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let x = read_container::<f64>(&cfg.eval.x)?;
    let y = read_container::<f64>(&cfg.eval.y)?;
    if !x.shares_discretization(&y) {
        bail!("{} and {} are on different discretizations", cfg.eval.x.display(), cfg.eval.y.display());
    }
    let report = evaluate(&x, &y, &cfg.eval.eval_config())?;
    write_text(&dir.join(&cfg.eval.output), &report.to_text())?;
    println!("swd {:.6} mmd {:.6} (mmd^2 {:.3e}, bandwidth {:.4})", report.swd_mean, report.mmd, report.mmd_squared, report.mmd_bandwidth);
    Ok(())
}

pub fn plot(cfg: &RunConfig) -> Result<()> {
    let dir = prepare(cfg)?;
    let p = &cfg.plot;
    if !p.loss.as_os_str().is_empty() {
        let text = fs::read_to_string(&p.loss).with_context(|| format!("reading {}", p.loss.display()))?;
        let history = LossHistory::from_table(&text)?;
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in &history.epochs {
            csv += &format!("{e},{l:e}\n");
        }
        write_text(&dir.join("loss.csv"), &csv)?;
    }
    if !p.samples.as_os_str().is_empty() {
        let batch = read_container::<f64>(&p.samples)?;
        let grid = batch.points().grid_shape().filter(|&(_, ny)| ny > 1);
        let n = batch.n_points();
        for s in 0..batch.len().min(p.max_samples) {
            write_text(&dir.join(format!("sample_{s}.csv")), &sample_csv(&batch, s))?;
            if let Some((nx, ny)) = grid {
                let field: Vec<f64> = batch.sample(s)[..n].to_vec();
                write_text(&dir.join(format!("sample_{s}.svg")), &heatmap_svg(&field, nx, ny, 4))?;
            }
        }
        if let Some((nx, ny)) = batch.points().grid_shape() {
            let radial = radial_spectrum(&power_spectrum(&batch)?, nx, ny);
            let mut csv = String::from("k,power\n");
            for (k, v) in radial.iter().enumerate() {
                csv += &format!("{k},{v:e}\n");
            }
            write_text(&dir.join("spectrum.csv"), &csv)?;
        }
    }
    if !p.ratios.is_empty() {
        let x = read_container::<f64>(&cfg.eval.x)?;
        let y = read_container::<f64>(&cfg.eval.y)?;
        let curve = consistency_curve(&x, &y, &p.ratios, cfg, p.seed)?;
        let mut csv = String::from("ratio,swd,mmd\n");
        for (r, swd, mmd) in curve {
            csv += &format!("{r},{swd:e},{mmd:e}\n");
        }
        write_text(&dir.join("consistency.csv"), &csv)?;
    }
    Ok(())
}

/// SWD and MMD on random point subsets of both sets, one row per ratio.
pub fn consistency_curve(
    x: &FunctionBatch<f64>,
    y: &FunctionBatch<f64>,
    ratios: &[f64],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    if !x.shares_discretization(y) {
        bail!("consistency curve needs both sets on the same points");
    }
    let n = x.n_points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            bail!("subsample ratio {r} outside (0, 1]");
        }
        let k = ((r * n as f64).round() as usize).max(1);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        let (xs, ys) = (x.restrict_points(&idx)?, y.restrict_points(&idx)?);
        let e = &cfg.eval;
        let (swd, _) = averaged_swd(&xs, &ys, e.n_projections, e.n_run, e.p, e.seed)?;
        let bw = if e.bandwidth > 0.0 { e.bandwidth } else { median_bandwidth(&xs, &ys)?.0 };
        let mmd = mmd_unbiased(&xs, &ys, bw)?.max(0.0).sqrt();
        rows.push((r, swd, mmd));
    }
    Ok(rows)
}
