use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mino_core::flow::{SolverConfig, TrainConfig};
use mino_core::gaussian_field::{GpSpec, Smoothness};
use mino_core::geometry::LatentGridSpec;
use mino_core::metrics::EvalConfig;
use mino_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const OUT_DIR_ENV: &str = "MINO_OUT_DIR";
pub const THREADS_ENV: &str = "MINO_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub threads: usize,
    pub points: PointsConfig,
    pub data: DataConfig,
    pub sample_gp: SampleGpConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub resume: ResumeConfig,
    pub solver: SolverSection,
    pub generate: GenerateConfig,
    pub eval: EvalSection,
    pub plot: PlotConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointsKind {
    UniformRandom,
    RegularGrid,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointsConfig {
    pub kind: PointsKind,
    /// Point count for `uniform_random`.
    pub n: usize,
    /// Coordinate dimension for `uniform_random`.
    pub dim: usize,
    /// Grid shape for `regular_grid`; `ny = 1` gives a 1D grid.
    pub nx: usize,
    pub ny: usize,
    /// Container whose positions are used when `kind = "file"`.
    pub file: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub gp: GpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleGpConfig {
    pub n: usize,
    pub seed: u64,
    pub gp: GpSpec,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeConfig {
    /// Directory of an earlier `train` run; empty starts from scratch.
    pub from: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Rk4Fixed,
    DormandPrince,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub method: SolverMethod,
    /// Used by `rk4_fixed`.
    pub steps: usize,
    /// Used by `dormand_prince`.
    pub rtol: f64,
    pub atol: f64,
}

impl SolverSection {
    pub fn solver(&self) -> SolverConfig {
        match self.method {
            SolverMethod::Rk4Fixed => SolverConfig::Rk4Fixed { steps: self.steps },
            SolverMethod::DormandPrince => SolverConfig::DormandPrince {
                rtol: self.rtol,
                atol: self.atol,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub seed: u64,
    /// Container of target positions; empty uses the training points.
    pub positions: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub x: PathBuf,
    pub y: PathBuf,
    pub n_projections: usize,
    pub n_run: usize,
    pub p: u32,
    pub seed: u64,
    /// Fixed RBF bandwidth; `0` selects the pooled median heuristic.
    pub bandwidth: f64,
    pub output: PathBuf,
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_projections: self.n_projections,
            n_run: self.n_run,
            p: self.p,
            seed: self.seed,
            bandwidth: (self.bandwidth > 0.0).then_some(self.bandwidth),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    /// Loss table from `train`; empty skips.
    pub loss: PathBuf,
    /// Sample container to draw; empty skips.
    pub samples: PathBuf,
    pub max_samples: usize,
    /// Subsample ratios for the metric consistency curve over `eval.x` and `eval.y`; empty skips.
    pub ratios: Vec<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs/mino".into(),
            threads: 1,
            points: PointsConfig {
                kind: PointsKind::UniformRandom,
                n: 500,
                dim: 2,
                nx: 64,
                ny: 64,
                file: PathBuf::new(),
                seed: 0,
            },
            data: DataConfig {
                train: "data/train.mfs".into(),
                test: "data/test.mfs".into(),
                n_train: 2000,
                n_test: 500,
                seed: 1,
                gp: GpSpec::mesh_gp(),
            },
            sample_gp: SampleGpConfig {
                n: 100,
                seed: 2,
                gp: GpSpec::new(0.3, Smoothness::ThreeHalves),
                output: "samples.mfs".into(),
            },
            model: desk_model(),
            train: TrainConfig::default(),
            resume: ResumeConfig { from: PathBuf::new() },
            solver: SolverSection {
                method: SolverMethod::DormandPrince,
                steps: 100,
                rtol: 1e-5,
                atol: 1e-5,
            },
            generate: GenerateConfig {
                checkpoint: "runs/mino/checkpoint.mck".into(),
                n: 100,
                seed: 3,
                positions: PathBuf::new(),
                output: "generated.mfs".into(),
            },
            eval: EvalSection {
                x: "data/test.mfs".into(),
                y: "runs/mino/generated.mfs".into(),
                n_projections: 256,
                n_run: 10,
                p: 2,
                seed: 0,
                bandwidth: 0.0,
                output: "report.toml".into(),
            },
            plot: PlotConfig {
                loss: PathBuf::new(),
                samples: PathBuf::new(),
                max_samples: 4,
                ratios: Vec::new(),
                seed: 0,
            },
        }
    }
}

/// Reduced 2D model for the default 500-point mesh.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        radius: 0.2,
        latent_grid: LatentGridSpec::Regular {
            nx: 8,
            ny: 8,
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
        },
        ..ModelConfig::desk_1d(8)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.solver.solver().validate()?;
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config fields are plain data")
    }
}

/// Sections whose `kind`/`method` key is a plain field, not an enum tag.
const FLAT_SECTIONS: [&str; 2] = ["points", "solver"];

/// Recursively merges `top` into `base`. A nested table that names a different
/// `kind` or `method` tag replaces the old table instead of merging.
fn merge(base: &mut Table, top: Table, depth: usize) {
    for (k, v) in top {
        let flat = depth == 0 && FLAT_SECTIONS.contains(&k.as_str());
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => {
                let retagged = !flat && ["kind", "method"].iter().any(|tag| t.get(*tag).is_some_and(|x| b.get(*tag) != Some(x)));
                if retagged {
                    *b = t;
                } else {
                    merge(b, t, depth + 1);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key {key:?}");
    }
    let mut top = Table::new();
    let mut cursor = &mut top;
    for p in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .unwrap();
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    merge(table, top, 0);
    Ok(())
}

/// Defaults, then the config file, then environment, then `key=value` overrides.
pub fn resolve(file: Option<&Path>, env: &[(String, String)], overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let user: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut table, user, 0);
    }
    for (k, v) in env {
        let key = match k.as_str() {
            OUT_DIR_ENV => "out_dir",
            THREADS_ENV => "threads",
            _ => continue,
        };
        set_dotted(&mut table, key, parse_value(v))?;
    }
    for (k, v) in overrides {
        set_dotted(&mut table, k, parse_value(v))?;
    }
    let cfg: RunConfig = Value::Table(table).try_into().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    cfg.validate()?;
    Ok(cfg)
}
