//! The velocity-field operator: geometry encoder, latent processor and
//! cross-attention decoder.

mod checkpoint;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use crate::batch::FunctionBatch;
use crate::diff::{GnoLayer, GnoPlan, LayerNorm, Linear, Mhca, Mlp, ParamStore, Tape, TokenMixer, Var};
use crate::error::{MinoError, Result};
use crate::geometry::{build_radius_graph, sinusoidal_embed, EdgeList, EmbeddingScale, LatentGrid, LatentGridSpec, PointSet};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Processor {
    #[default]
    None,
    SmallMlpMixer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderAttention {
    #[default]
    CrossFixedKv,
    SelfAttention,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderQuery {
    #[default]
    FunctionPlusPosition,
    PositionOnly,
}

/// How the input function meets the position embedding before the GNO.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputCombine {
    /// Lift `f_t` to the embedding width and add.
    #[default]
    Add,
    /// Stack `f_t` on top of the embedding.
    Concat,
}

fn default_hidden() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "L_dim")]
    pub l_dim: usize,
    #[serde(rename = "M1")]
    pub m1: usize,
    #[serde(rename = "M2")]
    pub m2: usize,
    pub heads: usize,
    pub radius: f64,
    pub latent_grid: LatentGridSpec,
    /// Embedding width per position coordinate.
    pub pos_embed_dim: usize,
    pub time_embed_dim: usize,
    pub f_dim: usize,
    #[serde(default)]
    pub processor: Processor,
    #[serde(default)]
    pub encoder_attention: EncoderAttention,
    #[serde(default)]
    pub decoder_query: DecoderQuery,
    #[serde(default)]
    pub input_combine: InputCombine,
    #[serde(default = "default_hidden")]
    pub gno_hidden: usize,
    #[serde(default = "default_hidden")]
    pub mixer_hidden: usize,
    #[serde(default)]
    pub embedding: EmbeddingScale,
}

impl ModelConfig {
    /// Full-size layout on the unit square: 16x16 latent nodes, five encoder and two decoder blocks.
    pub fn mino_t() -> Self {
        Self {
            l_dim: 256,
            m1: 5,
            m2: 2,
            heads: 4,
            radius: 0.07,
            latent_grid: LatentGridSpec::Regular {
                nx: 16,
                ny: 16,
                lower: vec![0.0, 0.0],
                upper: vec![1.0, 1.0],
            },
            pos_embed_dim: 32,
            time_embed_dim: 64,
            f_dim: 1,
            processor: Processor::None,
            encoder_attention: EncoderAttention::CrossFixedKv,
            decoder_query: DecoderQuery::FunctionPlusPosition,
            input_combine: InputCombine::Add,
            gno_hidden: 64,
            mixer_hidden: 64,
            embedding: EmbeddingScale::default(),
        }
    }

    /// Reduced layout for functions on `[0, 1]`.
    pub fn desk_1d(latent_nodes: usize) -> Self {
        Self {
            l_dim: 32,
            m1: 2,
            m2: 1,
            heads: 4,
            radius: 1.5 / latent_nodes as f64,
            latent_grid: LatentGridSpec::Regular {
                nx: latent_nodes,
                ny: 1,
                lower: vec![0.0],
                upper: vec![1.0],
            },
            pos_embed_dim: 16,
            time_embed_dim: 32,
            gno_hidden: 32,
            mixer_hidden: 32,
            ..Self::mino_t()
        }
    }

    pub fn p_dim(&self) -> usize {
        match &self.latent_grid {
            LatentGridSpec::Regular { lower, .. } => lower.len(),
            LatentGridSpec::SphericalLatLon { .. } => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.l_dim == 0 || self.l_dim % self.heads != 0 {
            return Err(MinoError::invalid(format!("L_dim {} must be a positive multiple of heads {}", self.l_dim, self.heads)));
        }
        if self.m1 == 0 || self.m2 == 0 {
            return Err(MinoError::invalid("M1 and M2 must be at least 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(MinoError::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        if self.f_dim == 0 || self.gno_hidden == 0 || self.mixer_hidden == 0 {
            return Err(MinoError::invalid("f_dim and hidden widths must be positive"));
        }
        for (name, w) in [("pos_embed_dim", self.pos_embed_dim), ("time_embed_dim", self.time_embed_dim)] {
            if w < 2 || w % 2 != 0 {
                return Err(MinoError::invalid(format!("{name} must be even and at least 2, got {w}")));
            }
        }
        if self.latent_grid.node_count() == 0 {
            return Err(MinoError::invalid("latent grid has no nodes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    lift: Option<Linear>,
    gno: GnoLayer,
    gno_proj: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    encoder: Vec<Mhca>,
    mixer: Option<TokenMixer>,
    f_mlp: Option<Mlp>,
    query_mlp: Mlp,
    decoder: Vec<Mhca>,
    out_norm: LayerNorm,
    out: Linear,
}

impl Layers {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (l, p) = (cfg.l_dim, cfg.p_dim());
        let pe = p * cfg.pos_embed_dim;
        let (lift, gno_in) = match cfg.input_combine {
            InputCombine::Add => (Some(Linear::new(store, rng, "lift", cfg.f_dim, pe, true)), pe),
            InputCombine::Concat => (None, pe + cfg.f_dim),
        };
        let gno = GnoLayer::new(store, rng, "gno", p, gno_in, cfg.gno_hidden, l);
        let gno_proj = Linear::new(store, rng, "gno_proj", l, l, true);
        let time_fc1 = Linear::new(store, rng, "time.fc1", cfg.time_embed_dim, l, true);
        let time_fc2 = Linear::new(store, rng, "time.fc2", l, l, true);
        let encoder = (0..cfg.m1)
            .map(|j| Mhca::new(store, rng, &format!("encoder.{j}"), l, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let mixer = match cfg.processor {
            Processor::None => None,
            Processor::SmallMlpMixer => Some(TokenMixer::new(store, rng, "processor", l, cfg.latent_grid.node_count(), cfg.mixer_hidden)),
        };
        let (f_mlp, query_mlp) = match cfg.decoder_query {
            DecoderQuery::FunctionPlusPosition => (
                Some(Mlp::new(store, rng, "decoder.f_mlp", cfg.f_dim, l, l)),
                Mlp::new(store, rng, "decoder.query_mlp", l + pe, l, l),
            ),
            DecoderQuery::PositionOnly => (None, Mlp::new(store, rng, "decoder.query_mlp", pe, l, l)),
        };
        let decoder = (0..cfg.m2)
            .map(|j| Mhca::new(store, rng, &format!("decoder.{j}"), l, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::new(store, rng, "out_norm", l);
        let out = Linear::zeros(store, rng, "out", l, cfg.f_dim);
        Ok(Self {
            lift,
            gno,
            gno_proj,
            time_fc1,
            time_fc2,
            encoder,
            mixer,
            f_mlp,
            query_mlp,
            decoder,
            out_norm,
            out,
        })
    }
}

/// Tape nodes produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[f_dim, B*N_in]`
    pub velocity: Var,
    /// Projected GNO output `[L_dim, B*N_node]`, the fixed key/value of the encoder.
    pub gno_latent: Var,
    /// Encoder output `[L_dim, B*N_node]`.
    pub encoded: Var,
    /// Processor output `[L_dim, B*N_node]`.
    pub latent: Var,
    /// Raw attention node of every decoder block.
    pub decoder_attention: Vec<Var>,
}

/// `v_theta(f_t, t)` with its parameters and a neighbor-graph cache.
///
/// Batches are laid out column-wise: sample `b`, point `n` lives in column `b*N + n`.
#[derive(Debug)]
pub struct VelocityModel<T> {
    config: ModelConfig,
    latent: LatentGrid,
    layers: Layers,
    params: ParamStore<T>,
    edges: Mutex<HashMap<u64, Arc<EdgeList>>>,
}

impl<T: Scalar> Clone for VelocityModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            latent: self.latent.clone(),
            layers: self.layers.clone(),
            params: self.params.clone(),
            edges: Mutex::new(self.edges.lock().unwrap().clone()),
        }
    }
}

impl<T: Scalar> VelocityModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let latent = config.latent_grid.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = Layers::new(&config, &mut params, &mut rng)?;
        Ok(Self {
            config,
            latent,
            layers,
            params,
            edges: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_grid(&self) -> &LatentGrid {
        &self.latent
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Radius graph from `points` to the latent nodes, built once per point set.
    pub fn edges(&self, points: &PointSet) -> Result<Arc<EdgeList>> {
        let key = points.content_hash();
        if let Some(e) = self.edges.lock().unwrap().get(&key) {
            return Ok(e.clone());
        }
        let e = Arc::new(build_radius_graph(points, &self.latent, self.config.radius)?);
        if e.empty_warning {
            log::warn!("no input point lies within radius {} of any latent node", self.config.radius);
        }
        self.edges.lock().unwrap().insert(key, e.clone());
        Ok(e)
    }

    pub fn cached_graphs(&self) -> usize {
        self.edges.lock().unwrap().len()
    }

    fn check_points(&self, points: &PointSet) -> Result<()> {
        if points.is_empty() {
            return Err(MinoError::invalid("input point set is empty"));
        }
        if points.dim() != self.latent.dim() {
            return Err(MinoError::shape("velocity_model", self.latent.dim(), points.dim()));
        }
        Ok(())
    }

    /// Activated time conditioning `[L_dim, B]`.
    fn conditioning(&self, tape: &mut Tape<T>, t: &[f64]) -> Result<Var> {
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(MinoError::invalid(format!("time {bad} outside [0, 1]")));
        }
        let emb = sinusoidal_embed::<T>(t, 1, self.config.time_embed_dim, self.config.embedding)?;
        let e = tape.constant(emb.transpose());
        let h = self.layers.time_fc1.forward(tape, &self.params, e)?;
        let h = tape.silu(h);
        let c = self.layers.time_fc2.forward(tape, &self.params, h)?;
        Ok(tape.silu(c))
    }

    /// Position embedding `[P_dim*pos_embed_dim, B*N]`, tiled over the batch.
    fn position_embedding(&self, tape: &mut Tape<T>, points: &PointSet, batch: usize) -> Result<Var> {
        let emb = sinusoidal_embed::<T>(points.positions(), points.dim(), self.config.pos_embed_dim, self.config.embedding)?;
        let (n, w) = emb.shape();
        let mut tiled = Matrix::zeros(w, batch * n);
        for r in 0..w {
            let row = tiled.row_mut(r);
            for b in 0..batch {
                for i in 0..n {
                    row[b * n + i] = emb.get(i, r);
                }
            }
        }
        Ok(tape.constant(tiled))
    }

    /// Returns `(h_0, h_M1)`.
    fn encode_on(&self, tape: &mut Tape<T>, x: Var, pe: Var, points: &PointSet, cond: Var, batch: usize) -> Result<(Var, Var)> {
        let store = &self.params;
        let input = match &self.layers.lift {
            Some(lift) => {
                let lifted = lift.forward(tape, store, x)?;
                tape.add(lifted, pe)?
            }
            None => tape.concat_rows(&[x, pe])?,
        };
        let edges = self.edges(points)?;
        let plan = GnoPlan::new(points, &self.latent, &edges, batch)?;
        let g = self.layers.gno.forward(tape, store, input, &plan)?;
        let h0 = self.layers.gno_proj.forward(tape, store, g)?;
        let nodes = self.latent.len();
        let mut h = h0;
        for block in &self.layers.encoder {
            let kv = match self.config.encoder_attention {
                EncoderAttention::CrossFixedKv => h0,
                EncoderAttention::SelfAttention => h,
            };
            h = block.forward(tape, store, h, kv, cond, nodes, nodes)?.out;
        }
        Ok((h0, h))
    }

    fn process_on(&self, tape: &mut Tape<T>, h: Var, cond: Var) -> Result<Var> {
        match &self.layers.mixer {
            Some(m) => m.forward(tape, &self.params, h, cond),
            None => Ok(h),
        }
    }

    fn decode_on(&self, tape: &mut Tape<T>, x: Var, pe: Var, latent: Var, cond: Var, n: usize) -> Result<(Var, Vec<Var>)> {
        let store = &self.params;
        let query_in = match &self.layers.f_mlp {
            Some(f_mlp) => {
                let f = f_mlp.forward(tape, store, x)?;
                tape.concat_rows(&[f, pe])?
            }
            None => pe,
        };
        let query = self.layers.query_mlp.forward(tape, store, query_in)?;
        let (mut kv, mut seg_kv) = (latent, self.latent.len());
        let mut attention = Vec::with_capacity(self.layers.decoder.len());
        for block in &self.layers.decoder {
            let o = block.forward(tape, store, query, kv, cond, n, seg_kv)?;
            attention.push(o.attention);
            kv = o.out;
            seg_kv = n;
        }
        let h = self.layers.out_norm.forward(tape, store, kv)?;
        let v = self.layers.out.forward(tape, store, h)?;
        Ok((v, attention))
    }

    /// Records the full model on `tape`. `x` is `[f_dim, B*N]` with `B = t.len()`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, points: &PointSet, t: &[f64]) -> Result<ModelOutput> {
        self.check_points(points)?;
        let batch = t.len();
        let n = points.len();
        if tape.shape(x) != (self.config.f_dim, batch * n) {
            return Err(MinoError::shape(
                "velocity_model",
                format!("[{}, {}]", self.config.f_dim, batch * n),
                format!("{:?}", tape.shape(x)),
            ));
        }
        let cond = self.conditioning(tape, t)?;
        let pe = self.position_embedding(tape, points, batch)?;
        let (gno_latent, encoded) = self.encode_on(tape, x, pe, points, cond, batch)?;
        let latent = self.process_on(tape, encoded, cond)?;
        let (velocity, decoder_attention) = self.decode_on(tape, x, pe, latent, cond, n)?;
        Ok(ModelOutput {
            velocity,
            gno_latent,
            encoded,
            latent,
            decoder_attention,
        })
    }

    fn check_function(&self, f_t: &Matrix<T>, points: &PointSet) -> Result<()> {
        self.check_points(points)?;
        if f_t.shape() != (self.config.f_dim, points.len()) {
            return Err(MinoError::shape(
                "velocity_model",
                format!("[{}, {}]", self.config.f_dim, points.len()),
                format!("{:?}", f_t.shape()),
            ));
        }
        Ok(())
    }

    /// Latent tokens `[L_dim, N_node]` for one function `[f_dim, N_in]`.
    pub fn encode(&self, f_t: &Matrix<T>, points: &PointSet, t: f64) -> Result<Matrix<T>> {
        self.check_function(f_t, points)?;
        let mut tape = Tape::new();
        let cond = self.conditioning(&mut tape, &[t])?;
        let pe = self.position_embedding(&mut tape, points, 1)?;
        let x = tape.constant(f_t.clone());
        let (_, h) = self.encode_on(&mut tape, x, pe, points, cond, 1)?;
        Ok(tape.value(h).clone())
    }

    pub fn process(&self, h: &Matrix<T>, t: f64) -> Result<Matrix<T>> {
        if h.shape() != (self.config.l_dim, self.latent.len()) {
            return Err(MinoError::shape("process", format!("[{}, {}]", self.config.l_dim, self.latent.len()), format!("{:?}", h.shape())));
        }
        let mut tape = Tape::new();
        let cond = self.conditioning(&mut tape, &[t])?;
        let hv = tape.constant(h.clone());
        let out = self.process_on(&mut tape, hv, cond)?;
        Ok(tape.value(out).clone())
    }

    pub fn decode(&self, f_t: &Matrix<T>, points: &PointSet, h_latent: &Matrix<T>, t: f64) -> Result<Matrix<T>> {
        self.check_function(f_t, points)?;
        if h_latent.shape() != (self.config.l_dim, self.latent.len()) {
            return Err(MinoError::shape("decode", format!("[{}, {}]", self.config.l_dim, self.latent.len()), format!("{:?}", h_latent.shape())));
        }
        let mut tape = Tape::new();
        let cond = self.conditioning(&mut tape, &[t])?;
        let pe = self.position_embedding(&mut tape, points, 1)?;
        let x = tape.constant(f_t.clone());
        let h = tape.constant(h_latent.clone());
        let (v, _) = self.decode_on(&mut tape, x, pe, h, cond, points.len())?;
        Ok(tape.value(v).clone())
    }

    /// Velocity `[f_dim, N_in]` of one function.
    pub fn velocity(&self, f_t: &Matrix<T>, points: &PointSet, t: f64) -> Result<Matrix<T>> {
        self.check_function(f_t, points)?;
        let mut tape = Tape::new();
        let x = tape.constant(f_t.clone());
        let out = self.forward(&mut tape, x, points, &[t])?;
        Ok(tape.value(out.velocity).clone())
    }

    /// Velocity of every sample in `batch`; `t` holds one time per sample.
    pub fn velocity_batch(&self, batch: &FunctionBatch<T>, t: &[f64]) -> Result<FunctionBatch<T>> {
        if batch.len() != t.len() {
            return Err(MinoError::shape("velocity_batch", batch.len(), t.len()));
        }
        if batch.f_dim() != self.config.f_dim {
            return Err(MinoError::shape("velocity_batch", self.config.f_dim, batch.f_dim()));
        }
        if batch.is_empty() {
            return Ok(FunctionBatch::empty(batch.points().clone(), batch.f_dim()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch_to_columns(batch));
        let out = self.forward(&mut tape, x, batch.points(), t)?;
        let values = columns_to_values(tape.value(out.velocity), batch.len());
        FunctionBatch::new(batch.points().clone(), batch.f_dim(), values)
    }
}

/// `[S, f_dim, N]` sample values as a `[f_dim, S*N]` column matrix.
pub fn batch_to_columns<T: Scalar>(batch: &FunctionBatch<T>) -> Matrix<T> {
    let (s, f, n) = (batch.len(), batch.f_dim(), batch.n_points());
    let mut out = Matrix::zeros(f, s * n);
    for b in 0..s {
        let sample = batch.sample(b);
        for c in 0..f {
            out.row_mut(c)[b * n..(b + 1) * n].copy_from_slice(&sample[c * n..(c + 1) * n]);
        }
    }
    out
}

/// Inverse of [`batch_to_columns`].
pub fn columns_to_values<T: Scalar>(m: &Matrix<T>, samples: usize) -> Vec<T> {
    let (f, total) = m.shape();
    let n = if samples == 0 { 0 } else { total / samples };
    let mut out = Vec::with_capacity(f * total);
    for b in 0..samples {
        for c in 0..f {
            out.extend_from_slice(&m.row(c)[b * n..(b + 1) * n]);
        }
    }
    out
}
