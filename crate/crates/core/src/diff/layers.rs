//! Neural building blocks recorded on a [`Tape`].

use std::rc::Rc;

use rand::Rng;

use crate::diff::params::{Init, ParamId, ParamStore};
use crate::diff::tape::{Tape, Var};
use crate::error::{MinoError, Result};
use crate::geometry::{EdgeList, LatentGrid, PointSet};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// `y = W x + b` applied columnwise; `W` is `[c_out, c_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    /// Uniform `+-1/sqrt(c_in)` initialization for weight and bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (c_in.max(1) as f64).sqrt();
        Self::with_init(store, rng, name, c_in, c_out, bias, Init::Uniform(bound))
    }

    /// All-zero weight and bias.
    pub fn zeros<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self::with_init(store, rng, name, c_in, c_out, true, Init::Zeros)
    }

    fn with_init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), c_out, c_in, init, rng);
        let bias = bias.then(|| store.register(format!("{name}.bias"), c_out, 1, init, rng));
        Self {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let rows = tape.shape(x).0;
        if rows != self.c_in {
            return Err(MinoError::shape("linear", self.c_in, rows));
        }
        let w = tape.param(store, self.weight);
        let y = tape.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
    ) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.fc1"), c_in, hidden, true),
            second: Linear::new(store, rng, &format!("{name}.fc2"), hidden, c_out, true),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.silu(h);
        self.second.forward(tape, store, h)
    }
}

/// Channel layer normalization followed by a learned per-channel affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), channels, 1, Init::Ones, rng),
            bias: store.register(format!("{name}.bias"), channels, 1, Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gain);
        let y = tape.mul_rows(n, g)?;
        let b = tape.param(store, self.bias);
        tape.add_bias(y, b)
    }
}

/// Column index map repeating column `b` of a `[C, B]` matrix `seg` times.
pub fn broadcast_index(batch: usize, seg: usize) -> Rc<[usize]> {
    (0..batch * seg).map(|k| k / seg).collect()
}

/// `ln(x) * (1 + scale) + shift` with per-sample `scale`, `shift` broadcast over the segment.
fn modulated_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let s = tape.add_const(scale, T::one());
    let y = tape.mul(n, s)?;
    tape.add(y, shift)
}

/// Per-sample modulation vectors `[width, B]` sliced from one zero-initialized projection.
struct Modulation {
    parts: Vec<Var>,
}

impl Modulation {
    fn compute<T: Scalar>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        proj: &Linear,
        cond_act: Var,
        width: usize,
        index: Rc<[usize]>,
    ) -> Result<Self> {
        let m = proj.forward(tape, store, cond_act)?;
        let count = proj.c_out / width;
        let mut parts = Vec::with_capacity(count);
        for i in 0..count {
            let s = tape.slice_rows(m, i * width, width)?;
            parts.push(tape.gather_cols(s, index.clone())?);
        }
        Ok(Self { parts })
    }
}

/// Output of one attention block; `attention` is the raw attention node.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// Pre-norm multi-head cross-attention block with adaptive-norm conditioning.
///
/// The conditioning vector drives `(shift, scale, gate)` for the attention
/// and MLP sub-blocks through one projection that starts at zero, so a fresh
/// block is the identity on its query input.
#[derive(Clone, Debug)]
pub struct Mhca {
    pub width: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub modulation: Linear,
    pub mlp: Mlp,
}

impl Mhca {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(MinoError::invalid(format!("latent width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            width,
            heads,
            query: Linear::new(store, rng, &format!("{name}.q"), width, width, true),
            key: Linear::new(store, rng, &format!("{name}.k"), width, width, true),
            value: Linear::new(store, rng, &format!("{name}.v"), width, width, true),
            output: Linear::new(store, rng, &format!("{name}.o"), width, width, true),
            modulation: Linear::zeros(store, rng, &format!("{name}.modulation"), width, 6 * width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), width, 4 * width, width),
        })
    }

    /// `q_in` is `[L, B*seg_q]`, `kv_in` is `[L, B*seg_kv]`, `cond_act` is the
    /// activated conditioning `[L, B]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_in: Var,
        kv_in: Var,
        cond_act: Var,
        seg_q: usize,
        seg_kv: usize,
    ) -> Result<BlockOutput> {
        let batch = tape.shape(cond_act).1;
        if tape.shape(q_in) != (self.width, batch * seg_q) {
            return Err(MinoError::shape("mhca", format!("[{}, {}]", self.width, batch * seg_q), format!("{:?}", tape.shape(q_in))));
        }
        let index = broadcast_index(batch, seg_q);
        let m = Modulation::compute(tape, store, &self.modulation, cond_act, self.width, index)?;
        let [shift1, scale1, gate1, shift2, scale2, gate2] = m.parts[..] else {
            unreachable!("modulation has six parts")
        };

        let xn = modulated_norm(tape, q_in, shift1, scale1)?;
        let q = self.query.forward(tape, store, xn)?;
        let k = self.key.forward(tape, store, kv_in)?;
        let v = self.value.forward(tape, store, kv_in)?;
        let attention = tape.attention(q, k, v, self.heads, seg_q, seg_kv)?;
        let o = self.output.forward(tape, store, attention)?;
        let o = tape.mul(o, gate1)?;
        let x = tape.add(q_in, o)?;

        let xn = modulated_norm(tape, x, shift2, scale2)?;
        let h = self.mlp.forward(tape, store, xn)?;
        let h = tape.mul(h, gate2)?;
        let out = tape.add(x, h)?;
        Ok(BlockOutput { out, attention })
    }
}

/// Precomputed edge layout for running a [`GnoLayer`] on a batch.
///
/// Edges are ordered sample-major, then by `(query, input)`.
#[derive(Clone, Debug)]
pub struct GnoPlan<T> {
    /// Input column (within the batched `[C, B*N_in]` matrix) of each edge.
    pub gather: Rc<[usize]>,
    /// Per-query edge ranges over the batched edge list.
    pub offsets: Rc<[usize]>,
    /// `[2*P_dim, B*E]` query and input coordinates of each edge.
    pub positions: Matrix<T>,
    pub batch: usize,
    pub n_in: usize,
    pub n_query: usize,
}

impl<T: Scalar> GnoPlan<T> {
    pub fn new(input: &PointSet, query: &LatentGrid, edges: &EdgeList, batch: usize) -> Result<Self> {
        if input.dim() != query.dim() || edges.degree.len() != query.len() {
            return Err(MinoError::shape("GnoPlan::new", query.len(), edges.degree.len()));
        }
        let dim = input.dim();
        let n_edges = edges.len();
        let n_in = input.len();
        let mut gather = Vec::with_capacity(batch * n_edges);
        let mut offsets = Vec::with_capacity(batch * query.len() + 1);
        offsets.push(0);
        let local = edges.offsets();
        for b in 0..batch {
            gather.extend(edges.pairs.iter().map(|&(_, i)| b * n_in + i));
            offsets.extend(local[1..].iter().map(|&o| b * n_edges + o));
        }
        let mut positions = Matrix::zeros(2 * dim, batch * n_edges);
        let total = batch * n_edges;
        for (e, &(q, i)) in edges.pairs.iter().enumerate() {
            for d in 0..dim {
                let pq = T::from_f64_lossy(query.point(q)[d]);
                let pi = T::from_f64_lossy(input.point(i)[d]);
                for b in 0..batch {
                    positions.as_mut_slice()[d * total + b * n_edges + e] = pq;
                    positions.as_mut_slice()[(dim + d) * total + b * n_edges + e] = pi;
                }
            }
        }
        Ok(Self {
            gather: gather.into(),
            offsets: offsets.into(),
            positions,
            batch,
            n_in,
            n_query: query.len(),
        })
    }
}

/// Kernel-integral layer: each query averages `kernel(p_q, p_i, x_i)` over its radius neighbors.
#[derive(Clone, Debug)]
pub struct GnoLayer {
    pub kernel: Mlp,
    pub c_in: usize,
    pub c_out: usize,
}

impl GnoLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        p_dim: usize,
        c_in: usize,
        hidden: usize,
        c_out: usize,
    ) -> Self {
        Self {
            kernel: Mlp::new(store, rng, &format!("{name}.kernel"), 2 * p_dim + c_in, hidden, c_out),
            c_in,
            c_out,
        }
    }

    /// `values` is `[c_in, B*N_in]`; returns `[c_out, B*N_query]`. Queries with no neighbors get zeros.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, values: Var, plan: &GnoPlan<T>) -> Result<Var> {
        let expected = (self.c_in, plan.batch * plan.n_in);
        if tape.shape(values) != expected {
            return Err(MinoError::shape("gno_layer", format!("{expected:?}"), format!("{:?}", tape.shape(values))));
        }
        let feats = tape.gather_cols(values, plan.gather.clone())?;
        let pos = tape.constant(plan.positions.clone());
        let edge_in = tape.concat_rows(&[pos, feats])?;
        let k = self.kernel.forward(tape, store, edge_in)?;
        tape.segment_mean(k, plan.offsets.clone())
    }
}

/// Conditioned token-mixing block over a fixed number of latent tokens.
///
/// Mixes across tokens with a per-channel MLP, then across channels; both
/// sub-blocks are gated by a zero-initialized conditioning projection.
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub width: usize,
    pub tokens: usize,
    pub token_fc1: (ParamId, ParamId),
    pub token_fc2: (ParamId, ParamId),
    pub modulation: Linear,
    pub channel_mlp: Mlp,
}

impl TokenMixer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        tokens: usize,
        token_hidden: usize,
    ) -> Self {
        let b1 = 1.0 / (tokens as f64).sqrt();
        let b2 = 1.0 / (token_hidden as f64).sqrt();
        let token_fc1 = (
            store.register(format!("{name}.token_fc1.weight"), token_hidden, tokens, Init::Uniform(b1), rng),
            store.register(format!("{name}.token_fc1.bias"), token_hidden, 1, Init::Uniform(b1), rng),
        );
        let token_fc2 = (
            store.register(format!("{name}.token_fc2.weight"), tokens, token_hidden, Init::Uniform(b2), rng),
            store.register(format!("{name}.token_fc2.bias"), tokens, 1, Init::Uniform(b2), rng),
        );
        Self {
            width,
            tokens,
            token_fc1,
            token_fc2,
            modulation: Linear::zeros(store, rng, &format!("{name}.modulation"), width, 6 * width),
            channel_mlp: Mlp::new(store, rng, &format!("{name}.channel_mlp"), width, 4 * width, width),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, cond_act: Var) -> Result<Var> {
        let batch = tape.shape(cond_act).1;
        let index = broadcast_index(batch, self.tokens);
        let m = Modulation::compute(tape, store, &self.modulation, cond_act, self.width, index)?;
        let [shift1, scale1, gate1, shift2, scale2, gate2] = m.parts[..] else {
            unreachable!("modulation has six parts")
        };

        let xn = modulated_norm(tape, x, shift1, scale1)?;
        let (w1, b1) = (tape.param(store, self.token_fc1.0), tape.param(store, self.token_fc1.1));
        let hidden = store.slot(self.token_fc1.0).rows;
        let h = tape.token_linear(xn, w1, b1, self.tokens)?;
        let h = tape.silu(h);
        let (w2, b2) = (tape.param(store, self.token_fc2.0), tape.param(store, self.token_fc2.1));
        let h = tape.token_linear(h, w2, b2, hidden)?;
        let h = tape.mul(h, gate1)?;
        let x = tape.add(x, h)?;

        let xn = modulated_norm(tape, x, shift2, scale2)?;
        let h = self.channel_mlp.forward(tape, store, xn)?;
        let h = tape.mul(h, gate2)?;
        tape.add(x, h)
    }
}
