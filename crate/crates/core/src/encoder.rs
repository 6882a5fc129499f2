//! Scene encoder: 2D sinusoidal positional encoding, one multi-head
//! cross-attention block (ground tokens query satellite tokens) and mean
//! pooling into a fixed-size visual context. Also embeds a 2D hypothesis into
//! the coordinate vector that is concatenated with that context.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::PoseHypothesis;

/// Frequency base of the positional encoding.
pub const PE_BASE: f64 = 10_000.0;

/// Flattened feature grid, one row per token in row-major cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    values: Tensor,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, values: Tensor) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(
                "token grid needs at least one cell".into(),
            ));
        }
        if values.rank() != 2 || values.shape()[0] != height * width {
            return Err(Error::Dimension(format!(
                "grid {height}x{width} needs {} token rows, got shape {:?}",
                height * width,
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numeric("token grid holds non-finite values".into()));
        }
        Ok(TokenGrid {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> &Tensor {
        &self.values
    }

    /// Copy of the grid with its positional encoding added.
    pub fn with_positional_encoding(&self) -> Result<TokenGrid> {
        let pe = sinusoidal_pe_2d(self.height, self.width, self.dim())?;
        let data = self
            .values
            .data()
            .iter()
            .zip(pe.data())
            .map(|(a, b)| a + b)
            .collect();
        TokenGrid::new(
            self.height,
            self.width,
            Tensor::new(self.values.shape().to_vec(), data)?,
        )
    }

    /// Same tokens in a different row order.
    pub fn permuted(&self, order: &[usize]) -> Result<TokenGrid> {
        if order.len() != self.len() {
            return Err(Error::Dimension("permutation length mismatch".into()));
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| self.values.row(i).to_vec()).collect();
        TokenGrid::new(self.height, self.width, Tensor::from_rows(&rows)?)
    }
}

/// Fixed 2D sinusoidal encoding, `[height * width, dim]`.
///
/// The first `dim / 2` channels encode the row index and the remaining half
/// the column index. Inside each half, channel `2i` is `sin(pos * w_i)` and
/// channel `2i + 1` is `cos(pos * w_i)` with `w_i = BASE^(-2i / (dim / 2))`.
pub fn sinusoidal_pe_2d(height: usize, width: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Dimension(format!(
            "positional encoding dim {dim} must be a positive multiple of 4"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| PE_BASE.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut data = Vec::with_capacity(height * width * dim);
    for r in 0..height {
        for c in 0..width {
            for pos in [r as f64, c as f64] {
                for w in &freqs {
                    data.push((pos * w).sin());
                    data.push((pos * w).cos());
                }
            }
        }
    }
    Tensor::matrix(height * width, dim, data)
}

/// Initialization scheme for the attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionInit {
    /// Identity plus small Gaussian noise: attention starts as content matching.
    Identity,
    /// Gaussian with standard deviation `1 / sqrt(d)`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub coord_dim: usize,
    /// Apply `tanh` after the coordinate projection.
    pub coord_tanh: bool,
    pub attention_init: AttentionInit,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 128,
            heads: 4,
            coord_dim: 16,
            coord_tanh: true,
            attention_init: AttentionInit::Identity,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::Validation(format!(
                "model dim {} must be a positive multiple of 4",
                self.dim
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.coord_dim == 0 {
            return Err(Error::Validation(
                "coordinate embedding dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[2, coord_dim]`
    pub coord_w: Tensor,
    /// `[coord_dim]`
    pub coord_b: Tensor,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let attn = |rng: &mut dyn rand::RngCore| -> Tensor {
            match config.attention_init {
                AttentionInit::Identity => {
                    let noise = Normal::new(0.0, 0.02).expect("valid std");
                    let mut t = Tensor::identity(d);
                    for v in t.data_mut() {
                        *v += noise.sample(rng);
                    }
                    t
                }
                AttentionInit::Random => {
                    let n = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
                    Tensor::matrix(d, d, (0..d * d).map(|_| n.sample(rng)).collect())
                        .expect("square shape")
                }
            }
        };
        let w_q = attn(rng);
        let w_k = attn(rng);
        let w_v = attn(rng);
        let bound = 1.0 / 2f64.sqrt();
        let coord_w = Tensor::matrix(
            2,
            config.coord_dim,
            (0..2 * config.coord_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )?;
        let coord_b = Tensor::vector(
            (0..config.coord_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        );
        Ok(EncoderParams {
            config,
            w_q,
            w_k,
            w_v,
            coord_w,
            coord_b,
        })
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.dim;
        EncoderParams {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            coord_w: Tensor::zeros(&[2, config.coord_dim]),
            coord_b: Tensor::zeros(&[config.coord_dim]),
            config,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.config.dim / self.config.heads
    }

    /// Place the encoder weights on a tape as trainable leaves.
    pub fn on_tape(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            coord_w: tape.param(self.coord_w.clone()),
            coord_b: tape.param(self.coord_b.clone()),
            heads: self.config.heads,
            coord_tanh: self.config.coord_tanh,
        }
    }
}

/// Encoder weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub coord_w: Var,
    pub coord_b: Var,
    pub heads: usize,
    pub coord_tanh: bool,
}

/// Output of the attention block with the per-head attention maps.
pub struct AttentionOutput {
    pub fused: Var,
    pub weights: Vec<Var>,
}

/// Multi-head cross-attention on a tape. Ground tokens give the queries,
/// satellite tokens the keys and values; heads own contiguous channel blocks.
pub fn cross_attend_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    ground: Var,
    satellite: Var,
) -> Result<AttentionOutput> {
    let d = tape.value(ground).cols();
    if tape.value(satellite).cols() != d {
        return Err(Error::Dimension(format!(
            "ground dim {d} != satellite dim {}",
            tape.value(satellite).cols()
        )));
    }
    let dk = d / vars.heads;
    let q = tape.matmul(ground, vars.w_q)?;
    let k = tape.matmul(satellite, vars.w_k)?;
    let v = tape.matmul(satellite, vars.w_v)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(vars.heads);
    let mut weights = Vec::with_capacity(vars.heads);
    for h in 0..vars.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let fused = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    Ok(AttentionOutput { fused, weights })
}

/// Pooled visual context on a tape, `[d]`.
pub fn encode_scene_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    ground: Var,
    satellite: Var,
) -> Result<Var> {
    let out = cross_attend_on_tape(tape, vars, ground, satellite)?;
    tape.mean_pool(out.fused)
}

/// Coordinate embedding of a batch of hypotheses `[b, 2] -> [b, coord_dim]`.
pub fn embed_on_tape(tape: &mut Tape, vars: &EncoderVars, coords: Var) -> Result<Var> {
    let s = tape.matmul(coords, vars.coord_w)?;
    let s = tape.add(s, vars.coord_b)?;
    if vars.coord_tanh {
        tape.tanh(s)
    } else {
        Ok(s)
    }
}

/// Fixed-size scene representation shared by every refinement step.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualContext {
    f_vis: Vec<f64>,
}

impl VisualContext {
    pub fn from_vec(f_vis: Vec<f64>) -> Result<Self> {
        if f_vis.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("visual context is not finite".into()));
        }
        Ok(VisualContext { f_vis })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.f_vis
    }

    pub fn dim(&self) -> usize {
        self.f_vis.len()
    }
}

fn check_grids(ground: &TokenGrid, satellite: &TokenGrid, params: &EncoderParams) -> Result<()> {
    if ground.dim() != satellite.dim() {
        return Err(Error::Dimension(format!(
            "ground dim {} != satellite dim {}",
            ground.dim(),
            satellite.dim()
        )));
    }
    if ground.dim() != params.config.dim {
        return Err(Error::Dimension(format!(
            "token dim {} != model dim {}",
            ground.dim(),
            params.config.dim
        )));
    }
    Ok(())
}

/// Attended ground tokens `[N_g, d]` for grids that already carry their
/// positional encoding.
pub fn cross_attend(
    ground: &TokenGrid,
    satellite: &TokenGrid,
    params: &EncoderParams,
) -> Result<Tensor> {
    check_grids(ground, satellite, params)?;
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let g = tape.constant(ground.tokens().clone());
    let s = tape.constant(satellite.tokens().clone());
    let out = cross_attend_on_tape(&mut tape, &vars, g, s)?;
    Ok(tape.value(out.fused).clone())
}

/// Per-head attention maps `[N_g, N_s]`.
pub fn attention_maps(
    ground: &TokenGrid,
    satellite: &TokenGrid,
    params: &EncoderParams,
) -> Result<Vec<Tensor>> {
    check_grids(ground, satellite, params)?;
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let g = tape.constant(ground.tokens().clone());
    let s = tape.constant(satellite.tokens().clone());
    let out = cross_attend_on_tape(&mut tape, &vars, g, s)?;
    Ok(out.weights.iter().map(|w| tape.value(*w).clone()).collect())
}

/// Mean-pooled cross-attention output for PE-augmented grids.
pub fn encode_scene(
    ground: &TokenGrid,
    satellite: &TokenGrid,
    params: &EncoderParams,
) -> Result<VisualContext> {
    check_grids(ground, satellite, params)?;
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let g = tape.constant(ground.tokens().clone());
    let s = tape.constant(satellite.tokens().clone());
    let f = encode_scene_on_tape(&mut tape, &vars, g, s)?;
    VisualContext::from_vec(tape.value(f).data().to_vec())
}

/// Coordinate embedding `s` of a single hypothesis.
pub fn embed_hypothesis(q0: &PoseHypothesis, params: &EncoderParams) -> Result<Vec<f64>> {
    q0.check_range()?;
    let mut out = Vec::with_capacity(params.config.coord_dim);
    embed_into(q0.x, q0.y, params, &mut out);
    Ok(out)
}

pub(crate) fn embed_into(x: f64, y: f64, params: &EncoderParams, out: &mut Vec<f64>) {
    let n = params.config.coord_dim;
    let w = params.coord_w.data();
    let b = params.coord_b.data();
    for j in 0..n {
        let v = x * w[j] + y * w[n + j] + b[j];
        out.push(if params.config.coord_tanh {
            v.tanh()
        } else {
            v
        });
    }
}

/// Joint vector `[f_vis, s]`.
pub fn fuse(
    f_vis: &VisualContext,
    s: &[f64],
    expected_vis: usize,
    expected_coord: usize,
) -> Result<Vec<f64>> {
    if f_vis.dim() != expected_vis || s.len() != expected_coord {
        return Err(Error::Dimension(format!(
            "fuse expects {expected_vis} + {expected_coord} dims, got {} + {}",
            f_vis.dim(),
            s.len()
        )));
    }
    let mut z = Vec::with_capacity(expected_vis + expected_coord);
    z.extend_from_slice(f_vis.as_slice());
    z.extend_from_slice(s);
    Ok(z)
}
