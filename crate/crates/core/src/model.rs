//! The full localization model: scene encoder plus MLP regression field,
//! with a tape forward pass for training and a plain fast path for inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Tape, Tensor, Var};
use crate::distributions::{
    angmf_grad_unchecked, gaussian_nll_grad, norm, orientation_loss_grad, sigmoid, softplus,
    DisplacementDistribution, DisplacementTarget, LossBreakdown, OrientationTarget, Vec2,
    EPS_MU_THETA, LOG_VARIANCE_CLAMP,
};
use crate::encoder::{
    embed_into, embed_on_tape, encode_scene, encode_scene_on_tape, fuse, EncoderConfig,
    EncoderParams, EncoderVars, TokenGrid, VisualContext,
};
use crate::error::{Error, Result};
use crate::field::{
    Activation, FieldConfig, Linear, MlpFieldParams, PoseHypothesis, RegressionField,
};

/// Translation only, or translation plus heading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "2dof")]
    TwoDof,
    #[serde(rename = "3dof")]
    ThreeDof,
}

impl Mode {
    pub fn has_orientation(self) -> bool {
        self == Mode::ThreeDof
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2dof" => Ok(Mode::TwoDof),
            "3dof" => Ok(Mode::ThreeDof),
            other => Err(Error::Validation(format!(
                "mode must be 2dof or 3dof, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::TwoDof => "2dof",
            Mode::ThreeDof => "3dof",
        })
    }
}

/// Width of the orientation head's hidden layer.
pub const ORIENTATION_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            hidden: vec![256, 256],
            activation: Activation::Relu,
            mode: Mode::TwoDof,
        }
    }
}

impl ModelConfig {
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            input_dim: self.encoder.dim + self.encoder.coord_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            orientation_hidden: self.mode.has_orientation().then_some(ORIENTATION_HIDDEN),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.field_config().validate()
    }
}

/// Which learning rate a parameter tensor trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Attention projections.
    Backbone,
    /// Coordinate projection, trunk and heads.
    Heads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationModel {
    pub encoder: EncoderParams,
    pub field: MlpFieldParams,
}

/// Model weights recorded on a tape.
pub struct ModelVars {
    pub encoder: EncoderVars,
    trunk: Vec<(Var, Var)>,
    dist: (Var, Var),
    dir: (Var, Var),
    orientation: Option<[(Var, Var); 2]>,
    activation: Activation,
    /// Every leaf, in [`LocalizationModel::params`] order.
    pub leaves: Vec<Var>,
}

/// Raw head outputs on a tape for a batch of samples.
pub struct HeadVars {
    /// `[b, 2]`: `(a_r, b_r)`
    pub dist: Var,
    /// `[b, 3]`: `(c1, c2, d_kappa)`
    pub dir: Var,
    /// `[b, 2]` orientation prediction in 3-DoF mode.
    pub orientation: Option<Var>,
}

/// One training sample: scene index into the batch's grid list, hypothesis,
/// and its targets.
#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub scene: usize,
    pub q0: PoseHypothesis,
    pub target: DisplacementTarget,
    pub orientation: Option<OrientationTarget>,
}

impl LocalizationModel {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(config.encoder.clone(), rng)?;
        let field = MlpFieldParams::init(config.field_config(), rng)?;
        Ok(LocalizationModel { encoder, field })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.config.clone(),
            hidden: self.field.config.hidden.clone(),
            activation: self.field.config.activation,
            mode: self.mode(),
        }
    }

    pub fn mode(&self) -> Mode {
        if self.field.orientation.is_some() {
            Mode::ThreeDof
        } else {
            Mode::TwoDof
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = vec![
            (
                "encoder.w_q".to_string(),
                ParamGroup::Backbone,
                &self.encoder.w_q,
            ),
            (
                "encoder.w_k".to_string(),
                ParamGroup::Backbone,
                &self.encoder.w_k,
            ),
            (
                "encoder.w_v".to_string(),
                ParamGroup::Backbone,
                &self.encoder.w_v,
            ),
            (
                "encoder.coord_w".to_string(),
                ParamGroup::Heads,
                &self.encoder.coord_w,
            ),
            (
                "encoder.coord_b".to_string(),
                ParamGroup::Heads,
                &self.encoder.coord_b,
            ),
        ];
        let f = &self.field;
        let mut layers: Vec<(String, &Linear)> = f
            .trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .collect();
        layers.push(("head_r".into(), &f.dist_head));
        layers.push(("head_dir".into(), &f.dir_head));
        if let Some([a, b]) = &f.orientation {
            layers.push(("orient.0".into(), a));
            layers.push(("orient.1".into(), b));
        }
        for (name, l) in layers {
            out.push((format!("{name}.w"), ParamGroup::Heads, &l.w));
            out.push((format!("{name}.b"), ParamGroup::Heads, &l.b));
        }
        out
    }

    /// Mutable views in the same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let e = &mut self.encoder;
        let mut out = vec![
            &mut e.w_q,
            &mut e.w_k,
            &mut e.w_v,
            &mut e.coord_w,
            &mut e.coord_b,
        ];
        let f = &mut self.field;
        for l in f.trunk.iter_mut() {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut f.dist_head.w);
        out.push(&mut f.dist_head.b);
        out.push(&mut f.dir_head.w);
        out.push(&mut f.dir_head.b);
        if let Some([a, b]) = &mut f.orientation {
            out.extend([&mut a.w, &mut a.b, &mut b.w, &mut b.b]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn orientation_param_count(&self) -> usize {
        self.field.orientation_param_count()
    }

    pub fn on_tape(&self, tape: &mut Tape) -> ModelVars {
        let encoder = self.encoder.on_tape(tape);
        let mut leaves = vec![
            encoder.w_q,
            encoder.w_k,
            encoder.w_v,
            encoder.coord_w,
            encoder.coord_b,
        ];
        let mut put = |l: &Linear, leaves: &mut Vec<Var>| {
            let w = tape.param(l.w.clone());
            let b = tape.param(l.b.clone());
            leaves.push(w);
            leaves.push(b);
            (w, b)
        };
        let f = &self.field;
        let trunk = f.trunk.iter().map(|l| put(l, &mut leaves)).collect();
        let dist = put(&f.dist_head, &mut leaves);
        let dir = put(&f.dir_head, &mut leaves);
        let orientation = f
            .orientation
            .as_ref()
            .map(|[a, b]| [put(a, &mut leaves), put(b, &mut leaves)]);
        ModelVars {
            encoder,
            trunk,
            dist,
            dir,
            orientation,
            activation: f.config.activation,
            leaves,
        }
    }

    /// Visual context of a scene whose grids already carry positional encoding.
    pub fn encode(&self, ground: &TokenGrid, satellite: &TokenGrid) -> Result<VisualContext> {
        encode_scene(ground, satellite, &self.encoder)
    }

    /// Joint vector `z` for one hypothesis.
    pub fn joint_vector(&self, q0: &PoseHypothesis, ctx: &VisualContext) -> Result<Vec<f64>> {
        let s = crate::encoder::embed_hypothesis(q0, &self.encoder)?;
        fuse(
            ctx,
            &s,
            self.encoder.config.dim,
            self.encoder.config.coord_dim,
        )
    }

    /// Unnormalized heading prediction at `q0`.
    pub fn predict_orientation(&self, q0: &PoseHypothesis, ctx: &VisualContext) -> Result<Vec2> {
        if self.field.orientation.is_none() {
            return Err(Error::Unsupported(
                "orientation head is disabled (2-DoF model)".into(),
            ));
        }
        let z = self.joint_vector(q0, ctx)?;
        self.field.predict_orientation(&z)
    }

    /// Raw head outputs for a batch of hypotheses against one context.
    pub fn predict_raw(
        &self,
        poses: &[PoseHypothesis],
        ctx: &VisualContext,
    ) -> Result<Vec<[f64; 5]>> {
        let d = self.encoder.config.dim;
        let cd = self.encoder.config.coord_dim;
        if ctx.dim() != d {
            return Err(Error::Dimension(format!(
                "context dim {} != model dim {d}",
                ctx.dim()
            )));
        }
        let first = &self.field.trunk[0];
        let n = first.fan_out();
        let rows = poses.len();
        if rows == 0 {
            return Ok(Vec::new());
        }
        // context part of the first layer is shared by every hypothesis
        let mut base = first.b.data().to_vec();
        gemm(
            1,
            d,
            n,
            1.0,
            (ctx.as_slice(), d as isize, 1),
            (first.w.data(), n as isize, 1),
            1.0,
            (&mut base, n as isize, 1),
        );
        let mut s = Vec::with_capacity(rows * cd);
        for q in poses {
            q.check_range()?;
            embed_into(q.x, q.y, &self.encoder, &mut s);
        }
        let mut h = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            h.extend_from_slice(&base);
        }
        gemm(
            rows,
            cd,
            n,
            1.0,
            (&s, cd as isize, 1),
            (&first.w.data()[d * n..], n as isize, 1),
            1.0,
            (&mut h, n as isize, 1),
        );
        let h = self.field.trunk_from_first(h, rows);
        let out = self.field.heads(&h, rows);
        for (i, row) in out.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite head output for hypothesis {i} (after trunk layer {})",
                    self.field.trunk.len()
                )));
            }
        }
        Ok(out)
    }

    /// Head outputs for a batch of samples drawn from several scenes.
    /// `grids[k]` holds the PE-augmented `(ground, satellite)` pair of scene `k`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        grids: &[(&TokenGrid, &TokenGrid)],
        samples: &[Sample],
    ) -> Result<HeadVars> {
        let d = self.encoder.config.dim;
        let mut contexts = Vec::with_capacity(grids.len());
        for (g, s) in grids {
            let gv = tape.constant(g.tokens().clone());
            let sv = tape.constant(s.tokens().clone());
            let f = encode_scene_on_tape(tape, &vars.encoder, gv, sv)?;
            contexts.push(tape.reshape(f, &[1, d])?);
        }
        let mut rows = Vec::with_capacity(samples.len());
        let mut coords = Vec::with_capacity(samples.len() * 2);
        for s in samples {
            let c = *contexts.get(s.scene).ok_or_else(|| {
                Error::Contract(format!(
                    "sample refers to scene {} of {}",
                    s.scene,
                    grids.len()
                ))
            })?;
            rows.push(c);
            coords.extend_from_slice(&[s.q0.x, s.q0.y]);
        }
        let f_vis = tape.concat(&rows, 0)?;
        let coords = tape.constant(Tensor::matrix(samples.len(), 2, coords)?);
        let emb = embed_on_tape(tape, &vars.encoder, coords)?;
        let z = tape.concat(&[f_vis, emb], 1)?;

        let mut h = z;
        for &(w, b) in &vars.trunk {
            let a = tape.matmul(h, w)?;
            let a = tape.add(a, b)?;
            h = match vars.activation {
                Activation::Relu => tape.relu(a)?,
                Activation::Tanh => tape.tanh(a)?,
            };
        }
        let linear = |tape: &mut Tape, x: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            tape.add(y, b)
        };
        let dist = linear(tape, h, vars.dist)?;
        let dir = linear(tape, h, vars.dir)?;
        let orientation = match &vars.orientation {
            Some([l1, l2]) => {
                let o = linear(tape, z, *l1)?;
                let o = tape.relu(o)?;
                Some(linear(tape, o, *l2)?)
            }
            None => None,
        };
        Ok(HeadVars {
            dist,
            dir,
            orientation,
        })
    }
}

impl RegressionField for LocalizationModel {
    fn predict_batch(
        &self,
        poses: &[PoseHypothesis],
        ctx: &VisualContext,
    ) -> Result<Vec<DisplacementDistribution>> {
        self.predict_raw(poses, ctx)?
            .into_iter()
            .map(DisplacementDistribution::from_raw)
            .collect()
    }
}

/// Mean loss terms of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub loss_r: f64,
    pub loss_theta: f64,
    pub loss_gamma: Option<f64>,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.loss_r + self.loss_theta + self.loss_gamma.unwrap_or(0.0)
    }
}

/// Per-sample losses from raw head outputs, with gradients w.r.t. those
/// outputs. Follows the head parameterization used by
/// [`DisplacementDistribution::from_raw`].
pub fn translation_loss_raw(
    dist_raw: [f64; 2],
    dir_raw: [f64; 3],
    target: &DisplacementTarget,
) -> (LossBreakdown, [f64; 2], [f64; 3]) {
    let [a_r, b_r] = dist_raw;
    let [c1, c2, d_k] = dir_raw;
    let (lo, hi) = LOG_VARIANCE_CLAMP;
    let mu_r = softplus(a_r);
    let sigma2 = b_r.clamp(lo, hi).exp();
    let g =
        gaussian_nll_grad(target.r_gt, mu_r, sigma2).expect("positive variance by construction");
    let d_a = g.d_mu_r * sigmoid(a_r);
    let d_b = if b_r > lo && b_r < hi {
        g.d_sigma2_r * sigma2
    } else {
        0.0
    };

    let (loss_theta, d_dir) = match target.theta_gt {
        Some(theta) => {
            let n = norm([c1, c2]);
            let kappa = softplus(d_k);
            let (mu, live) = if n < EPS_MU_THETA {
                ([1.0, 0.0], false)
            } else {
                ([c1 / n, c2 / n], true)
            };
            let a = angmf_grad_unchecked(mu, kappa, theta);
            let (dc1, dc2) = if live {
                // project onto the tangent of the unit circle
                let gm = a.d_mu_theta;
                let along = gm[0] * mu[0] + gm[1] * mu[1];
                ((gm[0] - along * mu[0]) / n, (gm[1] - along * mu[1]) / n)
            } else {
                (0.0, 0.0)
            };
            (a.value, [dc1, dc2, a.d_kappa * sigmoid(d_k)])
        }
        None => (0.0, [0.0; 3]),
    };
    (
        LossBreakdown {
            loss_r: g.value,
            loss_theta,
            loss_gamma: None,
        },
        [d_a, d_b],
        d_dir,
    )
}

/// Mean total loss of a batch as a scalar tape node.
pub fn loss_on_tape(
    tape: &mut Tape,
    heads: &HeadVars,
    samples: &[Sample],
) -> Result<(Var, BatchLoss)> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let inv = 1.0 / b as f64;
    let dist = tape.value(heads.dist).clone();
    let dir = tape.value(heads.dir).clone();
    let mut g_dist = vec![0.0; b * 2];
    let mut g_dir = vec![0.0; b * 3];
    let mut parts = BatchLoss::default();
    for (i, s) in samples.iter().enumerate() {
        let dr = dist.row(i);
        let dd = dir.row(i);
        let (l, ga, gd) = translation_loss_raw([dr[0], dr[1]], [dd[0], dd[1], dd[2]], &s.target);
        if !(l.loss_r.is_finite() && l.loss_theta.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss for sample {i} (scene {})",
                s.scene
            )));
        }
        parts.loss_r += l.loss_r * inv;
        parts.loss_theta += l.loss_theta * inv;
        for k in 0..2 {
            g_dist[2 * i + k] = ga[k] * inv;
        }
        for k in 0..3 {
            g_dir[3 * i + k] = gd[k] * inv;
        }
    }
    let g_dist = Tensor::matrix(b, 2, g_dist)?;
    let g_dir = Tensor::matrix(b, 3, g_dir)?;
    let value = Tensor::scalar(parts.loss_r + parts.loss_theta);
    let mut loss = tape.custom(
        &[heads.dist, heads.dir],
        value,
        Box::new(move |up: &Tensor| {
            let u = up.data()[0];
            vec![g_dist.map(|v| v * u), g_dir.map(|v| v * u)]
        }),
    )?;

    if let Some(o) = heads.orientation {
        let pred = tape.value(o).clone();
        let mut g = vec![0.0; b * 2];
        let mut total = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let target = s.orientation.ok_or_else(|| {
                Error::Contract(format!(
                    "sample {i} lacks an orientation target in 3-DoF mode"
                ))
            })?;
            let p = pred.row(i);
            let og = orientation_loss_grad([p[0], p[1]], target.g_gamma)
                .map_err(|e| Error::Numeric(format!("scene {}: {e}", s.scene)))?;
            total += og.value * inv;
            g[2 * i] = og.d_p[0] * inv;
            g[2 * i + 1] = og.d_p[1] * inv;
        }
        parts.loss_gamma = Some(total);
        let g = Tensor::matrix(b, 2, g)?;
        let lg = tape.custom(
            &[o],
            Tensor::scalar(total),
            Box::new(move |up: &Tensor| vec![g.map(|v| v * up.data()[0])]),
        )?;
        loss = tape.add(loss, lg)?;
    }
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::total_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dim: 8,
                heads: 2,
                coord_dim: 4,
                ..EncoderConfig::default()
            },
            hidden: vec![6, 5],
            activation: Activation::Tanh,
            mode,
        }
    }

    #[test]
    fn fast_path_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = LocalizationModel::init(&small_config(Mode::TwoDof), &mut rng).unwrap();
        let g = TokenGrid::new(
            1,
            3,
            Tensor::matrix(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        )
        .unwrap();
        let s = TokenGrid::new(
            2,
            2,
            Tensor::matrix(4, 8, (0..32).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap(),
        )
        .unwrap();
        let ctx = model.encode(&g, &s).unwrap();
        let poses: Vec<_> = [(0.1, -0.2), (-0.9, 0.5), (1.0, 1.0)]
            .iter()
            .map(|&(x, y)| PoseHypothesis::new(x, y).unwrap())
            .collect();
        let fast = model.predict_raw(&poses, &ctx).unwrap();

        let mut tape = Tape::new();
        let vars = model.on_tape(&mut tape);
        let samples: Vec<_> = poses
            .iter()
            .map(|q| Sample {
                scene: 0,
                q0: *q,
                target: DisplacementTarget::from_displacement([0.1, 0.0]),
                orientation: None,
            })
            .collect();
        let heads = model
            .forward_on_tape(&mut tape, &vars, &[(&g, &s)], &samples)
            .unwrap();
        for (i, row) in fast.iter().enumerate() {
            let d = tape.value(heads.dist).row(i);
            let r = tape.value(heads.dir).row(i);
            for (a, b) in row.iter().zip(d.iter().chain(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raw_loss_matches_composed_loss() {
        let raw_d = [0.3, -0.4];
        let raw_t = [0.2, -0.7, 0.5];
        let target = DisplacementTarget::from_displacement([0.3, -0.1]);
        let (l, _, _) = translation_loss_raw(raw_d, raw_t, &target);
        let dist =
            DisplacementDistribution::from_raw([raw_d[0], raw_d[1], raw_t[0], raw_t[1], raw_t[2]])
                .unwrap();
        let want = total_loss(&dist, &target, None).unwrap();
        assert!((l.total() - want.total()).abs() < 1e-12);
    }

    #[test]
    fn param_views_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = LocalizationModel::init(&small_config(Mode::ThreeDof), &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|(_, _, t)| t.shape().to_vec())
            .collect();
        let mut tape = Tape::new();
        let vars = model.on_tape(&mut tape);
        assert_eq!(vars.leaves.len(), shapes.len());
        for (v, s) in vars.leaves.iter().zip(&shapes) {
            assert_eq!(tape.value(*v).shape(), &s[..]);
        }
        let muts: Vec<Vec<usize>> = model
            .params_mut()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        assert_eq!(muts, shapes);
    }

    #[test]
    fn default_model_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            mode: Mode::ThreeDof,
            ..ModelConfig::default()
        };
        let m = LocalizationModel::init(&cfg, &mut rng).unwrap();
        assert_eq!(m.field.config.input_dim, 144);
        assert_eq!(m.orientation_param_count(), 144 * 64 + 64 + 64 * 2 + 2);
    }
}
