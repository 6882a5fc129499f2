//! Regression fields mapping a hypothesis (and scene context) to a predicted
//! displacement distribution, and the single refinement step that applies the
//! predicted mean displacement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Tensor};
use crate::distributions::{norm, DisplacementDistribution, Vec2, EPS_DIR};
use crate::encoder::VisualContext;
use crate::error::{Error, Result};
use crate::synthenv::split_seed;

/// Location in normalized map coordinates, optionally with a heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseHypothesis {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec2>,
}

impl PoseHypothesis {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let q = PoseHypothesis { x, y, gamma: None };
        q.check_range()?;
        Ok(q)
    }

    pub fn with_gamma(mut self, gamma: Vec2) -> Result<Self> {
        if (norm(gamma) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "heading norm {} is not 1",
                norm(gamma)
            )));
        }
        self.gamma = Some(gamma);
        Ok(self)
    }

    /// Componentwise clamp into the map.
    pub fn clamped(x: f64, y: f64) -> Self {
        PoseHypothesis {
            x: x.clamp(-1.0, 1.0),
            y: y.clamp(-1.0, 1.0),
            gamma: None,
        }
    }

    pub fn check_range(&self) -> Result<()> {
        let ok = |v: f64| (-1.0..=1.0).contains(&v);
        if !ok(self.x) || !ok(self.y) {
            return Err(Error::Contract(format!(
                "hypothesis ({}, {}) outside [-1, 1]^2",
                self.x, self.y
            )));
        }
        Ok(())
    }

    pub fn xy(&self) -> Vec2 {
        [self.x, self.y]
    }

    pub fn distance(&self, other: &PoseHypothesis) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// `q0 + mu_r * mu_theta / |mu_theta|`, clamped to the map.
pub fn refine_step(q0: &PoseHypothesis, dist: &DisplacementDistribution) -> PoseHypothesis {
    let n = norm(dist.mu_theta);
    let (dx, dy) = if n > 0.0 {
        (
            dist.mu_r * dist.mu_theta[0] / n,
            dist.mu_r * dist.mu_theta[1] / n,
        )
    } else {
        (0.0, 0.0)
    };
    let mut q = PoseHypothesis::clamped(q0.x + dx, q0.y + dy);
    q.gamma = q0.gamma;
    q
}

/// A field `v(q0, f_vis)`. Implementations must be pure functions of their
/// inputs so that refinement can run seeds in any order.
pub trait RegressionField: Sync {
    fn predict_batch(
        &self,
        poses: &[PoseHypothesis],
        ctx: &VisualContext,
    ) -> Result<Vec<DisplacementDistribution>>;

    fn predict(
        &self,
        q0: &PoseHypothesis,
        ctx: &VisualContext,
    ) -> Result<DisplacementDistribution> {
        Ok(self.predict_batch(std::slice::from_ref(q0), ctx)?[0])
    }
}

/// Analytic stand-in for a learned field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFieldSpec {
    pub target: PoseHypothesis,
    /// Fraction of the remaining distance covered per step, in `(0, 1]`.
    pub alpha: f64,
    /// Radians.
    pub direction_noise_std: f64,
    /// Normalized map units.
    pub distance_noise_std: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl OracleFieldSpec {
    pub fn exact(target: PoseHypothesis) -> Self {
        OracleFieldSpec {
            target,
            alpha: 1.0,
            direction_noise_std: 0.0,
            distance_noise_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.check_range()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Validation(format!(
                "oracle alpha {} not in (0, 1]",
                self.alpha
            )));
        }
        if !(self.direction_noise_std >= 0.0 && self.distance_noise_std >= 0.0) {
            return Err(Error::Validation("oracle noise std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Cosine components of a smooth random field.
const NOISE_COMPONENTS: usize = 16;
/// Standard deviation of the component frequencies, radians per map unit.
const NOISE_FREQUENCY: f64 = 6.0;

/// Zero-mean, unit-variance random field over the map: a sum of random
/// cosines. Continuous in the pose, so nearby hypotheses see nearby noise.
#[derive(Clone, Debug)]
struct SmoothNoise {
    components: Vec<([f64; 2], f64)>,
}

impl SmoothNoise {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, NOISE_FREQUENCY).expect("positive std");
        let components = (0..NOISE_COMPONENTS)
            .map(|_| {
                let w = [n.sample(&mut rng), n.sample(&mut rng)];
                (w, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        SmoothNoise { components }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let amp = (2.0 / self.components.len() as f64).sqrt();
        amp * self
            .components
            .iter()
            .map(|(w, phase)| (w[0] * x + w[1] * y + phase).cos())
            .sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct OracleField {
    spec: OracleFieldSpec,
    distance_noise: SmoothNoise,
    direction_noise: SmoothNoise,
}

impl OracleField {
    pub fn new(spec: OracleFieldSpec) -> Result<Self> {
        spec.validate()?;
        Ok(OracleField {
            spec,
            distance_noise: SmoothNoise::new(split_seed(spec.noise_seed, 0)),
            direction_noise: SmoothNoise::new(split_seed(spec.noise_seed, 1)),
        })
    }

    pub fn spec(&self) -> &OracleFieldSpec {
        &self.spec
    }

    fn predict_one(&self, q0: &PoseHypothesis) -> Result<DisplacementDistribution> {
        q0.check_range()?;
        let s = &self.spec;
        let u = [s.target.x - q0.x, s.target.y - q0.y];
        let r = norm(u);
        let sigma2 = (s.distance_noise_std * s.distance_noise_std).max(1e-12);
        let kappa = 1.0 / (s.direction_noise_std * s.direction_noise_std).max(1e-6);
        if r < EPS_DIR {
            return DisplacementDistribution::new(0.0, sigma2, [1.0, 0.0], kappa);
        }
        let mut noise_r = 0.0;
        let mut noise_theta = 0.0;
        if s.distance_noise_std > 0.0 {
            noise_r = s.distance_noise_std * self.distance_noise.at(q0.x, q0.y);
        }
        if s.direction_noise_std > 0.0 {
            noise_theta = s.direction_noise_std * self.direction_noise.at(q0.x, q0.y);
        }
        let base = u[1].atan2(u[0]) + noise_theta;
        let mu_r = (s.alpha * r + noise_r).max(0.0);
        DisplacementDistribution::new(mu_r, sigma2, [base.cos(), base.sin()], kappa)
    }
}

impl RegressionField for OracleField {
    fn predict_batch(
        &self,
        poses: &[PoseHypothesis],
        _ctx: &VisualContext,
    ) -> Result<Vec<DisplacementDistribution>> {
        poses.iter().map(|q| self.predict_one(q)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            w: Tensor::matrix(fan_in, fan_out, w).expect("layer shape"),
            b: Tensor::vector(b),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Rows of `x` (`[rows, fan_in]`, row-major) through the layer.
    pub fn forward_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (k, n) = (self.fan_in(), self.fan_out());
        debug_assert_eq!(x.len(), rows * k);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.b.data());
        }
        gemm(
            rows,
            k,
            n,
            1.0,
            (x, k as isize, 1),
            (self.w.data(), n as isize, 1),
            1.0,
            (&mut out, n as isize, 1),
        );
        out
    }
}

/// Architecture of the regression MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Width of the joint input `z`.
    pub input_dim: usize,
    /// Trunk widths, e.g. `[256, 256]`.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Hidden width of the orientation head; `None` disables it.
    pub orientation_hidden: Option<usize>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            input_dim: 144,
            hidden: vec![256, 256],
            activation: Activation::Relu,
            orientation_hidden: None,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Validation(format!(
                "field needs positive input and hidden widths, got {} and {:?}",
                self.input_dim, self.hidden
            )));
        }
        if self.orientation_hidden == Some(0) {
            return Err(Error::Validation(
                "orientation hidden width must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Trunk, distance head `(a_r, b_r)`, direction head `(c1, c2, d_kappa)` and
/// the optional orientation head fed directly from `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpFieldParams {
    pub config: FieldConfig,
    pub trunk: Vec<Linear>,
    pub dist_head: Linear,
    pub dir_head: Linear,
    pub orientation: Option<[Linear; 2]>,
}

impl MlpFieldParams {
    pub fn init(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut trunk = Vec::with_capacity(config.hidden.len());
        let mut width = config.input_dim;
        for &h in &config.hidden {
            trunk.push(Linear::init(width, h, rng));
            width = h;
        }
        let dist_head = Linear::init(width, 2, rng);
        let dir_head = Linear::init(width, 3, rng);
        let orientation = config.orientation_hidden.map(|h| {
            [
                Linear::init(config.input_dim, h, rng),
                Linear::init(h, 2, rng),
            ]
        });
        Ok(MlpFieldParams {
            config,
            trunk,
            dist_head,
            dir_head,
            orientation,
        })
    }

    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let mut width = config.input_dim;
        let trunk = config
            .hidden
            .iter()
            .map(|&h| {
                let l = Linear::zeros(width, h);
                width = h;
                l
            })
            .collect();
        let orientation = config
            .orientation_hidden
            .map(|h| [Linear::zeros(config.input_dim, h), Linear::zeros(h, 2)]);
        Ok(MlpFieldParams {
            trunk,
            dist_head: Linear::zeros(width, 2),
            dir_head: Linear::zeros(width, 3),
            orientation,
            config,
        })
    }

    pub fn translation_param_count(&self) -> usize {
        self.trunk.iter().map(Linear::param_count).sum::<usize>()
            + self.dist_head.param_count()
            + self.dir_head.param_count()
    }

    pub fn orientation_param_count(&self) -> usize {
        self.orientation
            .as_ref()
            .map_or(0, |[a, b]| a.param_count() + b.param_count())
    }

    /// Trunk activations for rows whose first-layer pre-activation is given.
    pub(crate) fn trunk_from_first(&self, mut h: Vec<f64>, rows: usize) -> Vec<f64> {
        let act = self.config.activation;
        h.iter_mut().for_each(|v| *v = act.apply(*v));
        for layer in &self.trunk[1..] {
            h = layer.forward_rows(&h, rows);
            h.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        h
    }

    /// Raw head outputs `(a_r, b_r, c1, c2, d_kappa)` per row of trunk output.
    pub(crate) fn heads(&self, h: &[f64], rows: usize) -> Vec<[f64; 5]> {
        let r = self.dist_head.forward_rows(h, rows);
        let d = self.dir_head.forward_rows(h, rows);
        (0..rows)
            .map(|i| [r[2 * i], r[2 * i + 1], d[3 * i], d[3 * i + 1], d[3 * i + 2]])
            .collect()
    }

    /// Raw head outputs for full joint vectors `z` (`[rows, input_dim]`).
    pub fn forward_raw(&self, z: &[f64], rows: usize) -> Result<Vec<[f64; 5]>> {
        if z.len() != rows * self.config.input_dim {
            return Err(Error::Dimension(format!(
                "expected {} x {} inputs, got {} values",
                rows,
                self.config.input_dim,
                z.len()
            )));
        }
        let h = self.trunk[0].forward_rows(z, rows);
        let h = self.trunk_from_first(h, rows);
        let out = self.heads(&h, rows);
        for (i, row) in out.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite head output for row {i} (layer {})",
                    self.trunk.len()
                )));
            }
        }
        Ok(out)
    }

    /// Unnormalized `(cos, sin)` prediction of the orientation head.
    pub fn predict_orientation(&self, z: &[f64]) -> Result<Vec2> {
        let [l1, l2] = self.orientation.as_ref().ok_or_else(|| {
            Error::Unsupported("orientation head is disabled (2-DoF model)".into())
        })?;
        if z.len() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "orientation head expects {} inputs, got {}",
                self.config.input_dim,
                z.len()
            )));
        }
        let mut h = l1.forward_rows(z, 1);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let p = l2.forward_rows(&h, 1);
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Numeric("non-finite orientation output".into()));
        }
        Ok([p[0], p[1]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ctx() -> VisualContext {
        VisualContext::from_vec(vec![0.0; 4]).unwrap()
    }

    #[test]
    fn refine_step_cases() {
        let q0 = PoseHypothesis::new(0.0, 0.0).unwrap();
        let d = DisplacementDistribution::new(1.0, 1.0, [1.0, 0.0], 1.0).unwrap();
        assert_eq!(refine_step(&q0, &d).xy(), [1.0, 0.0]);

        let still = DisplacementDistribution::new(0.0, 1.0, [0.6, 0.8], 1.0).unwrap();
        let q = PoseHypothesis::new(0.2, -0.3).unwrap();
        assert_eq!(refine_step(&q, &still).xy(), q.xy());

        let q = PoseHypothesis::new(0.9, 0.0).unwrap();
        let d = DisplacementDistribution::new(0.5, 1.0, [1.0, 0.0], 1.0).unwrap();
        assert_eq!(refine_step(&q, &d).xy(), [1.0, 0.0]);
    }

    #[test]
    fn exact_oracle_hits_target_in_one_step() {
        let target = PoseHypothesis::new(0.3, -0.55).unwrap();
        let field = OracleField::new(OracleFieldSpec::exact(target)).unwrap();
        let q0 = PoseHypothesis::new(-0.8, 0.9).unwrap();
        let d = field.predict(&q0, &ctx()).unwrap();
        assert_relative_eq!(d.mu_r, q0.distance(&target), epsilon = 1e-15);
        assert!(d.kappa >= 1e5 && d.sigma2_r <= 1e-12);
        let q1 = refine_step(&q0, &d);
        assert_relative_eq!(q1.x, target.x, epsilon = 1e-12);
        assert_relative_eq!(q1.y, target.y, epsilon = 1e-12);

        let at = field.predict(&target, &ctx()).unwrap();
        assert_eq!(at.mu_r, 0.0);
        assert_eq!(at.mu_theta, [1.0, 0.0]);
    }

    #[test]
    fn oracle_contracts_by_alpha() {
        let target = PoseHypothesis::new(0.1, 0.2).unwrap();
        let field = OracleField::new(OracleFieldSpec {
            alpha: 0.5,
            ..OracleFieldSpec::exact(target)
        })
        .unwrap();
        let mut q = PoseHypothesis::new(-0.7, 0.8).unwrap();
        let d0 = q.distance(&target);
        for k in 1..=6 {
            q = refine_step(&q, &field.predict(&q, &ctx()).unwrap());
            assert!((q.distance(&target) - d0 * 0.5f64.powi(k)).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_oracle_is_deterministic() {
        let target = PoseHypothesis::new(0.1, 0.2).unwrap();
        let field = OracleField::new(OracleFieldSpec {
            alpha: 0.8,
            direction_noise_std: 0.2,
            distance_noise_std: 0.05,
            noise_seed: 9,
            target,
        })
        .unwrap();
        let q = PoseHypothesis::new(-0.3, 0.4).unwrap();
        assert_eq!(
            field.predict(&q, &ctx()).unwrap(),
            field.predict(&q, &ctx()).unwrap()
        );
        // continuous in the pose
        let near = PoseHypothesis::new(-0.3 + 1e-12, 0.4).unwrap();
        let (a, b) = (
            field.predict(&q, &ctx()).unwrap(),
            field.predict(&near, &ctx()).unwrap(),
        );
        assert!((a.mu_r - b.mu_r).abs() < 1e-9);
        assert!((a.mu_theta[0] - b.mu_theta[0]).abs() < 1e-9);
    }

    #[test]
    fn smooth_noise_moments() {
        // averaged over many seeds the field is zero-mean with unit variance
        let q = (0.37, -0.61);
        let samples: Vec<f64> = (0..4000)
            .map(|s| SmoothNoise::new(s).at(q.0, q.1))
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        assert!(mean.abs() < 0.06, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn oracle_validation() {
        let t = PoseHypothesis::new(0.0, 0.0).unwrap();
        assert!(OracleField::new(OracleFieldSpec {
            alpha: 0.0,
            ..OracleFieldSpec::exact(t)
        })
        .is_err());
        assert!(OracleField::new(OracleFieldSpec {
            alpha: 1.5,
            ..OracleFieldSpec::exact(t)
        })
        .is_err());
    }

    #[test]
    fn zero_orientation_head_is_degenerate() {
        let cfg = FieldConfig {
            orientation_hidden: Some(64),
            ..FieldConfig::default()
        };
        let p = MlpFieldParams::zeros(cfg).unwrap();
        let out = p.predict_orientation(&[0.5; 144]).unwrap();
        assert_eq!(out, [0.0, 0.0]);
        assert!(crate::distributions::orientation_loss(out, [1.0, 0.0]).is_err());
    }

    #[test]
    fn orientation_head_requires_3dof() {
        let p = MlpFieldParams::zeros(FieldConfig::default()).unwrap();
        assert!(matches!(
            p.predict_orientation(&[0.0; 144]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn pose_range() {
        assert!(PoseHypothesis::new(1.0, -1.0).is_ok());
        assert!(PoseHypothesis::new(1.0 + 1e-12, 0.0).is_err());
        assert!(PoseHypothesis::new(0.0, 0.0)
            .unwrap()
            .with_gamma([1.0, 1.0])
            .is_err());
    }
}
