//! Iterative refinement sampling: draw a population of seeds from a prior,
//! move every seed along the predicted mean displacement for a fixed number
//! of synchronous rounds and report the population mean.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{norm, normalize_direction, DisplacementDistribution, Vec2, EPS_NORM};
use crate::encoder::{TokenGrid, VisualContext};
use crate::error::{Error, Result};
use crate::field::{refine_step, OracleField, OracleFieldSpec, PoseHypothesis, RegressionField};
use crate::model::LocalizationModel;
use crate::synthenv::split_seed;
use crate::trainer::PreparedScene;

/// Axis-aligned region of the map seeds are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Prior {
    pub const FULL_MAP: Prior = Prior {
        x_min: -1.0,
        x_max: 1.0,
        y_min: -1.0,
        y_max: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (-1.0..=1.0).contains(&v);
        if ![self.x_min, self.x_max, self.y_min, self.y_max]
            .into_iter()
            .all(inside)
        {
            return Err(Error::Validation(format!(
                "prior {self:?} leaves the map [-1, 1]^2"
            )));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::Validation(format!(
                "prior {self:?} has inverted bounds"
            )));
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        self.x_min == self.x_max || self.y_min == self.y_max
    }
}

impl Default for Prior {
    fn default() -> Self {
        Prior::FULL_MAP
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrsConfig {
    pub n_seeds: usize,
    pub rounds: usize,
    pub prior: Prior,
    pub rng_seed: u64,
    /// Evaluate seeds of a round on the rayon pool.
    pub parallel: bool,
    /// Keep only the first and last pose of every trajectory.
    pub lean: bool,
}

impl Default for IrsConfig {
    fn default() -> Self {
        IrsConfig {
            n_seeds: 10,
            rounds: 5,
            prior: Prior::FULL_MAP,
            rng_seed: 0,
            parallel: false,
            lean: false,
        }
    }
}

impl IrsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Validation("IRS needs at least one seed".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Validation("IRS needs at least one round".into()));
        }
        self.prior.validate()
    }
}

/// `n_seeds` i.i.d. uniform draws from the prior. Each seed consumes two
/// uniforms from a ChaCha8 stream keyed by `rng_seed`: first `x`, then `y`.
pub fn sample_seeds(config: &IrsConfig) -> Result<Vec<PoseHypothesis>> {
    config.validate()?;
    let p = config.prior;
    if p.is_degenerate() {
        log::warn!("IRS prior {p:?} has zero area; seeds collapse onto its corner");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    Ok((0..config.n_seeds)
        .map(|_| {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            PoseHypothesis::clamped(
                p.x_min + (p.x_max - p.x_min) * u,
                p.y_min + (p.y_max - p.y_min) * v,
            )
        })
        .collect())
}

/// Sum in ascending order, so the result does not depend on input order.
pub fn ordered_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Mean of `values` shifted by their minimum: independent of order, and exact
/// when all values agree.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let n = values.clone().count() as f64;
    lo + ordered_sum(values.map(|v| v - lo)) / n
}

/// Componentwise mean; independent of pose order.
pub fn mean_pose(poses: &[PoseHypothesis]) -> Result<PoseHypothesis> {
    if poses.is_empty() {
        return Err(Error::Contract("mean of an empty population".into()));
    }
    let x = shifted_mean(poses.iter().map(|p| p.x));
    let y = shifted_mean(poses.iter().map(|p| p.y));
    Ok(PoseHypothesis::clamped(x, y))
}

/// Root-mean-square distance of the poses from their mean.
pub fn population_spread(poses: &[PoseHypothesis]) -> Result<f64> {
    let m = mean_pose(poses)?;
    let ss = ordered_sum(
        poses
            .iter()
            .map(|p| (p.x - m.x).powi(2) + (p.y - m.y).powi(2)),
    );
    Ok((ss / poses.len() as f64).sqrt())
}

/// Weiszfeld iteration for the geometric median. Reported only.
pub fn geometric_median(poses: &[PoseHypothesis]) -> Result<PoseHypothesis> {
    let mut m = mean_pose(poses)?;
    for _ in 0..200 {
        let (mut wx, mut wy, mut ws) = (0.0, 0.0, 0.0);
        for p in poses {
            let d = p.distance(&m);
            if d < 1e-12 {
                return Ok(m);
            }
            wx += p.x / d;
            wy += p.y / d;
            ws += 1.0 / d;
        }
        let next = PoseHypothesis::clamped(wx / ws, wy / ws);
        let moved = next.distance(&m);
        m = next;
        if moved < 1e-12 {
            break;
        }
    }
    Ok(m)
}

/// Prediction made at one pose of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub mu_r: f64,
    pub kappa: f64,
    pub sigma2: f64,
}

impl From<&DisplacementDistribution> for SeedDiagnostics {
    fn from(d: &DisplacementDistribution) -> Self {
        SeedDiagnostics {
            mu_r: d.mu_r,
            kappa: d.kappa,
            sigma2: d.sigma2_r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrsResult {
    pub estimate: PoseHypothesis,
    /// `trajectories[i][k]` is seed `i` after round `k` (round 0 is the seed).
    /// Lean runs keep rounds 0 and R only.
    pub trajectories: Vec<Vec<PoseHypothesis>>,
    /// Rounds stored in each trajectory.
    pub stored_rounds: Vec<usize>,
    /// Prediction made at each stored pose except the last round's.
    pub diagnostics: Vec<Vec<SeedDiagnostics>>,
    /// Population spread after each round `0..=R`.
    pub spread_per_round: Vec<f64>,
    pub geometric_median: PoseHypothesis,
    /// Unit heading predicted at the estimate (3-DoF models).
    pub orientation: Option<Vec2>,
    pub context_eval_count: usize,
    pub config: IrsConfig,
}

fn predict_round<F: RegressionField + ?Sized>(
    field: &F,
    poses: &[PoseHypothesis],
    ctx: &VisualContext,
    parallel: bool,
) -> Result<Vec<DisplacementDistribution>> {
    if !parallel {
        return field.predict_batch(poses, ctx);
    }
    let chunk = poses
        .len()
        .div_ceil(rayon::current_num_threads().max(1))
        .max(1);
    let parts: Vec<Result<Vec<DisplacementDistribution>>> = poses
        .par_chunks(chunk)
        .map(|c| field.predict_batch(c, ctx))
        .collect();
    let mut out = Vec::with_capacity(poses.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn locate_fault<F: RegressionField + ?Sized>(
    field: &F,
    poses: &[PoseHypothesis],
    ctx: &VisualContext,
    round: usize,
    err: Error,
) -> Error {
    for (i, q) in poses.iter().enumerate() {
        if let Err(e) = field.predict(q, ctx) {
            return Error::Numeric(format!("seed {i}, round {round}: {e}"));
        }
    }
    Error::Numeric(format!("round {round}: {err}"))
}

/// Refine seeds drawn from `config.prior` against a precomputed context.
pub fn run_irs<F: RegressionField + ?Sized>(
    field: &F,
    ctx: &VisualContext,
    config: &IrsConfig,
) -> Result<IrsResult> {
    let seeds = sample_seeds(config)?;
    run_irs_from(field, ctx, config, seeds)
}

/// Refine an explicit seed population. Round `k` reads only round `k - 1`.
pub fn run_irs_from<F: RegressionField + ?Sized>(
    field: &F,
    ctx: &VisualContext,
    config: &IrsConfig,
    seeds: Vec<PoseHypothesis>,
) -> Result<IrsResult> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::Contract("empty seed population".into()));
    }
    let n = seeds.len();
    let keep = |k: usize| !config.lean || k == 0 || k == config.rounds;
    let mut trajectories: Vec<Vec<PoseHypothesis>> = seeds.iter().map(|q| vec![*q]).collect();
    let mut diagnostics: Vec<Vec<SeedDiagnostics>> = vec![Vec::new(); n];
    let mut stored_rounds = vec![0];
    let mut spread = vec![population_spread(&seeds)?];
    let mut current = seeds;
    for k in 1..=config.rounds {
        let dists = predict_round(field, &current, ctx, config.parallel)
            .map_err(|e| locate_fault(field, &current, ctx, k - 1, e))?;
        let next: Vec<PoseHypothesis> = current
            .iter()
            .zip(&dists)
            .map(|(q, d)| refine_step(q, d))
            .collect();
        if keep(k - 1) {
            for (diag, d) in diagnostics.iter_mut().zip(&dists) {
                diag.push(d.into());
            }
        }
        if keep(k) {
            for (t, q) in trajectories.iter_mut().zip(&next) {
                t.push(*q);
            }
            stored_rounds.push(k);
        }
        spread.push(population_spread(&next)?);
        current = next;
    }
    Ok(IrsResult {
        estimate: mean_pose(&current)?,
        geometric_median: geometric_median(&current)?,
        trajectories,
        stored_rounds,
        diagnostics,
        spread_per_round: spread,
        orientation: None,
        context_eval_count: 1,
        config: config.clone(),
    })
}

/// A model that can encode a scene and, optionally, predict heading.
pub trait SceneModel: RegressionField {
    fn encode(&self, ground: &TokenGrid, satellite: &TokenGrid) -> Result<VisualContext>;

    fn orientation(&self, _q: &PoseHypothesis, _ctx: &VisualContext) -> Result<Option<Vec2>> {
        Ok(None)
    }
}

impl SceneModel for LocalizationModel {
    fn encode(&self, ground: &TokenGrid, satellite: &TokenGrid) -> Result<VisualContext> {
        LocalizationModel::encode(self, ground, satellite)
    }

    fn orientation(&self, q: &PoseHypothesis, ctx: &VisualContext) -> Result<Option<Vec2>> {
        if self.field.orientation.is_none() {
            return Ok(None);
        }
        let p = self.predict_orientation(q, ctx)?;
        if norm(p) <= EPS_NORM {
            return Err(Error::Numeric(
                "degenerate orientation prediction at the estimate".into(),
            ));
        }
        Ok(Some(normalize_direction(p)))
    }
}

/// Counts encoder invocations during one inference episode.
pub struct CountingEncoder<'a, M: ?Sized> {
    model: &'a M,
    count: AtomicUsize,
}

impl<'a, M: SceneModel + ?Sized> CountingEncoder<'a, M> {
    pub fn new(model: &'a M) -> Self {
        CountingEncoder {
            model,
            count: AtomicUsize::new(0),
        }
    }

    pub fn encode(&self, ground: &TokenGrid, satellite: &TokenGrid) -> Result<VisualContext> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.model.encode(ground, satellite)
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

/// Full inference for one scene: encode once, refine, predict heading at the
/// estimate. Grids must already carry positional encoding.
pub fn localize<M: SceneModel + ?Sized>(
    model: &M,
    ground: &TokenGrid,
    satellite: &TokenGrid,
    config: &IrsConfig,
) -> Result<IrsResult> {
    let encoder = CountingEncoder::new(model);
    let ctx = encoder.encode(ground, satellite)?;
    let mut result = run_irs(model, &ctx, config)?;
    result.orientation = model.orientation(&result.estimate, &ctx)?;
    result.context_eval_count = encoder.count();
    Ok(result)
}

/// Analytic field parameters applied per scene, targeting its true pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTemplate {
    pub alpha: f64,
    pub direction_noise_std: f64,
    pub distance_noise_std: f64,
    pub noise_seed: u64,
}

impl OracleTemplate {
    pub fn exact() -> Self {
        OracleTemplate {
            alpha: 1.0,
            direction_noise_std: 0.0,
            distance_noise_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn for_target(&self, target: PoseHypothesis, scene_id: usize) -> OracleFieldSpec {
        OracleFieldSpec {
            target: PoseHypothesis::clamped(target.x, target.y),
            alpha: self.alpha,
            direction_noise_std: self.direction_noise_std,
            distance_noise_std: self.distance_noise_std,
            noise_seed: split_seed(self.noise_seed, scene_id as u64),
        }
    }
}

/// Where displacement predictions come from during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum FieldSource<'a> {
    Model(&'a LocalizationModel),
    Oracle(OracleTemplate),
}

impl FieldSource<'_> {
    /// Run one inference episode on a scene.
    pub fn localize(&self, scene: &PreparedScene, config: &IrsConfig) -> Result<IrsResult> {
        match self {
            FieldSource::Model(m) => localize(*m, &scene.ground, &scene.satellite, config),
            FieldSource::Oracle(t) => {
                let field = OracleField::new(t.for_target(scene.q_gt, scene.id))?;
                // the oracle ignores the context; one trivial evaluation
                let ctx = VisualContext::from_vec(vec![0.0])?;
                run_irs(&field, &ctx, config)
            }
        }
    }

    pub fn has_orientation(&self) -> bool {
        matches!(self, FieldSource::Model(m) if m.field.orientation.is_some())
    }
}

pub const TRAJECTORY_HEADER: &str = "scene_id,seed,round,x,y,mu_r,kappa,sigma2";

/// One CSV row per stored `(seed, round)`; the prediction columns are empty
/// for the final round, where no prediction is made.
pub fn write_trajectory_rows(
    out: &mut impl Write,
    scene_id: usize,
    result: &IrsResult,
) -> std::io::Result<()> {
    for (i, (traj, diag)) in result
        .trajectories
        .iter()
        .zip(&result.diagnostics)
        .enumerate()
    {
        for (j, (q, round)) in traj.iter().zip(&result.stored_rounds).enumerate() {
            match diag.get(j) {
                Some(d) => writeln!(
                    out,
                    "{scene_id},{i},{round},{},{},{},{},{}",
                    q.x, q.y, d.mu_r, d.kappa, d.sigma2
                )?,
                None => writeln!(out, "{scene_id},{i},{round},{},{},,,", q.x, q.y)?,
            }
        }
    }
    Ok(())
}

/// Compact JSON summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrsSummary {
    pub estimate: PoseHypothesis,
    pub spread_per_round: Vec<f64>,
    pub config: IrsConfig,
    pub context_eval_count: usize,
    pub geometric_median: PoseHypothesis,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Vec2>,
}

impl From<&IrsResult> for IrsSummary {
    fn from(r: &IrsResult) -> Self {
        IrsSummary {
            estimate: r.estimate,
            spread_per_round: r.spread_per_round.clone(),
            config: r.config.clone(),
            context_eval_count: r.context_eval_count,
            geometric_median: r.geometric_median,
            orientation: r.orientation,
        }
    }
}
