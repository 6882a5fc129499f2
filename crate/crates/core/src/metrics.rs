//! Evaluation statistics and the inference-scaling sweep.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distributions::{dot, Vec2};
use crate::error::{Error, Result};
use crate::irs::{FieldSource, IrsConfig, IrsResult};
use crate::synthenv::{decompose_error, meters, mix64};
use crate::trainer::PreparedScene;

/// `(mean, median)`; the median of an even count averages the two central
/// order statistics.
pub fn summarize(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::Contract(
            "cannot summarize an empty error list".into(),
        ));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / errors.len() as f64;
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok((mean, median))
}

/// Fraction of errors at or below the threshold.
pub fn recall_at(errors: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Validation(format!(
            "recall threshold {threshold} must be > 0"
        )));
    }
    if errors.is_empty() {
        return Ok(0.0);
    }
    Ok(errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64)
}

/// Angle between two unit vectors in degrees, in `[0, 180]`.
pub fn orientation_error_deg(p_hat: Vec2, g: Vec2) -> f64 {
    dot(p_hat, g).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Per-cell IRS seed: `mix64(base ^ mix64(N ^ mix64(R ^ mix64(scene_id))))`.
pub fn cell_seed(base: u64, n_seeds: usize, rounds: usize, scene_id: usize) -> u64 {
    mix64(base ^ mix64(n_seeds as u64 ^ mix64(rounds as u64 ^ mix64(scene_id as u64))))
}

pub const RECALL_THRESHOLDS_M: [f64; 2] = [1.0, 5.0];
pub const ORIENTATION_THRESHOLDS_DEG: [f64; 2] = [1.0, 5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene_id: usize,
    pub estimate: [f64; 2],
    pub q_gt: [f64; 2],
    pub error_m: f64,
    pub lateral_m: f64,
    pub longitudinal_m: f64,
    pub final_spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientation_error_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub thresholds_m: Vec<f64>,
    pub overall: Vec<f64>,
    pub lateral: Vec<f64>,
    pub longitudinal: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationStats {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub thresholds_deg: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_m: f64,
    pub median_m: f64,
    pub recall: RecallTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientation: Option<OrientationStats>,
    pub rows: Vec<SceneRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<SceneRow>) -> Result<Self> {
        let err: Vec<f64> = rows.iter().map(|r| r.error_m).collect();
        let lat: Vec<f64> = rows.iter().map(|r| r.lateral_m).collect();
        let lon: Vec<f64> = rows.iter().map(|r| r.longitudinal_m).collect();
        let (mean_m, median_m) = summarize(&err)?;
        let recall = |v: &[f64]| {
            RECALL_THRESHOLDS_M
                .iter()
                .map(|&t| recall_at(v, t))
                .collect::<Result<Vec<_>>>()
        };
        let recall = RecallTable {
            thresholds_m: RECALL_THRESHOLDS_M.to_vec(),
            overall: recall(&err)?,
            lateral: recall(&lat)?,
            longitudinal: recall(&lon)?,
        };
        let orient: Option<Vec<f64>> = rows.iter().map(|r| r.orientation_error_deg).collect();
        let orientation = match orient {
            Some(o) if !o.is_empty() => {
                let (mean_deg, median_deg) = summarize(&o)?;
                Some(OrientationStats {
                    mean_deg,
                    median_deg,
                    thresholds_deg: ORIENTATION_THRESHOLDS_DEG.to_vec(),
                    recall: ORIENTATION_THRESHOLDS_DEG
                        .iter()
                        .map(|&t| recall_at(&o, t))
                        .collect::<Result<Vec<_>>>()?,
                })
            }
            _ => None,
        };
        Ok(EvalReport {
            mean_m,
            median_m,
            recall,
            orientation,
            rows,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Report row for one finished episode.
pub fn scene_row(scene: &PreparedScene, result: &IrsResult, extent_m: f64) -> Result<SceneRow> {
    let e = result.estimate;
    let err = [e.x - scene.q_gt.x, e.y - scene.q_gt.y];
    let (lateral_m, longitudinal_m) = decompose_error(err, scene.gamma_gt, extent_m)?;
    Ok(SceneRow {
        scene_id: scene.id,
        estimate: e.xy(),
        q_gt: scene.q_gt.xy(),
        error_m: meters(&e, &scene.q_gt, extent_m),
        lateral_m,
        longitudinal_m,
        final_spread: *result
            .spread_per_round
            .last()
            .expect("at least the seed round"),
        orientation_error_deg: result
            .orientation
            .map(|p| orientation_error_deg(p, scene.gamma_gt)),
    })
}

/// Run IRS on every scene and collect the report. Scene `s` is seeded with
/// `cell_seed(base_seed, N, R, s.id)`.
pub fn evaluate(
    source: &FieldSource<'_>,
    scenes: &[PreparedScene],
    config: &IrsConfig,
    base_seed: u64,
    extent_m: f64,
) -> Result<(EvalReport, Vec<IrsResult>)> {
    let mut rows = Vec::with_capacity(scenes.len());
    let mut results = Vec::with_capacity(scenes.len());
    for s in scenes {
        let cfg = IrsConfig {
            rng_seed: cell_seed(base_seed, config.n_seeds, config.rounds, s.id),
            ..config.clone()
        };
        let r = source
            .localize(s, &cfg)
            .map_err(|e| Error::Numeric(format!("scene {}: {e}", s.id)))?;
        rows.push(scene_row(s, &r, extent_m)?);
        results.push(r);
    }
    Ok((EvalReport::from_rows(rows)?, results))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_seeds: usize,
    pub rounds: usize,
    pub wall_ms: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub base_seed: u64,
    pub cells: Vec<SweepCell>,
}

pub const SWEEP_HEADER: &str = "N,R,mean_m,median_m,recall_1m,recall_5m,wall_ms";

impl Sweep {
    pub fn cell(&self, n_seeds: usize, rounds: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.n_seeds == n_seeds && c.rounds == rounds)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{SWEEP_HEADER}")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                c.n_seeds,
                c.rounds,
                c.report.mean_m,
                c.report.median_m,
                c.report.recall.overall[0],
                c.report.recall.overall[1],
                c.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Every `(N, R)` combination, in `ns`-major order. Wall-clock covers scene
/// encoding plus refinement for the whole scene set.
pub fn scaling_sweep(
    source: &FieldSource<'_>,
    scenes: &[PreparedScene],
    ns: &[usize],
    rs: &[usize],
    base: &IrsConfig,
    base_seed: u64,
    extent_m: f64,
) -> Result<Sweep> {
    if ns.is_empty() || rs.is_empty() {
        return Err(Error::Validation(
            "sweep needs non-empty N and R lists".into(),
        ));
    }
    if scenes.is_empty() {
        return Err(Error::Validation("sweep needs at least one scene".into()));
    }
    let mut cells = Vec::with_capacity(ns.len() * rs.len());
    for &n in ns {
        for &r in rs {
            let cfg = IrsConfig {
                n_seeds: n,
                rounds: r,
                ..base.clone()
            };
            cfg.validate()?;
            let start = Instant::now();
            let (report, _) = evaluate(source, scenes, &cfg, base_seed, extent_m)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            cells.push(SweepCell {
                n_seeds: n,
                rounds: r,
                wall_ms,
                report,
            });
        }
    }
    Ok(Sweep { base_seed, cells })
}

/// Whether `values` never rises by more than `band` (relative) from one
/// entry to the next.
pub fn non_increasing_within(values: &[f64], band: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] * (1.0 + band))
}
