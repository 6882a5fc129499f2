//! Synthetic scenes: a satellite token grid carrying landmark signatures and a
//! ground-view token set summarizing the landmarks visible from the true pose.
//!
//! Landmarks sit at satellite cell centres. Each ground token covers one
//! bearing sector around the camera and holds the distance-weighted sum of the
//! signatures of landmarks in that sector. In 3-DoF mode sectors are measured
//! relative to the heading and landmarks behind the camera fade out, so the
//! heading is recoverable from which sector sees which landmark.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distributions::{norm, Vec2};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::field::PoseHypothesis;
use crate::model::Mode;

/// Meters spanned by the normalized range `[-1, 1]`.
pub const DEFAULT_EXTENT_M: f64 = 100.0;
/// Smaller aerial patch preset.
pub const COMPACT_EXTENT_M: f64 = 70.0;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub sat_height: usize,
    pub sat_width: usize,
    /// Ground tokens, one per bearing sector.
    pub ground_tokens: usize,
    pub dim: usize,
    /// Landmarks placed on distinct satellite cells.
    pub landmarks: usize,
    /// Landmark signature norm relative to unit-norm clutter on empty cells.
    pub signal_to_distractor: f64,
    /// Fraction of landmarks sharing a signature with their point-mirrored
    /// partner, which also scales the ground-view noise.
    pub ambiguity: f64,
    /// Ground-view noise std per channel at ambiguity 1.
    pub ground_noise: f64,
    /// Signature weight decays as `exp(-d / decay_length)`, normalized units.
    pub decay_length: f64,
    /// Keep `q_gt` this far inside the map border.
    pub margin: f64,
    pub map_extent_m: f64,
    pub mode: Mode,
    pub scenes: usize,
    pub rng_seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            sat_height: 8,
            sat_width: 8,
            ground_tokens: 8,
            dim: 128,
            landmarks: 64,
            signal_to_distractor: 16.0,
            ambiguity: 0.0,
            ground_noise: 1.0,
            decay_length: 0.25,
            margin: 0.0,
            map_extent_m: DEFAULT_EXTENT_M,
            mode: Mode::TwoDof,
            scenes: 200,
            rng_seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.sat_height * self.sat_width;
        if self.sat_height == 0 || self.sat_width == 0 || self.ground_tokens == 0 || self.dim == 0 {
            return Err(Error::Validation("grid sizes and dim must be >= 1".into()));
        }
        if self.landmarks == 0 {
            return Err(Error::Validation(
                "at least one landmark is required".into(),
            ));
        }
        if self.landmarks > cells {
            return Err(Error::Validation(format!(
                "infeasible config: {} landmarks do not fit on {cells} satellite cells",
                self.landmarks
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Validation(format!(
                "ambiguity {} not in [0, 1]",
                self.ambiguity
            )));
        }
        if !(self.signal_to_distractor > 0.0 && self.decay_length > 0.0 && self.map_extent_m > 0.0)
        {
            return Err(Error::Validation(
                "signal_to_distractor, decay_length and map_extent_m must be > 0".into(),
            ));
        }
        if !(self.ground_noise >= 0.0) {
            return Err(Error::Validation("ground_noise must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Validation(format!(
                "margin {} not in [0, 1)",
                self.margin
            )));
        }
        Ok(())
    }

    /// Seed of scene `index`.
    pub fn scene_seed(&self, index: usize) -> u64 {
        split_seed(self.rng_seed, index as u64)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of `base`: `mix64(base ^ mix64(index + 1))`.
pub fn split_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_add(1)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub cell: usize,
    pub position: Vec2,
    pub signature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: usize,
    pub seed: u64,
    /// Raw ground tokens, `1 x ground_tokens` grid.
    pub ground: TokenGrid,
    /// Raw satellite tokens.
    pub satellite: TokenGrid,
    pub q_gt: PoseHypothesis,
    pub gamma_gt: Vec2,
    pub map_extent_m: f64,
    pub landmarks: Vec<Landmark>,
}

impl SyntheticScene {
    /// Both grids with positional encoding added, ready for the encoder.
    pub fn encoder_inputs(&self) -> Result<(TokenGrid, TokenGrid)> {
        Ok((
            self.ground.with_positional_encoding()?,
            self.satellite.with_positional_encoding()?,
        ))
    }

    pub fn heading_deg(&self) -> f64 {
        self.gamma_gt[1].atan2(self.gamma_gt[0]).to_degrees()
    }
}

/// Centre of satellite cell `(row, col)`; rows grow with `y`, columns with `x`.
pub fn cell_center(row: usize, col: usize, height: usize, width: usize) -> Vec2 {
    [
        -1.0 + (col as f64 + 0.5) * 2.0 / width as f64,
        -1.0 + (row as f64 + 0.5) * 2.0 / height as f64,
    ]
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Weight of a landmark at `offset` from the camera in sector `k`.
fn sector_weight(offset: Vec2, k: usize, sectors: usize, heading: Option<Vec2>, decay: f64) -> f64 {
    let d = norm(offset);
    let w = (-d / decay).exp();
    if d < 1e-12 {
        // a landmark under the camera is seen by every sector
        return w;
    }
    let mut bearing = offset[1].atan2(offset[0]);
    let mut gate = 1.0;
    if let Some(h) = heading {
        let hb = h[1].atan2(h[0]);
        bearing -= hb;
        gate = 0.5 * (1.0 + bearing.cos());
    }
    let sector = (bearing.rem_euclid(2.0 * PI) / (2.0 * PI / sectors as f64)).floor() as usize;
    if sector.min(sectors - 1) == k {
        w * gate
    } else {
        0.0
    }
}

/// Ground tokens seen from `q` (without noise).
pub fn render_ground(
    landmarks: &[Landmark],
    q: Vec2,
    heading: Option<Vec2>,
    sectors: usize,
    dim: usize,
    decay: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; sectors * dim];
    for l in landmarks {
        let off = [l.position[0] - q[0], l.position[1] - q[1]];
        for k in 0..sectors {
            let w = sector_weight(off, k, sectors, heading, decay);
            if w > 0.0 {
                for (o, s) in out[k * dim..(k + 1) * dim].iter_mut().zip(&l.signature) {
                    *o += w * s;
                }
            }
        }
    }
    out
}

/// Scene `index` of a configuration.
pub fn generate_scene(config: &SceneGenConfig, index: usize) -> Result<SyntheticScene> {
    config.validate()?;
    let seed = config.scene_seed(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, dim) = (config.sat_height, config.sat_width, config.dim);
    let cells = h * w;

    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let mut cell_sig: Vec<Option<Vec<f64>>> = vec![None; cells];
    for &c in &order[..config.landmarks] {
        let s: Vec<f64> = random_unit(dim, &mut rng)
            .into_iter()
            .map(|v| v * config.signal_to_distractor)
            .collect();
        cell_sig[c] = Some(s);
    }
    // point-mirrored duplicates
    let dup = (config.ambiguity * config.landmarks as f64).round() as usize;
    let mut copied = 0;
    for &c in &order[..config.landmarks] {
        if copied >= dup {
            break;
        }
        let mirror = cells - 1 - c;
        if mirror == c {
            continue;
        }
        let sig = cell_sig[c].clone().expect("landmark cell");
        cell_sig[mirror] = Some(sig);
        copied += 1;
    }

    let mut sat = Vec::with_capacity(cells * dim);
    let mut landmarks = Vec::new();
    for (c, sig) in cell_sig.iter().enumerate() {
        match sig {
            Some(s) => {
                sat.extend_from_slice(s);
                landmarks.push(Landmark {
                    cell: c,
                    position: cell_center(c / w, c % w, h, w),
                    signature: s.clone(),
                });
            }
            None => sat.extend(random_unit(dim, &mut rng)),
        }
    }

    let span = 1.0 - config.margin;
    let q_gt = PoseHypothesis::new(rng.gen_range(-span..=span), rng.gen_range(-span..=span))?;
    let phi = rng.gen_range(0.0..2.0 * PI);
    let gamma_gt = [phi.cos(), phi.sin()];
    let heading = config.mode.has_orientation().then_some(gamma_gt);

    let mut ground = render_ground(
        &landmarks,
        q_gt.xy(),
        heading,
        config.ground_tokens,
        dim,
        config.decay_length,
    );
    let noise_std = config.ambiguity * config.ground_noise;
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).expect("valid std");
        for v in &mut ground {
            *v += n.sample(&mut rng);
        }
    }

    Ok(SyntheticScene {
        id: index,
        seed,
        ground: TokenGrid::new(
            1,
            config.ground_tokens,
            Tensor::matrix(config.ground_tokens, dim, ground)?,
        )?,
        satellite: TokenGrid::new(h, w, Tensor::matrix(cells, dim, sat)?)?,
        q_gt: if heading.is_some() {
            q_gt.with_gamma(gamma_gt)?
        } else {
            q_gt
        },
        gamma_gt,
        map_extent_m: config.map_extent_m,
        landmarks,
    })
}

/// All scenes of a configuration, in index order.
pub fn generate_scenes(config: &SceneGenConfig) -> Result<Vec<SyntheticScene>> {
    (0..config.scenes)
        .map(|i| generate_scene(config, i))
        .collect()
}

/// Metric distance between two poses.
pub fn meters(a: &PoseHypothesis, b: &PoseHypothesis, extent_m: f64) -> f64 {
    a.distance(b) * extent_m / 2.0
}

/// `(lateral_m, longitudinal_m)`: absolute error components across and along
/// the heading, with the lateral axis the heading rotated by +90 degrees.
pub fn decompose_error(err: Vec2, heading: Vec2, extent_m: f64) -> Result<(f64, f64)> {
    if (norm(heading) - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "heading norm {} is not 1",
            norm(heading)
        )));
    }
    let scale = extent_m / 2.0;
    let along = err[0] * heading[0] + err[1] * heading[1];
    let across = -err[0] * heading[1] + err[1] * heading[0];
    Ok((across.abs() * scale, along.abs() * scale))
}

/// Scene entry of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: usize,
    pub seed: u64,
    pub q_gt: [f64; 2],
    pub gamma_gt: [f64; 2],
}

/// Dataset description from which every scene can be regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub config: SceneGenConfig,
    pub scenes: Vec<SceneRecord>,
}

impl SceneManifest {
    pub fn build(config: &SceneGenConfig) -> Result<(Self, Vec<SyntheticScene>)> {
        if config.scenes == 0 {
            return Err(Error::Validation("scene count must be >= 1".into()));
        }
        let scenes = generate_scenes(config)?;
        let records = scenes
            .iter()
            .map(|s| SceneRecord {
                scene_id: s.id,
                seed: s.seed,
                q_gt: s.q_gt.xy(),
                gamma_gt: s.gamma_gt,
            })
            .collect();
        Ok((
            SceneManifest {
                version: MANIFEST_VERSION,
                config: config.clone(),
                scenes: records,
            },
            scenes,
        ))
    }

    /// Regenerate the scenes and check them against the recorded poses.
    pub fn regenerate(&self) -> Result<Vec<SyntheticScene>> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::integrity(
                "manifest",
                format!(
                    "version {} is not supported (expected {MANIFEST_VERSION})",
                    self.version
                ),
            ));
        }
        self.scenes
            .iter()
            .map(|r| {
                let s = generate_scene(&self.config, r.scene_id)?;
                if s.seed != r.seed || s.q_gt.xy() != r.q_gt || s.gamma_gt != r.gamma_gt {
                    return Err(Error::integrity(
                        "manifest",
                        format!(
                            "scene {} does not regenerate to its recorded pose",
                            r.scene_id
                        ),
                    ));
                }
                Ok(s)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Grid-search the generator's own noiseless rendering model for the cell
/// centre whose ground view best matches the scene.
pub fn bayes_decode(
    scene: &SyntheticScene,
    config: &SceneGenConfig,
    resolution: usize,
) -> PoseHypothesis {
    let heading = config.mode.has_orientation().then_some(scene.gamma_gt);
    let observed = scene.ground.tokens().data();
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for i in 0..resolution {
        for j in 0..resolution {
            let q = [
                -1.0 + (j as f64 + 0.5) * 2.0 / resolution as f64,
                -1.0 + (i as f64 + 0.5) * 2.0 / resolution as f64,
            ];
            let pred = render_ground(
                &scene.landmarks,
                q,
                heading,
                config.ground_tokens,
                config.dim,
                config.decay_length,
            );
            let err: f64 = pred
                .iter()
                .zip(observed)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if err < best.0 {
                best = (err, q);
            }
        }
    }
    PoseHypothesis::clamped(best.1[0], best.1[1])
}
