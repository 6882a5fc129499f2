#![allow(dead_code)]

use disploc::autodiff::{Tape, Tensor, Var};
use disploc::distributions::{DisplacementTarget, OrientationTarget};
use disploc::encoder::{EncoderConfig, TokenGrid};
use disploc::field::{Activation, PoseHypothesis, RegressionField};
use disploc::irs::IrsConfig;
use disploc::model::{loss_on_tape, LocalizationModel, Mode, ModelConfig, Sample};
use disploc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a| + |b|, floor)` over whole vectors; infinite when
/// anything is NaN, so that `f64::max` folds cannot drop it.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return f64::INFINITY;
    }
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-10)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Largest relative error between tape gradients and central differences of
/// the scalar produced by `build` with respect to each input.
pub fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(&tape, *v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs).unwrap();
        t.value(o).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            let base = xs[i].data()[j];
            let h = FD_STEP * base.abs().max(1.0);
            xs[i].data_mut()[j] = base + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = base - h;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(g.data(), &numeric));
    }
    worst
}

/// `sum(out ⊙ w)` for a fixed random weight, turning any tensor into a scalar
/// whose gradient exercises every output entry.
pub fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

pub fn tiny_model_config(mode: Mode, activation: Activation) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            dim: 8,
            heads: 2,
            coord_dim: 4,
            ..EncoderConfig::default()
        },
        hidden: vec![6, 5],
        activation,
        mode,
    }
}

/// Random PE-free token grids and samples for a tiny model.
pub fn tiny_batch(
    dim: usize,
    n_scenes: usize,
    per_scene: usize,
    with_orientation: bool,
    rng: &mut impl Rng,
) -> (Vec<(TokenGrid, TokenGrid)>, Vec<Sample>) {
    let grids: Vec<(TokenGrid, TokenGrid)> = (0..n_scenes)
        .map(|_| {
            let g = TokenGrid::new(1, 3, random_tensor(&[3, dim], -1.0, 1.0, rng)).unwrap();
            let s = TokenGrid::new(2, 2, random_tensor(&[4, dim], -1.0, 1.0, rng)).unwrap();
            (g, s)
        })
        .collect();
    let mut samples = Vec::new();
    for scene in 0..n_scenes {
        for _ in 0..per_scene {
            let q0 =
                PoseHypothesis::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).unwrap();
            let gt =
                PoseHypothesis::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).unwrap();
            let orientation = with_orientation
                .then(|| OrientationTarget::from_degrees(rng.gen_range(-180.0..180.0)));
            samples.push(Sample {
                scene,
                q0,
                target: DisplacementTarget::from_displacement([gt.x - q0.x, gt.y - q0.y]),
                orientation,
            });
        }
    }
    (grids, samples)
}

pub fn model_loss(
    model: &LocalizationModel,
    grids: &[(TokenGrid, TokenGrid)],
    samples: &[Sample],
) -> f64 {
    let mut tape = Tape::new();
    let vars = model.on_tape(&mut tape);
    let refs: Vec<(&TokenGrid, &TokenGrid)> = grids.iter().map(|(g, s)| (g, s)).collect();
    let heads = model
        .forward_on_tape(&mut tape, &vars, &refs, samples)
        .unwrap();
    let (loss, _) = loss_on_tape(&mut tape, &heads, samples).unwrap();
    tape.value(loss).item().unwrap()
}

/// Tape gradient of the batch loss against central differences, for the
/// parameter tensors whose names pass `select`. Every entry of a selected
/// tensor is checked when it has at most `max_entries` entries; otherwise a
/// random subset of that size.
pub fn model_grad_check(
    model: &LocalizationModel,
    grids: &[(TokenGrid, TokenGrid)],
    samples: &[Sample],
    select: impl Fn(&str) -> bool,
    max_entries: usize,
    rng: &mut impl Rng,
) -> f64 {
    let mut tape = Tape::new();
    let vars = model.on_tape(&mut tape);
    let refs: Vec<(&TokenGrid, &TokenGrid)> = grids.iter().map(|(g, s)| (g, s)).collect();
    let heads = model
        .forward_on_tape(&mut tape, &vars, &refs, samples)
        .unwrap();
    let (loss, _) = loss_on_tape(&mut tape, &heads, samples).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.leaves.iter().map(|v| grads.wrt(&tape, *v)).collect();
    let names: Vec<String> = model.params().into_iter().map(|(n, _, _)| n).collect();

    let mut worst: f64 = 0.0;
    for (p, name) in names.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let len = analytic[p].len();
        let entries: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            (0..max_entries).map(|_| rng.gen_range(0..len)).collect()
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &j in &entries {
            let mut m = model.clone();
            let base = m.params_mut()[p].data()[j];
            let h = FD_STEP * base.abs().max(1.0);
            m.params_mut()[p].data_mut()[j] = base + h;
            let up = model_loss(&m, grids, samples);
            m.params_mut()[p].data_mut()[j] = base - h;
            let down = model_loss(&m, grids, samples);
            a.push(analytic[p].data()[j]);
            n.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

/// Straight-line IRS written independently of the library loop: seeds drawn
/// one coordinate pair at a time, each seed walked through all rounds on its
/// own, one single-pose prediction per step. Returns the estimate and the
/// per-seed trajectories (round 0 included).
pub fn nested_irs<F: RegressionField + ?Sized>(
    field: &F,
    ctx: &disploc::encoder::VisualContext,
    config: &IrsConfig,
) -> (PoseHypothesis, Vec<Vec<[f64; 2]>>) {
    let mut r = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let p = config.prior;
    let mut seeds = Vec::new();
    for _ in 0..config.n_seeds {
        let u: f64 = r.gen();
        let v: f64 = r.gen();
        let x = (p.x_min + (p.x_max - p.x_min) * u).clamp(-1.0, 1.0);
        let y = (p.y_min + (p.y_max - p.y_min) * v).clamp(-1.0, 1.0);
        seeds.push([x, y]);
    }
    let mut trajectories = Vec::new();
    for s in &seeds {
        let mut q = *s;
        let mut traj = vec![q];
        for _ in 0..config.rounds {
            let pose = PoseHypothesis::new(q[0], q[1]).unwrap();
            let d = field.predict(&pose, ctx).unwrap();
            let n = (d.mu_theta[0] * d.mu_theta[0] + d.mu_theta[1] * d.mu_theta[1]).sqrt();
            let (dx, dy) = if n > 0.0 {
                (d.mu_r * d.mu_theta[0] / n, d.mu_r * d.mu_theta[1] / n)
            } else {
                (0.0, 0.0)
            };
            q = [(q[0] + dx).clamp(-1.0, 1.0), (q[1] + dy).clamp(-1.0, 1.0)];
            traj.push(q);
        }
        trajectories.push(traj);
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for t in &trajectories {
        sx += t[config.rounds][0];
        sy += t[config.rounds][1];
    }
    let n = config.n_seeds as f64;
    (PoseHypothesis::clamped(sx / n, sy / n), trajectories)
}
