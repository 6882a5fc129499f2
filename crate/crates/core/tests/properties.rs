mod common;

use std::f64::consts::PI;

use disploc::autodiff::{Tape, Tensor};
use disploc::distributions::{
    angmf_loss, gaussian_nll, gaussian_nll_grad, orientation_loss, DisplacementDistribution,
};
use disploc::encoder::{
    attention_maps, encode_scene, AttentionInit, EncoderConfig, EncoderParams, TokenGrid,
};
use disploc::field::{refine_step, OracleField, OracleFieldSpec, PoseHypothesis, RegressionField};
use disploc::irs::{mean_pose, population_spread, run_irs_from, sample_seeds, IrsConfig, Prior};
use disploc::metrics::{cell_seed, recall_at, summarize};
use disploc::model::{LocalizationModel, Mode};
use disploc::synthenv::{decompose_error, generate_scene, SceneGenConfig};
use disploc::trainer::AdamW;
use proptest::prelude::*;

use common::{random_tensor, rng, tiny_model_config};

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn pose() -> impl Strategy<Value = PoseHypothesis> {
    (-1.0..=1.0f64, -1.0..=1.0f64).prop_map(|(x, y)| PoseHypothesis::new(x, y).unwrap())
}

fn in_range(q: &PoseHypothesis) -> bool {
    (-1.0..=1.0).contains(&q.x) && (-1.0..=1.0).contains(&q.y)
}

fn tiny_model(seed: u64, mode: Mode) -> LocalizationModel {
    LocalizationModel::init(
        &tiny_model_config(mode, disploc::field::Activation::Relu),
        &mut rng(seed),
    )
    .unwrap()
}

fn grids(seed: u64, dim: usize) -> (TokenGrid, TokenGrid) {
    let mut r = rng(seed);
    let g = TokenGrid::new(1, 3, random_tensor(&[3, dim], -1.0, 1.0, &mut r)).unwrap();
    let s = TokenGrid::new(2, 3, random_tensor(&[6, dim], -1.0, 1.0, &mut r)).unwrap();
    (
        g.with_positional_encoding().unwrap(),
        s.with_positional_encoding().unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tape_is_bitwise_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut r = rng(seed);
            let a = random_tensor(&[3, 4], -1.0, 1.0, &mut r);
            let b = random_tensor(&[4, 2], -1.0, 1.0, &mut r);
            let mut tape = Tape::new();
            let va = tape.param(a);
            let vb = tape.param(b);
            let m = tape.matmul(va, vb).unwrap();
            let t = tape.tanh(m).unwrap();
            let e = tape.softplus(t).unwrap();
            let out = tape.sum(e).unwrap();
            let g = tape.backward(out).unwrap();
            let value = tape.value(out).item().unwrap();
            (value.to_bits(), g.wrt(&tape, va).data().to_vec(), g.wrt(&tape, vb).data().to_vec())
        };
        let (v1, ga1, gb1) = run();
        let (v2, ga2, gb2) = run();
        prop_assert_eq!(v1, v2);
        prop_assert!(ga1.iter().zip(&ga2).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(gb1.iter().zip(&gb2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fan_out_gradients_sum(x in -2.0..2.0f64, cs in prop::collection::vec(-3.0..3.0f64, 1..6)) {
        let mut tape = Tape::new();
        let vx = tape.param(Tensor::scalar(x));
        let mut terms = Vec::new();
        for &c in &cs {
            let vc = tape.constant(Tensor::scalar(c));
            terms.push(tape.mul(vx, vc).unwrap());
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t).unwrap();
        }
        let g = tape.backward(acc).unwrap();
        let expected: f64 = cs.iter().sum();
        prop_assert!((g.wrt(&tape, vx).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_minimized_at_target(r in 0.0..3.0f64, d in -1.0..1.0f64, ls in -4.0..3.0f64) {
        let s2 = ls.exp();
        prop_assert!(gaussian_nll(r, r, s2).unwrap() <= gaussian_nll(r, r + d, s2).unwrap());
        prop_assert_eq!(gaussian_nll_grad(r, r, s2).unwrap().d_mu_r, 0.0);
    }

    #[test]
    fn angmf_monotone_in_angular_error(kappa in 0.0..50.0f64, a in 0.0..(PI - 1e-3), b in 0.0..(PI - 1e-3), base in -PI..PI) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mu = unit(base);
        let l_lo = angmf_loss(mu, kappa, unit(base + lo)).unwrap();
        let l_hi = angmf_loss(mu, kappa, unit(base + hi)).unwrap();
        prop_assert!(l_lo <= l_hi + 1e-12, "{l_lo} > {l_hi}");
    }

    #[test]
    fn angmf_rotation_invariant(kappa in 0.0..50.0f64, err in -PI..PI, base in -PI..PI, rot in -PI..PI) {
        let a = angmf_loss(unit(base), kappa, unit(base + err)).unwrap();
        let b = angmf_loss(unit(base + rot), kappa, unit(base + rot + err)).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn orientation_loss_scale_invariant(p in -PI..PI, g in -PI..PI, s in 1e-3..1e3f64) {
        let g = unit(g);
        let a = orientation_loss(unit(p), g).unwrap();
        let b = orientation_loss([s * p.cos(), s * p.sin()], g).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn from_raw_satisfies_invariants(raw in prop::array::uniform5(-50.0..50.0f64)) {
        let d = DisplacementDistribution::from_raw(raw).unwrap();
        prop_assert!(DisplacementDistribution::new(d.mu_r, d.sigma2_r, d.mu_theta, d.kappa).is_ok());
    }

    #[test]
    fn refine_step_stays_on_map(q in pose(), mu_r in 0.0..10.0f64, angle in -PI..PI) {
        let d = DisplacementDistribution::new(mu_r, 1.0, unit(angle), 1.0).unwrap();
        prop_assert!(in_range(&refine_step(&q, &d)));
    }

    #[test]
    fn exact_oracle_lands_on_target(q in pose(), t in pose()) {
        let field = OracleField::new(OracleFieldSpec::exact(t)).unwrap();
        let ctx = disploc::encoder::VisualContext::from_vec(vec![0.0]).unwrap();
        let next = refine_step(&q, &field.predict(&q, &ctx).unwrap());
        prop_assert!(next.distance(&t) < 1e-12);
    }

    #[test]
    fn oracle_contracts_interior(q in pose(), t in pose(), alpha in 0.05..1.0f64) {
        let spec = OracleFieldSpec { alpha, ..OracleFieldSpec::exact(t) };
        let field = OracleField::new(spec).unwrap();
        let ctx = disploc::encoder::VisualContext::from_vec(vec![0.0]).unwrap();
        let next = refine_step(&q, &field.predict(&q, &ctx).unwrap());
        // mu_r = alpha * r leaves (1 - alpha) of the distance
        prop_assert!((next.distance(&t) - (1.0 - alpha) * q.distance(&t)).abs() < 1e-9);
    }

    #[test]
    fn spread_nonnegative_and_zero_for_clones(poses in prop::collection::vec(pose(), 1..20), q in pose(), n in 1usize..20) {
        prop_assert!(population_spread(&poses).unwrap() >= 0.0);
        prop_assert_eq!(population_spread(&vec![q; n]).unwrap(), 0.0);
    }

    #[test]
    fn seeds_inside_prior(a in -1.0..=1.0f64, b in -1.0..=1.0f64, c in -1.0..=1.0f64, d in -1.0..=1.0f64, n in 1usize..64, seed in any::<u64>()) {
        let prior = Prior { x_min: a.min(b), x_max: a.max(b), y_min: c.min(d), y_max: c.max(d) };
        let cfg = IrsConfig { n_seeds: n, prior, rng_seed: seed, ..IrsConfig::default() };
        for q in sample_seeds(&cfg).unwrap() {
            prop_assert!(q.x >= prior.x_min && q.x <= prior.x_max);
            prop_assert!(q.y >= prior.y_min && q.y <= prior.y_max);
        }
    }

    #[test]
    fn recall_monotone_in_threshold(errors in prop::collection::vec(0.0..100.0f64, 0..50), a in 1e-3..100.0f64, b in 1e-3..100.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(recall_at(&errors, lo).unwrap() <= recall_at(&errors, hi).unwrap());
    }

    #[test]
    fn summarize_permutation_invariant(errors in prop::collection::vec(0.0..100.0f64, 1..50), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = errors.clone();
        shuffled.shuffle(&mut rng(seed));
        prop_assert_eq!(summarize(&errors).unwrap(), summarize(&shuffled).unwrap());
    }

    #[test]
    fn cell_seeds_distinguish_cells(base in any::<u64>(), n in 1usize..64, r in 1usize..64, s in 0usize..1000) {
        let c = cell_seed(base, n, r, s);
        prop_assert_eq!(c, cell_seed(base, n, r, s));
        prop_assert_ne!(c, cell_seed(base, n + 1, r, s));
        prop_assert_ne!(c, cell_seed(base, n, r + 1, s));
        prop_assert_ne!(c, cell_seed(base, n, r, s + 1));
    }

    #[test]
    fn error_decomposition_is_orthogonal(ex in -2.0..2.0f64, ey in -2.0..2.0f64, h in -PI..PI, extent in 1.0..500.0f64) {
        let (lat, lon) = decompose_error([ex, ey], unit(h), extent).unwrap();
        let total = (ex * ex + ey * ey) * (extent / 2.0).powi(2);
        prop_assert!((lat * lat + lon * lon - total).abs() < 1e-9 * total.max(1.0));
    }

    #[test]
    fn weight_decay_is_decoupled(ws in prop::collection::vec(-5.0..5.0f64, 1..10), lr in 1e-5..1e-1f64, wd in 0.0..0.5f64, steps in 1usize..5) {
        let n = ws.len();
        let mut p = Tensor::new(vec![n], ws.clone()).unwrap();
        let mut opt = AdamW::new(&[&[n]], 0.9, 0.999, 1e-8, wd);
        let mut expected = ws;
        for _ in 0..steps {
            opt.step(vec![&mut p], &[Tensor::zeros(&[n])], &[lr]).unwrap();
            for w in &mut expected {
                *w -= lr * (wd * *w);
            }
        }
        prop_assert_eq!(p.data(), &expected[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), init_random in any::<bool>()) {
        let config = EncoderConfig {
            dim: 8,
            heads: 2,
            coord_dim: 4,
            attention_init: if init_random { AttentionInit::Random } else { AttentionInit::Identity },
            ..EncoderConfig::default()
        };
        let params = EncoderParams::init(config, &mut rng(seed)).unwrap();
        let (g, s) = grids(seed ^ 1, 8);
        let maps = attention_maps(&g, &s, &params).unwrap();
        prop_assert_eq!(maps.len(), 2);
        for m in &maps {
            let cols = m.shape()[1];
            for row in m.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let a = encode_scene(&g, &s, &params).unwrap();
        let b = encode_scene(&g, &s, &params).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn model_prediction_is_pure(seed in any::<u64>(), q in pose()) {
        let model = tiny_model(seed, Mode::TwoDof);
        let (g, s) = grids(seed ^ 2, 8);
        let ctx = model.encode(&g, &s).unwrap();
        let a = model.predict(&q, &ctx).unwrap();
        let b = model.predict(&q, &ctx).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn irs_permutation_invariant_and_in_range(seed in any::<u64>(), n in 1usize..16, rounds in 1usize..6) {
        use rand::seq::SliceRandom;
        let model = tiny_model(seed, Mode::TwoDof);
        let (g, s) = grids(seed ^ 3, 8);
        let ctx = model.encode(&g, &s).unwrap();
        let cfg = IrsConfig { n_seeds: n, rounds, rng_seed: seed, ..IrsConfig::default() };
        let seeds = sample_seeds(&cfg).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(seed ^ 4));
        let permuted: Vec<PoseHypothesis> = order.iter().map(|&i| seeds[i]).collect();

        let a = run_irs_from(&model, &ctx, &cfg, seeds).unwrap();
        let b = run_irs_from(&model, &ctx, &cfg, permuted).unwrap();
        prop_assert_eq!(a.estimate, b.estimate);
        prop_assert_eq!(&a.spread_per_round, &b.spread_per_round);
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(&a.trajectories[i], &b.trajectories[j]);
        }
        prop_assert!(a.trajectories.iter().flatten().all(in_range));
        prop_assert!(in_range(&a.estimate));
        let finals: Vec<PoseHypothesis> = a.trajectories.iter().map(|t| *t.last().unwrap()).collect();
        prop_assert_eq!(mean_pose(&finals).unwrap(), a.estimate);
    }

    #[test]
    fn scene_generation_is_pure(seed in any::<u64>(), index in 0usize..50) {
        let cfg = SceneGenConfig { rng_seed: seed, dim: 8, landmarks: 8, scenes: 50, ..SceneGenConfig::default() };
        let a = generate_scene(&cfg, index).unwrap();
        let b = generate_scene(&cfg, index).unwrap();
        prop_assert_eq!(a, b);
    }
}
