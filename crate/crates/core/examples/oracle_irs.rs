//! Iterative refinement against an analytic field: each round moves every
//! seed by the predicted displacement and the estimate is the seed mean.

use disploc::encoder::VisualContext;
use disploc::field::{OracleField, OracleFieldSpec, PoseHypothesis};
use disploc::irs::{run_irs, IrsConfig};
use disploc::Result;

fn main() -> Result<()> {
    let target = PoseHypothesis::new(0.3, -0.2)?;
    // the oracle ignores visual context
    let ctx = VisualContext::from_vec(vec![0.0])?;
    let config = IrsConfig {
        n_seeds: 10,
        rounds: 5,
        rng_seed: 42,
        ..IrsConfig::default()
    };

    let exact = OracleField::new(OracleFieldSpec::exact(target))?;
    let r = run_irs(&exact, &ctx, &config)?;
    println!(
        "exact field: estimate ({:.6}, {:.6}) after one round spread {:.2e}",
        r.estimate.x, r.estimate.y, r.spread_per_round[1]
    );

    for (alpha, noise) in [(0.5, 0.0), (0.5, 0.05), (0.8, 0.1)] {
        let spec = OracleFieldSpec {
            alpha,
            direction_noise_std: noise,
            distance_noise_std: noise,
            noise_seed: 7,
            ..OracleFieldSpec::exact(target)
        };
        let field = OracleField::new(spec)?;
        let r = run_irs(&field, &ctx, &config)?;
        let spread: Vec<String> = r
            .spread_per_round
            .iter()
            .map(|s| format!("{s:.4}"))
            .collect();
        println!(
            "alpha {alpha} noise {noise}: error {:.5}, spread per round [{}]",
            r.estimate.distance(&target),
            spread.join(", ")
        );
    }

    // one seed at distance 0.8 under alpha 0.5: 0.8, 0.4, 0.2, 0.1
    let spec = OracleFieldSpec {
        alpha: 0.5,
        ..OracleFieldSpec::exact(PoseHypothesis::new(0.0, 0.0)?)
    };
    let field = OracleField::new(spec)?;
    let r = disploc::irs::run_irs_from(
        &field,
        &ctx,
        &IrsConfig {
            n_seeds: 1,
            rounds: 3,
            ..IrsConfig::default()
        },
        vec![PoseHypothesis::new(0.8, 0.0)?],
    )?;
    let path: Vec<String> = r.trajectories[0]
        .iter()
        .map(|q| format!("{:.3}", q.x))
        .collect();
    println!("single seed: {}", path.join(" -> "));
    Ok(())
}
