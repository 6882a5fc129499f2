//! Scaling sweep over seed counts and refinement rounds, with the trend
//! checks the command-line `sweep` prints. Uses an imperfect analytic field
//! so it runs in seconds.

use disploc::cli::trend_summary;
use disploc::irs::{FieldSource, IrsConfig, OracleTemplate};
use disploc::metrics::scaling_sweep;
use disploc::synthenv::{generate_scenes, SceneGenConfig};
use disploc::trainer::PreparedScene;
use disploc::Result;

fn main() -> Result<()> {
    let gen = SceneGenConfig {
        scenes: 50,
        ..SceneGenConfig::default()
    };
    let scenes = PreparedScene::prepare_all(&generate_scenes(&gen)?)?;
    let oracle = OracleTemplate {
        alpha: 0.6,
        direction_noise_std: 0.15,
        distance_noise_std: 0.02,
        noise_seed: 3,
    };
    let base = IrsConfig {
        lean: true,
        ..IrsConfig::default()
    };
    let sweep = scaling_sweep(
        &FieldSource::Oracle(oracle),
        &scenes,
        &[1, 5, 10, 20],
        &[1, 3, 5, 10],
        &base,
        0,
        gen.map_extent_m,
    )?;
    print!("{}", sweep.to_csv());
    println!("{}", trend_summary(&sweep, 0.02));
    Ok(())
}
