//! Joint position and heading: scenes whose ground view depends on the
//! camera heading, a model with the orientation head, and heading error at
//! the refined estimate.

use disploc::irs::{FieldSource, IrsConfig};
use disploc::metrics::evaluate;
use disploc::model::Mode;
use disploc::synthenv::{generate_scenes, SceneGenConfig};
use disploc::trainer::{PreparedScene, TrainConfig, Trainer};
use disploc::Result;

fn main() -> Result<()> {
    let gen = SceneGenConfig {
        scenes: 40,
        mode: Mode::ThreeDof,
        rng_seed: 2,
        ..SceneGenConfig::default()
    };
    let data = PreparedScene::prepare_all(&generate_scenes(&gen)?)?;
    let config = TrainConfig {
        epochs: 60,
        mode: Mode::ThreeDof,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, data.len())?;
    println!(
        "{} parameters, {} in the orientation head",
        trainer.model.param_count(),
        trainer.model.orientation_param_count()
    );
    trainer.fit(&data, |_, _| Ok(()))?;

    let source = FieldSource::Model(&trainer.model);
    let (report, results) = evaluate(&source, &data, &IrsConfig::default(), 0, gen.map_extent_m)?;
    println!(
        "position: mean {:.2} m, median {:.2} m",
        report.mean_m, report.median_m
    );
    if let Some(o) = &report.orientation {
        println!(
            "heading: mean {:.2} deg, median {:.2} deg",
            o.mean_deg, o.median_deg
        );
    }
    let p = results[0]
        .orientation
        .expect("3-DoF model predicts heading");
    println!(
        "scene 0: predicted heading {:.1} deg, true {:.1} deg",
        p[1].atan2(p[0]).to_degrees(),
        data[0].gamma_gt[1].atan2(data[0].gamma_gt[0]).to_degrees()
    );
    Ok(())
}
