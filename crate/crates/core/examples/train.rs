//! Train the localization model on a small synthetic set, save a checkpoint,
//! reload it and compare single-pass inference with iterative refinement.

use std::time::Instant;

use disploc::irs::{FieldSource, IrsConfig};
use disploc::metrics::evaluate;
use disploc::synthenv::{generate_scenes, SceneGenConfig};
use disploc::trainer::{Checkpoint, PreparedScene, TrainConfig, Trainer};
use disploc::Result;

fn main() -> Result<()> {
    let gen = SceneGenConfig {
        scenes: 60,
        rng_seed: 1,
        ..SceneGenConfig::default()
    };
    let data = PreparedScene::prepare_all(&generate_scenes(&gen)?)?;
    let config = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, data.len())?;
    println!(
        "{} parameters, {} steps",
        trainer.model.param_count(),
        trainer.total_steps()
    );

    let start = Instant::now();
    let spe = trainer.steps_per_epoch();
    trainer.fit(&data, |t, log| {
        if (log.step + 1) % (10 * spe) == 0 {
            println!(
                "epoch {:>3}: loss {:.4} (distance {:.4}, direction {:.4})",
                t.epoch(),
                log.total(),
                log.loss_r,
                log.loss_theta
            );
        }
        Ok(())
    })?;
    println!("trained in {:.1} s", start.elapsed().as_secs_f64());

    let path = std::env::temp_dir().join("disploc-example.ckpt");
    trainer.to_checkpoint().save(&path)?;
    let model = Checkpoint::load(&path)?.model()?;
    assert_eq!(model, trainer.model);

    let source = FieldSource::Model(&model);
    for (n, r) in [(1, 1), (10, 1), (10, 5)] {
        let irs = IrsConfig {
            n_seeds: n,
            rounds: r,
            ..IrsConfig::default()
        };
        let (report, _) = evaluate(&source, &data, &irs, 0, gen.map_extent_m)?;
        println!(
            "N={n:>2} R={r}: mean {:.2} m, median {:.2} m, recall@5m {:.2}",
            report.mean_m, report.median_m, report.recall.overall[1]
        );
    }
    Ok(())
}
