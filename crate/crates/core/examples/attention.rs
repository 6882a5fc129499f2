//! Scene encoding: 2D positional encoding, multi-head cross-attention from
//! ground to satellite tokens, mean pooling and the hypothesis embedding.

use disploc::encoder::{
    attention_maps, embed_hypothesis, encode_scene, fuse, sinusoidal_pe_2d, EncoderConfig,
    EncoderParams,
};
use disploc::field::PoseHypothesis;
use disploc::synthenv::{generate_scene, SceneGenConfig};
use disploc::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let pe = sinusoidal_pe_2d(8, 8, 128)?;
    println!(
        "PE table {:?}; cell (0,0) starts {:?}",
        pe.shape(),
        &pe.row(0)[..4]
    );

    let gen = SceneGenConfig::default();
    let scene = generate_scene(&gen, 0)?;
    let (ground, satellite) = scene.encoder_inputs()?;
    println!(
        "scene 0: {} ground tokens, {}x{} satellite grid, true pose ({:.3}, {:.3})",
        ground.len(),
        satellite.height(),
        satellite.width(),
        scene.q_gt.x,
        scene.q_gt.y
    );

    let params = EncoderParams::init(EncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(3))?;
    let maps = attention_maps(&ground, &satellite, &params)?;
    for (h, m) in maps.iter().enumerate() {
        let row = m.row(0);
        let (best, w) =
            row.iter().enumerate().fold(
                (0, f64::MIN),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        println!(
            "head {h}: ground token 0 attends most to cell {best} (weight {w:.3}, row sum {:.6})",
            row.iter().sum::<f64>()
        );
    }

    let f_vis = encode_scene(&ground, &satellite, &params)?;
    let q0 = PoseHypothesis::new(0.25, -0.5)?;
    let s = embed_hypothesis(&q0, &params)?;
    let z = fuse(&f_vis, &s, params.config.dim, params.config.coord_dim)?;
    println!(
        "f_vis {} + embedding {} = joint vector {}",
        f_vis.dim(),
        s.len(),
        z.len()
    );
    Ok(())
}
