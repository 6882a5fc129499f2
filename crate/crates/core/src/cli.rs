//! Command-line front end: `gen`, `train`, `irs`, `eval` and `sweep`.
//!
//! Settings come from an optional TOML file whose sections mirror the
//! library configs (`[gen]`, `[train]`, `[irs]`, `[eval]`, `[sweep]`);
//! command-line flags override the file, which overrides the defaults. Every
//! output directory receives the effective configuration as `config.toml`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irs::{
    write_trajectory_rows, FieldSource, IrsConfig, IrsSummary, OracleTemplate, TRAJECTORY_HEADER,
};
use crate::metrics::{evaluate, non_increasing_within, scaling_sweep, Sweep};
use crate::model::{LocalizationModel, Mode};
use crate::synthenv::{bayes_decode, meters, SceneGenConfig, SceneManifest, DEFAULT_EXTENT_M};
use crate::trainer::{Checkpoint, PreparedScene, TrainConfig, Trainer};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_INTERNAL: i32 = 1;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::Domain(_) | Error::Dimension(_) | Error::Unsupported(_) => {
            EXIT_VALIDATION
        }
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Serde(_) | Error::Integrity { .. } => EXIT_IO,
        Error::Contract(_) => EXIT_INTERNAL,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "disploc",
    version,
    about = "Displacement-field localization on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene manifest.
    Gen(GenArgs),
    /// Train a model on the scenes of a manifest.
    Train(TrainArgs),
    /// Run IRS on every scene and export trajectories.
    Irs(IrsArgs),
    /// Evaluate a field source over the scenes of a manifest.
    Eval(IrsArgs),
    /// Evaluate every (N, R) combination.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file with `[gen]`, `[train]`, `[irs]`, `[eval]` and `[sweep]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the subcommand's random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub ambiguity: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest from `gen`; without it scenes come from the `[gen]` section.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from this checkpoint; its training config wins over the file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps even if epochs remain.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained model; mutually exclusive with `--oracle`.
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Analytic field instead of a model, e.g. `alpha=0.5,noise=0.01`.
    #[arg(long)]
    pub oracle: Option<String>,
    /// Meters spanned by the normalized map.
    #[arg(long)]
    pub extent: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IrsArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Seeds per scene (N).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Refinement rounds (R).
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Comma-separated seed counts.
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    /// Comma-separated round counts.
    #[arg(long, value_delimiter = ',')]
    pub rs: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub extent_m: f64,
    pub base_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            extent_m: DEFAULT_EXTENT_M,
            base_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub ns: Vec<usize>,
    pub rs: Vec<usize>,
    /// Relative rise tolerated by the trend checks.
    pub band: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            ns: vec![1, 5, 10, 20],
            rs: vec![1, 3, 5, 10],
            band: 0.02,
        }
    }
}

/// Everything a subcommand may read, after merging file and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub gen: SceneGenConfig,
    pub train: TrainConfig,
    pub irs: IrsConfig,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleTemplate>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("config cannot be written as TOML: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.irs.validate()?;
        if !(self.eval.extent_m > 0.0) {
            return Err(Error::Validation(format!(
                "eval.extent_m {} must be > 0",
                self.eval.extent_m
            )));
        }
        if self.sweep.ns.is_empty() || self.sweep.rs.is_empty() {
            return Err(Error::Validation(
                "sweep.ns and sweep.rs must be non-empty".into(),
            ));
        }
        if self.sweep.ns.contains(&0) || self.sweep.rs.contains(&0) {
            return Err(Error::Validation("sweep entries must be >= 1".into()));
        }
        if !(self.sweep.band >= 0.0) {
            return Err(Error::Validation("sweep.band must be >= 0".into()));
        }
        if let Some(o) = &self.oracle {
            o.for_target(crate::field::PoseHypothesis::clamped(0.0, 0.0), 0)
                .validate()?;
        }
        Ok(())
    }

    fn apply_common(&mut self, c: &Common) {
        if let Some(m) = c.mode {
            self.gen.mode = m;
            self.train.mode = m;
        }
    }
}

/// Parse `alpha=<a>,noise=<s>`; `noise` sets both the direction and the
/// distance noise. Either key may be omitted.
pub fn parse_oracle(spec: &str, seed: u64) -> Result<OracleTemplate> {
    let mut t = OracleTemplate {
        noise_seed: seed,
        ..OracleTemplate::exact()
    };
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("oracle term `{part}` is not key=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| {
            Error::Validation(format!("oracle value `{v}` for `{k}` is not a number"))
        })?;
        match k.trim() {
            "alpha" => t.alpha = v,
            "noise" => {
                t.direction_noise_std = v;
                t.distance_noise_std = v;
            }
            other => {
                return Err(Error::Validation(format!(
                    "unknown oracle key `{other}` (expected alpha, noise)"
                )))
            }
        }
    }
    t.for_target(crate::field::PoseHypothesis::clamped(0.0, 0.0), 0)
        .validate()?;
    Ok(t)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SceneManifest::from_json(&text)
}

/// Scenes from a manifest, or generated from the `[gen]` section.
fn scenes_for(manifest: Option<&Path>, cfg: &mut RunConfig) -> Result<Vec<PreparedScene>> {
    let scenes = match manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            cfg.gen = m.config.clone();
            m.regenerate()?
        }
        None => SceneManifest::build(&cfg.gen)?.1,
    };
    PreparedScene::prepare_all(&scenes)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Irs(a) => cmd_irs(&a, true),
        Command::Eval(a) => cmd_irs(&a, false),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply_common(&a.common);
    if let Some(s) = a.common.seed {
        cfg.gen.rng_seed = s;
    }
    if let Some(n) = a.scenes {
        cfg.gen.scenes = n;
    }
    if let Some(x) = a.ambiguity {
        cfg.gen.ambiguity = x;
    }
    cfg.validate()?;
    if cfg.gen.scenes == 0 {
        return Err(Error::Validation("--scenes must be >= 1".into()));
    }
    let (manifest, scenes) = SceneManifest::build(&cfg.gen)?;

    // noiseless decode on a grid one step finer than the satellite cells
    let res = 2 * cfg.gen.sat_height.max(cfg.gen.sat_width);
    let cell_m = cfg.eval.extent_m / res as f64;
    let solvable = scenes
        .iter()
        .filter(|s| meters(&bayes_decode(s, &cfg.gen, res), &s.q_gt, cfg.eval.extent_m) <= cell_m)
        .count();

    create_dir(&a.common.out)?;
    let path = a.common.out.join("manifest.json");
    write_file(&path, manifest.to_json()?.as_bytes())?;
    echo_config(&a.common.out, &cfg)?;
    println!("scenes: {}", scenes.len());
    println!(
        "solvable: {solvable}/{} decoded within {:.2} m by grid search",
        scenes.len(),
        cell_m
    );
    println!("manifest: {}", path.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply_common(&a.common);
    if let Some(s) = a.common.seed {
        cfg.train.rng_seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let resumed = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if a.common.mode.is_some_and(|m| m != ck.config.mode) {
                return Err(Error::Validation(format!(
                    "--mode {} differs from the checkpoint's {}",
                    a.common.mode.unwrap(),
                    ck.config.mode
                )));
            }
            cfg.train = ck.config.clone();
            Some(ck)
        }
        None => None,
    };
    cfg.validate()?;
    let data = scenes_for(a.manifest.as_deref(), &mut cfg)?;
    if cfg.gen.dim != cfg.train.encoder.dim {
        return Err(Error::Validation(format!(
            "scene token dim {} differs from model dim {}",
            cfg.gen.dim, cfg.train.encoder.dim
        )));
    }
    if cfg.gen.mode != cfg.train.mode {
        return Err(Error::Validation(format!(
            "scenes were generated for {} but training is {}",
            cfg.gen.mode, cfg.train.mode
        )));
    }
    let mut trainer = match &resumed {
        Some(ck) => {
            if ck.n_scenes != data.len() {
                return Err(Error::Validation(format!(
                    "checkpoint was laid out for {} scenes, the manifest has {}",
                    ck.n_scenes,
                    data.len()
                )));
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(cfg.train.clone(), data.len())?,
    };

    let out = &a.common.out;
    create_dir(out)?;
    echo_config(out, &cfg)?;
    let ck_path = out.join("checkpoint.bin");
    let log_path = out.join("train_log.csv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resumed.is_some())
        .write(true)
        .truncate(resumed.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if resumed.is_none() {
        writeln!(log, "step,epoch,loss_r,loss_theta,loss_gamma,grad_norm")
            .map_err(|e| Error::io(&log_path, e))?;
    }
    trainer.to_checkpoint().save(&ck_path)?;

    let stop = a.max_steps.unwrap_or(u64::MAX).min(trainer.total_steps());
    let spe = trainer.steps_per_epoch();
    let mut last = None;
    while trainer.step < stop {
        let entry = match trainer.train_step(&data) {
            Ok(l) => l,
            Err(e) => {
                log.flush().ok();
                eprintln!(
                    "training stopped at step {}; last good checkpoint: {}",
                    trainer.step,
                    ck_path.display()
                );
                return Err(e);
            }
        };
        writeln!(
            log,
            "{},{},{},{},{},{}",
            entry.step,
            entry.step / spe,
            entry.loss_r,
            entry.loss_theta,
            entry.loss_gamma.map(|g| g.to_string()).unwrap_or_default(),
            entry.grad_norm
        )
        .map_err(|e| Error::io(&log_path, e))?;
        if trainer.step % spe == 0 {
            trainer.to_checkpoint().save(&ck_path)?;
            log::info!("epoch {} loss {:.4}", trainer.epoch(), entry.total());
        }
        last = Some(entry);
    }
    trainer.to_checkpoint().save(&ck_path)?;
    match last {
        Some(l) => println!(
            "trained to step {} (epoch {}); last loss {:.6}; checkpoint: {}",
            trainer.step,
            trainer.epoch(),
            l.total(),
            ck_path.display()
        ),
        None => println!("nothing to train; checkpoint: {}", ck_path.display()),
    }
    Ok(())
}

fn resolve_source(a: &SourceArgs, cfg: &mut RunConfig) -> Result<Option<LocalizationModel>> {
    if let Some(spec) = &a.oracle {
        cfg.oracle = Some(parse_oracle(
            spec,
            a.common.seed.unwrap_or(cfg.eval.base_seed),
        )?);
    }
    match (&a.checkpoint, &cfg.oracle) {
        (Some(p), _) => {
            cfg.oracle = None;
            let ck = Checkpoint::load(p)?;
            if a.common.mode.is_some_and(|m| m != ck.config.mode) {
                return Err(Error::Validation(format!(
                    "--mode {} differs from the checkpoint's {}",
                    a.common.mode.unwrap(),
                    ck.config.mode
                )));
            }
            cfg.train = ck.config.clone();
            Ok(Some(ck.model()?))
        }
        (None, Some(_)) => Ok(None),
        (None, None) => Err(Error::Validation(
            "a field source is required: pass --checkpoint or --oracle (or an [oracle] section)"
                .into(),
        )),
    }
}

fn check_compat(model: Option<&LocalizationModel>, gen: &SceneGenConfig) -> Result<()> {
    if let Some(m) = model {
        let dim = m.encoder.config.dim;
        if dim != gen.dim {
            return Err(Error::Validation(format!(
                "checkpoint model dim {dim} does not match scene token dim {}",
                gen.dim
            )));
        }
    }
    Ok(())
}

fn prepare_source(
    a: &SourceArgs,
) -> Result<(RunConfig, Option<LocalizationModel>, Vec<PreparedScene>)> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply_common(&a.common);
    if let Some(s) = a.common.seed {
        cfg.eval.base_seed = s;
    }
    if let Some(e) = a.extent {
        cfg.eval.extent_m = e;
    }
    let model = resolve_source(a, &mut cfg)?;
    cfg.validate()?;
    let scenes = scenes_for(a.manifest.as_deref(), &mut cfg)?;
    check_compat(model.as_ref(), &cfg.gen)?;
    Ok((cfg, model, scenes))
}

fn field_source<'a>(model: Option<&'a LocalizationModel>, cfg: &RunConfig) -> FieldSource<'a> {
    match model {
        Some(m) => FieldSource::Model(m),
        None => FieldSource::Oracle(cfg.oracle.expect("resolved source")),
    }
}

#[derive(Serialize)]
struct SceneResult<'a> {
    scene_id: usize,
    #[serde(flatten)]
    summary: &'a IrsSummary,
}

pub fn cmd_irs(a: &IrsArgs, export: bool) -> Result<()> {
    let (mut cfg, model, scenes) = prepare_source(&a.source)?;
    if let Some(n) = a.seeds {
        cfg.irs.n_seeds = n;
    }
    if let Some(r) = a.rounds {
        cfg.irs.rounds = r;
    }
    if export {
        cfg.irs.lean = false;
    }
    cfg.validate()?;
    let source = field_source(model.as_ref(), &cfg);
    let (report, results) = evaluate(
        &source,
        &scenes,
        &cfg.irs,
        cfg.eval.base_seed,
        cfg.eval.extent_m,
    )?;

    let out = &a.source.common.out;
    create_dir(out)?;
    echo_config(out, &cfg)?;
    write_file(&out.join("report.json"), report.to_json()?.as_bytes())?;
    if export {
        let summaries: Vec<IrsSummary> = results.iter().map(IrsSummary::from).collect();
        let per_scene: Vec<SceneResult> = scenes
            .iter()
            .zip(&summaries)
            .map(|(s, summary)| SceneResult {
                scene_id: s.id,
                summary,
            })
            .collect();
        write_file(
            &out.join("results.json"),
            serde_json::to_string_pretty(&per_scene)?.as_bytes(),
        )?;
        let path = out.join("trajectories.csv");
        let mut buf = Vec::new();
        writeln!(buf, "{TRAJECTORY_HEADER}").expect("writing to memory");
        for (s, r) in scenes.iter().zip(&results) {
            write_trajectory_rows(&mut buf, s.id, r).expect("writing to memory");
        }
        write_file(&path, &buf)?;
    }
    println!(
        "N={} R={} scenes={} mean {:.3} m median {:.3} m recall@1m {:.3} recall@5m {:.3}",
        cfg.irs.n_seeds,
        cfg.irs.rounds,
        scenes.len(),
        report.mean_m,
        report.median_m,
        report.recall.overall[0],
        report.recall.overall[1]
    );
    if let Some(o) = &report.orientation {
        println!(
            "orientation mean {:.3} deg median {:.3} deg",
            o.mean_deg, o.median_deg
        );
    }
    Ok(())
}

/// Trend checks over a sweep: rounds at `N=10`, seeds at `R=5`, and the
/// default cell against the single pass. Missing cells make a check `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendSummary {
    pub rounds_non_increasing: Option<bool>,
    pub seeds_non_increasing: Option<bool>,
    /// Mean error at `(10, 5)` over mean error at `(1, 1)`.
    pub irs_over_single_pass: Option<f64>,
}

pub fn trend_summary(sweep: &Sweep, band: f64) -> TrendSummary {
    let mut rounds = sweep
        .cells
        .iter()
        .filter(|c| c.n_seeds == 10)
        .collect::<Vec<_>>();
    rounds.sort_by_key(|c| c.rounds);
    let mut seeds = sweep
        .cells
        .iter()
        .filter(|c| c.rounds == 5)
        .collect::<Vec<_>>();
    seeds.sort_by_key(|c| c.n_seeds);
    let series = |cells: &[&crate::metrics::SweepCell]| -> Option<bool> {
        (cells.len() >= 2).then(|| {
            non_increasing_within(
                &cells.iter().map(|c| c.report.mean_m).collect::<Vec<_>>(),
                band,
            )
        })
    };
    let ratio = match (sweep.cell(10, 5), sweep.cell(1, 1)) {
        (Some(full), Some(single)) if single.report.mean_m > 0.0 => {
            Some(full.report.mean_m / single.report.mean_m)
        }
        _ => None,
    };
    TrendSummary {
        rounds_non_increasing: series(&rounds),
        seeds_non_increasing: series(&seeds),
        irs_over_single_pass: ratio,
    }
}

impl std::fmt::Display for TrendSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let word = |b: Option<bool>| match b {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "n/a",
        };
        write!(
            f,
            "trend: rounds@N=10 {}; seeds@R=5 {}; irs/single-pass {}",
            word(self.rounds_non_increasing),
            word(self.seeds_non_increasing),
            self.irs_over_single_pass
                .map(|r| format!("{r:.3}"))
                .unwrap_or_else(|| "n/a".into())
        )
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let (mut cfg, model, scenes) = prepare_source(&a.source)?;
    if let Some(ns) = &a.ns {
        cfg.sweep.ns = ns.clone();
    }
    if let Some(rs) = &a.rs {
        cfg.sweep.rs = rs.clone();
    }
    cfg.irs.lean = true;
    cfg.validate()?;
    let source = field_source(model.as_ref(), &cfg);
    let sweep = scaling_sweep(
        &source,
        &scenes,
        &cfg.sweep.ns,
        &cfg.sweep.rs,
        &cfg.irs,
        cfg.eval.base_seed,
        cfg.eval.extent_m,
    )?;
    let out = &a.source.common.out;
    create_dir(out)?;
    echo_config(out, &cfg)?;
    write_file(&out.join("sweep.csv"), sweep.to_csv().as_bytes())?;
    write_file(
        &out.join("sweep.json"),
        serde_json::to_string_pretty(&sweep)?.as_bytes(),
    )?;
    print!("{}", sweep.to_csv());
    println!("{}", trend_summary(&sweep, cfg.sweep.band));
    Ok(())
}
