//! End-to-end training of encoder and field on synthetic scenes, the AdamW
//! optimizer and the checkpoint format.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor};
use crate::distributions::{DisplacementTarget, OrientationTarget};
use crate::encoder::{EncoderConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::field::{Activation, PoseHypothesis};
use crate::model::{
    loss_on_tape, BatchLoss, LocalizationModel, Mode, ModelConfig, ParamGroup, Sample,
};
use crate::synthenv::{split_seed, SyntheticScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Hypotheses drawn per scene per step; a batch covers
    /// `batch_size / hypotheses_per_scene` scenes.
    pub hypotheses_per_scene: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mode: Mode,
    pub rng_seed: u64,
    pub encoder: EncoderConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub schedule: LrSchedule,
}

/// Multiplier applied to both group rates as training progresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at step 0 to 0 at the last scheduled step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total == 0 => 1.0,
            LrSchedule::Cosine => {
                let t = (step as f64 / total as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 80,
            hypotheses_per_scene: 8,
            lr_backbone: 1e-4,
            lr_heads: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mode: Mode::TwoDof,
            rng_seed: 0,
            encoder: EncoderConfig::default(),
            hidden: vec![256, 256],
            activation: Activation::Relu,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            hidden: self.hidden.clone(),
            activation: self.activation,
            mode: self.mode,
        }
    }

    pub fn scenes_per_step(&self) -> usize {
        self.batch_size / self.hypotheses_per_scene
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hypotheses_per_scene == 0 {
            return Err(Error::Validation(
                "batch_size and hypotheses_per_scene must be >= 1".into(),
            ));
        }
        if !self.batch_size.is_multiple_of(self.hypotheses_per_scene) {
            return Err(Error::Validation(format!(
                "batch_size {} is not a multiple of hypotheses_per_scene {}",
                self.batch_size, self.hypotheses_per_scene
            )));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "{name} must be a finite rate >= 0, got {v}"
                )));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Validation("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Validation("adam eps must be > 0".into()));
        }
        self.model_config().validate()
    }
}

/// Uniform draw from the whole map: `x` first, then `y`.
pub fn sample_training_hypothesis(rng: &mut impl Rng) -> PoseHypothesis {
    let x = rng.gen_range(-1.0..=1.0);
    let y = rng.gen_range(-1.0..=1.0);
    PoseHypothesis::clamped(x, y)
}

/// Displacement target from `q0` toward `q_gt`.
pub fn build_target(q0: &PoseHypothesis, q_gt: &PoseHypothesis) -> DisplacementTarget {
    DisplacementTarget::from_displacement([q_gt.x - q0.x, q_gt.y - q0.y])
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || lrs.len() != self.m.len()
        {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params / {} grads / {} rates",
                self.m.len(),
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].data();
            if p.len() != g.len() {
                return Err(Error::Dimension(format!("gradient {i} has the wrong size")));
            }
            let lr = lrs[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// A scene with its encoder inputs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: usize,
    pub ground: TokenGrid,
    pub satellite: TokenGrid,
    pub q_gt: PoseHypothesis,
    pub gamma_gt: [f64; 2],
}

impl PreparedScene {
    pub fn new(scene: &SyntheticScene) -> Result<Self> {
        let (ground, satellite) = scene.encoder_inputs()?;
        Ok(PreparedScene {
            id: scene.id,
            ground,
            satellite,
            q_gt: scene.q_gt,
            gamma_gt: scene.gamma_gt,
        })
    }

    pub fn prepare_all(scenes: &[SyntheticScene]) -> Result<Vec<Self>> {
        scenes.iter().map(PreparedScene::new).collect()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss_r: f64,
    pub loss_theta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_gamma: Option<f64>,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn total(&self) -> f64 {
        self.loss_r + self.loss_theta + self.loss_gamma.unwrap_or(0.0)
    }
}

const STREAM_INIT: u64 = 0x494e_4954;
const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_STEP: u64 = 0x5354_4550;

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: LocalizationModel,
    pub optimizer: AdamW,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Scene count the step schedule was laid out for.
    pub n_scenes: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, n_scenes: usize) -> Result<Self> {
        config.validate()?;
        if n_scenes == 0 {
            return Err(Error::Validation(
                "training needs at least one scene".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.rng_seed, STREAM_INIT));
        let model = LocalizationModel::init(&config.model_config(), &mut rng)?;
        let optimizer = Self::fresh_optimizer(&config, &model);
        Ok(Trainer {
            config,
            model,
            optimizer,
            step: 0,
            n_scenes,
        })
    }

    fn fresh_optimizer(config: &TrainConfig, model: &LocalizationModel) -> AdamW {
        let params = model.params();
        let shapes: Vec<&[usize]> = params.iter().map(|(_, _, t)| t.shape()).collect();
        AdamW::new(
            &shapes,
            config.beta1,
            config.beta2,
            config.eps,
            config.weight_decay,
        )
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.n_scenes.div_ceil(self.config.scenes_per_step()) as u64
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch()
    }

    /// Scene indices visited by step `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let within = (step % spe) as usize;
        let mut order: Vec<usize> = (0..self.n_scenes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(
            split_seed(self.config.rng_seed, STREAM_SHUFFLE),
            epoch,
        ));
        order.shuffle(&mut rng);
        let per = self.config.scenes_per_step();
        order[within * per..((within + 1) * per).min(self.n_scenes)].to_vec()
    }

    fn learning_rates(&self) -> Vec<f64> {
        let f = self.config.schedule.factor(self.step, self.total_steps());
        self.model
            .params()
            .iter()
            .map(|(_, g, _)| match g {
                ParamGroup::Backbone => f * self.config.lr_backbone,
                ParamGroup::Heads => f * self.config.lr_heads,
            })
            .collect()
    }

    /// Samples of a step: fresh uniform hypotheses for every scene.
    pub fn build_samples(&self, step: u64, scenes: &[&PreparedScene]) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(
            split_seed(self.config.rng_seed, STREAM_STEP),
            step,
        ));
        let mut out = Vec::with_capacity(scenes.len() * self.config.hypotheses_per_scene);
        for (k, s) in scenes.iter().enumerate() {
            for _ in 0..self.config.hypotheses_per_scene {
                let q0 = sample_training_hypothesis(&mut rng);
                out.push(Sample {
                    scene: k,
                    q0,
                    target: build_target(&q0, &s.q_gt),
                    orientation: self
                        .config
                        .mode
                        .has_orientation()
                        .then_some(OrientationTarget {
                            g_gamma: s.gamma_gt,
                        }),
                });
            }
        }
        out
    }

    /// Loss and gradients (in parameter order) for explicit samples.
    pub fn loss_and_grads(
        &self,
        scenes: &[&PreparedScene],
        samples: &[Sample],
    ) -> Result<(BatchLoss, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.model.on_tape(&mut tape);
        let grids: Vec<(&TokenGrid, &TokenGrid)> =
            scenes.iter().map(|s| (&s.ground, &s.satellite)).collect();
        let heads = self
            .model
            .forward_on_tape(&mut tape, &vars, &grids, samples)
            .map_err(|e| {
                Error::Numeric(format!(
                    "forward pass on scenes {:?}: {e}",
                    scenes.iter().map(|s| s.id).collect::<Vec<_>>()
                ))
            })?;
        let (loss, parts) = loss_on_tape(&mut tape, &heads, samples).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(remap_scene(&m, scenes)),
            other => other,
        })?;
        let grads = tape.backward(loss)?;
        Ok((
            parts,
            vars.leaves.iter().map(|v| grads.wrt(&tape, *v)).collect(),
        ))
    }

    /// One optimizer step over the next batch of the schedule.
    pub fn train_step(&mut self, data: &[PreparedScene]) -> Result<StepLog> {
        if data.len() != self.n_scenes {
            return Err(Error::Contract(format!(
                "trainer laid out for {} scenes, got {}",
                self.n_scenes,
                data.len()
            )));
        }
        let idx = self.batch_indices(self.step);
        let scenes: Vec<&PreparedScene> = idx.iter().map(|&i| &data[i]).collect();
        let samples = self.build_samples(self.step, &scenes);
        let (parts, grads) = self.loss_and_grads(&scenes, &samples)?;
        if !parts.total().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on scenes {:?}",
                idx
            )));
        }
        let grad_norm = grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let lrs = self.learning_rates();
        self.optimizer.step(self.model.params_mut(), &grads, &lrs)?;
        let log = StepLog {
            step: self.step,
            loss_r: parts.loss_r,
            loss_theta: parts.loss_theta,
            loss_gamma: parts.loss_gamma,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    /// Train until `config.epochs` epochs are complete, calling `on_step`
    /// after every step.
    pub fn fit(
        &mut self,
        data: &[PreparedScene],
        mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.total_steps() {
            let log = self.train_step(data)?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self
                .model
                .params()
                .into_iter()
                .map(|(n, _, t)| (n, t.clone()))
                .collect(),
            optimizer_t: self.optimizer.t,
            moments: self
                .optimizer
                .m
                .iter()
                .cloned()
                .zip(self.optimizer.v.iter().cloned())
                .collect(),
            step: self.step,
            epoch: self.epoch(),
            n_scenes: self.n_scenes,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(ck.config.clone(), ck.n_scenes)?;
        {
            let names: Vec<String> = trainer
                .model
                .params()
                .into_iter()
                .map(|(n, _, _)| n)
                .collect();
            if names.len() != ck.params.len() {
                return Err(Error::integrity(
                    "PARM",
                    format!(
                        "checkpoint holds {} tensors, model expects {}",
                        ck.params.len(),
                        names.len()
                    ),
                ));
            }
            for ((slot, name), (ck_name, t)) in trainer
                .model
                .params_mut()
                .into_iter()
                .zip(&names)
                .zip(&ck.params)
            {
                if name != ck_name || slot.shape() != t.shape() {
                    return Err(Error::integrity(
                        "PARM",
                        format!(
                            "tensor `{ck_name}` {:?} does not match model tensor `{name}` {:?}",
                            t.shape(),
                            slot.shape()
                        ),
                    ));
                }
                *slot = t.clone();
            }
        }
        if ck.moments.len() != ck.params.len() {
            return Err(Error::integrity(
                "OPTM",
                "moment count differs from parameter count",
            ));
        }
        for (i, (m, v)) in ck.moments.iter().enumerate() {
            if m.shape() != ck.params[i].1.shape() || v.shape() != ck.params[i].1.shape() {
                return Err(Error::integrity(
                    "OPTM",
                    format!("moment {i} has the wrong shape"),
                ));
            }
        }
        trainer.optimizer.t = ck.optimizer_t;
        trainer.optimizer.m = ck.moments.iter().map(|(m, _)| m.clone()).collect();
        trainer.optimizer.v = ck.moments.iter().map(|(_, v)| v.clone()).collect();
        trainer.step = ck.step;
        Ok(trainer)
    }
}

fn remap_scene(msg: &str, scenes: &[&PreparedScene]) -> String {
    // loss errors name the batch-local scene index; report the dataset id too
    let ids: Vec<usize> = scenes.iter().map(|s| s.id).collect();
    format!("{msg} (batch scene ids {ids:?})")
}

/// Serialized training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer_t: u64,
    /// `(m, v)` per parameter.
    pub moments: Vec<(Tensor, Tensor)>,
    pub step: u64,
    pub epoch: u64,
    pub n_scenes: usize,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DISPLOC\0";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::integrity(self.section, "truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::integrity(self.section, "invalid utf-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 2 {
            return Err(Error::integrity(
                self.section,
                format!("tensor rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::integrity(self.section, "truncated"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::integrity(self.section, e.to_string()))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::integrity(self.section, "trailing bytes"));
        }
        Ok(())
    }
}

const SECTIONS: [&str; 4] = ["CONF", "PARM", "OPTM", "STAT"];

impl Checkpoint {
    /// Layout: magic, version (u32), then the sections CONF, PARM, OPTM and
    /// STAT in that order, each as tag (4 bytes), payload length (u64),
    /// payload and the SHA-256 of the payload. Integers and floats are
    /// little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payloads = Vec::with_capacity(4);

        payloads.push(serde_json::to_vec(&self.config)?);

        let mut w = Writer(Vec::new());
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        payloads.push(w.0);

        let mut w = Writer(Vec::new());
        w.u64(self.optimizer_t);
        w.u32(self.moments.len() as u32);
        for (m, v) in &self.moments {
            w.tensor(m);
            w.tensor(v);
        }
        payloads.push(w.0);

        let mut w = Writer(Vec::new());
        w.u64(self.step);
        w.u64(self.epoch);
        w.u64(self.n_scenes as u64);
        w.u64(self.config.rng_seed);
        payloads.push(w.0);

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (tag, p) in SECTIONS.iter().zip(payloads) {
            out.extend_from_slice(tag.as_bytes());
            out.extend_from_slice(&(p.len() as u64).to_le_bytes());
            out.extend_from_slice(&p);
            out.extend_from_slice(&Sha256::digest(&p));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            section: "header",
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::integrity(
                "header",
                "not a checkpoint file (bad magic)",
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::integrity(
                "header",
                format!(
                    "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
                ),
            ));
        }
        let mut payloads = Vec::with_capacity(4);
        for tag in SECTIONS {
            r.section = tag;
            if r.take(4)? != tag.as_bytes() {
                return Err(Error::integrity(tag, "section tag missing or out of order"));
            }
            let len = r.u64()?;
            if len > (bytes.len() - r.pos) as u64 {
                return Err(Error::integrity(tag, "truncated"));
            }
            let p = r.take(len as usize)?;
            let sum = r.take(32)?;
            if Sha256::digest(p).as_slice() != sum {
                return Err(Error::integrity(tag, "checksum mismatch"));
            }
            payloads.push(p);
        }
        r.section = "trailer";
        r.done()?;

        let config: TrainConfig = serde_json::from_slice(payloads[0])
            .map_err(|e| Error::integrity("CONF", e.to_string()))?;

        let mut r = Reader {
            buf: payloads[1],
            pos: 0,
            section: "PARM",
        };
        let n = r.u32()? as usize;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            params.push((name, r.tensor()?));
        }
        r.done()?;

        let mut r = Reader {
            buf: payloads[2],
            pos: 0,
            section: "OPTM",
        };
        let optimizer_t = r.u64()?;
        let n = r.u32()? as usize;
        let mut moments = Vec::new();
        for _ in 0..n {
            let m = r.tensor()?;
            moments.push((m, r.tensor()?));
        }
        r.done()?;

        let mut r = Reader {
            buf: payloads[3],
            pos: 0,
            section: "STAT",
        };
        let step = r.u64()?;
        let epoch = r.u64()?;
        let n_scenes = r.u64()? as usize;
        let seed = r.u64()?;
        r.done()?;
        if seed != config.rng_seed {
            return Err(Error::integrity(
                "STAT",
                "rng seed disagrees with the stored config",
            ));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer_t,
            moments,
            step,
            epoch,
            n_scenes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename keeps the previous checkpoint intact on failure
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Model held by the checkpoint.
    pub fn model(&self) -> Result<LocalizationModel> {
        Ok(Trainer::from_checkpoint(self)?.model)
    }
}
