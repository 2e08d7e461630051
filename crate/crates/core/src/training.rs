//! Three-stage training: VAE pretraining, NSVAE latent matching and mask
//! decoder fine-tuning (classical or adversarial).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BatchOptions, Corpus, MixtureBatches, MixtureItem, SignalKind, Split, UtteranceBatches, UtteranceItem};
use crate::error::{Error, Result};
use crate::losses::{adversarial_losses_tensor, nsvae_loss_tensor, pretrain_loss_tensor, si_sdr_loss_tensor, LossWeights};
use crate::networks::checkpoint::{self, Manifest, ModelKind};
use crate::networks::nn::{Mode, ParamStore};
use crate::networks::{DiscriminatorModel, MaskDecoderModel, NetworkConfig, NsvaeModel, SpecBatch, VaeModel};
use crate::spectral::{IstftOperator, StftConfig};

/// Working precision of every trained network.
pub const TRAIN_DTYPE: DType = DType::F32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainCvae,
    PretrainNvae,
    TrainNsvae,
    FinetuneCf,
    FinetuneAdv,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainCvae => "pretrain_cvae",
            Stage::PretrainNvae => "pretrain_nvae",
            Stage::TrainNsvae => "train_nsvae",
            Stage::FinetuneCf => "finetune_cf",
            Stage::FinetuneAdv => "finetune_adv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Cf,
    Adv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingRunConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    pub skip_connections_pretrain: bool,
    pub skip_connections_finetune: bool,
    pub lr: f64,
    pub disc_lr: f64,
    pub lr_halving_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch: BatchOptions,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingRunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::PretrainCvae,
            weights: LossWeights::default(),
            skip_connections_pretrain: false,
            skip_connections_finetune: true,
            lr: 3e-4,
            disc_lr: 8e-5,
            lr_halving_patience: 3,
            early_stop_patience: 20,
            max_epochs: 1000,
            batch: BatchOptions::default(),
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainingRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.batch.validate()?;
        if self.lr_halving_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Everything a stage needs besides data and upstream models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSetup {
    pub run: TrainingRunConfig,
    pub network: NetworkConfig,
    pub stft: StftConfig,
}

impl Default for StageSetup {
    fn default() -> Self {
        Self {
            run: TrainingRunConfig::default(),
            network: NetworkConfig::default(),
            stft: StftConfig::default(),
        }
    }
}

impl StageSetup {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.network.validate()?;
        self.stft.validate()
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, clip: Option<f64>) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            vars,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
        })
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let gs: Vec<Option<Tensor>> = self.vars.iter().map(|v| grads.get(v.as_tensor()).map(Tensor::detach)).collect();
        let mut sq = 0.0;
        for g in gs.iter().flatten() {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm {norm}")));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = g.affine(scale, 0.0)?;
            self.m[i] = (self.m[i].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            self.v[i] = (self.v[i].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let denom = self.v[i].affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let update = (self.m[i].affine(self.lr / bc1, 0.0)? / denom)?;
            let var = &self.vars[i];
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(norm)
    }
}

/// What a validation observation triggered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Plateau rule on validation losses. The first observation (the untrained
/// model) only sets the reference. Afterwards the learning rate halves each
/// time the count of epochs since the last strict improvement reaches a
/// multiple of `halving_patience`, and training stops when it reaches
/// `stop_patience`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
    pub halving_patience: usize,
    pub stop_patience: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, halving_patience: usize, stop_patience: usize) -> Self {
        Self {
            lr,
            best: None,
            since_improvement: 0,
            halving_patience,
            stop_patience,
        }
    }

    pub fn observe(&mut self, validation_loss: f64) -> ScheduleEvent {
        match self.best {
            Some(b) if validation_loss >= b || validation_loss.is_nan() => {
                self.since_improvement += 1;
                let halved = self.since_improvement % self.halving_patience == 0;
                if halved {
                    self.lr *= 0.5;
                }
                ScheduleEvent {
                    improved: false,
                    halved,
                    stop: self.since_improvement >= self.stop_patience,
                }
            }
            _ => {
                self.best = Some(validation_loss);
                self.since_improvement = 0;
                ScheduleEvent {
                    improved: true,
                    ..Default::default()
                }
            }
        }
    }
}

/// Alias matching the single-step form of the rule.
pub fn lr_schedule_step(mut state: PlateauSchedule, validation_loss: f64) -> (PlateauSchedule, ScheduleEvent) {
    let ev = state.observe(validation_loss);
    (state, ev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Absent for epoch 0, which only evaluates the untrained model.
    pub train_loss: Option<f64>,
    pub validation_loss: f64,
    /// Named loss components on the validation split.
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
    pub halved: bool,
    pub stopped: bool,
    pub wall_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub stage: String,
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct LogLine<'a> {
    stage: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    record: EpochRecord,
}

impl RunLog {
    pub fn new(stage: &str, config_hash: String) -> Self {
        Self {
            stage: stage.to_string(),
            config_hash,
            records: Vec::new(),
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .min_by(|a, b| a.validation_loss.total_cmp(&b.validation_loss))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&LogLine {
                stage: &self.stage,
                config_hash: &self.config_hash,
                record: r.clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log: Option<RunLog> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parsed: LogLine = serde_json::from_str(line)?;
            let log = log.get_or_insert_with(|| RunLog::new(parsed.stage, parsed.config_hash.to_string()));
            log.records.push(parsed.record);
        }
        log.ok_or_else(|| Error::invalid("empty run log"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Replays the plateau rule over the recorded validation losses and
    /// reports whether every halving/stop flag matches.
    pub fn consistent_with_rule(&self, halving_patience: usize, stop_patience: usize) -> bool {
        let mut best = f64::INFINITY;
        let mut since = 0usize;
        for (i, r) in self.records.iter().enumerate() {
            let (halved, stop) = if i > 0 && r.validation_loss >= best {
                since += 1;
                (since % halving_patience == 0, since >= stop_patience)
            } else {
                best = r.validation_loss;
                since = 0;
                (false, false)
            };
            if r.halved != halved || r.stopped != stop {
                return false;
            }
        }
        true
    }
}

/// Output options shared by all stages.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for the best checkpoint and `run_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const BEST_DIR: &str = "best";

struct EpochLoop<'a> {
    stage: Stage,
    opts: &'a TrainOptions,
    schedule: PlateauSchedule,
    log: RunLog,
    best: Option<BTreeMap<String, Tensor>>,
    best_epoch: usize,
    started: Instant,
}

impl<'a> EpochLoop<'a> {
    fn new(stage: Stage, setup: &'a StageSetup, opts: &'a TrainOptions, lr: f64) -> Result<Self> {
        Ok(Self {
            stage,
            opts,
            schedule: PlateauSchedule::new(lr, setup.run.lr_halving_patience, setup.run.early_stop_patience),
            log: RunLog::new(stage.name(), setup.hash()?),
            best: None,
            best_epoch: 0,
            started: Instant::now(),
        })
    }

    /// Records one epoch; returns the schedule event.
    fn record(
        &mut self,
        epoch: usize,
        train_loss: Option<f64>,
        val: (f64, BTreeMap<String, f64>),
        store: &ParamStore,
        manifest: impl Fn(usize, f64) -> Manifest,
        warnings: Vec<String>,
    ) -> Result<ScheduleEvent> {
        let (validation_loss, components) = val;
        if !validation_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "{}: non-finite validation loss at epoch {epoch}",
                self.stage.name()
            )));
        }
        let lr_used = self.schedule.lr;
        let ev = self.schedule.observe(validation_loss);
        if ev.improved {
            self.best = Some(store.tensors()?);
            self.best_epoch = epoch;
            if let Some(dir) = &self.opts.out_dir {
                checkpoint::save(&dir.join(BEST_DIR), &manifest(epoch, validation_loss), store)?;
            }
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            components,
            lr: lr_used,
            halved: ev.halved,
            stopped: ev.stop,
            wall_secs: self.started.elapsed().as_secs_f64(),
            warnings,
        };
        if self.opts.verbose {
            eprintln!(
                "[{}] epoch {:>3} train {} val {:.5} lr {:.2e}{}{} {:?}",
                self.stage.name(),
                epoch,
                rec.train_loss.map_or("-".to_string(), |v| format!("{v:.5}")),
                validation_loss,
                lr_used,
                if ev.halved { " halve" } else { "" },
                if ev.stop { " stop" } else { "" },
                rec.components
            );
        }
        self.log.records.push(rec);
        if let Some(dir) = &self.opts.out_dir {
            self.log.write(&dir.join(RUN_LOG_FILE))?;
        }
        Ok(ev)
    }

    fn finish(self, store: &ParamStore) -> Result<RunLog> {
        if let Some(best) = &self.best {
            store.load(best, true)?;
        }
        Ok(self.log)
    }
}

fn check_finite(stage: Stage, epoch: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{}: non-finite training loss at epoch {epoch}", stage.name())))
    }
}

fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?)
}

fn spec_batch<'s>(specs: impl Iterator<Item = &'s crate::spectral::ComplexSpectrogram>) -> Result<SpecBatch> {
    let v: Vec<_> = specs.collect();
    SpecBatch::from_spectrograms(&v, TRAIN_DTYPE, &candle_core::Device::Cpu)
}

const VALIDATION_SEED: u64 = 0x7a11d;

/// Objective terms of one VAE pretraining batch.
fn vae_batch_loss(model: &VaeModel, items: &[UtteranceItem], beta: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<crate::losses::PretrainTerms> {
    let batch = spec_batch(items.iter().map(|i| &i.spec))?;
    let enc = model.encoder.forward(&batch, mode, model.skip_connections)?;
    let shape = enc.speech.dims().to_vec();
    let (z_re, z_im) = enc.speech.sample(&normal_tensor(rng, &shape)?, &normal_tensor(rng, &shape)?)?;
    let est = model.decoder.forward(&z_re, &z_im, enc.skips.as_ref(), mode, batch.lengths.clone())?;
    pretrain_loss_tensor(&enc.speech, &est, &batch, beta)
}

/// Pretraining objective on the validation split with fixed-seed latent
/// samples: `(total, {recon, kl})`.
pub fn vae_validation(model: &VaeModel, corpus: &Corpus, kind: SignalKind, setup: &StageSetup) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_SEED);
    let (mut total, mut recon, mut kl, mut n) = (0.0, 0.0, 0.0, 0usize);
    for batch in UtteranceBatches::new(corpus, kind, Split::Validation, setup.run.batch, setup.stft, VALIDATION_SEED, 0)? {
        let items = batch?;
        let terms = vae_batch_loss(model, &items, setup.run.weights.beta, Mode::Eval, &mut rng)?;
        let k = items.len();
        total += k as f64 * to_f64(&terms.total)?;
        recon += k as f64 * to_f64(&terms.recon)?;
        kl += k as f64 * to_f64(&terms.kl)?;
        n += k;
    }
    let n = n as f64;
    Ok((total / n, BTreeMap::from([("recon".to_string(), recon / n), ("kl".to_string(), kl / n)])))
}

pub struct VaeOutcome {
    pub model: VaeModel,
    pub log: RunLog,
}

/// Pretrains a speech (CVAE) or noise (NVAE) VAE on the pretrain split.
pub fn pretrain_vae(setup: &StageSetup, corpus: &Corpus, kind: SignalKind, opts: &TrainOptions) -> Result<VaeOutcome> {
    setup.validate()?;
    let run = &setup.run;
    let stage = match kind {
        SignalKind::Speech => Stage::PretrainCvae,
        SignalKind::Noise => Stage::PretrainNvae,
    };
    let model = VaeModel::new(&setup.network, run.skip_connections_pretrain, TRAIN_DTYPE, run.seed)?;
    let mut adam = Adam::new(model.store.trainable_vars(), run.lr, run.grad_clip)?;
    let mut lp = EpochLoop::new(stage, setup, opts, run.lr)?;
    let manifest = |epoch, loss| Manifest {
        kind: ModelKind::Vae,
        network: setup.network.clone(),
        skip_connections: run.skip_connections_pretrain,
        stage: stage.name().to_string(),
        epoch,
        validation_loss: Some(loss),
        tensors: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0xbeef);
    lp.record(0, None, vae_validation(&model, corpus, kind, setup)?, &model.store, manifest, vec![])?;
    for epoch in 1..=run.max_epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in UtteranceBatches::new(corpus, kind, Split::Pretrain, run.batch, setup.stft, run.seed, epoch as u64)? {
            let items = batch?;
            let terms = vae_batch_loss(&model, &items, run.weights.beta, Mode::Train, &mut rng)?;
            let v = check_finite(stage, epoch, to_f64(&terms.total)?)?;
            adam.lr = lp.schedule.lr;
            adam.step(&terms.total.backward()?)?;
            sum += v * items.len() as f64;
            n += items.len();
        }
        let val = vae_validation(&model, corpus, kind, setup)?;
        if lp.record(epoch, Some(sum / n as f64), val, &model.store, manifest, vec![])?.stop {
            break;
        }
    }
    let log = lp.finish(&model.store)?;
    Ok(VaeOutcome { model, log })
}

/// Copies pretrained encoder weights into a fresh NSVAE: the shared trunk
/// and speech head from the speech VAE, the noise head from the noise VAE's
/// head.
pub fn init_nsvae_from_pretrained(nsvae: &NsvaeModel, cvae: &VaeModel, nvae: &VaeModel) -> Result<usize> {
    let mut src = BTreeMap::new();
    for (name, t) in cvae.store.tensors()? {
        if name.starts_with("enc.") {
            src.insert(name, t);
        }
    }
    for (name, t) in nvae.store.tensors()? {
        if let Some(rest) = name.strip_prefix("enc.head_speech.") {
            src.insert(format!("enc.head_noise.{rest}"), t);
        }
    }
    nsvae.store.load(&src, true)
}

/// NSVAE objective of one mixture batch; pretrained encoders supply detached
/// targets.
pub fn nsvae_batch_terms(
    nsvae: &NsvaeModel,
    cvae: &VaeModel,
    nvae: &VaeModel,
    items: &[MixtureItem],
    alpha: f64,
    mode: Mode,
) -> Result<crate::losses::NsvaeTerms> {
    let x = spec_batch(items.iter().map(|i| &i.x))?;
    let v = spec_batch(items.iter().map(|i| &i.v))?;
    let y = spec_batch(items.iter().map(|i| &i.y))?;
    let target_speech = cvae.encoder.forward(&x, Mode::Eval, false)?.speech.detach();
    let target_noise = nvae.encoder.forward(&v, Mode::Eval, false)?.speech.detach();
    let q = nsvae.encoder.forward(&y, mode, false)?;
    let noise_q = q.noise.ok_or_else(|| Error::invalid("NSVAE encoder lacks a noise head"))?;
    nsvae_loss_tensor(&q.speech, &target_speech, &noise_q, &target_noise, &y.lengths, alpha)
}

fn nsvae_validation(nsvae: &NsvaeModel, cvae: &VaeModel, nvae: &VaeModel, corpus: &Corpus, setup: &StageSetup) -> Result<(f64, BTreeMap<String, f64>)> {
    let (mut total, mut speech, mut noise, mut n) = (0.0, 0.0, 0.0, 0usize);
    for batch in MixtureBatches::new(corpus, Split::Validation, setup.run.batch, setup.stft, VALIDATION_SEED, 0)? {
        let items = batch?;
        let t = nsvae_batch_terms(nsvae, cvae, nvae, &items, setup.run.weights.alpha, Mode::Eval)?;
        let k = items.len() as f64;
        total += k * to_f64(&t.total)?;
        speech += k * to_f64(&t.speech)?;
        noise += k * to_f64(&t.noise)?;
        n += items.len();
    }
    let n = n as f64;
    Ok((total / n, BTreeMap::from([("speech_kl".to_string(), speech / n), ("noise_kl".to_string(), noise / n)])))
}

pub struct NsvaeOutcome {
    pub model: NsvaeModel,
    pub log: RunLog,
}

/// Trains the NSVAE encoder on noisy mixtures to match the frozen
/// pretrained speech and noise posteriors.
pub fn train_nsvae(setup: &StageSetup, corpus: &Corpus, cvae: &VaeModel, nvae: &VaeModel, opts: &TrainOptions) -> Result<NsvaeOutcome> {
    setup.validate()?;
    let run = &setup.run;
    if cvae.network != setup.network || nvae.network != setup.network {
        return Err(Error::Config("pretrained VAEs do not match the configured architecture".into()));
    }
    let stage = Stage::TrainNsvae;
    let model = NsvaeModel::new(&setup.network, TRAIN_DTYPE, run.seed)?;
    init_nsvae_from_pretrained(&model, cvae, nvae)?;
    let mut adam = Adam::new(model.store.trainable_vars(), run.lr, run.grad_clip)?;
    let mut lp = EpochLoop::new(stage, setup, opts, run.lr)?;
    let manifest = |epoch, loss| Manifest {
        kind: ModelKind::Nsvae,
        network: setup.network.clone(),
        skip_connections: false,
        stage: stage.name().to_string(),
        epoch,
        validation_loss: Some(loss),
        tensors: vec![],
    };
    lp.record(0, None, nsvae_validation(&model, cvae, nvae, corpus, setup)?, &model.store, manifest, vec![])?;
    for epoch in 1..=run.max_epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in MixtureBatches::new(corpus, Split::Nsvae, run.batch, setup.stft, run.seed, epoch as u64)? {
            let items = batch?;
            let t = nsvae_batch_terms(&model, cvae, nvae, &items, run.weights.alpha, Mode::Train)?;
            let v = check_finite(stage, epoch, to_f64(&t.total)?)?;
            adam.lr = lp.schedule.lr;
            adam.step(&t.total.backward()?)?;
            sum += v * items.len() as f64;
            n += items.len();
        }
        let val = nsvae_validation(&model, cvae, nvae, corpus, setup)?;
        if lp.record(epoch, Some(sum / n as f64), val, &model.store, manifest, vec![])?.stop {
            break;
        }
    }
    let log = lp.finish(&model.store)?;
    Ok(NsvaeOutcome { model, log })
}

/// `(B, T, F)` complex product `y * m`.
fn complex_mul(y: &SpecBatch, m: &SpecBatch) -> Result<SpecBatch> {
    Ok(SpecBatch {
        re: ((&y.re * &m.re)? - (&y.im * &m.im)?)?,
        im: ((&y.re * &m.im)? + (&y.im * &m.re)?)?,
        lengths: y.lengths.clone(),
    })
}

/// Mask decoder applied to the NSVAE speech posterior mean of `y`.
pub fn masked_estimate(nsvae: &NsvaeModel, decoder: &MaskDecoderModel, y: &SpecBatch, mode: Mode) -> Result<SpecBatch> {
    let skip = decoder.decoder.skip_connections();
    let enc = nsvae.encoder.forward(y, Mode::Eval, skip)?;
    let skips = enc.skips.map(|s| s.detach());
    let mu = enc.speech.detach();
    let mask = decoder.decoder.forward(&mu.mu_re, &mu.mu_im, skips.as_ref(), mode, y.lengths.clone())?;
    complex_mul(y, &mask)
}

fn batch_si_sdr(est: &SpecBatch, items: &[MixtureItem], istft: &IstftOperator, eps: f64) -> Result<Tensor> {
    let losses = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let (re, im) = est.item(i)?;
            let x_hat = istft.forward(&re, &im, item.clean.len())?;
            let x = Tensor::from_slice(item.clean.samples(), item.clean.len(), &candle_core::Device::Cpu)?.to_dtype(TRAIN_DTYPE)?;
            si_sdr_loss_tensor(&x_hat, &x, eps)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = losses.len() as f64;
    Ok(Tensor::stack(&losses, 0)?.sum_all()?.affine(1.0 / n, 0.0)?)
}

fn finetune_validation(nsvae: &NsvaeModel, decoder: &MaskDecoderModel, corpus: &Corpus, setup: &StageSetup, istft: &IstftOperator) -> Result<(f64, BTreeMap<String, f64>)> {
    let (mut total, mut n) = (0.0, 0usize);
    for batch in MixtureBatches::new(corpus, Split::Validation, setup.run.batch, setup.stft, VALIDATION_SEED, 0)? {
        let items = batch?;
        let y = spec_batch(items.iter().map(|i| &i.y))?;
        let est = masked_estimate(nsvae, decoder, &y, Mode::Eval)?;
        total += items.len() as f64 * to_f64(&batch_si_sdr(&est, &items, istft, setup.run.weights.epsilon)?)?;
        n += items.len();
    }
    let v = total / n as f64;
    Ok((v, BTreeMap::from([("si_sdr_loss".to_string(), v)])))
}

pub struct FinetuneOutcome {
    pub decoder: MaskDecoderModel,
    pub discriminator: Option<DiscriminatorModel>,
    pub log: RunLog,
    pub generator_steps: usize,
    pub discriminator_steps: usize,
}

const DISC_COLLAPSE_LOSS: f64 = 1e-4;
const DISC_COLLAPSE_EPOCHS: usize = 5;

/// Fine-tunes a mask decoder, initialized from the pretrained speech VAE
/// decoder, on top of the frozen NSVAE encoder.
pub fn finetune_decoder(
    setup: &StageSetup,
    corpus: &Corpus,
    nsvae: &NsvaeModel,
    cvae: &VaeModel,
    mode: FinetuneMode,
    opts: &TrainOptions,
) -> Result<FinetuneOutcome> {
    setup.validate()?;
    let run = &setup.run;
    if nsvae.network != setup.network || cvae.network != setup.network {
        return Err(Error::Config("NSVAE and speech VAE do not match the configured architecture".into()));
    }
    let stage = match mode {
        FinetuneMode::Cf => Stage::FinetuneCf,
        FinetuneMode::Adv => Stage::FinetuneAdv,
    };
    let decoder = MaskDecoderModel::new(&setup.network, run.skip_connections_finetune, TRAIN_DTYPE, run.seed)?;
    let pretrained: BTreeMap<String, Tensor> = cvae
        .store
        .tensors()?
        .into_iter()
        .filter(|(n, _)| n.starts_with("dec."))
        .collect();
    decoder.store.load(&pretrained, false)?;
    let disc = match mode {
        FinetuneMode::Cf => None,
        FinetuneMode::Adv => Some(DiscriminatorModel::new(&setup.network, TRAIN_DTYPE, run.seed ^ 0xd15c)?),
    };
    let istft = IstftOperator::new(&setup.stft, TRAIN_DTYPE, &candle_core::Device::Cpu)?;
    let mut gen_opt = Adam::new(decoder.store.trainable_vars(), run.lr, run.grad_clip)?;
    let mut disc_opt = match &disc {
        Some(d) => Some(Adam::new(d.store.trainable_vars(), run.disc_lr, run.grad_clip)?),
        None => None,
    };
    let mut lp = EpochLoop::new(stage, setup, opts, run.lr)?;
    let manifest = |epoch, loss| Manifest {
        kind: ModelKind::MaskDecoder,
        network: setup.network.clone(),
        skip_connections: run.skip_connections_finetune,
        stage: stage.name().to_string(),
        epoch,
        validation_loss: Some(loss),
        tensors: vec![],
    };
    lp.record(0, None, finetune_validation(nsvae, &decoder, corpus, setup, &istft)?, &decoder.store, manifest, vec![])?;
    let mut collapse_run = 0usize;
    for epoch in 1..=run.max_epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        let (mut disc_sum, mut disc_batches) = (0.0, 0usize);
        for batch in MixtureBatches::new(corpus, Split::Nsvae, run.batch, setup.stft, run.seed, epoch as u64)? {
            let items = batch?;
            let y = spec_batch(items.iter().map(|i| &i.y))?;
            let est = masked_estimate(nsvae, &decoder, &y, Mode::Train)?;
            let sdr = batch_si_sdr(&est, &items, &istft, run.weights.epsilon)?;
            let mut total = sdr.clone();
            if let Some(d) = &disc {
                let fake = d.disc.forward(&est, Mode::Eval)?;
                let real = fake.zeros_like()?;
                let (gen_term, _) = adversarial_losses_tensor(&real, &fake)?;
                total = (total + gen_term.affine(run.weights.adv_weight, 0.0)?)?;
            }
            let v = check_finite(stage, epoch, to_f64(&total)?)?;
            gen_opt.lr = lp.schedule.lr;
            gen_opt.step(&total.backward()?)?;
            sum += v * items.len() as f64;
            n += items.len();

            if let (Some(d), Some(opt)) = (&disc, disc_opt.as_mut()) {
                let x = spec_batch(items.iter().map(|i| &i.x))?;
                let real = d.disc.forward(&x, Mode::Train)?;
                let fake = d.disc.forward(&est.detach(), Mode::Train)?;
                let (_, disc_term) = adversarial_losses_tensor(&real, &fake)?;
                let dv = check_finite(stage, epoch, to_f64(&disc_term)?)?;
                opt.step(&disc_term.backward()?)?;
                disc_sum += dv;
                disc_batches += 1;
            }
        }
        let mut warnings = Vec::new();
        if disc.is_some() {
            let mean = disc_sum / disc_batches.max(1) as f64;
            collapse_run = if mean <= DISC_COLLAPSE_LOSS { collapse_run + 1 } else { 0 };
            if collapse_run >= DISC_COLLAPSE_EPOCHS {
                warnings.push(format!(
                    "discriminator loss at or below {DISC_COLLAPSE_LOSS} for {collapse_run} epochs"
                ));
            }
        }
        let (val, mut comps) = finetune_validation(nsvae, &decoder, corpus, setup, &istft)?;
        if disc.is_some() {
            comps.insert("disc_loss_train".to_string(), disc_sum / disc_batches.max(1) as f64);
        }
        if lp.record(epoch, Some(sum / n as f64), (val, comps), &decoder.store, manifest, warnings)?.stop {
            break;
        }
    }
    let generator_steps = gen_opt.steps();
    let discriminator_steps = disc_opt.as_ref().map_or(0, Adam::steps);
    if let (Some(d), Some(dir)) = (&disc, &opts.out_dir) {
        let m = Manifest {
            kind: ModelKind::Discriminator,
            network: setup.network.clone(),
            skip_connections: false,
            stage: stage.name().to_string(),
            epoch: lp.best_epoch,
            validation_loss: None,
            tensors: vec![],
        };
        checkpoint::save(&dir.join("discriminator"), &m, &d.store)?;
    }
    let log = lp.finish(&decoder.store)?;
    Ok(FinetuneOutcome {
        decoder,
        discriminator: disc,
        log,
        generator_steps,
        discriminator_steps,
    })
}

/// Loads a pretrained VAE checkpoint.
pub fn load_vae(dir: &Path) -> Result<VaeModel> {
    let m = checkpoint::load_manifest(dir)?;
    if m.kind != ModelKind::Vae {
        return Err(Error::Config(format!("{} is not a VAE checkpoint", dir.display())));
    }
    let model = VaeModel::new(&m.network, m.skip_connections, TRAIN_DTYPE, 0)?;
    checkpoint::restore(dir, &model.store)?;
    Ok(model)
}

pub fn load_nsvae(dir: &Path) -> Result<NsvaeModel> {
    let m = checkpoint::load_manifest(dir)?;
    if m.kind != ModelKind::Nsvae {
        return Err(Error::Config(format!("{} is not an NSVAE checkpoint", dir.display())));
    }
    let model = NsvaeModel::new(&m.network, TRAIN_DTYPE, 0)?;
    checkpoint::restore(dir, &model.store)?;
    Ok(model)
}

pub fn load_mask_decoder(dir: &Path) -> Result<MaskDecoderModel> {
    let m = checkpoint::load_manifest(dir)?;
    if m.kind != ModelKind::MaskDecoder {
        return Err(Error::Config(format!("{} is not a mask decoder checkpoint", dir.display())));
    }
    let model = MaskDecoderModel::new(&m.network, m.skip_connections, TRAIN_DTYPE, 0)?;
    checkpoint::restore(dir, &model.store)?;
    Ok(model)
}

/// Saves a trained model under `dir` with the given stage label.
pub fn save_vae(dir: &Path, model: &VaeModel, stage: Stage, log: &RunLog) -> Result<()> {
    let best = log.best();
    checkpoint::save(
        dir,
        &Manifest {
            kind: ModelKind::Vae,
            network: model.network.clone(),
            skip_connections: model.skip_connections,
            stage: stage.name().to_string(),
            epoch: best.map_or(0, |r| r.epoch),
            validation_loss: best.map(|r| r.validation_loss),
            tensors: vec![],
        },
        &model.store,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_after_three_non_improving_epochs() {
        let mut s = PlateauSchedule::new(1.0, 3, 20);
        let events: Vec<_> = [1.0, 0.9, 0.95, 0.96, 0.97].iter().map(|&l| s.observe(l)).collect();
        assert_eq!(events.iter().map(|e| e.halved).collect::<Vec<_>>(), [false, false, false, false, true]);
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn decreasing_losses_never_halve() {
        let mut s = PlateauSchedule::new(1.0, 3, 20);
        for k in 0..50 {
            let ev = s.observe(10.0 - k as f64 * 0.1);
            assert!(!ev.halved && !ev.stop);
        }
        assert_eq!(s.lr, 1.0);
    }

    #[test]
    fn constant_losses_halve_every_three_and_stop_at_twenty() {
        let mut s = PlateauSchedule::new(1.0, 3, 20);
        let mut halved = Vec::new();
        let mut stop = None;
        for epoch in 0..=25 {
            let ev = s.observe(1.0);
            if ev.halved {
                halved.push(epoch);
            }
            if ev.stop {
                stop = Some(epoch);
                break;
            }
        }
        assert_eq!(halved, vec![3, 6, 9, 12, 15, 18]);
        assert_eq!(stop, Some(20));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &candle_core::Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.1, None).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let x = Var::new(&[100.0f64], &candle_core::Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.5, Some(1.0)).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let norm = opt.step(&loss.backward().unwrap()).unwrap();
        assert!((norm - 200.0).abs() < 1e-9);
        let v = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v - 99.5).abs() < 1e-6);
    }

    #[test]
    fn run_log_round_trips_and_replays() {
        let mut log = RunLog::new("pretrain_cvae", "abc".into());
        let mut s = PlateauSchedule::new(1.0, 3, 20);
        for (epoch, l) in [2.0, 1.0, 1.5, 1.5, 1.5, 0.5].into_iter().enumerate() {
            let ev = s.observe(l);
            log.records.push(EpochRecord {
                epoch,
                train_loss: None,
                validation_loss: l,
                components: BTreeMap::new(),
                lr: s.lr,
                halved: ev.halved,
                stopped: ev.stop,
                wall_secs: 0.0,
                warnings: vec![],
            });
        }
        assert!(log.consistent_with_rule(3, 20));
        let back = RunLog::from_jsonl(&log.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, log);
        log.records[3].halved = true;
        assert!(!log.consistent_with_rule(3, 20));
    }
}
