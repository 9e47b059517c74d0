//! Alternating adversarial optimization of G, F, D_V and D_N, with a fake
//! history pool, a linear learning-rate decay, checkpoints and a per-step
//! JSON-lines loss log.
//!
//! All networks live in one [`ParameterSet`] under the prefixes `g.`, `f.`,
//! `dv.`, `dn.` and `eval_ffe.` (the frozen face-feature extractor used to
//! score verification). A step computes the generator gradient and both
//! discriminator gradients against the same pre-step parameters, checks
//! every loss for finiteness, and only then applies the three updates, so a
//! diverging step leaves the state untouched.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nirgan_tensor::{Binder, Graph, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::checkpoint::{self, CheckpointKind, CheckpointManifest, SeedState};
use crate::config::Config;
use crate::data::{shuffled_indices, PairedImages};
use crate::discriminator::{discriminate, init_discriminator_params};
use crate::error::{Error, Result};
use crate::generator::{generate, init_generator_params, load_pretrained_encoder, EncoderKind};
use crate::losses::{self, LossRecord, ObjectiveTerms};
use crate::optim::{Adam, AdamConfig};

pub const GEN_PREFIXES: [&str; 2] = ["g.", "f."];
pub const EVAL_FFE_PREFIX: &str = "eval_ffe.";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const POOL_STREAM: u64 = 0x706f_6f6c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of `epochs` after which the rate decays linearly to zero.
    pub decay_start_fraction: f64,
    pub image_pool_size: usize,
    pub seed: u64,
    /// Square training resolution (images are resized on load).
    pub resolution: usize,
    /// Epochs during which both generators' encoder copies stay fixed.
    pub freeze_ffe_epochs: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Stop after this many steps in total; 0 means no cap.
    pub max_steps: u64,
    /// Pretrained extractor checkpoint; empty means random initialization.
    pub ffe_checkpoint: String,
    /// Directory for checkpoints, the loss log and the split manifest.
    pub out_dir: String,
    /// Training checkpoint to continue from; empty starts fresh.
    pub resume: String,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 1,
            learning_rate: 2e-4,
            decay_start_fraction: 0.5,
            image_pool_size: 50,
            seed: 0,
            resolution: 64,
            freeze_ffe_epochs: 0,
            checkpoint_every: 0,
            max_steps: 0,
            ffe_checkpoint: String::new(),
            out_dir: "runs/train".into(),
            resume: String::new(),
            pretrain_epochs: 20,
            pretrain_batch_size: 16,
            pretrain_learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.decay_start_fraction) {
            return bad(format!("decay_start_fraction {} outside [0, 1]", self.decay_start_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.resolution == 0 {
            return bad("epochs, batch_size and resolution must be at least 1".into());
        }
        Ok(())
    }

    /// Rate at fractional epoch `t`: constant until `decay_start_fraction · epochs`,
    /// then linear to zero at `epochs`.
    pub fn learning_rate_at(&self, t: f64) -> f64 {
        let e = self.epochs as f64;
        let start = self.decay_start_fraction * e;
        if start >= e {
            return if t < e { self.learning_rate } else { 0.0 };
        }
        if t <= start {
            return self.learning_rate;
        }
        (self.learning_rate * (e - t) / (e - start)).max(0.0)
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.batch_size) as u64
    }
}

/// The three comparison arms: plain CycleGAN, plus pixel consistency, plus
/// the face-feature encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Basic,
    BasicPc,
    FfePc,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Basic, Ablation::BasicPc, Ablation::FfePc];

    /// Sets the encoder and the pixel-consistency weight for this arm. Arms
    /// with the pc term keep a positive configured weight, else use the default.
    pub fn apply(self, config: &mut Config) {
        let default_pc = losses::LossWeights::default().gamma_pc;
        let pc = if config.loss.gamma_pc > 0.0 { config.loss.gamma_pc } else { default_pc };
        let (encoder, gamma) = match self {
            Ablation::Basic => (EncoderKind::Basic, 0.0),
            Ablation::BasicPc => (EncoderKind::Basic, pc),
            Ablation::FfePc => (EncoderKind::Ffe, pc),
        };
        config.generator.encoder = encoder;
        config.loss.gamma_pc = gamma;
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Basic => "basic",
            Ablation::BasicPc => "basic-pc",
            Ablation::FfePc => "ffe-pc",
        }
    }
}

/// History of generated images shown to a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor<f32>>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }
}

/// Per image: while the pool is filling, store it and return it. Once full,
/// with probability 0.5 return a stored image (replacing it with the fresh
/// one), otherwise return the fresh image.
pub fn pool_query<R: Rng + ?Sized>(pool: &mut ImagePool, fresh: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    if pool.capacity == 0 {
        return Ok(fresh.clone());
    }
    let (n, ..) = fresh.dims4()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = fresh.batch_item(i)?;
        if pool.images.len() < pool.capacity {
            pool.images.push(img.clone());
            out.push(img);
        } else if rng.gen::<f64>() > 0.5 {
            let k = rng.gen_range(0..pool.capacity);
            out.push(std::mem::replace(&mut pool.images[k], img));
        } else {
            out.push(img);
        }
    }
    Ok(Tensor::concat_batch(&out)?)
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub params: ParameterSet<f32>,
    pub step: u64,
    pub train_subjects: Vec<String>,
    adam_gen: Adam<f32>,
    adam_dv: Adam<f32>,
    adam_dn: Adam<f32>,
    pool_v: ImagePool,
    pool_n: ImagePool,
    rng: ChaCha8Rng,
}

/// Learning rate and encoder freezing for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    pub learning_rate: f64,
    pub freeze_ffe: bool,
}

fn adam_config() -> AdamConfig {
    AdamConfig::default()
}

impl TrainState {
    /// Fresh state. With a pretrained extractor, both generators' encoder
    /// copies start from it (FFE arm) and it becomes the evaluation embedder.
    pub fn new(config: &Config, pretrained_ffe: Option<&ParameterSet<f32>>) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let s = |k: u64| seed.wrapping_mul(0x100).wrapping_add(k);
        let mut params = ParameterSet::new();
        for (k, prefix) in GEN_PREFIXES.iter().enumerate() {
            let mut p = init_generator_params::<f32>(&config.generator, &config.ffe, s(k as u64 + 1))?;
            if let (Some(pre), EncoderKind::Ffe) = (pretrained_ffe, config.generator.encoder) {
                load_pretrained_encoder(&mut p, &config.ffe, pre)?;
            }
            params.merge_prefixed(prefix, p);
        }
        params.merge_prefixed("dv.", init_discriminator_params(&config.discriminator, s(3))?);
        params.merge_prefixed("dn.", init_discriminator_params(&config.discriminator, s(4))?);
        let eval_ffe = match pretrained_ffe {
            Some(p) => p.clone(),
            None => backbone::init_ffe_params(&config.ffe, s(5))?,
        };
        params.merge_prefixed(EVAL_FFE_PREFIX, eval_ffe);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(POOL_STREAM);
        Ok(TrainState {
            config: config.clone(),
            params,
            step: 0,
            train_subjects: Vec::new(),
            adam_gen: Adam::new(adam_config()),
            adam_dv: Adam::new(adam_config()),
            adam_dn: Adam::new(adam_config()),
            pool_v: ImagePool::new(config.train.image_pool_size),
            pool_n: ImagePool::new(config.train.image_pool_size),
            rng,
        })
    }

    /// Parameters of one network with its prefix removed (`"g."`, `"dv."`, ...).
    pub fn network(&self, prefix: &str) -> ParameterSet<f32> {
        self.params.extract_prefix(prefix, "")
    }

    pub fn pools(&self) -> (&ImagePool, &ImagePool) {
        (&self.pool_v, &self.pool_n)
    }

    pub fn optimizer_steps(&self) -> [u64; 3] {
        [self.adam_gen.steps(), self.adam_dv.steps(), self.adam_dn.steps()]
    }

    pub fn save(&self, path: &Path) -> Result<CheckpointManifest> {
        let mut manifest = CheckpointManifest::new(CheckpointKind::Training, self.step, self.config.clone());
        manifest.seed_state = Some(SeedState {
            seed: self.config.train.seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        });
        manifest.train_subjects = self.train_subjects.clone();
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push((format!("param/{name}"), t));
        }
        for (label, adam) in [("gen", &self.adam_gen), ("dv", &self.adam_dv), ("dn", &self.adam_dn)] {
            manifest.optimizer_steps.insert(label.into(), adam.steps());
            for (name, t) in adam.first_moments().iter() {
                tensors.push((format!("adam/{label}/m/{name}"), t));
            }
            for (name, t) in adam.second_moments().iter() {
                tensors.push((format!("adam/{label}/v/{name}"), t));
            }
        }
        for (label, pool) in [("v", &self.pool_v), ("n", &self.pool_n)] {
            for (i, t) in pool.images.iter().enumerate() {
                tensors.push((format!("pool/{label}/{i:06}"), t));
            }
        }
        checkpoint::save(path, manifest, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        if manifest.kind != CheckpointKind::Training {
            return Err(Error::Checkpoint(format!("{} is not a training checkpoint", path.display())));
        }
        let config = manifest.config.clone();
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut moments: [[ParameterSet<f32>; 2]; 3] = Default::default();
        let mut pools = [ImagePool::new(config.train.image_pool_size), ImagePool::new(config.train.image_pool_size)];
        for (key, t) in tensors {
            let parts: Vec<&str> = key.splitn(4, '/').collect();
            match parts.as_slice() {
                ["param", name] => {
                    params.insert(*name, t);
                }
                ["adam", opt, kind, name] => {
                    let o = ["gen", "dv", "dn"].iter().position(|x| x == opt);
                    let k = ["m", "v"].iter().position(|x| x == kind);
                    match (o, k) {
                        (Some(o), Some(k)) => {
                            moments[o][k].insert(*name, t);
                        }
                        _ => return Err(Error::Checkpoint(format!("unknown entry {key}"))),
                    }
                }
                ["pool", which, _] => {
                    let i = if *which == "v" { 0 } else { 1 };
                    pools[i].images.push(t);
                }
                _ => return Err(Error::Checkpoint(format!("unknown entry {key}"))),
            }
        }
        let seed = manifest
            .seed_state
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("training checkpoint lacks seed state".into()))?;
        let word_pos: u128 = seed
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad word position {:?}", seed.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.seed);
        rng.set_stream(seed.stream);
        rng.set_word_pos(word_pos);
        let steps = |k: &str| manifest.optimizer_steps.get(k).copied().unwrap_or(0);
        let [gen, dv, dn] = moments;
        let mk = |[m, v]: [ParameterSet<f32>; 2], k: &str| Adam::from_state(adam_config(), steps(k), m, v);
        let [pool_v, pool_n] = pools;
        Ok(TrainState {
            config,
            params,
            step: manifest.step,
            train_subjects: manifest.train_subjects,
            adam_gen: mk(gen, "gen"),
            adam_dv: mk(dv, "dv"),
            adam_dn: mk(dn, "dn"),
            pool_v,
            pool_n,
            rng,
        })
    }
}

fn is_generator_param(name: &str, freeze_ffe: bool) -> bool {
    GEN_PREFIXES.iter().any(|p| {
        name.strip_prefix(p)
            .is_some_and(|rest| !(freeze_ffe && rest.starts_with("ffe.")))
    })
}

fn check_record(record: &LossRecord, step: u64) -> Result<()> {
    match record.first_non_finite() {
        Some(term) => Err(Error::Divergence {
            term: term.into(),
            step,
        }),
        None => Ok(()),
    }
}

/// One generator update followed by one update of each discriminator.
pub fn train_step(state: &mut TrainState, vis: &Tensor<f32>, nir: &Tensor<f32>, control: StepControl) -> Result<LossRecord> {
    if vis.shape() != nir.shape() {
        return Err(Error::Protocol(format!(
            "training batch is not index-paired: VIS {:?} vs NIR {:?}",
            vis.shape(),
            nir.shape()
        )));
    }
    let cfg = &state.config;
    let (gc, fc, dc, w) = (&cfg.generator, &cfg.ffe, &cfg.discriminator, cfg.loss);

    let (terms, gen_grads, fake_n, fake_v) = {
        let freeze = control.freeze_ffe;
        let mut g = Graph::new();
        let mut p = Binder::with_filter(&state.params, move |n| is_generator_param(n, freeze));
        let real_v = g.constant(vis.clone());
        let real_n = g.constant(nir.clone());
        let fake_n = generate(&mut g, &mut p, "g.", gc, fc, real_v)?;
        let rec_v = generate(&mut g, &mut p, "f.", gc, fc, fake_n)?;
        let fake_v = generate(&mut g, &mut p, "f.", gc, fc, real_n)?;
        let rec_n = generate(&mut g, &mut p, "g.", gc, fc, fake_v)?;
        let score_n = discriminate(&mut g, &mut p, "dn.", dc, fake_n)?;
        let score_v = discriminate(&mut g, &mut p, "dv.", dc, fake_v)?;
        let adv_g = losses::lsgan_generator_node(&mut g, score_n);
        let adv_f = losses::lsgan_generator_node(&mut g, score_v);
        let cyc = losses::cycle_node(&mut g, real_v, rec_v, real_n, rec_n)?;
        let pc = losses::pixel_consistency_node(&mut g, fake_n, real_n, fake_v, real_v)?;
        let total = g.weighted_sum(&[(adv_g, 1.0), (adv_f, 1.0), (cyc, w.lambda_cyc), (pc, w.gamma_pc)])?;
        let terms = ObjectiveTerms {
            adv_g: f64::from(g.scalar(adv_g)),
            adv_f: f64::from(g.scalar(adv_f)),
            cyc: f64::from(g.scalar(cyc)),
            pc: f64::from(g.scalar(pc)),
        };
        let mut grads = g.backward(total)?;
        (terms, p.collect(&mut grads), g.value(fake_n).clone(), g.value(fake_v).clone())
    };

    let mut rng = state.rng.clone();
    let mut pool_n = state.pool_n.clone();
    let mut pool_v = state.pool_v.clone();
    let pooled_n = pool_query(&mut pool_n, &fake_n, &mut rng)?;
    let pooled_v = pool_query(&mut pool_v, &fake_v, &mut rng)?;
    let (d_n, dn_grads) = discriminator_half(&state.params, "dn.", dc, nir, &pooled_n)?;
    let (d_v, dv_grads) = discriminator_half(&state.params, "dv.", dc, vis, &pooled_v)?;

    let total = terms.adv_g + terms.adv_f + w.lambda_cyc * terms.cyc + w.gamma_pc * terms.pc;
    let record = LossRecord {
        adv_g: terms.adv_g,
        adv_f: terms.adv_f,
        d_v,
        d_n,
        cyc: terms.cyc,
        pc: terms.pc,
        total,
    };
    check_record(&record, state.step)?;
    for grads in [&gen_grads, &dn_grads, &dv_grads] {
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Divergence {
                term: format!("gradient of {name}"),
                step: state.step,
            });
        }
    }

    let lr = control.learning_rate;
    state.adam_gen.step(&mut state.params, &gen_grads, lr);
    state.adam_dn.step(&mut state.params, &dn_grads, lr);
    state.adam_dv.step(&mut state.params, &dv_grads, lr);
    state.pool_n = pool_n;
    state.pool_v = pool_v;
    state.rng = rng;
    state.step += 1;
    Ok(record)
}

fn discriminator_half(
    params: &ParameterSet<f32>,
    prefix: &'static str,
    config: &crate::discriminator::DiscriminatorConfig,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
) -> Result<(f64, ParameterSet<f32>)> {
    let mut g = Graph::new();
    let mut p = Binder::with_filter(params, move |n| n.starts_with(prefix));
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let sr = discriminate(&mut g, &mut p, prefix, config, r)?;
    let sf = discriminate(&mut g, &mut p, prefix, config, f)?;
    let loss = losses::lsgan_discriminator_node(&mut g, sr, sf)?;
    let value = f64::from(g.scalar(loss));
    let mut grads = g.backward(loss)?;
    Ok((value, p.collect(&mut grads)))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Number of steps completed, counting this one.
    pub step: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub losses: LossRecord,
    /// Seconds since this process started the loop.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: CheckpointManifest,
    pub checkpoint: PathBuf,
    pub records: Vec<LogRecord>,
}

/// Total number of steps a loop over `n_samples` pairs will run.
pub fn total_steps(config: &TrainConfig, n_samples: usize) -> u64 {
    let full = config.epochs as u64 * config.steps_per_epoch(n_samples);
    if config.max_steps > 0 {
        full.min(config.max_steps)
    } else {
        full
    }
}

/// Indices of the batch taken at global step `step`.
pub fn batch_indices(config: &TrainConfig, n_samples: usize, step: u64) -> Vec<usize> {
    let spe = config.steps_per_epoch(n_samples);
    let (epoch, k) = (step / spe, (step % spe) as usize);
    let order = shuffled_indices(n_samples, config.seed, epoch + 1);
    let b = config.batch_size;
    order[k * b..((k + 1) * b).min(n_samples)].to_vec()
}

/// Learning rate and freezing at global step `step`.
pub fn step_control(config: &TrainConfig, n_samples: usize, step: u64) -> StepControl {
    let spe = config.steps_per_epoch(n_samples);
    let t = (step / spe) as f64 + (step % spe) as f64 / spe as f64;
    StepControl {
        learning_rate: config.learning_rate_at(t),
        freeze_ffe: t < config.freeze_ffe_epochs as f64,
    }
}

/// Runs from `state.step` to the configured end, appending to the log in
/// `out_dir` and writing checkpoints there. On divergence the untouched
/// pre-step state is saved as the latest checkpoint before the error returns.
pub fn train_loop(state: &mut TrainState, data: &PairedImages, out_dir: &Path) -> Result<TrainOutcome> {
    let tc = state.config.train.clone();
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Protocol("empty training set".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if state.train_subjects.is_empty() {
        let mut subjects = data.subjects().to_vec();
        subjects.sort();
        subjects.dedup();
        state.train_subjects = subjects;
    }
    let log_path = out_dir.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let n = data.len();
    let end = total_steps(&tc, n);
    let spe = tc.steps_per_epoch(n);
    let started = Instant::now();
    let mut records = Vec::new();
    while state.step < end {
        let idx = batch_indices(&tc, n, state.step);
        let (vis, nir) = data.paired(&idx)?;
        let control = step_control(&tc, n, state.step);
        let epoch = state.step / spe;
        let losses = match train_step(state, &vis, &nir, control) {
            Ok(r) => r,
            Err(e @ Error::Divergence { .. }) => {
                state.save(&out_dir.join(LATEST_CHECKPOINT))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let record = LogRecord {
            step: state.step,
            epoch,
            learning_rate: control.learning_rate,
            losses,
            wall_time: started.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Numeric(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        records.push(record);
        if tc.checkpoint_every > 0 && state.step.is_multiple_of(tc.checkpoint_every) && state.step < end {
            state.save(&out_dir.join(LATEST_CHECKPOINT))?;
        }
    }
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    let manifest = state.save(&checkpoint)?;
    Ok(TrainOutcome {
        manifest,
        checkpoint,
        records,
    })
}

/// Writes a pretrained extractor as an FFE checkpoint.
pub fn save_ffe_checkpoint(path: &Path, config: &Config, params: &ParameterSet<f32>, step: u64) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest::new(CheckpointKind::Ffe, step, config.clone());
    let tensors: Vec<(String, &Tensor<f32>)> = params.iter().map(|(n, t)| (n.clone(), t)).collect();
    checkpoint::save(path, manifest, &tensors)
}

pub fn load_ffe_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParameterSet<f32>)> {
    let (manifest, tensors) = checkpoint::load(path)?;
    if manifest.kind != CheckpointKind::Ffe {
        return Err(Error::Checkpoint(format!("{} is not an extractor checkpoint", path.display())));
    }
    let mut params = ParameterSet::new();
    for (name, t) in tensors {
        params.insert(name, t);
    }
    Ok((manifest, params))
}
