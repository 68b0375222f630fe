//! Alternating critic/generator optimization with reproducible data order.
//!
//! One iteration runs `n_critic` discriminator updates, each on a fresh
//! batch, followed by one generator update on the last of those batches.
//! Batches are cut from a per-epoch permutation seeded by `(seed, epoch)` and
//! every update draws its randomness from a stream keyed by the update index,
//! so a run resumed from a checkpoint continues exactly where it stopped.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stgan_tensor::{Float, Tape, Tensor, TensorError};

use crate::checkpoint;
use crate::data::{sample_targets, stack, AttributeVector, Batch, Dataset, TargetPolicy};
use crate::error::{Error, Result};
use crate::losses::{self, DLossParts, GLossParts, LossWeights};
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::optim::{Adam, AdamConfig};
use crate::stu::StuHooks;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: GeneratorConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub lr_initial: f64,
    pub lr_finetune: f64,
    /// Epoch from which `lr_finetune` applies.
    pub decay_epoch: u64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub epochs: u64,
    /// Overrides the epoch budget when set.
    pub iterations: Option<u64>,
    pub seed: u64,
    pub target_policy: TargetPolicy,
    /// Checkpoint cadence in iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: GeneratorConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lr_initial: 2e-4,
            lr_finetune: 2e-5,
            decay_epoch: 100,
            n_critic: 5,
            batch_size: 32,
            epochs: 20,
            iterations: None,
            seed: 0,
            target_policy: TargetPolicy::Permutation,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.n_critic == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_critic and batch_size must be at least 1".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_finetune > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: self.model.image_size,
            num_attributes: self.model.num_attributes,
            width: self.model.width,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Discriminator batches per epoch; a partial trailing batch is dropped.
    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        (n / self.batch_size) as u64
    }

    pub fn iterations_per_epoch(&self, n: usize) -> u64 {
        self.batches_per_epoch(n) / self.n_critic as u64
    }

    pub fn total_iterations(&self, n: usize) -> u64 {
        self.iterations.unwrap_or(self.epochs * self.iterations_per_epoch(n))
    }

    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        if epoch < self.decay_epoch {
            self.lr_initial
        } else {
            self.lr_finetune
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Discriminator components averaged over the iteration's critic updates.
    pub d: DLossParts,
    pub g: GLossParts,
}

/// Networks, optimizers and position in the data stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub gen: Generator<f32>,
    pub disc: Discriminator<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    /// Completed iterations.
    pub iteration: u64,
    /// Registry of the data trained on; empty until the first step.
    pub attribute_names: Vec<String>,
}

fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

const INIT: u64 = 1;
const EPOCH_ORDER: u64 = 2;
const D_STEP: u64 = 3;
const G_STEP: u64 = 4;

fn diverged(iteration: u64, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
            iteration,
            detail: format!("non-finite value produced by {op}"),
        },
        e => e,
    }
}

/// Conditioning tensor for editing `sources` into `targets`.
pub fn condition_batch<T: Float>(config: &GeneratorConfig, sources: &[AttributeVector], targets: &[AttributeVector]) -> Result<Tensor<T>> {
    let conds = sources
        .iter()
        .zip(targets)
        .map(|(s, t)| config.condition(s, t))
        .collect::<Result<Vec<_>>>()?;
    stack(&conds)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, INIT, 0);
        let gen = Generator::new(config.model.clone(), &mut rng)?;
        let disc = Discriminator::new(config.discriminator(), &mut rng)?;
        let g_opt = Adam::new(config.adam, &gen.params);
        let d_opt = Adam::new(config.adam, &disc.params);
        Ok(Self {
            config,
            gen,
            disc,
            g_opt,
            d_opt,
            iteration: 0,
            attribute_names: Vec::new(),
        })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let m = &self.config.model;
        if data.num_attributes() != m.num_attributes || data.image_size != m.image_size {
            return Err(Error::Config(format!(
                "dataset has {} attributes at {}px, model expects {} at {}px",
                data.num_attributes(),
                data.image_size,
                m.num_attributes,
                m.image_size
            )));
        }
        if !self.attribute_names.is_empty() && self.attribute_names != data.attribute_names {
            return Err(Error::Config(format!(
                "dataset attributes {:?} differ from the model's {:?}",
                data.attribute_names, self.attribute_names
            )));
        }
        if self.config.iterations_per_epoch(data.len()) == 0 {
            return Err(Error::Config(format!(
                "{} training samples cannot fill {} batches of {}",
                data.len(),
                self.config.n_critic,
                self.config.batch_size
            )));
        }
        Ok(())
    }

    /// Indices of discriminator batch `k` (global count).
    fn batch_indices(&self, n: usize, k: u64) -> Vec<usize> {
        let per_epoch = self.config.batches_per_epoch(n);
        let (epoch, pos) = (k / per_epoch, (k % per_epoch) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.config.seed, EPOCH_ORDER, epoch));
        let b = self.config.batch_size;
        order[pos * b..(pos + 1) * b].to_vec()
    }

    fn d_step(&mut self, batch: &Batch, k: u64, lr: f64) -> Result<DLossParts> {
        let mut rng = stream_rng(self.config.seed, D_STEP, k);
        let n = batch.attrs.len();
        let targets = sample_targets(&batch.attrs, self.config.target_policy, &mut rng);
        let cond = condition_batch(&self.config.model, &batch.attrs, &targets)?;
        let fake = self.gen.edit(&batch.images, &cond)?;
        let alpha: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let source: Tensor<f32> = stack(&batch.attrs)?;

        let disc = &self.disc;
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone())?;
        let real = disc.forward(&mut tape, x)?;
        let xf = tape.constant(fake.clone())?;
        let fake_scores = disc.critic(&mut tape, xf)?;
        let gp = losses::gradient_penalty(&mut tape, |t, v| disc.critic(t, v), &batch.images, &fake, &alpha)?;
        let adv = losses::d_adv_loss(&mut tape, real.adv, fake_scores, gp, self.config.weights.lambda_gp)?;
        let att = losses::d_att_loss(&mut tape, real.att_logits, &source)?;
        let total = losses::total_d_loss(&mut tape, adv, att, &self.config.weights)?;
        let parts = DLossParts {
            real_score: tape.value(real.adv).data().iter().map(|&v| v as f64).sum::<f64>() / n as f64,
            fake_score: tape.value(fake_scores).data().iter().map(|&v| v as f64).sum::<f64>() / n as f64,
            gradient_penalty: losses::scalar(&tape, gp)?,
            adv: losses::scalar(&tape, adv)?,
            att: losses::scalar(&tape, att)?,
            total: losses::scalar(&tape, total)?,
        };
        let grads = tape.backward(total)?;
        self.disc.params.zero_grad();
        grads.accumulate_into(&mut self.disc.params);
        self.d_opt.update(&mut self.disc.params, lr)?;
        Ok(parts)
    }

    fn g_step(&mut self, batch: &Batch, lr: f64) -> Result<GLossParts> {
        let mut rng = stream_rng(self.config.seed, G_STEP, self.iteration);
        let targets = sample_targets(&batch.attrs, self.config.target_policy, &mut rng);
        let model = &self.config.model;
        let cond = condition_batch(model, &batch.attrs, &targets)?;
        let rec_cond = condition_batch(model, &batch.attrs, &batch.attrs)?;
        let target: Tensor<f32> = stack(&targets)?;

        let gen = &self.gen;
        let mut tape = Tape::new();
        tape.freeze(&self.disc.params);
        let x = tape.constant(batch.images.clone())?;
        // both passes share one encoding; the encoder sees the same input
        let feats = gen.encode(&mut tape, x)?;
        let f5 = feats[feats.len() - 1];
        let skips = gen.transfer(&mut tape, &feats, &cond, StuHooks::default())?;
        let edited = gen.decode(&mut tape, f5, &skips, &cond)?;
        let rec_skips = gen.transfer(&mut tape, &feats, &rec_cond, StuHooks::default())?;
        let rec = gen.decode(&mut tape, f5, &rec_skips, &rec_cond)?;

        let out = self.disc.forward(&mut tape, edited)?;
        let adv = losses::g_adv_loss(&mut tape, out.adv)?;
        let att = losses::g_att_loss(&mut tape, out.att_logits, &target)?;
        let rec_loss = losses::reconstruction_loss(&mut tape, x, rec)?;
        let total = losses::total_g_loss(&mut tape, adv, att, rec_loss, &self.config.weights)?;
        let parts = GLossParts {
            adv: losses::scalar(&tape, adv)?,
            att: losses::scalar(&tape, att)?,
            rec: losses::scalar(&tape, rec_loss)?,
            total: losses::scalar(&tape, total)?,
        };
        let grads = tape.backward(total)?;
        self.gen.params.zero_grad();
        grads.accumulate_into(&mut self.gen.params);
        self.g_opt.update(&mut self.gen.params, lr)?;
        Ok(parts)
    }

    /// Runs one iteration and returns its log record.
    pub fn step(&mut self, data: &Dataset) -> Result<IterationRecord> {
        self.check_data(data)?;
        if self.attribute_names.is_empty() {
            self.attribute_names = data.attribute_names.clone();
        }
        let it = self.iteration;
        let epoch = it / self.config.iterations_per_epoch(data.len());
        let lr = self.config.lr_at_epoch(epoch);
        let nc = self.config.n_critic as u64;
        let mut d = DLossParts::default();
        let mut last = None;
        for j in 0..nc {
            let k = it * nc + j;
            let batch = data.batch(&self.batch_indices(data.len(), k))?;
            let parts = self.d_step(&batch, k, lr).map_err(|e| diverged(it, e))?;
            d.real_score += parts.real_score / nc as f64;
            d.fake_score += parts.fake_score / nc as f64;
            d.gradient_penalty += parts.gradient_penalty / nc as f64;
            d.adv += parts.adv / nc as f64;
            d.att += parts.att / nc as f64;
            d.total += parts.total / nc as f64;
            last = Some(batch);
        }
        let batch = last.expect("n_critic >= 1");
        let g = self.g_step(&batch, lr).map_err(|e| diverged(it, e))?;
        let finite = [d.total, g.total].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("non-finite loss (d {}, g {})", d.total, g.total),
            });
        }
        self.iteration += 1;
        Ok(IterationRecord {
            iteration: it,
            epoch,
            lr,
            d,
            g,
        })
    }

    /// Trains until the configured budget. With an output directory, appends
    /// to `metrics.jsonl` and writes checkpoints there; on divergence the
    /// last good checkpoint is left in place.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>, mut on_record: impl FnMut(&IterationRecord)) -> Result<Vec<IterationRecord>> {
        self.check_data(data)?;
        let total = self.config.total_iterations(data.len());
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((file, path))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < total {
            let rec = self.step(data)?;
            if let Some((file, path)) = &mut log {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| Error::io(path.clone(), e))?;
            }
            on_record(&rec);
            records.push(rec);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < total {
                    self.save(&checkpoint_path(dir, Some(self.iteration)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&checkpoint_path(dir, None))?;
        }
        Ok(records)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save_trainer(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load_trainer(path)
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(dir: &Path, iteration: Option<u64>) -> PathBuf {
    match iteration {
        Some(i) => dir.join(format!("iter_{i:07}.ckpt")),
        None => dir.join(FINAL_CHECKPOINT),
    }
}
