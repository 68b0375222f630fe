//! Independent attribute classifier used to score edits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stgan_tensor::{init, ParamId, ParamStore, Tape, Tensor};

use crate::checkpoint;
use crate::data::{stack, Dataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::optim::{Adam, AdamConfig};

const WIDTHS: [usize; 4] = [16, 32, 64, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Minimum mean test accuracy before the judge may score anything.
    pub floor: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            seed: 7,
            floor: 0.97,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeMeta {
    pub image_size: usize,
    pub attribute_names: Vec<String>,
    pub per_attribute: Vec<f64>,
    pub accuracy: f64,
}

/// Four strided convolutions and a linear read-out, one logit per attribute.
#[derive(Clone, Debug)]
pub struct Judge {
    pub params: ParamStore<f32>,
    pub meta: JudgeMeta,
    convs: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl Judge {
    pub fn new(image_size: usize, attribute_names: Vec<String>, seed: u64) -> Result<Self> {
        if image_size < 16 || !image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("judge needs a multiple of 16 pixels, got {image_size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in WIDTHS.iter().enumerate() {
            let shape = [cout, cin, 4, 4];
            let w = params.add(format!("judge/conv/{i}/weight"), init::uniform_fan_in(&shape, cin * 16, &mut rng))?;
            let b = params.add(format!("judge/conv/{i}/bias"), Tensor::zeros(&[cout]))?;
            convs.push((w, b));
            cin = cout;
        }
        let side = image_size / 16;
        let feat = cin * side * side;
        let c = attribute_names.len();
        let w = params.add("judge/head/weight", init::uniform_fan_in(&[c, feat], feat, &mut rng))?;
        let b = params.add("judge/head/bias", Tensor::zeros(&[c]))?;
        Ok(Self {
            params,
            meta: JudgeMeta {
                image_size,
                attribute_names,
                per_attribute: Vec::new(),
                accuracy: 0.0,
            },
            convs,
            head: (w, b),
        })
    }

    fn logits(&self, tape: &mut Tape<f32>, images: &Tensor<f32>) -> Result<stgan_tensor::Var> {
        let s = self.meta.image_size;
        if images.ndim() != 4 || images.shape()[1..] != [3, s, s] {
            return Err(Error::Contract(format!("judge expects (n, 3, {s}, {s}), got {:?}", images.shape())));
        }
        let mut h = tape.constant(images.clone())?;
        for &(w, b) in &self.convs {
            let (w, b) = (tape.param(&self.params, w)?, tape.param(&self.params, b)?);
            h = tape.conv2d(h, w, Some(b), 2, 1)?;
            h = tape.leaky_relu(h, 0.2)?;
        }
        let h = tape.flatten(h)?;
        let (w, b) = (tape.param(&self.params, self.head.0)?, tape.param(&self.params, self.head.1)?);
        Ok(tape.fully_connected(h, w, Some(b))?)
    }

    /// Attribute probabilities, (n, c).
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::no_grad();
        let l = self.logits(&mut tape, images)?;
        let p = tape.sigmoid(l)?;
        Ok(tape.value(p).clone())
    }

    /// Per-attribute accuracy on `data` at threshold 0.5.
    pub fn accuracy(&self, data: &Dataset) -> Result<Vec<f64>> {
        let c = self.meta.attribute_names.len();
        let mut correct = vec![0usize; c];
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(64) {
            let batch = data.batch(chunk)?;
            let p = self.predict(&batch.images)?;
            for (row, attrs) in p.data().chunks(c).zip(&batch.attrs) {
                for i in 0..c {
                    if (row[i] > 0.5) == attrs.get(i) {
                        correct[i] += 1;
                    }
                }
            }
        }
        Ok(correct.iter().map(|&k| k as f64 / data.len().max(1) as f64).collect())
    }

    /// Trains on `train`, then records accuracy on `test`.
    pub fn train(train: &Dataset, test: &Dataset, config: &JudgeConfig) -> Result<Self> {
        let mut judge = Judge::new(train.image_size, train.attribute_names.clone(), config.seed)?;
        let mut adam = Adam::new(AdamConfig { beta1: 0.9, ..AdamConfig::default() }, &judge.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch = train.batch(chunk)?;
                let target: Tensor<f32> = stack(&batch.attrs)?;
                let mut tape = Tape::new();
                let l = judge.logits(&mut tape, &batch.images)?;
                let loss = losses::d_att_loss(&mut tape, l, &target)?;
                let grads = tape.backward(loss)?;
                judge.params.zero_grad();
                grads.accumulate_into(&mut judge.params);
                adam.update(&mut judge.params, config.lr)?;
            }
        }
        judge.meta.per_attribute = judge.accuracy(test)?;
        judge.meta.accuracy = judge.meta.per_attribute.iter().sum::<f64>() / judge.meta.per_attribute.len().max(1) as f64;
        Ok(judge)
    }

    /// Refuses unless the recorded test accuracy reaches `floor`.
    pub fn ensure_floor(&self, floor: f64) -> Result<()> {
        if self.meta.accuracy < floor {
            return Err(Error::Evaluation(format!(
                "judge classifier reaches {:.2}% test accuracy, below the required {:.2}%",
                100.0 * self.meta.accuracy,
                100.0 * floor
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        let meta = serde_json::to_value(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (bytes, id) = checkpoint::encode("judge", meta, &tensors)?;
        checkpoint::write_atomic(path, &bytes)?;
        Ok(id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        if c.kind != "judge" {
            return Err(Error::Checkpoint(format!("expected a judge file, found {:?}", c.kind)));
        }
        let meta: JudgeMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut judge = Judge::new(meta.image_size, meta.attribute_names.clone(), 0)?;
        checkpoint::restore_store(&c, &mut judge.params, "")?;
        judge.meta = meta;
        Ok(judge)
    }
}
