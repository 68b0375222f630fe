//! Attribute generation accuracy, reconstruction quality and the ablation
//! harness.

pub mod ablation;
pub mod judge;
pub mod metrics;

pub use judge::{Judge, JudgeConfig};

use serde::{Deserialize, Serialize};
use stgan_tensor::Tensor;

use crate::data::synth::RenderParams;
use crate::data::{image_to_tensor, AttributeVector, Dataset};
use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::train::condition_batch;
use metrics::{psnr_image, ssim_image, Image255};

/// Anything that can turn source images into edited ones.
pub trait Editor {
    /// `indices` identify the samples within the evaluated dataset.
    fn edit(&self, indices: &[usize], images: &Tensor<f32>, sources: &[AttributeVector], targets: &[AttributeVector]) -> Result<Tensor<f32>>;
}

pub struct GeneratorEditor<'a>(pub &'a Generator<f32>);

impl Editor for GeneratorEditor<'_> {
    fn edit(&self, _: &[usize], images: &Tensor<f32>, sources: &[AttributeVector], targets: &[AttributeVector]) -> Result<Tensor<f32>> {
        let cond = condition_batch(&self.0.config, sources, targets)?;
        self.0.edit(images, &cond)
    }
}

/// Returns its input unchanged.
pub struct IdentityEditor;

impl Editor for IdentityEditor {
    fn edit(&self, _: &[usize], images: &Tensor<f32>, _: &[AttributeVector], _: &[AttributeVector]) -> Result<Tensor<f32>> {
        Ok(images.clone())
    }
}

/// Ground-truth edits: re-renders synthetic samples with the target labels.
pub struct RendererEditor<'a> {
    pub params: &'a [RenderParams],
    pub image_size: usize,
}

impl Editor for RendererEditor<'_> {
    fn edit(&self, indices: &[usize], _: &Tensor<f32>, _: &[AttributeVector], targets: &[AttributeVector]) -> Result<Tensor<f32>> {
        let parts = indices
            .iter()
            .zip(targets)
            .map(|(&i, t)| {
                let p = self
                    .params
                    .get(i)
                    .ok_or_else(|| Error::Contract(format!("no render parameters for sample {i}")))?;
                let img = image_to_tensor(&p.with_attributes(t).render(self.image_size));
                Ok(img.reshape(&[1, 3, self.image_size, self.image_size])?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat_batch(&parts)?)
    }
}

const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_attribute: Vec<f64>,
    pub mean: f64,
}

/// For every attribute `i` and test sample, flips `i`, edits, and counts the
/// judge's verdict on attribute `i` only.
pub fn attribute_generation_accuracy(editor: &dyn Editor, judge: &Judge, test: &Dataset, floor: f64) -> Result<AccuracyReport> {
    judge.ensure_floor(floor)?;
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let c = test.num_attributes();
    let mut per_attribute = Vec::with_capacity(c);
    let idx: Vec<usize> = (0..test.len()).collect();
    for i in 0..c {
        let mut correct = 0usize;
        for chunk in idx.chunks(EVAL_BATCH) {
            let batch = test.batch(chunk)?;
            let targets: Vec<_> = batch.attrs.iter().map(|a| a.with_flipped(i)).collect();
            let edited = editor.edit(chunk, &batch.images, &batch.attrs, &targets)?;
            let probs = judge.predict(&edited)?;
            for (row, t) in probs.data().chunks(c).zip(&targets) {
                if (row[i] > 0.5) == t.get(i) {
                    correct += 1;
                }
            }
        }
        per_attribute.push(correct as f64 / test.len() as f64);
    }
    let mean = per_attribute.iter().sum::<f64>() / c as f64;
    Ok(AccuracyReport { per_attribute, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub psnr: f64,
    pub ssim: f64,
}

/// Edits every test image with its own labels as target and scores the
/// result against the input.
pub fn reconstruction_eval(editor: &dyn Editor, test: &Dataset) -> Result<ReconstructionReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let (mut psnr, mut ssim) = (0.0, 0.0);
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = test.batch(chunk)?;
        let out = editor.edit(chunk, &batch.images, &batch.attrs, &batch.attrs)?;
        for k in 0..chunk.len() {
            let a = Image255::from_unit(&batch.images.sample(k)?)?;
            let b = Image255::from_unit(&out.sample(k)?)?;
            psnr += psnr_image(&a, &b)?;
            ssim += ssim_image(&a, &b)?;
        }
    }
    let n = test.len() as f64;
    Ok(ReconstructionReport {
        psnr: psnr / n,
        ssim: ssim / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub attribute_names: Vec<String>,
    pub accuracy: AccuracyReport,
    pub reconstruction: ReconstructionReport,
    pub judge_accuracy: f64,
    pub test_samples: usize,
    pub checkpoint_id: Option<String>,
}

pub fn evaluate(label: &str, editor: &dyn Editor, judge: &Judge, test: &Dataset, floor: f64, checkpoint_id: Option<String>) -> Result<EvalReport> {
    let accuracy = attribute_generation_accuracy(editor, judge, test, floor)?;
    let reconstruction = reconstruction_eval(editor, test)?;
    Ok(EvalReport {
        label: label.into(),
        attribute_names: test.attribute_names.clone(),
        accuracy,
        reconstruction,
        judge_accuracy: judge.meta.accuracy,
        test_samples: test.len(),
        checkpoint_id,
    })
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!("{}\n", self.label);
        for (name, acc) in self.attribute_names.iter().zip(&self.accuracy.per_attribute) {
            s += &format!("  {name:<18} {:>6.2}%\n", 100.0 * acc);
        }
        s += &format!("  {:<18} {:>6.2}%\n", "mean", 100.0 * self.accuracy.mean);
        s += &format!("  {:<18} {:>6.2} dB\n", "psnr", self.reconstruction.psnr);
        s += &format!("  {:<18} {:>7.4}\n", "ssim", self.reconstruction.ssim);
        s += &format!("  {:<18} {:>6.2}%\n", "judge", 100.0 * self.judge_accuracy);
        s
    }
}
