//! Linear fine-tuning on frozen encoder features.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::{PipelineError, Sample};
use crate::augment::Image;
use crate::io::config::RunConfig;
use crate::model::{cross_entropy_on_tape, image_rows, ContrastiveModel, LinearClassifier};
use crate::numerics::{Tape, Tensor};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::par::{self, Execution};
use crate::seed;

const FEATURE_CHUNK: usize = 256;

/// h for every image, one row per image, in input order.
pub fn extract_features(
    model: &ContrastiveModel<f32>,
    images: &[&Image],
    exec: Execution,
) -> Result<Tensor<f32>, PipelineError> {
    if images.is_empty() {
        return Err(PipelineError::Protocol("no images to encode".into()));
    }
    let chunks: Vec<&[&Image]> = images.chunks(FEATURE_CHUNK).collect();
    let parts = par::try_map_indexed(exec, chunks.len(), |c| {
        let x = image_rows::<f32>(chunks[c].iter().copied())?;
        model.encode_batch(x)
    })?;
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::vstack(&refs)?)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub classifier: LinearClassifier<f32>,
    pub epoch_losses: Vec<f64>,
    /// Percentage of training rows classified correctly after the last epoch.
    pub train_accuracy: f64,
}

/// Softmax regression on precomputed features. `classes` fixes the logit
/// order; every label must appear in it.
pub fn train_linear(
    features: &Tensor<f32>,
    labels: &[u64],
    classes: Vec<u64>,
    sgd: &SgdConfig,
    epochs: usize,
    batch: usize,
    seed_value: u64,
) -> Result<FinetuneOutcome, PipelineError> {
    let [n, d] = *features.dims() else {
        return Err(PipelineError::Protocol("features must be a matrix".into()));
    };
    if n != labels.len() || n == 0 {
        return Err(PipelineError::Protocol(format!(
            "{n} feature rows for {} labels",
            labels.len()
        )));
    }
    let targets = labels
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| PipelineError::Config(format!("label {l} has no class")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut clf = LinearClassifier::<f32>::zeros(d, classes)?;
    let mut state = SgdState::new(&clf.params, sgd);
    let batch = batch.max(1);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed_value, &[seed::tag("finetune"), epoch as u64]));
        let mut total = 0.0;
        let mut count = 0;
        for members in order.chunks(batch) {
            let mut rows = Vec::with_capacity(members.len() * d);
            for &i in members {
                rows.extend_from_slice(features.row(i));
            }
            let x = Tensor::new(vec![members.len(), d], rows)?;
            let t: Vec<usize> = members.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let bound = clf.params.bind(&mut tape);
            let xv = tape.constant(x);
            let logits = clf.logits_on_tape(&mut tape, &bound, xv)?;
            let loss = cross_entropy_on_tape(&mut tape, logits, &t)?;
            tape.check_finite().map_err(|e| PipelineError::NonFinite {
                epoch,
                step: count,
                detail: e.to_string(),
            })?;
            total += tape.value(loss).data()[0] as f64;
            let mut grads = tape.backward(loss)?;
            let g = clf.params.grads(&bound, &mut grads);
            sgd_step(&mut clf.params, &g, &mut state)?;
            count += 1;
        }
        epoch_losses.push(total / count as f64);
    }
    let pred = clf.predict(features)?;
    let correct = pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
    Ok(FinetuneOutcome {
        classifier: clf,
        epoch_losses,
        train_accuracy: 100.0 * correct as f64 / n as f64,
    })
}

/// Trains a linear classifier on h of `train`. Classes are the sorted
/// training subjects; every id in `required` must be among them.
pub fn finetune_linear(
    model: &ContrastiveModel<f32>,
    train: &[&Sample],
    required: &[u64],
    cfg: &RunConfig,
) -> Result<FinetuneOutcome, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::Config("no labeled images for fine-tuning".into()));
    }
    let classes: BTreeSet<u64> = train.iter().map(|s| s.subject).collect();
    let missing: BTreeSet<u64> = required.iter().copied().filter(|c| !classes.contains(c)).collect();
    if !missing.is_empty() {
        return Err(PipelineError::Config(format!(
            "classes absent from the fine-tuning split: {:?}",
            missing
        )));
    }
    let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    let features = extract_features(model, &images, cfg.pipeline.execution)?;
    let labels: Vec<u64> = train.iter().map(|s| s.subject).collect();
    train_linear(
        &features,
        &labels,
        classes.into_iter().collect(),
        &cfg.optim.finetune,
        cfg.pipeline.finetune_epochs,
        cfg.pipeline.finetune_batch,
        cfg.seed,
    )
}
