//! Label-free contrastive pretraining.

use rand::seq::SliceRandom;

use super::{PipelineError, UnlabeledView};
use crate::augment::{make_pair, make_triplet, AgeTransform, Image};
use crate::io::config::{Mode, RunConfig};
use crate::loss::{batch_loss_on_tape, Views};
use crate::model::{image_rows, ContrastiveModel};
use crate::numerics::Tape;
use crate::optim::{lars_step, warmup_cosine, LarsState};
use crate::par;
use crate::seed;

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: ContrastiveModel<f32>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Views of one batch in block order: all first views, then all second
/// views, then (cacon) all synthesized views.
fn batch_views(
    view: &UnlabeledView<'_>,
    members: &[usize],
    cfg: &RunConfig,
    age: Option<&dyn AgeTransform>,
    epoch: usize,
) -> Result<Vec<Image>, PipelineError> {
    let mode = cfg.pipeline.mode;
    let per_image = par::try_map_indexed(cfg.pipeline.execution, members.len(), |b| {
        let src = view.get(members[b]);
        let mut rng = seed::rng(cfg.seed, &[seed::tag("views"), epoch as u64, src.index as u64]);
        match (mode, age) {
            (Mode::Cacon, Some(at)) => {
                let t = make_triplet(src, &cfg.augment, at, &mut rng)?;
                Ok::<_, PipelineError>(vec![t.view_i, t.view_j, t.view_k])
            }
            _ => {
                let (a, b) = make_pair(src.image, &cfg.augment, &mut rng)?;
                Ok(vec![a, b])
            }
        }
    })?;
    let n_views = per_image.first().map_or(0, Vec::len);
    let mut blocks: Vec<Vec<Image>> = vec![Vec::with_capacity(members.len()); n_views];
    for views in per_image {
        for (v, img) in views.into_iter().enumerate() {
            blocks[v].push(img);
        }
    }
    Ok(blocks.into_iter().flatten().collect())
}

/// Trains encoder and projection head on `view`. Cacon mode needs an age
/// transform; the baseline ignores it.
pub fn pretrain(
    view: &UnlabeledView<'_>,
    age: Option<&dyn AgeTransform>,
    cfg: &RunConfig,
) -> Result<PretrainOutcome, PipelineError> {
    if view.is_empty() {
        return Err(PipelineError::Config("no images available for pretraining".into()));
    }
    let mode = cfg.pipeline.mode;
    if mode == Mode::Cacon && age.is_none() {
        return Err(PipelineError::Config(
            "cacon mode needs an age transform (a synthetic dataset with synth.json)".into(),
        ));
    }
    let views = if mode == Mode::Cacon { Views::Triplet } else { Views::Pair };
    let input_dim = view.get(0).image.len();
    let mut model = ContrastiveModel::<f32>::init(
        input_dim,
        &cfg.model,
        &mut seed::rng(cfg.seed, &[seed::tag("init")]),
    )?;
    let mut lars = LarsState::new(&model.params, &cfg.optim.pretrain)?;
    let epochs = cfg.pipeline.pretrain_epochs;
    let batch = cfg.pipeline.pretrain_batch;
    let steps_per_epoch = view.len().div_ceil(batch);
    let tau = cfg.loss.temperature;

    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut steps = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..view.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::tag("shuffle"), epoch as u64]));
        let mut total = 0.0;
        for (step, members) in order.chunks(batch).enumerate() {
            let imgs = batch_views(view, members, cfg, age, epoch)?;
            let x = image_rows::<f32>(&imgs)?;

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let xv = tape.constant(x);
            let h = model.encode_on_tape(&mut tape, &bound, xv)?;
            let z = model.project_on_tape(&mut tape, &bound, h)?;
            let loss = batch_loss_on_tape(&mut tape, z, views, tau).map_err(|e| PipelineError::NonFinite {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            tape.check_finite().map_err(|e| PipelineError::NonFinite {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            let value = tape.value(loss).data()[0] as f64;
            let mut grads = tape.backward(loss).map_err(|e| PipelineError::NonFinite {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            let g = model.params.grads(&bound, &mut grads);

            let progress = epoch as f64 + (step + 1) as f64 / steps_per_epoch as f64;
            lars.base_lr = warmup_cosine(
                cfg.optim.pretrain.base_lr,
                progress,
                cfg.optim.pretrain.warmup_epochs,
                epochs,
            );
            lars_step(&mut model.params, &g, &mut lars).map_err(|e| PipelineError::NonFinite {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            total += value;
            steps += 1;
        }
        epoch_losses.push(total / steps_per_epoch as f64);
    }
    Ok(PretrainOutcome {
        model,
        epoch_losses,
        steps,
    })
}
