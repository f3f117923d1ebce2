//! Identification, verification, leave-one-image-out, and cross-dataset protocols.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;

use super::finetune::{extract_features, finetune_linear, train_linear};
use super::{EvalReport, FoldDetail, PipelineError, Sample};
use crate::augment::Image;
use crate::io::config::RunConfig;
use crate::loss::cosine_sim;
use crate::model::{ContrastiveModel, LinearClassifier};
use crate::numerics::Tensor;
use crate::par::{self, Execution};
use crate::seed;

fn features_of(
    model: &ContrastiveModel<f32>,
    samples: &[&Sample],
    exec: Execution,
) -> Result<Tensor<f32>, PipelineError> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    extract_features(model, &images, exec)
}

fn percent(correct: usize, n: usize) -> f64 {
    100.0 * correct as f64 / n as f64
}

/// Rank-1 accuracy of the classifier's argmax over `test`.
pub fn eval_identification(
    model: &ContrastiveModel<f32>,
    clf: &LinearClassifier<f32>,
    test: &[&Sample],
    exec: Execution,
) -> Result<EvalReport, PipelineError> {
    if test.is_empty() {
        return Err(PipelineError::Protocol("identification on an empty split".into()));
    }
    let uncovered: BTreeSet<u64> = test
        .iter()
        .map(|s| s.subject)
        .filter(|&s| clf.class_index(s).is_none())
        .collect();
    if !uncovered.is_empty() {
        return Err(PipelineError::Protocol(format!(
            "classifier has no class for test subjects {uncovered:?}"
        )));
    }
    let h = features_of(model, test, exec)?;
    let pred = clf.predict(&h)?;
    let correct = pred
        .iter()
        .zip(test)
        .filter(|(&p, s)| clf.classes[p] == s.subject)
        .count();
    Ok(EvalReport::new("identification", percent(correct, test.len()), test.len()))
}

/// Leave-one-out 1-NN accuracy under cosine similarity. Ties go to the
/// lower row index.
pub fn nearest_neighbor_accuracy(features: &Tensor<f32>, labels: &[u64]) -> Result<f64, PipelineError> {
    let n = labels.len();
    if n < 2 {
        return Err(PipelineError::Protocol("1-NN needs at least two images".into()));
    }
    let mut correct = 0;
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..n).filter(|&j| j != i) {
            let s = cosine_sim(features.row(i), features.row(j)).unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, j));
            }
        }
        if let Some((_, j)) = best {
            if labels[j] == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(percent(correct, n))
}

/// 1-NN identification in h-space; needs no training on `samples`.
pub fn eval_nearest_neighbor(
    model: &ContrastiveModel<f32>,
    samples: &[&Sample],
    exec: Execution,
) -> Result<EvalReport, PipelineError> {
    if samples.len() < 2 {
        return Err(PipelineError::Protocol("1-NN needs at least two images".into()));
    }
    let h = features_of(model, samples, exec)?;
    let labels: Vec<u64> = samples.iter().map(|s| s.subject).collect();
    let acc = nearest_neighbor_accuracy(&h, &labels)?;
    Ok(EvalReport::new("nearest-neighbor", acc, samples.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Draws `per_label` same-subject and `per_label` different-subject pairs.
pub fn sample_pairs(
    samples: &[&Sample],
    per_label: usize,
    seed_value: u64,
) -> Result<Vec<VerificationPair>, PipelineError> {
    let mut by_subject: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_subject.entry(s.subject).or_default().push(i);
    }
    let mut multi: Vec<&Vec<usize>> = by_subject.values().filter(|v| v.len() >= 2).collect();
    multi.sort();
    if multi.is_empty() || by_subject.len() < 2 {
        return Err(PipelineError::Protocol(
            "pair sampling needs two subjects and a subject with two images".into(),
        ));
    }
    let mut rng = seed::rng(seed_value, &[seed::tag("pairs")]);
    let mut pairs = Vec::with_capacity(2 * per_label);
    for _ in 0..per_label {
        let imgs = multi[rng.random_range(0..multi.len())];
        let a = rng.random_range(0..imgs.len());
        let mut b = rng.random_range(0..imgs.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push(VerificationPair {
            a: imgs[a],
            b: imgs[b],
            same: true,
        });
    }
    let n = samples.len();
    while pairs.len() < 2 * per_label {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if samples[a].subject != samples[b].subject {
            pairs.push(VerificationPair { a, b, same: false });
        }
    }
    Ok(pairs)
}

#[derive(serde::Deserialize)]
struct PairRow {
    a: String,
    b: String,
    same: String,
}

/// Reads a `a,b,same` CSV whose paths match manifest paths. Labels must
/// agree with the subjects in `samples`.
pub fn read_pairs(path: &Path, samples: &[&Sample]) -> Result<Vec<VerificationPair>, PipelineError> {
    let index: HashMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.path.as_str(), i))
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<PairRow>().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| PipelineError::Config(format!("pairs line {line}: {e}")))?;
        let look = |p: &str| {
            index
                .get(p)
                .copied()
                .ok_or_else(|| PipelineError::Lookup(format!("pairs line {line}: unknown image {p:?}")))
        };
        let (a, b) = (look(&row.a)?, look(&row.b)?);
        let same = match row.same.as_str() {
            "1" | "true" | "same" => true,
            "0" | "false" | "different" => false,
            other => {
                return Err(PipelineError::Config(format!(
                    "pairs line {line}: label {other:?} is not same/different"
                )))
            }
        };
        if same != (samples[a].subject == samples[b].subject) {
            return Err(PipelineError::Config(format!(
                "pairs line {line}: label disagrees with manifest subjects"
            )));
        }
        out.push(VerificationPair { a, b, same });
    }
    Ok(out)
}

/// Threshold maximizing accuracy on `(score, same)` items; ties take the
/// lowest threshold. Scores at or above the threshold predict `same`.
fn fit_threshold(items: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<(f64, bool)> = items.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    // threshold below everything: every item predicted same
    let mut correct = sorted.iter().filter(|x| x.1).count() as i64;
    let mut best = (correct, sorted.first().map_or(0.0, |x| x.0));
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            correct += if sorted[i].1 { -1 } else { 1 };
            i += 1;
        }
        let next = sorted.get(i).map_or(f64::INFINITY, |x| x.0);
        if correct > best.0 {
            best = (correct, next);
        }
    }
    best.1
}

/// Cross-validated verification accuracy. Fold membership is a hash of the
/// pair's image refs; empty folds are skipped and the mean is over the rest.
pub fn verification_accuracy(
    scores: &[f64],
    pairs: &[VerificationPair],
    folds: usize,
) -> Result<(f64, Vec<FoldDetail>), PipelineError> {
    if pairs.is_empty() || scores.len() != pairs.len() {
        return Err(PipelineError::Protocol("verification needs scored pairs".into()));
    }
    let folds = folds.max(2);
    let fold_of: Vec<usize> = pairs
        .iter()
        .map(|p| (seed::derive(seed::tag("fold"), &[p.a as u64, p.b as u64]) % folds as u64) as usize)
        .collect();
    let used: BTreeSet<usize> = fold_of.iter().copied().collect();
    let mut details = Vec::new();
    for &f in &used {
        let train: Vec<(f64, bool)> = (0..pairs.len())
            .filter(|&i| fold_of[i] != f || used.len() == 1)
            .map(|i| (scores[i], pairs[i].same))
            .collect();
        let t = fit_threshold(&train);
        let test: Vec<usize> = (0..pairs.len()).filter(|&i| fold_of[i] == f).collect();
        let correct = test.iter().filter(|&&i| (scores[i] >= t) == pairs[i].same).count();
        details.push(FoldDetail {
            fold: f,
            n: test.len(),
            accuracy: percent(correct, test.len()),
            threshold: Some(t),
        });
    }
    let mean = details.iter().map(|d| d.accuracy).sum::<f64>() / details.len() as f64;
    Ok((mean, details))
}

/// Threshold verification on cosine similarity of h.
pub fn eval_verification(
    model: &ContrastiveModel<f32>,
    samples: &[&Sample],
    pairs: &[VerificationPair],
    folds: usize,
    exec: Execution,
) -> Result<EvalReport, PipelineError> {
    if pairs.is_empty() {
        return Err(PipelineError::Protocol("no verification pairs".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.a >= samples.len() || p.b >= samples.len()) {
        return Err(PipelineError::Lookup(format!(
            "pair ({}, {}) references a missing image",
            p.a, p.b
        )));
    }
    let used: Vec<usize> = pairs
        .iter()
        .flat_map(|p| [p.a, p.b])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let slot: HashMap<usize, usize> = used.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let subset: Vec<&Sample> = used.iter().map(|&i| samples[i]).collect();
    let h = features_of(model, &subset, exec)?;
    let scores: Vec<f64> = pairs
        .iter()
        .map(|p| cosine_sim(h.row(slot[&p.a]), h.row(slot[&p.b])).unwrap_or(0.0))
        .collect();
    let (acc, details) = verification_accuracy(&scores, pairs, folds)?;
    let mut report = EvalReport::new("verification", acc, pairs.len());
    report.folds = details;
    Ok(report)
}

/// One fold per image: fine-tune on every other image, test on the held-out
/// one. The encoder is shared across folds.
pub fn run_loio(
    model: &ContrastiveModel<f32>,
    samples: &[&Sample],
    cfg: &RunConfig,
) -> Result<EvalReport, PipelineError> {
    let n = samples.len();
    let cap = cfg.pipeline.loio_cap;
    if n > cap {
        return Err(PipelineError::Protocol(format!(
            "{n} images exceed the leave-one-image-out cap of {cap}; subsample the manifest or raise pipeline.loio_cap"
        )));
    }
    if n < 2 {
        return Err(PipelineError::Protocol("leave-one-image-out needs two images".into()));
    }
    let exec = cfg.pipeline.execution;
    let h = features_of(model, samples, exec)?;
    let d = model.d_h();
    let folds = par::try_map_indexed(exec, n, |i| {
        let mut rows = Vec::with_capacity((n - 1) * d);
        let mut labels = Vec::with_capacity(n - 1);
        for j in (0..n).filter(|&j| j != i) {
            rows.extend_from_slice(h.row(j));
            labels.push(samples[j].subject);
        }
        let classes: Vec<u64> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let x = Tensor::new(vec![n - 1, d], rows)?;
        let out = train_linear(
            &x,
            &labels,
            classes,
            &cfg.optim.finetune,
            cfg.pipeline.finetune_epochs,
            cfg.pipeline.finetune_batch,
            seed::derive(cfg.seed, &[seed::tag("loio"), i as u64]),
        )?;
        let held = Tensor::new(vec![1, d], h.row(i).to_vec())?;
        let p = out.classifier.predict(&held)?[0];
        Ok::<_, PipelineError>(out.classifier.classes[p] == samples[i].subject)
    })?;
    let correct = folds.iter().filter(|&&c| c).count();
    let mut report = EvalReport::new("loio", percent(correct, n), n);
    report.folds = folds
        .iter()
        .enumerate()
        .map(|(fold, &ok)| FoldDetail {
            fold,
            n: 1,
            accuracy: if ok { 100.0 } else { 0.0 },
            threshold: None,
        })
        .collect();
    Ok(report)
}

#[derive(Clone, Debug)]
pub enum TargetProtocol {
    /// Leave-one-out 1-NN identification in h-space.
    NearestNeighbor,
    /// Threshold verification on the given pairs (indices into the target).
    Verification(Vec<VerificationPair>),
}

/// Fine-tunes on `source`, then evaluates `target` without target training.
pub fn run_cross_dataset(
    model: &ContrastiveModel<f32>,
    source: (&str, &[&Sample]),
    target: (&str, &[&Sample]),
    protocol: &TargetProtocol,
    cfg: &RunConfig,
) -> Result<EvalReport, PipelineError> {
    let (src_name, src) = source;
    let (tgt_name, tgt) = target;
    let same_data = src.len() == tgt.len()
        && src
            .iter()
            .zip(tgt)
            .all(|(a, b)| a.subject == b.subject && a.path == b.path);
    if !same_data {
        let src_ids: BTreeSet<u64> = src.iter().map(|s| s.subject).collect();
        let shared: BTreeSet<u64> = tgt
            .iter()
            .map(|s| s.subject)
            .filter(|s| src_ids.contains(s))
            .collect();
        if !shared.is_empty() {
            return Err(PipelineError::Protocol(format!(
                "source and target share subject ids {shared:?}"
            )));
        }
    }
    let ft = finetune_linear(model, src, &[], cfg)?;
    let exec = cfg.pipeline.execution;
    let mut report = match protocol {
        TargetProtocol::NearestNeighbor => eval_nearest_neighbor(model, tgt, exec)?,
        TargetProtocol::Verification(pairs) => {
            eval_verification(model, tgt, pairs, cfg.pipeline.verification_folds, exec)?
        }
    };
    report.protocol = format!("{src_name}⇒{tgt_name} {}", report.protocol);
    report.extra.insert("source_train_accuracy".into(), ft.train_accuracy);
    Ok(report)
}
