//! Contrastive and triplet losses.
//!
//! Embedding batches follow a block layout: with `V` views of `B` source
//! images, rows `[v·B, (v+1)·B)` hold view `v`, and row `r` belongs to
//! source image `r mod B`. The positives of row `r` are the other `V − 1`
//! rows congruent to `r` modulo `B`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{masked_lse, NumericsError, Real, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("degenerate input: zero embedding at row {row}")]
    ZeroRow { row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Softmax temperature; strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, LossError> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(LossError::Contract(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.1)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = LossError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Number of augmented views per source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Views {
    /// Two stochastic views (pair NT-Xent).
    Pair,
    /// Two stochastic views plus the cross-age view (triplet NT-Xent).
    Triplet,
}

impl Views {
    pub fn count(self) -> usize {
        match self {
            Views::Pair => 2,
            Views::Triplet => 3,
        }
    }
}

/// Block-ordered projection outputs.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<T: Real = f32> {
    z: Tensor<T>,
    views: Views,
    batch: usize,
}

impl<T: Real> EmbeddingBatch<T> {
    pub fn new(z: Tensor<T>, views: Views) -> Result<Self, LossError> {
        let rows = match z.dims() {
            [m, _] => *m,
            other => {
                return Err(LossError::Contract(format!(
                    "embedding batch must be a matrix, got dims {other:?}"
                )))
            }
        };
        if rows == 0 || rows % views.count() != 0 {
            return Err(LossError::Contract(format!(
                "{rows} rows do not form {} equal view blocks",
                views.count()
            )));
        }
        Ok(Self {
            batch: rows / views.count(),
            z,
            views,
        })
    }

    pub fn z(&self) -> &Tensor<T> {
        &self.z
    }

    pub fn views(&self) -> Views {
        self.views
    }

    /// Number of source images `B`.
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.batch * self.views.count()
    }

    pub fn positives(&self, r: usize) -> Vec<usize> {
        positives(r, self.batch, self.views)
    }
}

pub fn positives(r: usize, batch: usize, views: Views) -> Vec<usize> {
    let src = r % batch;
    (0..views.count())
        .map(|v| v * batch + src)
        .filter(|&q| q != r)
        .collect()
}

pub fn cosine_sim<T: Real>(u: &[T], v: &[T]) -> Result<f64, LossError> {
    if u.len() != v.len() {
        return Err(NumericsError::Shape {
            op: "cosine_sim",
            left: vec![u.len()],
            right: vec![v.len()],
        }
        .into());
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64(), b.to_f64());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 {
        return Err(LossError::ZeroRow { row: 0 });
    }
    if nv == 0.0 {
        return Err(LossError::ZeroRow { row: 1 });
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities of the rows of `z`, in `f64`.
pub fn sim_matrix<T: Real>(z: &Tensor<T>) -> Result<Tensor<f64>, LossError> {
    let (m, n) = match z.dims() {
        [m, n] => (*m, *n),
        other => {
            return Err(LossError::Contract(format!(
                "similarity needs a matrix, got {other:?}"
            )))
        }
    };
    let mut unit = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = z.row(r);
        let norm = row
            .iter()
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(LossError::ZeroRow { row: r });
        }
        unit.extend(row.iter().map(|v| v.to_f64() / norm));
    }
    let mut s = vec![0.0f64; m * m];
    for p in 0..m {
        s[p * m + p] = 1.0;
        for q in (p + 1)..m {
            let dot: f64 = unit[p * n..(p + 1) * n]
                .iter()
                .zip(&unit[q * n..(q + 1) * n])
                .map(|(a, b)| a * b)
                .sum();
            s[p * m + q] = dot;
            s[q * m + p] = dot;
        }
    }
    Ok(Tensor::new(vec![m, m], s)?)
}

fn square(s: &Tensor<f64>) -> Result<usize, LossError> {
    match s.dims() {
        [m, n] if m == n => Ok(*m),
        other => Err(LossError::Contract(format!(
            "similarity matrix must be square, got {other:?}"
        ))),
    }
}

/// Single-anchor loss: `−log Σ_{p∈pos} e^{S[a][p]/τ} + log Σ_{b≠a} e^{S[a][b]/τ}`.
fn anchor_loss(s: &Tensor<f64>, anchor: usize, pos: &[usize], tau: Temperature) -> f64 {
    let m = s.dims()[0];
    let row: Vec<f64> = s.row(anchor).iter().map(|v| v / tau.get()).collect();
    let mut num_mask = vec![false; m];
    for &p in pos {
        num_mask[p] = true;
    }
    let mut den_mask = vec![true; m];
    den_mask[anchor] = false;
    let num = masked_lse(&row, &num_mask).expect("positives are non-empty");
    let den = masked_lse(&row, &den_mask).expect("denominator has at least the positives");
    den - num
}

/// NT-Xent for one anchor/positive pair of a two-view batch.
pub fn nt_xent_pair(
    anchor: usize,
    pos: usize,
    s: &Tensor<f64>,
    tau: Temperature,
) -> Result<f64, LossError> {
    let m = square(s)?;
    if anchor >= m || pos >= m || anchor == pos {
        return Err(LossError::Contract(format!(
            "invalid anchor/positive ({anchor}, {pos}) for {m} rows"
        )));
    }
    Ok(anchor_loss(s, anchor, &[pos], tau))
}

/// Triplet NT-Xent for anchor `r` of a three-view batch: both other views of
/// the same source image appear in the numerator.
pub fn nt_xent_triplet(r: usize, s: &Tensor<f64>, tau: Temperature) -> Result<f64, LossError> {
    let m = square(s)?;
    if m == 0 || m % 3 != 0 {
        return Err(LossError::Contract(format!(
            "{m} rows do not form three view blocks"
        )));
    }
    if r >= m {
        return Err(LossError::Contract(format!("anchor {r} out of range {m}")));
    }
    let pos = positives(r, m / 3, Views::Triplet);
    Ok(anchor_loss(s, r, &pos, tau))
}

/// Mean anchor loss over every row of the batch.
pub fn batch_loss<T: Real>(batch: &EmbeddingBatch<T>, tau: Temperature) -> Result<f64, LossError> {
    let s = sim_matrix(batch.z())?;
    let rows = batch.rows();
    let total: f64 = (0..rows)
        .map(|r| anchor_loss(&s, r, &batch.positives(r), tau))
        .sum();
    Ok(total / rows as f64)
}

/// Records the batch loss on `tape` for the embedding matrix `z`.
pub fn batch_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    views: Views,
    tau: Temperature,
) -> Result<Var, LossError> {
    let rows = match tape.value(z).dims() {
        [m, _] => *m,
        other => {
            return Err(LossError::Contract(format!(
                "embedding batch must be a matrix, got dims {other:?}"
            )))
        }
    };
    if rows == 0 || rows % views.count() != 0 {
        return Err(LossError::Contract(format!(
            "{rows} rows do not form {} equal view blocks",
            views.count()
        )));
    }
    let batch = rows / views.count();
    let unit = tape.l2_normalize_rows(z).map_err(|e| match e {
        NumericsError::Degenerate { row, .. } => LossError::ZeroRow { row },
        other => other.into(),
    })?;
    let unit_t = tape.transpose(unit)?;
    let s = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(s, 1.0 / tau.get());

    let mut den_mask = vec![true; rows * rows];
    let mut num_mask = vec![false; rows * rows];
    for r in 0..rows {
        den_mask[r * rows + r] = false;
        for p in positives(r, batch, views) {
            num_mask[r * rows + p] = true;
        }
    }
    let den = tape.masked_logsumexp_rows(logits, den_mask)?;
    let num = tape.masked_logsumexp_rows(logits, num_mask)?;
    let per_anchor = tape.sub(den, num)?;
    Ok(tape.mean(per_anchor))
}

/// Per-class embeddings for the identity-preserving triplet loss.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    /// One `S_t × d` matrix per class `t`.
    pub classes: Vec<Tensor<f64>>,
    pub margin: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Adversarial triplet loss summed over every anchor `(t, s)`:
/// `[m + max_p D(a,p) − min_n D(a,n)]₊ + (D(n*,p*) − min_n D(a,n))`, where
/// `p*` and `n*` are the selected hardest positive and negative and `D` is
/// squared Euclidean distance. The second term carries no hinge.
pub fn adversarial_triplet_loss(batch: &TripletBatch) -> Result<f64, LossError> {
    Ok(adversarial_triplet_terms(batch)?.iter().sum())
}

/// Per-anchor terms of [`adversarial_triplet_loss`], class-major.
pub fn adversarial_triplet_terms(batch: &TripletBatch) -> Result<Vec<f64>, LossError> {
    if batch.margin < 0.0 {
        return Err(LossError::Contract("margin must be >= 0".into()));
    }
    if batch.classes.len() < 2 {
        return Err(LossError::Contract(
            "at least two classes are needed for negatives".into(),
        ));
    }
    let dim = batch.classes[0].dims().get(1).copied().unwrap_or(0);
    for (t, c) in batch.classes.iter().enumerate() {
        match c.dims() {
            [s, d] if *d == dim && *s >= 2 => {}
            [_, d] if *d == dim => {
                return Err(LossError::Contract(format!(
                    "class {t} needs at least two samples for a positive"
                )))
            }
            other => {
                return Err(LossError::Contract(format!(
                    "class {t} has dims {other:?}, expected [S, {dim}]"
                )))
            }
        }
    }
    let mut terms = Vec::new();
    for (t, class) in batch.classes.iter().enumerate() {
        let n_s = class.dims()[0];
        for s in 0..n_s {
            let a = class.row(s);
            let (mut p_best, mut p_dist) = (None::<&[f64]>, f64::NEG_INFINITY);
            for q in (0..n_s).filter(|&q| q != s) {
                let d = sq_dist(a, class.row(q));
                if d > p_dist {
                    p_dist = d;
                    p_best = Some(class.row(q));
                }
            }
            let (mut n_best, mut n_dist) = (None::<&[f64]>, f64::INFINITY);
            for (u, other) in batch.classes.iter().enumerate() {
                if u == t {
                    continue;
                }
                for q in 0..other.dims()[0] {
                    let d = sq_dist(a, other.row(q));
                    if d < n_dist {
                        n_dist = d;
                        n_best = Some(other.row(q));
                    }
                }
            }
            let (p, n) = (p_best.expect("class size >= 2"), n_best.expect(">= 2 classes"));
            let hinge = (batch.margin + p_dist - n_dist).max(0.0);
            terms.push(hinge + (sq_dist(n, p) - n_dist));
        }
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.7071).abs() < 1e-4);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(LossError::ZeroRow { .. })
        ));
    }

    #[test]
    fn sim_matrix_special_cases() {
        let same = mat(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let s = sim_matrix(&same).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let ortho = mat(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let s = sim_matrix(&ortho).unwrap();
        for p in 0..3 {
            for q in 0..3 {
                assert_eq!(s.data()[p * 3 + q], if p == q { 1.0 } else { 0.0 });
            }
        }

        let zero = mat(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(sim_matrix(&zero), Err(LossError::ZeroRow { row: 1 })));
    }

    #[test]
    fn pair_closed_forms() {
        let tau = Temperature::default();
        let two = sim_matrix(&mat(&[vec![1.0, 0.3], vec![-0.2, 0.9]])).unwrap();
        assert_eq!(nt_xent_pair(0, 1, &two, tau).unwrap(), 0.0);

        let four = sim_matrix(&mat(&vec![vec![0.5, 0.5]; 4])).unwrap();
        assert!((nt_xent_pair(0, 2, &four, tau).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn triplet_closed_forms() {
        let tau = Temperature::default();
        let three = sim_matrix(&mat(&[vec![1.0, 0.0], vec![0.2, 0.7], vec![-1.0, 0.4]])).unwrap();
        for r in 0..3 {
            assert_eq!(nt_xent_triplet(r, &three, tau).unwrap(), 0.0);
        }
        let six = sim_matrix(&mat(&vec![vec![0.1, -0.4, 2.0]; 6])).unwrap();
        assert!((nt_xent_triplet(0, &six, tau).unwrap() - 0.9163).abs() < 1e-4);
        assert!((nt_xent_triplet(4, &six, tau).unwrap() - 2.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn malformed_blocks_rejected() {
        let s = sim_matrix(&mat(&vec![vec![1.0, 0.0]; 4])).unwrap();
        assert!(matches!(nt_xent_triplet(0, &s, Temperature::default()), Err(LossError::Contract(_))));
        let z = Tensor::<f64>::zeros(&[5, 2]);
        assert!(EmbeddingBatch::new(z, Views::Triplet).is_err());
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let z = mat(&[
            vec![0.3, -1.2, 0.5],
            vec![1.1, 0.2, -0.4],
            vec![0.0, 0.7, 0.9],
            vec![-0.6, 0.1, 0.3],
            vec![0.8, -0.5, 0.2],
            vec![0.4, 0.4, -1.0],
        ]);
        for views in [Views::Pair, Views::Triplet] {
            let tau = Temperature::new(0.5).unwrap();
            let expected = batch_loss(&EmbeddingBatch::new(z.clone(), views).unwrap(), tau).unwrap();
            let mut tape = Tape::<f64>::new();
            let zv = tape.param(z.clone());
            let l = batch_loss_on_tape(&mut tape, zv, views, tau).unwrap();
            assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(serde_json::from_str::<Temperature>("0.0").is_err());
        assert_eq!(serde_json::from_str::<Temperature>("0.2").unwrap().get(), 0.2);
    }

    #[test]
    fn adversarial_all_identical_gives_margin_per_anchor() {
        let class = mat(&vec![vec![1.0, 1.0]; 3]);
        let batch = TripletBatch {
            classes: vec![class.clone(), class],
            margin: 0.5,
        };
        assert!((adversarial_triplet_loss(&batch).unwrap() - 0.5 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_satisfied_margin_is_zero() {
        // class 0: anchor at 0 and positive at distance 1 (squared 1);
        // class 1: negatives at squared distance 4 from the anchor and the positive.
        let a = mat(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let n = mat(&[vec![0.5, 1.9364916731037085], vec![0.5, 1.9364916731037085]]);
        let batch = TripletBatch {
            classes: vec![a, n],
            margin: 0.0,
        };
        // anchors of class 0: [1 − 4]₊ + (4 − 4) = 0
        let terms = adversarial_triplet_terms(&batch).unwrap();
        assert!(terms[0].abs() < 1e-12, "{terms:?}");
        assert!(terms[1].abs() < 1e-12, "{terms:?}");
    }

    #[test]
    fn adversarial_contract_errors() {
        let one = mat(&[vec![0.0, 0.0]]);
        let two = mat(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(adversarial_triplet_loss(&TripletBatch {
            classes: vec![one, two.clone()],
            margin: 0.1
        })
        .is_err());
        assert!(adversarial_triplet_loss(&TripletBatch {
            classes: vec![two],
            margin: 0.1
        })
        .is_err());
    }
}
