//! Encoder f(·), projection head g(·), and the linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::Image;
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("input has {got} features, layer {layer} expects {expected}")]
    InputDim {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    params: Vec<Param<T>>,
}

/// Gradients mirroring a [`ParamSet`] entry by entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet<T: Real = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> GradSet<T> {
    pub fn new(grads: Vec<Tensor<T>>) -> Self {
        Self { grads }
    }

    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: params.iter().map(|p| Tensor::zeros(p.value.dims())).collect(),
        }
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.grads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Tape handles for every entry of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<(), ModelError> {
        if self.index(name).is_some() {
            return Err(ModelError::DuplicateParam(name.to_string()));
        }
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(())
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index(name).map(move |i| &mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registers every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    pub fn grads(&self, bound: &Bound, grads: &mut crate::numerics::Gradients<T>) -> GradSet<T> {
        GradSet {
            grads: bound.vars.iter().map(|&v| grads.take(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// SHA-256 over names, dims, and value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Stack of dense layers `x·W + b` with ReLU between consecutive layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(name: &str, widths: Vec<usize>) -> Result<Self, ModelError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ModelError::Config(format!(
                "{name}: widths {widths:?} need at least two positive entries"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            widths,
        })
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.name)
    }

    /// He-uniform weights, zero biases.
    pub fn init<T: Real>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<(), ModelError> {
        for l in 0..self.depth() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            params.insert(
                &self.weight_name(l),
                ParamKind::Weight,
                Tensor::new(vec![fan_in, fan_out], w)?,
            )?;
            params.insert(&self.bias_name(l), ParamKind::Bias, Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    pub fn init_zeros<T: Real>(&self, params: &mut ParamSet<T>) -> Result<(), ModelError> {
        for l in 0..self.depth() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            params.insert(&self.weight_name(l), ParamKind::Weight, Tensor::zeros(&[fan_in, fan_out]))?;
            params.insert(&self.bias_name(l), ParamKind::Bias, Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    /// Records the forward pass of the row batch `x` (n × input_dim).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        bound: &Bound,
        x: Var,
    ) -> Result<Var, ModelError> {
        let got = tape.value(x).dims().last().copied().unwrap_or(0);
        if got != self.input_dim() {
            return Err(ModelError::InputDim {
                layer: self.weight_name(0),
                expected: self.input_dim(),
                got,
            });
        }
        let mut h = x;
        for l in 0..self.depth() {
            let wi = params
                .index(&self.weight_name(l))
                .ok_or_else(|| ModelError::UnknownParam(self.weight_name(l)))?;
            let bi = params
                .index(&self.bias_name(l))
                .ok_or_else(|| ModelError::UnknownParam(self.bias_name(l)))?;
            let lin = tape.matmul(h, bound.var(wi))?;
            h = tape.add_row(lin, bound.var(bi))?;
            if l + 1 < self.depth() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths of the encoder between the flattened input and `d_h`.
    pub encoder_hidden: Vec<usize>,
    pub d_h: usize,
    pub d_z: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256, 128],
            d_h: 64,
            d_z: 32,
        }
    }
}

/// f(·): flattened image → h.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder(pub Mlp);

/// g(·): h → z, exactly three dense layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionHead(pub Mlp);

impl ProjectionHead {
    pub fn new(d_h: usize, d_z: usize) -> Result<Self, ModelError> {
        Ok(Self(Mlp::new("head", vec![d_h, d_h, d_h, d_z])?))
    }
}

/// Encoder plus projection head sharing one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveModel<T: Real = f32> {
    pub encoder: Encoder,
    pub head: ProjectionHead,
    pub params: ParamSet<T>,
}

impl<T: Real> ContrastiveModel<T> {
    pub fn architecture(input_dim: usize, cfg: &ModelConfig) -> Result<(Encoder, ProjectionHead), ModelError> {
        let mut widths = vec![input_dim];
        widths.extend(&cfg.encoder_hidden);
        widths.push(cfg.d_h);
        Ok((
            Encoder(Mlp::new("encoder", widths)?),
            ProjectionHead::new(cfg.d_h, cfg.d_z)?,
        ))
    }

    pub fn init(input_dim: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let (encoder, head) = Self::architecture(input_dim, cfg)?;
        let mut params = ParamSet::new();
        encoder.0.init(&mut params, rng)?;
        head.0.init(&mut params, rng)?;
        Ok(Self {
            encoder,
            head,
            params,
        })
    }

    pub fn d_h(&self) -> usize {
        self.encoder.0.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.0.input_dim()
    }

    pub fn encode_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        self.encoder.0.forward(tape, &self.params, bound, x)
    }

    pub fn project_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, h: Var) -> Result<Var, ModelError> {
        self.head.0.forward(tape, &self.params, bound, h)
    }

    /// h for a row batch of flattened images.
    pub fn encode_batch(&self, x: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(x);
        let h = self.encode_on_tape(&mut tape, &bound, xv)?;
        tape.check_finite()?;
        Ok(tape.value(h).clone())
    }

    pub fn encode(&self, x: &Image) -> Result<Tensor<T>, ModelError> {
        let h = self.encode_batch(image_row(x))?;
        Ok(h.reshape(vec![self.d_h()])?)
    }

    pub fn project(&self, h: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let rows = h.clone().reshape(vec![h.len() / self.d_h().max(1), self.d_h()]).map_err(|_| {
            ModelError::InputDim {
                layer: self.head.0.weight_name(0),
                expected: self.d_h(),
                got: h.len(),
            }
        })?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let hv = tape.constant(rows);
        let z = self.project_on_tape(&mut tape, &bound, hv)?;
        let out = tape.value(z).clone();
        if h.dims().len() == 1 {
            Ok(out.reshape(vec![self.head.0.output_dim()])?)
        } else {
            Ok(out)
        }
    }
}

/// Flattens an image into a `1 × (H·W·3)` row.
pub fn image_row<T: Real>(img: &Image) -> Tensor<T> {
    Tensor::new(
        vec![1, img.len()],
        img.pixels().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
    .expect("image is non-empty")
}

/// Stacks flattened images into an `n × (H·W·3)` matrix.
pub fn image_rows<'a, T: Real>(imgs: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>, ModelError> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut width = None;
    for img in imgs {
        match width {
            None => width = Some(img.len()),
            Some(w) if w != img.len() => {
                return Err(ModelError::InputDim {
                    layer: "input".into(),
                    expected: w,
                    got: img.len(),
                })
            }
            _ => {}
        }
        data.extend(img.pixels().iter().map(|&v| T::from_f64(v as f64)));
        n += 1;
    }
    let w = width.ok_or_else(|| ModelError::Config("no images to stack".into()))?;
    Ok(Tensor::new(vec![n, w], data)?)
}

/// Single dense layer on h producing class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier<T: Real = f32> {
    pub layer: Mlp,
    pub params: ParamSet<T>,
    /// Subject id for each logit.
    pub classes: Vec<u64>,
}

impl<T: Real> LinearClassifier<T> {
    pub fn zeros(d_h: usize, classes: Vec<u64>) -> Result<Self, ModelError> {
        let layer = Mlp::new("classifier", vec![d_h, classes.len()])?;
        let mut params = ParamSet::new();
        layer.init_zeros(&mut params)?;
        Ok(Self {
            layer,
            params,
            classes,
        })
    }

    pub fn init(d_h: usize, classes: Vec<u64>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let layer = Mlp::new("classifier", vec![d_h, classes.len()])?;
        let mut params = ParamSet::new();
        layer.init(&mut params, rng)?;
        Ok(Self {
            layer,
            params,
            classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, subject: u64) -> Option<usize> {
        self.classes.iter().position(|&c| c == subject)
    }

    pub fn logits_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, h: Var) -> Result<Var, ModelError> {
        self.layer.forward(tape, &self.params, bound, h)
    }

    /// Logits for a row batch of h.
    pub fn classify(&self, h: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let d = self.layer.input_dim();
        let rows = h
            .clone()
            .reshape(vec![h.len() / d.max(1), d])
            .map_err(|_| ModelError::InputDim {
                layer: self.layer.weight_name(0),
                expected: d,
                got: h.len(),
            })?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let hv = tape.constant(rows);
        let out = self.logits_on_tape(&mut tape, &bound, hv)?;
        Ok(tape.value(out).clone())
    }

    /// Index of the largest logit per row (first wins on ties).
    pub fn predict(&self, h: &Tensor<T>) -> Result<Vec<usize>, ModelError> {
        let logits = self.classify(h)?;
        let n = self.n_classes();
        Ok(logits
            .data()
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if v.to_f64() > row[best].to_f64() {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

/// Mean softmax cross-entropy of `logits` (n × C) against class indices.
pub fn cross_entropy_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
) -> Result<Var, ModelError> {
    let (n, c) = match tape.value(logits).dims() {
        [n, c] => (*n, *c),
        other => return Err(ModelError::Config(format!("logits must be n×C, got {other:?}"))),
    };
    if targets.len() != n || targets.iter().any(|&t| t >= c) {
        return Err(ModelError::Config("targets do not match logits".into()));
    }
    let lse = tape.masked_logsumexp_rows(logits, vec![true; n * c])?;
    let mut pick = vec![false; n * c];
    for (i, &t) in targets.iter().enumerate() {
        pick[i * c + t] = true;
    }
    let picked = tape.masked_logsumexp_rows(logits, pick)?;
    let per = tape.sub(lse, picked)?;
    Ok(tape.mean(per))
}
