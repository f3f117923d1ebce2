//! Checkpoints: a directory of CTNS tensors plus `meta.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ContrastiveModel, Encoder, LinearClassifier, Mlp, ParamKind, ParamSet, ProjectionHead};
use crate::numerics::ctns::{self, CtnsError};

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint tensor {name}: {source}")]
    Tensor {
        name: String,
        #[source]
        source: CtnsError,
    },
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Contrastive,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub config_hash: String,
    pub mlps: Vec<Mlp>,
    pub layers: Vec<LayerMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<u64>>,
    pub params_digest: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_params(dir: &Path, params: &ParamSet<f32>) -> Result<Vec<LayerMeta>, CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    params
        .iter()
        .map(|p| {
            let file = format!("{}.ctns", p.name);
            ctns::write(dir.join(&file), &p.value).map_err(|source| CheckpointError::Tensor {
                name: p.name.clone(),
                source,
            })?;
            Ok(LayerMeta {
                name: p.name.clone(),
                kind: p.kind,
                dims: p.value.dims().to_vec(),
                file,
            })
        })
        .collect()
}

fn read_params(dir: &Path, layers: &[LayerMeta]) -> Result<ParamSet<f32>, CheckpointError> {
    let mut params = ParamSet::new();
    for l in layers {
        let t = ctns::read(dir.join(&l.file)).map_err(|source| CheckpointError::Tensor {
            name: l.name.clone(),
            source,
        })?;
        if t.dims() != l.dims.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "{} has dims {:?}, metadata says {:?}",
                l.name,
                t.dims(),
                l.dims
            )));
        }
        params
            .insert(&l.name, l.kind, t)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    }
    Ok(params)
}

fn write_meta(dir: &Path, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta, CheckpointError> {
    let path = dir.as_ref().join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_model(
    dir: impl AsRef<Path>,
    model: &ContrastiveModel<f32>,
    seed: u64,
    config_hash: &str,
) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    let layers = write_params(dir, &model.params)?;
    write_meta(
        dir,
        &CheckpointMeta {
            kind: CheckpointKind::Contrastive,
            seed,
            config_hash: config_hash.to_string(),
            mlps: vec![model.encoder.0.clone(), model.head.0.clone()],
            layers,
            classes: None,
            params_digest: model.params.digest(),
        },
    )
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(ContrastiveModel<f32>, CheckpointMeta), CheckpointError> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    if meta.kind != CheckpointKind::Contrastive || meta.mlps.len() != 2 {
        return Err(CheckpointError::Mismatch(
            "expected an encoder/head checkpoint".into(),
        ));
    }
    let params = read_params(dir, &meta.layers)?;
    if params.digest() != meta.params_digest {
        return Err(CheckpointError::Mismatch("parameter digest differs".into()));
    }
    let model = ContrastiveModel {
        encoder: Encoder(meta.mlps[0].clone()),
        head: ProjectionHead(meta.mlps[1].clone()),
        params,
    };
    Ok((model, meta))
}

pub fn save_classifier(
    dir: impl AsRef<Path>,
    clf: &LinearClassifier<f32>,
    seed: u64,
    config_hash: &str,
) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    let layers = write_params(dir, &clf.params)?;
    write_meta(
        dir,
        &CheckpointMeta {
            kind: CheckpointKind::Classifier,
            seed,
            config_hash: config_hash.to_string(),
            mlps: vec![clf.layer.clone()],
            layers,
            classes: Some(clf.classes.clone()),
            params_digest: clf.params.digest(),
        },
    )
}

pub fn load_classifier(
    dir: impl AsRef<Path>,
) -> Result<(LinearClassifier<f32>, CheckpointMeta), CheckpointError> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    if meta.kind != CheckpointKind::Classifier || meta.mlps.len() != 1 {
        return Err(CheckpointError::Mismatch("expected a classifier checkpoint".into()));
    }
    let params = read_params(dir, &meta.layers)?;
    if params.digest() != meta.params_digest {
        return Err(CheckpointError::Mismatch("parameter digest differs".into()));
    }
    let classes = meta
        .classes
        .clone()
        .ok_or_else(|| CheckpointError::Mismatch("classifier without class list".into()))?;
    Ok((
        LinearClassifier {
            layer: meta.mlps[0].clone(),
            params,
            classes,
        },
        meta,
    ))
}
