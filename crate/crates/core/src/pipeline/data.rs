//! In-memory datasets and the label-free view used by pretraining.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;

use super::PipelineError;
use crate::augment::{AgeGroup, AgeTransform, Image, SourceImage};
use crate::io::config::{SplitConfig, SplitPolicy};
use crate::io::manifest::{read_manifest, Split, SubjectRecord};
use crate::numerics::ctns;
use crate::par::{self, Execution};
use crate::seed;
use crate::synthdata::{SynthDataset, SynthSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub subject: u64,
    pub age: u32,
    pub split: Split,
    pub path: String,
}

impl Sample {
    pub fn group(&self) -> AgeGroup {
        AgeGroup::from_age(self.age as f64)
    }
}

/// Images without labels. Each entry keeps its index in the source dataset
/// so an age transform can resolve it.
#[derive(Clone, Debug)]
pub struct UnlabeledView<'a> {
    entries: Vec<(usize, &'a Image)>,
}

impl<'a> UnlabeledView<'a> {
    pub fn new(entries: Vec<(usize, &'a Image)>) -> Self {
        Self { entries }
    }

    /// Every sample not tagged `test`.
    pub fn pretraining(samples: &'a [Sample]) -> Self {
        Self::new(
            samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.split != Split::Test)
                .map(|(i, s)| (i, &s.image))
                .collect(),
        )
    }

    pub fn all(samples: &'a [Sample]) -> Self {
        Self::new(samples.iter().enumerate().map(|(i, s)| (i, &s.image)).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> SourceImage<'a> {
        let (index, image) = self.entries[i];
        SourceImage { index, image }
    }
}

pub fn samples_from_synth(data: &SynthDataset) -> Vec<Sample> {
    data.records
        .iter()
        .zip(&data.images)
        .map(|(r, img)| Sample {
            image: img.clone(),
            subject: r.subject_id,
            age: r.age,
            split: r.split,
            path: r.path.clone(),
        })
        .collect()
}

/// Tags every record according to `cfg`. Under the cross-age policy, test
/// images of subjects with no fine-tuning image fall back to `train`
/// (pretraining only), so every test identity has a trained class.
pub fn assign_splits(records: &mut [SubjectRecord], cfg: &SplitConfig, seed_value: u64) {
    match cfg.policy {
        SplitPolicy::None => records.iter_mut().for_each(|r| r.split = Split::Train),
        SplitPolicy::CrossAge => {
            let ft: BTreeSet<u32> = cfg.finetune_groups.iter().copied().collect();
            for r in records.iter_mut() {
                r.split = if ft.contains(&AgeGroup::from_age(r.age as f64).0) {
                    Split::Finetune
                } else {
                    Split::Test
                };
            }
            let covered: BTreeSet<u64> = records
                .iter()
                .filter(|r| r.split == Split::Finetune)
                .map(|r| r.subject_id)
                .collect();
            for r in records.iter_mut() {
                if r.split == Split::Test && !covered.contains(&r.subject_id) {
                    r.split = Split::Train;
                }
            }
        }
        SplitPolicy::Random => {
            let subjects: BTreeSet<u64> = records.iter().map(|r| r.subject_id).collect();
            for s in subjects {
                let mut idx: Vec<usize> = (0..records.len())
                    .filter(|&i| records[i].subject_id == s)
                    .collect();
                let mut rng = seed::rng(seed_value, &[seed::tag("split"), s]);
                idx.shuffle(&mut rng);
                // keep at least one fine-tuning image per subject
                let n_test = ((idx.len() as f64 * cfg.test_fraction).round() as usize)
                    .min(idx.len().saturating_sub(1));
                for (k, &i) in idx.iter().enumerate() {
                    records[i].split = if k < n_test { Split::Test } else { Split::Finetune };
                }
            }
        }
    }
}

/// Dataset loaded from a manifest, plus the synthetic generator when the
/// manifest directory carries a `synth.json`.
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    pub synth: Option<(SynthDataset, Vec<usize>)>,
}

pub const SYNTH_SPEC_FILE: &str = "synth.json";

pub fn load_dataset(manifest: &Path, exec: Execution) -> Result<LoadedDataset, PipelineError> {
    let records = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let images = par::try_map_indexed(exec, records.len(), |i| {
        let path = base.join(&records[i].path);
        let t = ctns::read(&path).map_err(|e| PipelineError::Lookup(format!("{}: {e}", path.display())))?;
        Image::from_tensor(&t).map_err(|e| PipelineError::Lookup(format!("{}: {e}", path.display())))
    })?;
    let samples: Vec<Sample> = records
        .into_iter()
        .zip(images)
        .map(|(r, image)| Sample {
            image,
            subject: r.subject_id,
            age: r.age,
            split: r.split,
            path: r.path,
        })
        .collect();

    let spec_path = base.join(SYNTH_SPEC_FILE);
    let synth = if spec_path.is_file() {
        let text = std::fs::read_to_string(&spec_path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", spec_path.display())))?;
        let spec: SynthSpec = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", spec_path.display())))?;
        let data = crate::synthdata::generate_with(&spec, exec)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let index: std::collections::HashMap<&str, usize> = data
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.path.as_str(), i))
            .collect();
        let map = samples
            .iter()
            .map(|s| {
                index.get(s.path.as_str()).copied().ok_or_else(|| {
                    PipelineError::Lookup(format!("{} has no synthetic latent", s.path))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some((data, map))
    } else {
        None
    };
    Ok(LoadedDataset { samples, synth })
}

/// Age transform over a loaded dataset whose images map onto synthetic latents.
pub struct MappedOracle<'a> {
    pub data: &'a SynthDataset,
    pub map: &'a [usize],
}

impl AgeTransform for MappedOracle<'_> {
    fn transform(
        &self,
        source: SourceImage<'_>,
        target: AgeGroup,
        mut rng: &mut dyn rand::RngCore,
    ) -> Result<Image, String> {
        let idx = *self
            .map
            .get(source.index)
            .ok_or_else(|| format!("image {} outside the dataset", source.index))?;
        self.data
            .oracle_age_transform(idx, target, &mut rng)
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(ages: &[(u64, u32)]) -> Vec<SubjectRecord> {
        ages.iter()
            .map(|&(s, a)| SubjectRecord {
                subject_id: s,
                age: a,
                split: Split::Train,
                path: String::new(),
            })
            .collect()
    }

    #[test]
    fn cross_age_split_covers_test_identities() {
        let mut r = recs(&[(0, 3), (0, 27), (1, 33), (1, 38)]);
        assign_splits(&mut r, &SplitConfig::default(), 0);
        assert_eq!(r[0].split, Split::Finetune);
        assert_eq!(r[1].split, Split::Test);
        // subject 1 has no image in groups 0..=3
        assert_eq!(r[2].split, Split::Train);
        assert_eq!(r[3].split, Split::Train);
    }

    #[test]
    fn random_split_keeps_a_finetune_image() {
        let mut r = recs(&[(0, 1), (0, 2), (1, 3), (1, 4), (1, 5)]);
        let cfg = SplitConfig {
            policy: SplitPolicy::Random,
            test_fraction: 0.9,
            ..SplitConfig::default()
        };
        assign_splits(&mut r, &cfg, 1);
        for s in 0..2 {
            assert!(r.iter().any(|x| x.subject_id == s && x.split == Split::Finetune));
            assert!(r.iter().any(|x| x.subject_id == s && x.split == Split::Test));
        }
    }
}
