//! Experiment configuration and the glue between dataset files, training,
//! and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{to_examples, QAExample, Vocabulary};
use crate::error::{Result, VqgError};
use crate::eval::EvalConfig;
use crate::objective::VariantName;
use crate::seeding;
use crate::trainer::{train, TrainConfig, TrainData, TrainOutcome};
use crate::world::{emit_dataset_with, read_records, DatasetManifest, DatasetRecord, WorldConfig};
use crate::Exec;

/// Output locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

/// Everything an experiment needs; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    pub variants: Vec<VariantName>,
    /// Total records written by dataset generation.
    pub n: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
            variants: vec![VariantName::Ours],
            n: 5000,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| VqgError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VqgError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.n == 0 {
            return Err(VqgError::Config("n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Record counts of the three dataset splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 80/10/10, with every split holding at least one record.
    pub fn from_total(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(VqgError::Config(format!("need at least 3 records for three splits, got {n}")));
        }
        let val = (n / 10).max(1);
        let test = (n / 10).max(1);
        Ok(SplitSizes {
            train: n - val - test,
            val,
            test,
        })
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Top-level manifest written next to the three split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitsManifest {
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    pub world: WorldConfig,
    pub sizes: SplitSizes,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` (each with its own
/// manifest) and `manifest.json` into `dir`.
pub fn emit_splits(n: usize, world: &WorldConfig, seed: u64, dir: &Path, exec: Exec) -> Result<SplitsManifest> {
    let sizes = SplitSizes::from_total(n)?;
    fs::create_dir_all(dir).map_err(|e| VqgError::io(dir, e))?;
    let mut parts = Vec::new();
    for (k, (split, count)) in SPLITS.iter().zip([sizes.train, sizes.val, sizes.test]).enumerate() {
        parts.push(emit_dataset_with(
            count,
            world,
            seeding::derive(seed, k as u64),
            &split_path(dir, split),
            split,
            exec,
        )?);
    }
    let [train, val, test]: [DatasetManifest; 3] = parts.try_into().expect("three splits");
    let manifest = SplitsManifest {
        n,
        seed,
        config_hash: world.hash(),
        world: world.clone(),
        sizes,
        train,
        val,
        test,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| VqgError::io(&path, e))?;
    Ok(manifest)
}

/// The three splits of a generated dataset directory.
#[derive(Clone, Debug)]
pub struct Splits {
    pub manifest: SplitsManifest,
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

pub fn load_splits(dir: &Path) -> Result<Splits> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| VqgError::io(&mpath, e))?;
    let manifest: SplitsManifest =
        serde_json::from_str(&text).map_err(|e| VqgError::Data(format!("{}: {e}", mpath.display())))?;
    Ok(Splits {
        train: read_records(&split_path(dir, "train"))?,
        val: read_records(&split_path(dir, "val"))?,
        test: read_records(&split_path(dir, "test"))?,
        manifest,
    })
}

/// Vocabulary and id-space examples prepared for training.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub categories: Vec<String>,
    pub features: usize,
    pub train: Vec<QAExample>,
    pub val: Vec<QAExample>,
}

/// Builds the vocabulary from the training questions and answers.
pub fn prepare(train: &[DatasetRecord], val: &[DatasetRecord], world: &WorldConfig) -> Result<Prepared> {
    let vocab = Vocabulary::from_records(train, 1)?;
    let categories = world.categories.clone();
    let features = train
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| VqgError::Data("training split is empty".into()))?;
    Ok(Prepared {
        train: to_examples(train, &vocab, &categories)?,
        val: to_examples(val, &vocab, &categories)?,
        vocab,
        categories,
        features,
    })
}

/// Trains `config.variant` on prepared data.
pub fn train_prepared(config: &TrainConfig, data: &Prepared, exec: Exec) -> Result<TrainOutcome> {
    train(
        config,
        &TrainData {
            train: &data.train,
            val: &data.val,
            vocab: &data.vocab,
            categories: &data.categories,
            features: data.features,
        },
        exec,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        assert_eq!(
            SplitSizes::from_total(5000).unwrap(),
            SplitSizes {
                train: 4000,
                val: 500,
                test: 500
            }
        );
        assert_eq!(SplitSizes::from_total(3).unwrap().train, 1);
        assert!(SplitSizes::from_total(2).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json(r#"{"train": {"epochs": 3}}"#).is_ok());
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"trian": {}}"#),
            Err(VqgError::Config(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn splits_round_trip_and_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let world = WorldConfig::default();
        let m = emit_splits(30, &world, 4, dir.path(), Exec::default()).unwrap();
        let first: Vec<Vec<u8>> = SPLITS.iter().map(|s| fs::read(split_path(dir.path(), s)).unwrap()).collect();
        let again = emit_splits(30, &world, 4, dir.path(), Exec::Sequential).unwrap();
        assert_eq!(m, again);
        for (s, bytes) in SPLITS.iter().zip(first) {
            assert_eq!(fs::read(split_path(dir.path(), s)).unwrap(), bytes);
        }
        let loaded = load_splits(dir.path()).unwrap();
        assert_eq!((loaded.train.len(), loaded.val.len(), loaded.test.len()), (24, 3, 3));
        assert_ne!(loaded.train[0].scene, loaded.test[0].scene);
        let p = prepare(&loaded.train, &loaded.val, &world).unwrap();
        assert_eq!(p.train.len(), 24);
    }
}
