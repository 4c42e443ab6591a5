//! Deterministic optimization loop, learning-rate schedule, checkpoints,
//! and training history.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, sequential_batches, QAExample, Vocabulary};
use crate::error::{Result, VqgError};
use crate::model::{Dims, Model};
use crate::objective::{batch_gradients, batch_loss, gradient_routes, LossBreakdown, LossWeights, Term, TermProbe, VariantName};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::seeding;
use crate::Exec;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: VariantName,
    pub hidden: usize,
    pub latent: usize,
    pub weights: LossWeights,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rows per gradient chunk; chunks are the unit of parallel work.
    pub chunk_rows: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub lt_updates_z: bool,
    pub optimizer: AdamConfig,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: VariantName::Ours,
            hidden: 64,
            latent: 16,
            weights: LossWeights::default(),
            lr0: 0.001,
            lr_decay_factor: 0.5,
            lr_decay_every: 4,
            epochs: 10,
            batch_size: 64,
            chunk_rows: 16,
            clip_norm: Some(5.0),
            lt_updates_z: true,
            optimizer: AdamConfig::default(),
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VqgError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.epochs == 0 || self.lr_decay_every == 0 || self.batch_size == 0 || self.chunk_rows == 0 {
            return bad("epochs, lr_decay_every, batch_size and chunk_rows must be >= 1".into());
        }
        if self.hidden == 0 || self.latent == 0 {
            return bad("hidden and latent sizes must be >= 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        self.weights.validate()
    }
}

/// `lr0 * factor^(floor(epoch / every))`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay_factor.powi((epoch / config.lr_decay_every) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Mean losses of one epoch on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: Split,
    pub losses: LossBreakdown,
    pub lr: f64,
}

/// Parameters plus everything needed to rebuild and describe a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: Dims,
    pub vocab: Vocabulary,
    pub categories: Vec<String>,
    pub epoch: usize,
    pub history: Vec<HistoryRow>,
    pub store: ParamStore,
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Largest per-term, per-group gradient norm seen in each epoch.
    pub probes: Vec<TermProbe>,
}

fn merge_probe(into: &mut TermProbe, step: &TermProbe) {
    for (term, groups) in &step.norms {
        let slot = into.norms.entry(*term).or_default();
        for (g, n) in groups {
            let e = slot.entry(*g).or_insert(0.0);
            *e = e.max(*n);
        }
    }
}

/// Everything `train` needs besides the configuration.
pub struct TrainData<'a> {
    pub train: &'a [QAExample],
    pub val: &'a [QAExample],
    pub vocab: &'a Vocabulary,
    pub categories: &'a [String],
    pub features: usize,
}

fn check_examples(variant: VariantName, set: &[QAExample], name: &str) -> Result<()> {
    if set.is_empty() {
        return Err(VqgError::Data(format!("{name} set is empty")));
    }
    let flags = variant.flags();
    if flags.uses_answer && set.iter().any(|e| e.answer.is_none()) {
        return Err(VqgError::Data(format!("variant {variant} requires answers in the {name} set")));
    }
    if flags.uses_category && set.iter().any(|e| e.category.is_none()) {
        return Err(VqgError::Data(format!("variant {variant} requires categories in the {name} set")));
    }
    Ok(())
}

/// Runs the configured number of epochs and returns the final checkpoint.
pub fn train(config: &TrainConfig, data: &TrainData<'_>, exec: Exec) -> Result<TrainOutcome> {
    config.validate()?;
    check_examples(config.variant, data.train, "training")?;
    check_examples(config.variant, data.val, "validation")?;
    let dims = Dims {
        hidden: config.hidden,
        latent: config.latent,
        features: data.features,
        vocab: data.vocab.len(),
        categories: data.categories.len(),
    };
    let mut model = Model::new(dims, config.variant, seeding::derive(config.seed, 1));
    let routes = gradient_routes(config.variant, config.lt_updates_z);
    let mut opt = Adam::new(&model.store, config.optimizer);
    let mut history = Vec::new();
    let mut probes = Vec::new();
    let val_batches = sequential_batches(data.val, config.batch_size, dims.categories);
    let val_seed = seeding::derive(config.seed, 3);
    let mut step = 0usize;
    let mut epochs_done = 0;
    'epochs: for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let batches = make_batches(data.train, config.batch_size, dims.categories, seeding::derive(config.seed, 100 + epoch as u64))?;
        let mut parts = Vec::with_capacity(batches.len());
        let mut probe = TermProbe::default();
        for batch in &batches {
            let chunks = batch.split(config.chunk_rows);
            let step_seed = seeding::derive(config.seed, 1_000_000 + step as u64);
            let mut sg = batch_gradients(&model, &chunks, &config.weights, &routes, step_seed, exec)?;
            if let Some((term, value)) = sg.breakdown.first_non_finite() {
                return Err(VqgError::NonFinite {
                    term: term.to_string(),
                    epoch,
                    step,
                    value,
                });
            }
            if !sg.grads.all_finite() {
                return Err(VqgError::NonFinite {
                    term: "gradient".into(),
                    epoch,
                    step,
                    value: sg.grads.global_norm(),
                });
            }
            if let Some(clip) = config.clip_norm {
                let norm = sg.grads.global_norm();
                if norm > clip {
                    sg.grads.scale(clip / norm);
                }
            }
            opt.step(&mut model.store, &sg.grads, lr);
            merge_probe(&mut probe, &sg.probe);
            parts.push((sg.breakdown, batch.len() as f64));
            step += 1;
            if config.max_steps.is_some_and(|m| step >= m) {
                history.push(HistoryRow {
                    epoch,
                    split: Split::Train,
                    losses: LossBreakdown::weighted_mean(&parts),
                    lr,
                });
                probes.push(probe);
                epochs_done = epoch + 1;
                break 'epochs;
            }
        }
        let train_mean = LossBreakdown::weighted_mean(&parts);
        let mut val_parts = Vec::with_capacity(val_batches.len());
        for (k, b) in val_batches.iter().enumerate() {
            let l = batch_loss(&model, &b.split(config.chunk_rows), &config.weights, seeding::derive(val_seed, k as u64), exec)?;
            val_parts.push((l, b.len() as f64));
        }
        let val_mean = LossBreakdown::weighted_mean(&val_parts);
        info!(
            "{} epoch {epoch}: train L_MLE {:.4} total {:.4} | val L_MLE {:.4}",
            config.variant, train_mean.mle, train_mean.total, val_mean.mle
        );
        debug!("{} epoch {epoch} probe {:?}", config.variant, probe);
        history.push(HistoryRow {
            epoch,
            split: Split::Train,
            losses: train_mean,
            lr,
        });
        history.push(HistoryRow {
            epoch,
            split: Split::Val,
            losses: val_mean,
            lr,
        });
        probes.push(probe);
        epochs_done = epoch + 1;
    }
    model.store.round_to_f32();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            dims,
            vocab: data.vocab.clone(),
            categories: data.categories.to_vec(),
            epoch: epochs_done,
            history,
            store: model.store,
        },
        probes,
    })
}

const MAGIC: &[u8; 8] = b"VQGCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    dims: Dims,
    vocab: Vec<String>,
    vocab_hash: String,
    categories: Vec<String>,
    epoch: usize,
    history: Vec<HistoryRow>,
    params: Vec<ParamEntry>,
}

fn format_err(path: &Path, what: &str) -> VqgError {
    VqgError::Format(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_store(self.dims, self.config.variant, self.store.clone())
    }

    pub fn variant(&self) -> VariantName {
        self.config.variant
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            dims: self.dims,
            vocab: self.vocab.words().to_vec(),
            vocab_hash: self.vocab.hash(),
            categories: self.categories.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            params: self
                .store
                .iter()
                .map(|(name, v)| ParamEntry {
                    name: name.to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 4 * self.store.num_scalars() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in self.store.iter() {
            for x in v.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Atomic write: a temporary sibling file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| VqgError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| VqgError::io(&tmp, e))?;
        f.sync_all().map_err(|e| VqgError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| VqgError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format_err(path, &format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(format_err(path, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| format_err(path, &format!("bad header: {e}")))?;
        let vocab = Vocabulary::from_tokens(header.vocab.into_iter())
            .map_err(|e| format_err(path, &format!("bad vocabulary: {e}")))?;
        if vocab.hash() != header.vocab_hash {
            return Err(format_err(path, "vocabulary hash mismatch"));
        }
        let mut data = &body[hlen..];
        let mut store = ParamStore::new();
        for p in &header.params {
            let n = p.rows * p.cols;
            if data.len() < 4 * n {
                return Err(format_err(path, &format!("truncated parameter block {}", p.name)));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            data = &data[4 * n..];
            let arr = ndarray::Array2::from_shape_vec((p.rows, p.cols), values).expect("sized above");
            store.insert(p.name.clone(), arr);
        }
        if !data.is_empty() {
            return Err(format_err(path, "trailing bytes after parameter blocks"));
        }
        let ckpt = Checkpoint {
            config: header.config,
            dims: header.dims,
            vocab,
            categories: header.categories,
            epoch: header.epoch,
            history: header.history,
            store,
        };
        ckpt.model().map_err(|e| format_err(path, &e.to_string()))?;
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| VqgError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks that the stored vocabulary matches `vocab`.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.vocab.hash() != vocab.hash() {
            return Err(format_err(path, "checkpoint vocabulary differs from the supplied vocabulary"));
        }
        Ok(ckpt)
    }
}

/// Column order of the history CSV.
pub fn history_header() -> Vec<&'static str> {
    let mut cols = vec!["epoch", "split"];
    cols.extend(Term::ALL.map(Term::column));
    cols.extend(["total", "lr"]);
    cols
}

pub fn history_csv(rows: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt_err = |e: csv::Error| VqgError::Format(e.to_string());
    w.write_record(history_header()).map_err(fmt_err)?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            match r.split {
                Split::Train => "train".into(),
                Split::Val => "val".into(),
            },
        ];
        rec.extend(Term::ALL.map(|t| r.losses.get(t).to_string()));
        rec.push(r.losses.total.to_string());
        rec.push(r.lr.to_string());
        w.write_record(&rec).map_err(fmt_err)?;
    }
    let bytes = w.into_inner().map_err(|e| VqgError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    fs::write(path, history_csv(rows)?).map_err(|e| VqgError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, EOS};

    fn vocab() -> Vocabulary {
        Vocabulary::build(["what color is the cube ? red blue"], 1).unwrap()
    }

    fn examples(n: usize) -> Vec<QAExample> {
        (0..n)
            .map(|i| QAExample {
                features: vec![(i % 3) as f64, (i % 2) as f64, 0.5],
                question: vec![BOS, 4 + i % 3, 5, 6, EOS],
                answer: Some(vec![BOS, 9 + i % 2, EOS]),
                category: Some(i % 2),
            })
            .collect()
    }

    fn small() -> TrainConfig {
        TrainConfig {
            hidden: 6,
            latent: 3,
            epochs: 2,
            batch_size: 4,
            chunk_rows: 2,
            lr0: 0.01,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn run(config: &TrainConfig) -> TrainOutcome {
        let (train_set, val_set) = (examples(10), examples(4));
        let v = vocab();
        let cats = vec!["color".to_string(), "object".to_string()];
        let data = TrainData {
            train: &train_set,
            val: &val_set,
            vocab: &v,
            categories: &cats,
            features: 3,
        };
        train(config, &data, Exec::default()).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.001);
        assert_eq!(lr_schedule(3, &c), 0.001);
        assert_eq!(lr_schedule(4, &c), 0.0005);
        assert_eq!(lr_schedule(8, &c), 0.00025);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr0: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay_factor: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        assert_eq!(serde_json::from_str::<TrainConfig>("{}").unwrap(), TrainConfig::default());
    }

    #[test]
    fn deterministic_histories_and_checkpoints() {
        let a = run(&small());
        let b = run(&small());
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.checkpoint.history.len(), 4);
        assert_eq!(history_csv(&a.checkpoint.history).unwrap(), history_csv(&b.checkpoint.history).unwrap());
    }

    #[test]
    fn probes_respect_routing_and_variant() {
        for variant in [VariantName::Ours, VariantName::OursWoC, VariantName::Ic2q] {
            let out = run(&TrainConfig { variant, ..small() });
            let routes = gradient_routes(variant, true);
            for probe in &out.probes {
                for (term, groups) in &probe.norms {
                    assert!(variant.flags().is_active(*term), "{variant} {term:?}");
                    for g in groups.keys() {
                        assert!(routes.allows(*g, *term), "{variant} {term:?} {g:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn missing_fields_are_data_errors() {
        let mut set = examples(4);
        for e in &mut set {
            e.category = None;
        }
        let v = vocab();
        let cats = vec!["a".to_string(), "b".to_string()];
        let data = TrainData {
            train: &set,
            val: &set,
            vocab: &v,
            categories: &cats,
            features: 3,
        };
        let c = TrainConfig { variant: VariantName::Ic2q, ..small() };
        assert!(matches!(train(&c, &data, Exec::Sequential), Err(VqgError::Data(_))));
    }

    #[test]
    fn nan_aborts_with_term_name() {
        let mut set = examples(4);
        set[0].features[0] = f64::NAN;
        let v = vocab();
        let cats = vec!["a".to_string(), "b".to_string()];
        let data = TrainData {
            train: &set,
            val: &set,
            vocab: &v,
            categories: &cats,
            features: 3,
        };
        match train(&small(), &data, Exec::Sequential) {
            Err(VqgError::NonFinite { term, epoch, .. }) => {
                assert_eq!(term, "L_MLE");
                assert_eq!(epoch, 0);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ck = run(&small()).checkpoint;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let z = vec![0.2, -0.4, 0.9];
        assert_eq!(
            back.model().unwrap().decode_greedy(&z, 20).unwrap(),
            ck.model().unwrap().decode_greedy(&z, 20).unwrap()
        );
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(VqgError::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(VqgError::Format(_))));
        fs::write(&path, &bytes).unwrap();
        let other = Vocabulary::build(["something else entirely"], 1).unwrap();
        assert!(matches!(Checkpoint::load_for(&path, &other), Err(VqgError::Format(_))));
        assert!(Checkpoint::load_for(&path, &vocab()).is_ok());
    }

    #[test]
    fn history_csv_columns() {
        let ck = run(&small()).checkpoint;
        let text = history_csv(&ck.history).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, "epoch,split,L_MLE,L_i,L_a,L_t,L_prior_z,L_prior_t,total,lr");
        assert_eq!(text.lines().count(), 5);
    }
}
