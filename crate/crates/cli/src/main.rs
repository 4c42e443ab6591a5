//! `vqg`: dataset generation, training, generation, evaluation, probing,
//! and report emission for the dual-latent question generator.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use vqg_core::corpus::to_examples;
use vqg_core::eval::report::{project_2d, scatter_svg, table1_csv, table3_csv};
use vqg_core::eval::{evaluate, extract_codes, inference_space, mean_decode, sample_decode, EvalConfig, MetricsReport};
use vqg_core::objective::{Space, VariantName};
use vqg_core::pipeline::{emit_splits, load_splits, prepare, train_prepared, ExperimentConfig};
use vqg_core::trainer::{write_history_csv, Checkpoint};
use vqg_core::world::DatasetRecord;
use vqg_core::{Exec, VqgError};

#[derive(Parser, Debug)]
#[command(name = "vqg", version, about = "Dual-latent visual question generation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test JSONL splits and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Total number of records across the three splits.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write its checkpoint and loss history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: String,
        #[arg(long, env = "VQG_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory (defaults to the configured checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate questions for every record of a split.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "VQG_DATA_DIR")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        space: Option<String>,
        /// Requested answer category for every record (t-space only).
        #[arg(long)]
        category: Option<String>,
        /// Sampled questions per record; omit for one mean decode.
        #[arg(long)]
        n: Option<usize>,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Language, relevance, and diversity metrics per variant.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
    },
    /// Latent probe accuracies per variant, with optional scatter plots.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        /// Also write an SVG scatter of the codes of each space.
        #[arg(long)]
        plot: bool,
    },
    /// Merge metric JSON files into table-shaped CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct Selection {
    /// Comma-separated variant names (defaults to the configured list).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, env = "VQG_DATA_DIR")]
    data: PathBuf,
    /// Directory holding `<VARIANT>.ckpt` files.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<VqgError> for Failure {
    fn from(e: VqgError) -> Self {
        let code = match &e {
            VqgError::Io { .. } => 3,
            VqgError::NonFinite { .. } => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    VqgError::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> Outcome<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
        cfg.eval.probe.seed = s;
    }
    Ok(cfg)
}

fn exec(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn parse_variants(arg: Option<&str>, fallback: &[VariantName]) -> Outcome<Vec<VariantName>> {
    match arg {
        None => Ok(fallback.to_vec()),
        Some(s) => Ok(s
            .split(',')
            .map(|v| v.parse::<VariantName>())
            .collect::<Result<Vec<_>, _>>()?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(VqgError::from)?;
    fs::write(path, text + "\n").map_err(|e| io_fail(path, e))
}

fn ensure_dir(path: &Path) -> Outcome<()> {
    fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

fn checkpoint_path(dir: &Path, v: VariantName) -> PathBuf {
    dir.join(format!("{v}.ckpt"))
}

fn cmd_gen_data(common: &Common, n: Option<usize>, out: &Path) -> Outcome<()> {
    let mut cfg = load_config(common)?;
    if let Some(n) = n {
        cfg.n = n;
    }
    cfg.validate()?;
    let m = emit_splits(cfg.n, &cfg.world, cfg.seed, out, exec(common))?;
    info!("wrote {} records to {}", m.n, out.display());
    Ok(())
}

fn cmd_train(common: &Common, variant: &str, data: &Path, epochs: Option<usize>, out: Option<&Path>) -> Outcome<()> {
    let mut cfg = load_config(common)?;
    cfg.train.variant = variant.parse()?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let splits = load_splits(data)?;
    let prepared = prepare(&splits.train, &splits.val, &splits.manifest.world)?;
    let outcome = train_prepared(&cfg.train, &prepared, exec(common))?;
    let dir = out.map(Path::to_path_buf).unwrap_or(cfg.paths.checkpoints.clone());
    ensure_dir(&dir)?;
    let v = cfg.train.variant;
    outcome.checkpoint.save(&checkpoint_path(&dir, v))?;
    write_history_csv(&outcome.checkpoint.history, &dir.join(format!("{v}.history.csv")))?;
    write_json(&dir.join(format!("{v}.config.json")), &cfg)?;
    info!("saved {}", checkpoint_path(&dir, v).display());
    Ok(())
}

#[derive(Serialize)]
struct GeneratedLine<'a> {
    id: &'a str,
    category: Option<&'a str>,
    questions: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    common: &Common,
    variant: Option<&str>,
    checkpoint: Option<&Path>,
    data: &Path,
    split: &str,
    space: Option<&str>,
    category: Option<&str>,
    n: Option<usize>,
    out: &Path,
) -> Outcome<()> {
    let cfg = load_config(common)?;
    let ckpt_path = match (checkpoint, variant) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(v)) => checkpoint_path(&cfg.paths.checkpoints, v.parse()?),
        (None, None) => return Err(usage("generate needs --checkpoint or --variant")),
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    if let Some(v) = variant {
        let v: VariantName = v.parse()?;
        if v != ckpt.variant() {
            return Err(usage(format!("checkpoint holds {}, not {v}", ckpt.variant())));
        }
    }
    let model = ckpt.model()?;
    let space = match space {
        Some(s) => s.parse::<Space>()?,
        None => inference_space(model.variant),
    };
    if !model.variant.flags().has_space(space) {
        return Err(usage(format!("variant {} has no {space}-space", model.variant)));
    }
    let splits = load_splits(data)?;
    let mut records: Vec<DatasetRecord> = match split {
        "train" => splits.train,
        "val" => splits.val,
        "test" => splits.test,
        other => return Err(usage(format!("unknown split {other:?}; expected train, val, or test"))),
    };
    if let Some(c) = category {
        if space != Space::T {
            return Err(usage("--category applies to t-space generation only"));
        }
        if !ckpt.categories.iter().any(|k| k == c) {
            return Err(usage(format!("unknown category {c:?}; known: {}", ckpt.categories.join(", "))));
        }
        for r in &mut records {
            r.category = Some(c.to_string());
        }
    }
    let examples = to_examples(&records, &ckpt.vocab, &ckpt.categories)?;
    let max_len = cfg.eval.max_len;
    let questions: Vec<Vec<Vec<usize>>> = match n {
        None => mean_decode(&model, &examples, space, max_len, exec(common))?
            .into_iter()
            .map(|q| vec![q])
            .collect(),
        Some(k) => sample_decode(&model, &examples, space, k, cfg.seed, max_len, exec(common))?,
    };
    let mut text = String::new();
    for (r, qs) in records.iter().zip(&questions) {
        let line = GeneratedLine {
            id: &r.id,
            category: r.category.as_deref(),
            questions: qs.iter().map(|q| ckpt.vocab.decode(q)).collect(),
        };
        text.push_str(&serde_json::to_string(&line).map_err(VqgError::from)?);
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| io_fail(out, e))?;
    write_json(&out.with_extension("config.json"), &cfg)?;
    Ok(())
}

fn selected(common: &Common, sel: &Selection) -> Outcome<(ExperimentConfig, Vec<(VariantName, Checkpoint)>, PathBuf)> {
    let cfg = load_config(common)?;
    let variants = parse_variants(sel.variant.as_deref(), &cfg.variants)?;
    let dir = sel.checkpoints.clone().unwrap_or(cfg.paths.checkpoints.clone());
    let ckpts = variants
        .into_iter()
        .map(|v| Ok((v, Checkpoint::load(&checkpoint_path(&dir, v))?)))
        .collect::<Outcome<Vec<_>>>()?;
    let out = sel.out.clone().unwrap_or(cfg.paths.reports.clone());
    ensure_dir(&out)?;
    Ok((cfg, ckpts, out))
}

fn cmd_evaluate(common: &Common, sel: &Selection) -> Outcome<()> {
    let (cfg, ckpts, out) = selected(common, sel)?;
    let splits = load_splits(&sel.data)?;
    let ec = EvalConfig {
        probes: false,
        ..cfg.eval.clone()
    };
    for (v, ckpt) in &ckpts {
        let report = evaluate(ckpt, &splits.train, &splits.test, &ec, exec(common))?;
        write_json(&out.join(format!("{v}.metrics.json")), &report)?;
    }
    Ok(())
}

fn cmd_probe(common: &Common, sel: &Selection, plot: bool) -> Outcome<()> {
    let (cfg, ckpts, out) = selected(common, sel)?;
    let splits = load_splits(&sel.data)?;
    let ec = EvalConfig {
        language: false,
        probes: true,
        ..cfg.eval.clone()
    };
    for (v, ckpt) in &ckpts {
        let report = evaluate(ckpt, &splits.train, &splits.test, &ec, exec(common))?;
        write_json(&out.join(format!("{v}.probe.json")), &report)?;
        if plot {
            let model = ckpt.model()?;
            let test = to_examples(&splits.test, &ckpt.vocab, &ckpt.categories)?;
            for space in model.variant.flags().spaces() {
                let codes = extract_codes(&model, &test, space, exec(common))?;
                let labels: Vec<usize> = codes.categories.iter().map(|c| c.unwrap_or(0)).collect();
                let svg = scatter_svg(
                    &project_2d(&codes.codes),
                    &labels,
                    &ckpt.categories,
                    &format!("{} {space}-space codes by category", v.label()),
                );
                let path = out.join(format!("{v}.{space}.svg"));
                fs::write(&path, svg).map_err(|e| io_fail(&path, e))?;
            }
        }
    }
    Ok(())
}

fn cmd_report(common: &Common, inputs: &[PathBuf], out: &Path) -> Outcome<()> {
    if inputs.is_empty() {
        return Err(usage("report needs at least one metrics JSON file"));
    }
    let cfg = load_config(common)?;
    let mut merged: Vec<MetricsReport> = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| io_fail(p, e))?;
        let r = MetricsReport::from_json(&text)?;
        match merged.iter_mut().find(|m| m.variant == r.variant) {
            Some(m) => {
                for (space, metrics) in &r.spaces {
                    m.spaces.entry(*space).or_default().merge(metrics);
                }
            }
            None => merged.push(r),
        }
    }
    ensure_dir(out)?;
    let t1 = out.join("table1.csv");
    fs::write(&t1, table1_csv(&merged)?).map_err(|e| io_fail(&t1, e))?;
    let t3 = out.join("table3.csv");
    fs::write(&t3, table3_csv(&merged)?).map_err(|e| io_fail(&t3, e))?;
    let configs: Vec<_> = merged.iter().map(|m| (m.variant, m.config.clone())).collect();
    write_json(
        &out.join("report.config.json"),
        &serde_json::json!({ "experiment": cfg, "inputs": configs }),
    )
}

fn run(cli: Cli) -> Outcome<()> {
    match &cli.command {
        Command::GenData { common, n, out } => cmd_gen_data(common, *n, out),
        Command::Train {
            common,
            variant,
            data,
            epochs,
            out,
        } => cmd_train(common, variant, data, *epochs, out.as_deref()),
        Command::Generate {
            common,
            variant,
            checkpoint,
            data,
            split,
            space,
            category,
            n,
            out,
        } => cmd_generate(
            common,
            variant.as_deref(),
            checkpoint.as_deref(),
            data,
            split,
            space.as_deref(),
            category.as_deref(),
            *n,
            out,
        ),
        Command::Evaluate { common, sel } => cmd_evaluate(common, sel),
        Command::Probe { common, sel, plot } => cmd_probe(common, sel, *plot),
        Command::Report { common, inputs, out } => cmd_report(common, inputs, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
