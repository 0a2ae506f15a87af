mod args;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use flowimg::export::read_tensor;
use flowimg::marketdata::ParseOptions;
use flowimg::models::load_checkpoint;
use flowimg::pipeline::{
    self, build_dataset_dir, dump_pngs, encode_dir, evaluate_checkpoints, export_embeddings, featurize_dir, model_list,
    predict_checkpoint, prepare_output, sha256_file, train_models, write_report, Dataset, ErrorClass, Manifest,
    PipelineConfig, PipelineError, Prepared, RawDir, DATASET_KIND, EVAL_KIND, RAW_KIND, TRAIN_KIND,
};
use thiserror::Error;

use args::{load_config, parse_models, parse_range, Cli, Command, CommonArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    fn name(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Pipeline(e) => e.name(),
        }
    }

    fn exit_code(&self) -> u8 {
        let class = match self {
            CliError::Usage(_) => ErrorClass::Usage,
            CliError::Pipeline(e) => e.class(),
        };
        match class {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Internal => 4,
        }
    }
}

/// Relative paths live under `FLOWIMG_DATA_DIR` when it is set.
fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os("FLOWIMG_DATA_DIR") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_config(dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let text = toml::to_string(config).map_err(|e| PipelineError::Invariant(e.to_string()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, text).map_err(|source| PipelineError::Io { path, source })?;
    Ok(())
}

/// The `--config` file, else the effective config stored with the
/// upstream output, else defaults; then flags.
fn config_with(cli: &Cli, common: &CommonArgs, upstream: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let inherited = upstream.map(|d| d.join("config.toml")).filter(|p| p.exists());
    let mut c = load_config(cli.config.as_deref().or(inherited.as_deref()))?;
    common.apply(&mut c);
    c.catalog_path = c.catalog_path.as_deref().map(resolve);
    c.validate()?;
    Ok(c)
}

fn inputs_of(pairs: &[(&str, &Path)]) -> Result<BTreeMap<String, String>, CliError> {
    let mut m = BTreeMap::new();
    for (name, dir) in pairs {
        m.insert(name.to_string(), Manifest::file_hash(dir)?);
    }
    Ok(m)
}

/// Prepares `out`; returns false when it already holds this output.
fn begin(
    out: &Path,
    kind: &str,
    config: &PipelineConfig,
    inputs: &BTreeMap<String, String>,
    force: bool,
) -> Result<bool, CliError> {
    match prepare_output(out, kind, &config.hash(), inputs, force)? {
        Prepared::Complete => {
            println!("{} is up to date", out.display());
            Ok(false)
        }
        Prepared::Fresh => Ok(true),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { out, synth, common } => {
            let mut c = config_with(cli, common, None)?;
            synth.apply(&mut c);
            let out = resolve(out);
            if begin(&out, RAW_KIND, &c, &BTreeMap::new(), cli.force)? {
                let raw = pipeline::synth(&out, &c)?;
                write_config(&out, &c)?;
                println!("wrote {} days to {}", raw.days.len(), out.display());
            }
        }
        Command::Ingest { trades, depth, format, ts_tolerance_ms, out } => {
            let c = load_config(cli.config.as_deref())?;
            let (trades, depth, out) = (resolve(trades), resolve(depth), resolve(out));
            let inputs = BTreeMap::from([
                ("trades".to_string(), sha256_file(&trades)?),
                ("depth".to_string(), sha256_file(&depth)?),
            ]);
            if begin(&out, RAW_KIND, &c, &inputs, cli.force)? {
                let opts = ParseOptions { format: *format, ts_tolerance_ms: *ts_tolerance_ms };
                let raw = pipeline::ingest(&out, &trades, &depth, opts, &c.hash())?;
                write_config(&out, &c)?;
                println!("wrote {} days to {}", raw.days.len(), out.display());
            }
        }
        Command::Encode { input, out, png_dir, common } => {
            let (input, out) = (resolve(input), resolve(out));
            let c = config_with(cli, common, Some(&input))?;
            let raw = RawDir::open(&input)?;
            if begin(&out, "images", &c, &inputs_of(&[("raw", &input)])?, cli.force)? {
                let png = png_dir.as_deref().map(resolve);
                if let Some(p) = &png {
                    std::fs::create_dir_all(p).map_err(|source| PipelineError::Io { path: p.clone(), source })?;
                }
                let m = encode_dir(&raw, &out, &c, png.as_deref())?;
                write_config(&out, &c)?;
                println!("encoded {} windows", m.details["samples"]);
            }
        }
        Command::Featurize { input, out, common } => {
            let (input, out) = (resolve(input), resolve(out));
            let c = config_with(cli, common, Some(&input))?;
            let raw = RawDir::open(&input)?;
            if begin(&out, "features", &c, &inputs_of(&[("raw", &input)])?, cli.force)? {
                let m = featurize_dir(&raw, &out, &c)?;
                write_config(&out, &c)?;
                println!("featurized {} windows", m.details["samples"]);
            }
        }
        Command::Dataset { input, out, png_dir, common } => {
            let (input, out) = (resolve(input), resolve(out));
            let c = config_with(cli, common, Some(&input))?;
            let raw = RawDir::open(&input)?;
            if begin(&out, DATASET_KIND, &c, &inputs_of(&[("raw", &input)])?, cli.force)? {
                let png = png_dir.as_deref().map(resolve);
                if let Some(p) = &png {
                    std::fs::create_dir_all(p).map_err(|source| PipelineError::Io { path: p.clone(), source })?;
                }
                let m = build_dataset_dir(&raw, &out, &c, png.as_deref())?;
                write_config(&out, &c)?;
                println!("{} samples, split {}", m.details["samples"], m.details["split_sizes"]);
            }
        }
        Command::Train { dataset, model, out, common } => {
            let kinds = parse_models(model)?;
            let (dataset, out) = (resolve(dataset), resolve(out));
            let c = config_with(cli, common, Some(&dataset))?;
            let ds = Dataset::open(&dataset)?;
            let mut inputs = inputs_of(&[("dataset", &dataset)])?;
            inputs.insert("models".into(), model_list(&kinds));
            if begin(&out, TRAIN_KIND, &c, &inputs, cli.force)? {
                for path in train_models(&ds, &out, &kinds, &c)? {
                    println!("wrote {}", path.display());
                }
                write_config(&out, &c)?;
            }
        }
        Command::Predict { model_ckpt, dataset, out, embeddings, common } => {
            let dataset = resolve(dataset);
            let c = config_with(cli, common, Some(&dataset))?;
            let ds = Dataset::open(&dataset)?;
            let ckpt = resolve(model_ckpt);
            let out = resolve(out);
            let n = predict_checkpoint(&ckpt, &ds, &out, None)?;
            println!("wrote {n} predictions to {}", out.display());
            if let Some(e) = embeddings {
                let e = resolve(e);
                export_embeddings(&ckpt, &ds, &e)?;
                println!("wrote embeddings to {}", e.display());
            }
            let mut cfg_path = out.into_os_string();
            cfg_path.push(".config.toml");
            let text = toml::to_string(&c).map_err(|e| PipelineError::Invariant(e.to_string()))?;
            std::fs::write(&cfg_path, text).map_err(|source| PipelineError::Io { path: cfg_path.into(), source })?;
        }
        Command::Eval { model_ckpt, dataset, out, common } => {
            let (dataset, out) = (resolve(dataset), resolve(out));
            let c = config_with(cli, common, Some(&dataset))?;
            let ds = Dataset::open(&dataset)?;
            let ckpts: Vec<PathBuf> = model_ckpt.iter().map(|p| resolve(p)).collect();
            let mut inputs = inputs_of(&[("dataset", &dataset)])?;
            for (k, p) in ckpts.iter().enumerate() {
                inputs.insert(format!("checkpoint_{k}"), sha256_file(p)?);
            }
            if begin(&out, EVAL_KIND, &c, &inputs, cli.force)? {
                let report = evaluate_checkpoints(&ds, &ckpts, &c)?;
                write_report(&out, &report, inputs)?;
                write_config(&out, &c)?;
                print!("{}", report.text_table());
            } else if let Ok(text) = std::fs::read_to_string(out.join("report.txt")) {
                print!("{text}");
            }
        }
        Command::Inspect { path, png_dir, range } => inspect(&resolve(path), png_dir.as_deref(), range)?,
    }
    Ok(())
}

fn inspect(path: &Path, png_dir: Option<&Path>, range: &str) -> Result<(), CliError> {
    if path.is_dir() {
        let m = Manifest::read(path)?;
        println!("{}", serde_json::to_string_pretty(&m).unwrap_or_default());
        if let Some(dir) = png_dir {
            if m.kind != DATASET_KIND {
                return Err(CliError::Usage("--png-dir needs a dataset directory".into()));
            }
            let dir = resolve(dir);
            std::fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
            let n = dump_pngs(&Dataset::open(path)?, &dir, parse_range(range)?)?;
            println!("wrote {n} images to {}", dir.display());
        }
        return Ok(());
    }
    if path.extension().is_some_and(|e| e == "fimg") {
        let (shape, values) = read_tensor(path).map_err(PipelineError::from)?;
        let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        println!("shape {shape:?}, {} values, min {lo}, max {hi}, checksum ok", values.len());
        return Ok(());
    }
    let (store, meta) = load_checkpoint(path).map_err(PipelineError::from)?;
    println!("{}", serde_json::to_string_pretty(&meta).unwrap_or_default());
    println!("{} tensors, {} trainable values", store.params.len(), store.trainable_count());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: Usage: {first}");
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: Internal: {e}");
            return ExitCode::from(4);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.name());
            ExitCode::from(e.exit_code())
        }
    }
}
