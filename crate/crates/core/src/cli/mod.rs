//! Command-line verbs: `gen-data`, `train`, `eval`, `ablate`,
//! `export-embeddings` and `gradcheck`.
//!
//! Every verb reads defaults, then `--config FILE`, then trailing
//! `key=value` overrides, then the master seed (`--seed`, else
//! `HCFSLN_SEED`). The resolved configuration is echoed to
//! `<out>/config.cfg` so a run can be replayed with `--config`.
//! Reports go to `<out>/metrics.tsv`; wall-clock time goes to
//! `<out>/timing.tsv` so the report itself is reproducible.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::blob::{load_model, save_model, SplitInfo};
use crate::checks::run_suite;
use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{Geometry, ModelParams};
use crate::report::Metrics;
use crate::stats::{run_ablation, AblationGrid};
use crate::train::{embed_pool, evaluate, run_repeats, split_stratified};

pub use config::{Config, KEYS};

/// Environment variable holding the master seed when `--seed` is absent.
pub const SEED_ENV: &str = "HCFSLN_SEED";

#[derive(Debug, Parser)]
#[command(name = "hcfsln", about = "Hyperbolic few-shot learning on multimodal sequences", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    verb: VerbArgs,
}

#[derive(Debug, Subcommand)]
enum VerbArgs {
    /// Generate a synthetic dataset file.
    GenData(Common),
    /// Train with repeated stratified splits and report accuracy.
    Train(Common),
    /// Evaluate a saved model on episodes from a dataset.
    Eval(Common),
    /// Sweep one axis and compare cells with Welch's t-test.
    Ablate(Common),
    /// Write one CSV line of embedding coordinates per sample.
    ExportEmbeddings(Common),
    /// Finite-difference checks of every gradient.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for repeats.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Master seed; overrides the environment and the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` overrides applied after the configuration file.
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    GenData,
    Train,
    Eval,
    Ablate,
    ExportEmbeddings,
    Gradcheck,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::GenData => "gen-data",
            Verb::Train => "train",
            Verb::Eval => "eval",
            Verb::Ablate => "ablate",
            Verb::ExportEmbeddings => "export-embeddings",
            Verb::Gradcheck => "gradcheck",
        }
    }

    /// Key that the master seed sets for this verb.
    pub fn seed_key(self) -> &'static str {
        match self {
            Verb::GenData => "data.seed",
            Verb::Gradcheck => "gradcheck.seed",
            _ => "train.seed",
        }
    }
}

/// A fully resolved command.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub verb: Verb,
    pub config: Config,
    pub out: PathBuf,
    pub threads: usize,
}

/// What parsing produced: a command, or text to print before exiting.
#[derive(Debug)]
pub enum Parsed {
    Run(Invocation),
    Help(String),
}

/// Parse `args` (program name first). `env_seed` is the value of
/// [`SEED_ENV`], passed in so callers control the environment.
pub fn parse_args<I, T>(args: I, env_seed: Option<&str>) -> Result<Parsed>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(Parsed::Help(e.render().to_string())),
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    Err(Error::Usage(format!("no command given\n\n{}", e.render().to_string().trim_end())))
                }
                _ => Err(Error::Usage(e.render().to_string().trim_end().to_string())),
            };
        }
    };
    let (verb, common) = match cli.verb {
        VerbArgs::GenData(c) => (Verb::GenData, c),
        VerbArgs::Train(c) => (Verb::Train, c),
        VerbArgs::Eval(c) => (Verb::Eval, c),
        VerbArgs::Ablate(c) => (Verb::Ablate, c),
        VerbArgs::ExportEmbeddings(c) => (Verb::ExportEmbeddings, c),
        VerbArgs::Gradcheck(c) => (Verb::Gradcheck, c),
    };
    let mut config = Config::default();
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    for item in &common.overrides {
        config.apply_override(item)?;
    }
    let seed = match (common.seed, env_seed) {
        (Some(s), _) => Some(s),
        (None, Some(raw)) => Some(
            raw.trim()
                .parse::<u64>()
                .map_err(|_| Error::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?,
        ),
        (None, None) => None,
    };
    if let Some(s) = seed {
        config.set(verb.seed_key(), &s.to_string())?;
    }
    if common.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    Ok(Parsed::Run(Invocation {
        verb,
        config,
        out: common.out,
        threads: common.threads,
    }))
}

/// Result of a verb: exit status and a short human summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub summary: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_timing(out: &Path, start: Instant) -> Result<()> {
    let mut m = Metrics::new();
    m.set("wall_seconds", start.elapsed().as_secs_f64());
    write_text(&out.join("timing.tsv"), &m.render())
}

fn load_data(config: &Config) -> Result<Dataset> {
    let path = config.get("data.path");
    if path.is_empty() {
        generate_synthetic(&config.synth_spec()?)
    } else {
        load_dataset(Path::new(path), Some(&config.modalities()?))
    }
}

fn load_model_for(config: &Config, dataset: &Dataset) -> Result<(ModelParams, SplitInfo)> {
    let path = config.get("model.path");
    if path.is_empty() {
        return Err(Error::Config("model.path is required".into()));
    }
    let (model, split) = load_model(Path::new(path))?;
    let dims: Vec<(String, usize)> = model
        .config
        .modalities
        .iter()
        .map(|m| (m.name.clone(), m.input_dim))
        .collect();
    let seq_len = model.config.modalities[0].seq_len;
    if dims != dataset.meta.modalities || seq_len != dataset.meta.seq_len {
        return Err(Error::Config(format!(
            "model expects modalities {dims:?} with L={seq_len}, dataset has {:?} with L={}",
            dataset.meta.modalities, dataset.meta.seq_len
        )));
    }
    Ok((model, split))
}

/// Run a resolved command, writing its files under `inv.out`.
pub fn execute(inv: &Invocation) -> Result<Outcome> {
    let out = &inv.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.cfg"), &inv.config.render())?;
    let start = Instant::now();
    let outcome = match inv.verb {
        Verb::GenData => gen_data(inv)?,
        Verb::Train => train(inv)?,
        Verb::Eval => eval(inv)?,
        Verb::Ablate => ablate(inv)?,
        Verb::ExportEmbeddings => export_embeddings(inv)?,
        Verb::Gradcheck => gradcheck(inv)?,
    };
    write_timing(out, start)?;
    Ok(outcome)
}

fn finish(inv: &Invocation, m: &Metrics, exit_code: i32, summary: String) -> Result<Outcome> {
    write_text(&inv.out.join("metrics.tsv"), &m.render())?;
    Ok(Outcome { exit_code, summary })
}

fn gen_data(inv: &Invocation) -> Result<Outcome> {
    let spec = inv.config.synth_spec()?;
    let ds = generate_synthetic(&spec)?;
    let path = inv.out.join("dataset.txt");
    save_dataset(&ds, &path)?;
    let mut m = Metrics::new();
    m.set("kind", "gen-data")
        .set("n", ds.meta.n)
        .set("class_0", ds.meta.class_counts[0])
        .set("class_1", ds.meta.class_counts[1])
        .set("seq_len", ds.meta.seq_len)
        .set("feature_dim", ds.meta.feature_dim());
    finish(inv, &m, 0, format!("wrote {} samples to {}", ds.meta.n, path.display()))
}

fn train(inv: &Invocation) -> Result<Outcome> {
    let cfg = inv.config.train_config()?;
    let ds = load_data(&inv.config)?;
    let report = run_repeats(&ds, &cfg, inv.threads)?;
    if let Some(first) = report.outcomes.first() {
        let split = SplitInfo {
            seed: first.seed,
            test_fraction: cfg.test_fraction,
        };
        save_model(&first.model, &split, &inv.out.join("model.bin"))?;
    }
    let mut m = report.to_metrics();
    for (k, v) in KEYS.iter().map(|(k, _)| (k, inv.config.get(k))) {
        m.set(format!("config.{k}"), v);
    }
    let code = report.failures.iter().map(|f| f.exit_code).max().unwrap_or(0);
    let summary = format!(
        "mean_accuracy\t{}\nstd_accuracy\t{}\nfailed_repeats\t{}",
        report.mean,
        report.std,
        report.failures.len()
    );
    finish(inv, &m, code, summary)
}

fn eval(inv: &Invocation) -> Result<Outcome> {
    let cfg = inv.config.train_config()?;
    let ds = load_data(&inv.config)?;
    let (model, split) = load_model_for(&inv.config, &ds)?;
    let pool = match inv.config.get("eval.split") {
        "test" => split_stratified(&ds.samples, split.test_fraction, split.seed)?.1,
        "all" => ds.samples.clone(),
        other => return Err(Error::Config(format!("key `eval.split`: expected test|all, got {other:?}"))),
    };
    let accuracy = evaluate(&model, &pool, &cfg.episode_spec()?, cfg.eval_episodes, cfg.seed)?;
    let mut m = Metrics::new();
    m.set("kind", "eval")
        .set("split", inv.config.get("eval.split"))
        .set("pool", pool.len())
        .set("episodes", cfg.eval_episodes)
        .set("k", cfg.k)
        .set("b", cfg.b)
        .set("alpha", model.alpha())
        .set("accuracy", accuracy);
    finish(inv, &m, 0, format!("accuracy\t{accuracy}"))
}

fn ablate(inv: &Invocation) -> Result<Outcome> {
    let grid = AblationGrid {
        axis: inv.config.ablation_axis()?,
        base: inv.config.train_config()?,
    };
    let ds = load_data(&inv.config)?;
    let report = run_ablation(&ds, &grid, inv.threads)?;
    let m = report.to_metrics();
    let summary = report
        .rows
        .iter()
        .map(|r| format!("{}\t{}\t{}", r.label, r.mean, r.std))
        .collect::<Vec<_>>()
        .join("\n");
    let code = report.rows.iter().map(|r| r.exit_code).max().unwrap_or(0);
    finish(inv, &m, code, summary)
}

fn export_embeddings(inv: &Invocation) -> Result<Outcome> {
    let ds = load_data(&inv.config)?;
    let (model, split) = load_model_for(&inv.config, &ds)?;
    let (_, test) = split_stratified(&ds.samples, split.test_fraction, split.seed)?;
    let test_ids: Vec<usize> = test.iter().map(|s| s.id).collect();
    let embeddings = embed_pool(&model, &ds.samples)?;
    let path = inv.out.join("embeddings.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut max_norm = 0.0f64;
    for (s, e) in ds.samples.iter().zip(&embeddings) {
        let split = if test_ids.binary_search(&s.id).is_ok() { "test" } else { "train" };
        let coords: Vec<String> = e.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", s.id, s.label, split, coords.join(",")).map_err(|err| Error::io(&path, err))?;
        max_norm = max_norm.max(e.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let mut m = Metrics::new();
    m.set("kind", "export-embeddings")
        .set("n", ds.samples.len())
        .set("dim", model.embed_dim())
        .set("geometry", model.geometry())
        .set("max_norm", max_norm);
    if model.geometry() == Geometry::Hyperbolic && max_norm >= 1.0 {
        return Err(Error::Numeric(format!("exported embedding norm {max_norm} leaves the ball")));
    }
    finish(inv, &m, 0, format!("wrote {} embeddings to {}", ds.samples.len(), path.display()))
}

fn gradcheck(inv: &Invocation) -> Result<Outcome> {
    let suite = inv.config.suite_config()?;
    let results = run_suite(&suite)?;
    let mut m = Metrics::new();
    m.set("kind", "gradcheck")
        .set("trials", suite.trials)
        .set("step", suite.step)
        .set("tol", suite.tol);
    let mut lines = Vec::new();
    for r in &results {
        m.set(format!("check.{}.max_rel_error", r.name), r.max_rel_error)
            .set(format!("check.{}.passed", r.name), r.passed);
        lines.push(format!("{}\t{}\t{}", r.name, r.max_rel_error, if r.passed { "pass" } else { "FAIL" }));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    m.set("failed", failed);
    finish(inv, &m, if failed > 0 { 3 } else { 0 }, lines.join("\n"))
}

/// One machine-parsable line per error: `error<TAB>kind<TAB>code<TAB>message`.
/// Usage text keeps only its first, `error:` and `tip:` lines.
pub fn error_line(e: &Error) -> String {
    let text = e.to_string();
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .enumerate()
        .filter(|(i, l)| {
            !l.is_empty() && (!matches!(e, Error::Usage(_)) || *i == 0 || l.starts_with("error:") || l.starts_with("tip:"))
        })
        .map(|(_, l)| l)
        .collect();
    format!("error\t{}\t{}\t{}", e.kind(), e.exit_code(), lines.join(" | ").replace('\t', " "))
}

/// Parse, run and report; returns the process exit status.
pub fn main_with_args<I, T>(args: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_args(args, env_seed).and_then(|parsed| match parsed {
        Parsed::Help(text) => {
            print!("{text}");
            Ok(Outcome {
                exit_code: 0,
                summary: String::new(),
            })
        }
        Parsed::Run(inv) => execute(&inv),
    });
    match result {
        Ok(o) => {
            if !o.summary.is_empty() {
                println!("{}", o.summary);
            }
            o.exit_code
        }
        Err(e) => {
            if let Error::Usage(text) = &e {
                eprintln!("{text}");
            }
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str], env: Option<&str>) -> Result<Invocation> {
        match parse_args(std::iter::once("hcfsln").chain(args.iter().copied()), env)? {
            Parsed::Run(inv) => Ok(inv),
            Parsed::Help(_) => panic!("unexpected help"),
        }
    }

    #[test]
    fn seed_precedence() {
        let inv = run(&["train", "train.seed=4"], None).unwrap();
        assert_eq!(inv.config.get("train.seed"), "4");
        let inv = run(&["train", "train.seed=4"], Some("9")).unwrap();
        assert_eq!(inv.config.get("train.seed"), "9");
        let inv = run(&["train", "--seed", "11", "train.seed=4"], Some("9")).unwrap();
        assert_eq!(inv.config.get("train.seed"), "11");
        let inv = run(&["gen-data", "--seed", "3"], None).unwrap();
        assert_eq!(inv.config.get("data.seed"), "3");
        assert_eq!(inv.config.get("train.seed"), "0");
        assert!(run(&["train"], Some("abc")).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let e = run(&["trian"], None).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("train"), "{e}");
        assert_eq!(run(&[], None).unwrap_err().exit_code(), 1);
        let e = run(&["train", "train.lerning_rate=1"], None).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("train.learning_rate"));
        assert_eq!(run(&["train", "--threads", "0"], None).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn help_is_not_an_error() {
        let parsed = parse_args(["hcfsln", "--help"], None).unwrap();
        assert!(matches!(parsed, Parsed::Help(t) if t.contains("gen-data")));
    }

    #[test]
    fn error_lines_are_tab_separated() {
        let line = error_line(&Error::Numeric("nan\nin loss".into()));
        assert_eq!(line, "error\tnumeric\t3\tnumeric failure: nan | in loss");
        let e = run(&["trian"], None).unwrap_err();
        let line = error_line(&e);
        assert!(line.starts_with("error\tusage\t1\t"), "{line}");
        assert!(line.contains("tip:") && !line.contains("Usage:"), "{line}");
    }
}
