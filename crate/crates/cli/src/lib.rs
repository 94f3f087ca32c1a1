//! Command-line front end: fixtures, training, evaluation, gradient checks
//! and mask inspection.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure. The last
//! line on stdout is always a JSON object; errors also go to stderr as one
//! JSON line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use hmt_core::config::TrainConfig;
use hmt_core::docfeat::{read_hmtb, synth_generate, write_hmtb, DatasetSplit, SplitTag, SynthMode, SynthSpec};
use hmt_core::dmt::dmt_pipeline;
use hmt_core::exec::Exec;
use hmt_core::gradcheck::{desk_document, gradcheck};
use hmt_core::model::model_forward;
use hmt_core::params::{load_params, save_params, ModelParams};
use hmt_core::train::{evaluate, train};
use hmt_core::{HmtError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Overrides any `--seed` flag when set.
pub const SEED_ENV: &str = "HMT_SEED";

#[derive(Parser, Debug)]
#[command(name = "hmt", version, about = "Hierarchical multimodal transformer for long documents")]
struct Cli {
    /// Document-level execution strategy.
    #[arg(long, global = true, default_value = "parallel")]
    exec: Exec,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/val/test splits.
    GenFixtures(GenFixtures),
    /// Train on DIR/train.hmtb with early stopping on DIR/val.hmtb.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Dump the transferred masks of one document as JSON.
    InspectMasks(InspectArgs),
}

#[derive(Args, Debug)]
struct GenFixtures {
    #[arg(long)]
    out: PathBuf,
    /// Training documents; validation and test get a fifth as many each.
    #[arg(long)]
    docs: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value = "planted")]
    mode: SynthMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    r: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Defaults to the config saved next to the model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: SplitTag,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    doc: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<SplitTag, String> {
    match s {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        other => Err(format!("unknown split {other:?}")),
    }
}

fn seed_override(flag: Option<u64>) -> std::result::Result<Option<u64>, String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(flag),
    }
}

/// Path of the config written alongside a checkpoint.
pub fn config_sidecar(model: &Path) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(".config");
    PathBuf::from(name)
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::parse(&fs::read_to_string(path)?)
}

fn load_split(dir: &Path, tag: SplitTag) -> Result<DatasetSplit> {
    let file = File::open(dir.join(tag.file_name()))?;
    let split = read_hmtb(BufReader::new(file), tag)?;
    split.validate()?;
    Ok(split)
}

fn write_split(dir: &Path, split: &DatasetSplit) -> Result<u64> {
    let mut w = BufWriter::new(File::create(dir.join(split.tag.file_name()))?);
    let n = write_hmtb(split, &mut w)?;
    w.flush()?;
    Ok(n)
}

fn load_model(model: &Path, config: Option<&Path>) -> Result<(TrainConfig, ModelParams)> {
    let cfg = read_config(config.unwrap_or(&config_sidecar(model)))?;
    let params = load_params(BufReader::new(File::open(model)?), &cfg)?;
    Ok((cfg, params))
}

fn gen_fixtures(a: &GenFixtures, seed: u64) -> Result<Value> {
    fs::create_dir_all(&a.out)?;
    let mut counts = serde_json::Map::new();
    for (stream, tag, docs) in [
        (0, SplitTag::Train, a.docs),
        (1, SplitTag::Val, (a.docs / 5).max(1)),
        (2, SplitTag::Test, (a.docs / 5).max(1)),
    ] {
        let split = synth_generate(&SynthSpec {
            docs,
            classes: a.classes,
            d: a.d,
            r: a.r,
            sigma: a.sigma,
            mode: a.mode,
            seed,
            stream,
            tag,
            ..SynthSpec::default()
        })?;
        write_split(&a.out, &split)?;
        counts.insert(tag.file_name().trim_end_matches(".hmtb").into(), json!(docs));
    }
    Ok(json!({ "command": "gen-fixtures", "out": a.out, "seed": seed, "docs": counts }))
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>, exec: Exec, out: &mut dyn Write) -> Result<Value> {
    let mut cfg = read_config(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let tr = load_split(&a.data, SplitTag::Train)?;
    let va = load_split(&a.data, SplitTag::Val)?;
    let mut log = BufWriter::new(File::create(&a.log)?);
    let mut log_err = None;
    let outcome = train(&tr, &va, &cfg, exec, |rec| {
        let line = serde_json::to_string(rec).expect("plain record");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| writeln!(out, "{line}")) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    save_params(&outcome.params, &mut w)?;
    w.flush()?;
    fs::write(config_sidecar(&a.out), cfg.to_config_string())?;
    Ok(json!({
        "command": "train",
        "model": a.out,
        "epochs": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_macro_f1": outcome.best_val_macro_f1,
        "seed": cfg.seed,
    }))
}

fn eval_cmd(a: &EvalArgs, exec: Exec) -> Result<Value> {
    let (cfg, params) = load_model(&a.model, a.config.as_deref())?;
    let split = load_split(&a.data, a.split)?;
    let report = evaluate(&split, &params, &cfg, exec)?;
    let body = serde_json::to_string_pretty(&report).expect("plain report");
    fs::write(&a.report, body + "\n")?;
    Ok(json!({
        "command": "eval",
        "split": a.split.file_name(),
        "samples": report.samples,
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
    }))
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64, exec: Exec) -> Result<(Value, bool)> {
    let mut cfg = read_config(&a.config)?;
    cfg.seed = seed;
    let params = ModelParams::init(&cfg)?;
    let doc = desk_document(&cfg, seed)?;
    let report = gradcheck(&doc, &params, &cfg, exec)?;
    let pass = report.max_rel_err < a.tolerance;
    Ok((
        json!({
            "max_rel_err": report.max_rel_err,
            "worst_param": report.worst_param,
            "tolerance": a.tolerance,
            "pass": pass,
        }),
        pass,
    ))
}

fn inspect_cmd(a: &InspectArgs) -> Result<Value> {
    let (cfg, params) = load_model(&a.model, a.config.as_deref())?;
    let mut found = None;
    for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
        if !a.data.join(tag.file_name()).exists() {
            continue;
        }
        let split = load_split(&a.data, tag)?;
        if let Some(doc) = split.docs.into_iter().find(|d| d.doc_id == a.doc) {
            found = Some(doc);
            break;
        }
    }
    let doc = found.ok_or_else(|| HmtError::Format(format!("document {:?} not found under {:?}", a.doc, a.data)))?;
    // Masks depend only on the section level, so the sentence level is
    // switched on regardless of the trained ablation flags.
    let probe = TrainConfig {
        enable_dmmt: true,
        enable_dmt: true,
        ..cfg.clone()
    };
    let fwd = model_forward(&doc, &params, &probe)?;
    let masks = match fwd.diagnostics.transfer {
        Some(t) => t,
        None => {
            let sections = doc.sections.clone();
            let s = sentence_features(&doc, &params, &probe)?;
            let t_sp = hmt_core::assembly::membership(&doc.s_mask, doc.l, doc.r);
            dmt_pipeline(&fwd.diagnostics.mmt_attention, &s, &sections, &t_sp, cfg.eta, cfg.h)?
        }
    };
    let body = json!({
        "doc_id": doc.doc_id,
        "l": doc.l,
        "n": doc.n,
        "m": doc.m,
        "eta": cfg.eta,
        "masks": masks.to_json(),
    });
    fs::write(&a.out, serde_json::to_string(&body).expect("plain json") + "\n")?;
    Ok(json!({
        "command": "inspect-masks",
        "doc": doc.doc_id,
        "heads": masks.d_mask.len(),
        "kept_sentences": masks.m_sp.iter().filter(|&&k| k).count(),
    }))
}

fn sentence_features(
    doc: &hmt_core::docfeat::DocFeatureBundle,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<hmt_core::Tensor> {
    let mut g = hmt_core::Graph::new();
    let mut pb = hmt_core::params::ParamBinding::new(params, false);
    let asm = hmt_core::assembly::build_sequences(&mut g, doc, &mut pb, cfg)?;
    Ok(g.value(asm.s).clone())
}

fn exit_code(e: &HmtError) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                let _ = writeln!(out, "{}", json!({ "status": "ok" }));
                return EXIT_OK;
            }
            let _ = write!(err, "{}", e.render());
            let _ = writeln!(err, "{}", error_line("usage", &e.kind().to_string()));
            let _ = writeln!(out, "{}", json!({ "status": "error", "exit_code": EXIT_USAGE }));
            return EXIT_USAGE;
        }
    };

    let seed_flag = match &cli.command {
        Command::GenFixtures(a) => Some(a.seed),
        Command::Train(a) => a.seed,
        Command::Gradcheck(a) => Some(a.seed),
        _ => None,
    };
    let seed = match seed_override(seed_flag) {
        Ok(s) => s,
        Err(msg) => {
            let _ = writeln!(err, "{}", error_line("usage", &msg));
            let _ = writeln!(out, "{}", json!({ "status": "error", "exit_code": EXIT_USAGE }));
            return EXIT_USAGE;
        }
    };

    let result = match &cli.command {
        Command::GenFixtures(a) => gen_fixtures(a, seed.unwrap_or(a.seed)).map(|v| (v, true)),
        Command::Train(a) => train_cmd(a, seed, cli.exec, out).map(|v| (v, true)),
        Command::Eval(a) => eval_cmd(a, cli.exec).map(|v| (v, true)),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed.unwrap_or(a.seed), cli.exec),
        Command::InspectMasks(a) => inspect_cmd(a).map(|v| (v, true)),
    };
    match result {
        Ok((summary, true)) => {
            let _ = writeln!(out, "{summary}");
            EXIT_OK
        }
        Ok((summary, false)) => {
            let _ = writeln!(err, "{}", error_line("tolerance", "gradient check exceeded tolerance"));
            let _ = writeln!(out, "{summary}");
            EXIT_NUMERIC
        }
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            let _ = writeln!(out, "{}", json!({ "status": "error", "exit_code": code }));
            code
        }
    }
}
