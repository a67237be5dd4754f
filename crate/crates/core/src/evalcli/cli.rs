use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use super::config::RunConfig;
use super::{evaluate, write_predictions, write_report, EvalReport, Mode};
use crate::arbitration::{truth_table, VoteConfig};
use crate::backbone::Backbone;
use crate::dataset::{read_manifest, write_manifest};
use crate::dataset::synth::{generate_control_failures, generate_smf_with};
use crate::dataset::{Manifest, SmfExample, Split};
use crate::error::{Error, Result};
use crate::fs_blocks::FsCheckpoint;
use crate::training::{train_stage1, train_stage2, EpochLog, FeatureCache};
use crate::worldgen::io::write_episode;
use crate::worldgen::Episode;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag or subcommand)
  3  configuration error (bad schema, invalid or inconsistent values)
  4  missing or unreadable file
  5  data error (empty split, malformed manifest)
  6  checkpoint error (corrupt file, hash mismatch, incompatible heads)
  7  numerical error (non-finite loss or features)

Errors are also printed to stderr as one JSON line:
  {\"error\": <kind>, \"exit_code\": <n>, \"message\": <text>}";

#[derive(Parser, Debug)]
#[command(name = "failsense", version, about = "Failure detection on a synthetic tabletop world", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate episodes, the SMF manifest (<out>/smf) and the control-failure set (<out>/control).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write every expert episode (one PNG per frame plus a JSON sidecar) to <out>/episodes.
        #[arg(long)]
        episodes: bool,
    },
    /// Train the backbone (stage 1) or the FS heads (stage 2).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Data directory written by gen-data (overrides paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint for stage 2 (overrides paths.backbone).
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Training log (JSON Lines, appended); defaults to <out stem>.log.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write a metrics report (JSON plus CSV tables) for one split.
    Eval {
        #[command(flatten)]
        sel: Selection,
        /// Comma-separated modes: vlm_only, fs_only_<k>, ensemble. Default: all.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-example predictions as JSON Lines.
    Predict {
        #[command(flatten)]
        sel: Selection,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the voting truth table for the configured weights.
    VoteTable {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    /// Print every configuration key with its default.
    PrintSchema,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Set {
    Smf,
    Control,
}

#[derive(clap::Args, Debug)]
struct Selection {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    fs: Option<PathBuf>,
    /// Example set inside the data directory.
    #[arg(long, value_enum, default_value = "smf")]
    set: Set,
    /// Split tag (ignored for the control set).
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

/// Exit code for an error, as listed in `--help`.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::OutOfRange { .. }
        | Error::Shape(_)
        | Error::UnknownToken(_)
        | Error::SequenceOverflow { .. }
        | Error::InvalidTarget(_)
        | Error::Placement { .. }
        | Error::Horizon { .. }
        | Error::NotAchievable { .. }
        | Error::SingleTaskCategory(_) => 3,
        Error::Io { .. } | Error::Image { .. } => 4,
        Error::Schema { .. } | Error::Ragged(_) | Error::EmptyDataset(_) | Error::EmptySplit(_) | Error::Json(_) => 5,
        Error::Checkpoint(_) | Error::CacheMismatch { .. } | Error::AdaptersConsumed => 6,
        Error::Numerical(_) | Error::NonFiniteLoss { .. } => 7,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        3 => "config",
        4 => "file",
        5 => "data",
        6 => "checkpoint",
        7 => "numerical",
        _ => "internal",
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", json!({"error": kind(&e), "exit_code": code, "message": e.to_string()}));
            code
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            if let Some(seed) = super::config::seed_from_env()? {
                cfg = RunConfig::from_toml(&format!("seed = {seed}"))?;
            }
            Ok(cfg)
        }
    }
}

fn require(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or [paths] entry)")))
}

fn smf_dir(data: &Path) -> PathBuf {
    data.join("smf")
}

fn control_dir(data: &Path) -> PathBuf {
    data.join("control")
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_line(v: serde_json::Value) {
    emit(&format!("{v}\n"));
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, episodes } => gen_data(&load_config(config.as_deref())?, &out, episodes),
        Command::Train {
            stage,
            config,
            out,
            data,
            backbone,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = require(data, &cfg.paths.data, "data directory")?;
            let log = log.unwrap_or_else(|| super::with_suffix(&out, ".log.jsonl"));
            if stage == 1 {
                train1(&cfg, &data, &out, &log)
            } else {
                let backbone = require(backbone, &cfg.paths.backbone, "backbone checkpoint")?;
                train2(&cfg, &data, &backbone, &out, &log)
            }
        }
        Command::Eval { sel, modes, out } => eval(&sel, &modes, &out),
        Command::Predict { sel, out } => predict(&sel, &out),
        Command::VoteTable { config } => {
            let cfg = load_config(config.as_deref())?;
            vote_table(&cfg.vote)
        }
        Command::Config {
            action: ConfigAction::PrintSchema,
        } => {
            emit(&super::config::schema());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, episodes: bool) -> Result<()> {
    let snapshot = serde_json::to_value(&cfg.data)?;
    let episode_dir = out.join("episodes");
    let mut written = 0usize;
    let mut sink = |id: &str, ep: &Episode| -> Result<()> {
        if episodes {
            write_episode(ep, &episode_dir.join(id))?;
            written += 1;
        }
        Ok(())
    };
    let smf = generate_smf_with(&cfg.data, &mut sink)?;
    write_manifest(&smf, &smf_dir(out), snapshot.clone())?;
    let mut summary = json!({"smf": {"dir": smf_dir(out), "checksum": smf.checksum(), "counts": smf.counts}});
    if episodes {
        summary["episodes"] = json!({"dir": episode_dir, "count": written});
    }
    if cfg.data.control_failures > 0 {
        let control = generate_control_failures(&cfg.data, cfg.data.control_failures)?;
        write_manifest(&control, &control_dir(out), snapshot)?;
        summary["control"] = json!({"dir": control_dir(out), "checksum": control.checksum(), "counts": control.counts});
    }
    print_line(summary);
    Ok(())
}

fn appender(path: &Path) -> Result<impl FnMut(&EpochLog)> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(move |l: &EpochLog| {
        let line = serde_json::to_string(l).expect("log line serializes");
        let _ = writeln!(f, "{line}");
        eprintln!("{line}");
    })
}

fn train1(cfg: &RunConfig, data: &Path, out: &Path, log: &Path) -> Result<()> {
    let (manifest, _) = read_manifest(&smf_dir(data))?;
    let train = manifest.split(Split::Train);
    let val = manifest.split(Split::Val);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut model: Backbone<f32> = Backbone::new(cfg.backbone.clone())?;
    let mut on_epoch = appender(log)?;
    train_stage1(&mut model, &train, &val, &cfg.stage1, cfg.train_seed(), &mut on_epoch)?;
    let hash = model.save(out)?;
    print_line(json!({"stage": 1, "checkpoint": out, "sha256": hash}));
    Ok(())
}

fn train2(cfg: &RunConfig, data: &Path, backbone: &Path, out: &Path, log: &Path) -> Result<()> {
    let (manifest, _) = read_manifest(&smf_dir(data))?;
    let train = manifest.split(Split::Train);
    let val = manifest.split(Split::Val);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let (model, backbone_hash) = Backbone::<f32>::load(backbone)?;
    let mut on_epoch = appender(log)?;
    let cache = if cfg.stage2.cache_features {
        let layers = crate::backbone::select_fs_layers(model.n_layers(), cfg.stage2.k)?;
        let mut all = train.clone();
        all.extend_from_slice(&val);
        Some(FeatureCache::build(&model, &backbone_hash, &layers, &all, cfg.stage2.batch_size)?)
    } else {
        None
    };
    let (heads, _) = train_stage2(
        &model,
        &backbone_hash,
        &train,
        &val,
        &cfg.stage2,
        cfg.train_seed(),
        cache.as_ref(),
        &mut on_epoch,
    )?;
    let ckpt = FsCheckpoint { heads, backbone_hash };
    let hash = ckpt.save(out)?;
    print_line(json!({"stage": 2, "checkpoint": out, "sha256": hash}));
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    manifest: Manifest,
    set: &'static str,
    split: String,
    model: Backbone<f32>,
    backbone_hash: String,
    fs: FsCheckpoint,
    fs_hash: String,
}

fn load(sel: &Selection) -> Result<Loaded> {
    let cfg = load_config(sel.config.as_deref())?;
    let data = require(sel.data.clone(), &cfg.paths.data, "data directory")?;
    let backbone = require(sel.backbone.clone(), &cfg.paths.backbone, "backbone checkpoint")?;
    let fs = require(sel.fs.clone(), &cfg.paths.fs, "fs checkpoint")?;
    let (dir, set) = match sel.set {
        Set::Smf => (smf_dir(&data), "smf"),
        Set::Control => (control_dir(&data), "control"),
    };
    let (manifest, _) = read_manifest(&dir)?;
    let (model, backbone_hash) = Backbone::<f32>::load(&backbone)?;
    let (fs, fs_hash) = FsCheckpoint::load(&fs)?;
    if fs.backbone_hash != backbone_hash {
        return Err(Error::CacheMismatch {
            cache: fs.backbone_hash.clone(),
            model: backbone_hash,
        });
    }
    let split = match sel.set {
        Set::Smf => sel.split.clone(),
        Set::Control => "test".to_string(),
    };
    Ok(Loaded {
        cfg,
        manifest,
        set,
        split,
        model,
        backbone_hash,
        fs,
        fs_hash,
    })
}

fn examples(l: &Loaded) -> Result<Vec<&SmfExample>> {
    let split: Split = l.split.parse()?;
    let ex = l.manifest.split(split);
    if ex.is_empty() {
        return Err(Error::EmptySplit(l.split.clone()));
    }
    Ok(ex)
}

fn eval(sel: &Selection, modes: &[String], out: &Path) -> Result<()> {
    let l = load(sel)?;
    let ex = examples(&l)?;
    let modes: Vec<Mode> = if modes.is_empty() {
        Mode::all(l.fs.heads.len())
    } else {
        modes.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    let vote = l.cfg.vote.clone();
    let (_, reports) = evaluate(&l.model, &l.fs.heads, &ex, &vote, &modes, sel.batch_size)?;
    let report = EvalReport {
        set: l.set.to_string(),
        split: l.split.clone(),
        manifest_checksum: l.manifest.checksum(),
        backbone_sha256: l.backbone_hash.clone(),
        fs_sha256: l.fs_hash.clone(),
        config: json!({"vote": vote, "backbone": l.model.config, "fs": l.fs.heads.config(), "layers": l.fs.heads.layers}),
        reports,
    };
    let hash = write_report(&report, out)?;
    print_line(json!({"report": out, "sha256": hash}));
    Ok(())
}

fn predict(sel: &Selection, out: &Path) -> Result<()> {
    let l = load(sel)?;
    let ex = examples(&l)?;
    let preds = super::predict_examples(&l.model, &l.fs.heads, &ex, &l.cfg.vote, sel.batch_size)?;
    write_predictions(&preds, out)?;
    print_line(json!({"predictions": out, "n": preds.len()}));
    Ok(())
}

fn vote_table(vote: &VoteConfig) -> Result<()> {
    let rows = truth_table(vote)?;
    let heads: Vec<String> = (1..=vote.k).map(|k| format!("y_{k}")).collect();
    let mut out = format!("y_vlm\t{}\ttally\tthreshold\ty_hat\n", heads.join("\t"));
    for (y_vlm, votes, tally, y_hat) in rows {
        let v: Vec<String> = votes.iter().map(u8::to_string).collect();
        out.push_str(&format!("{y_vlm}\t{}\t{tally}\t{}\t{y_hat}\n", v.join("\t"), vote.threshold()));
    }
    emit(&out);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_error_kind_has_a_documented_code() {
        let samples = [
            Error::Config("x".into()),
            Error::io("p", std::io::Error::other("x")),
            Error::EmptySplit("test".into()),
            Error::Checkpoint("x".into()),
            Error::Numerical("x".into()),
        ];
        let codes: Vec<i32> = samples.iter().map(exit_code).collect();
        assert_eq!(codes, vec![3, 4, 5, 6, 7]);
        for c in codes {
            assert!(EXIT_CODES.contains(&format!("  {c}  ")));
        }
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run_cli(["failsense", "--bogus"]), 2);
        assert_eq!(run_cli(["failsense", "train", "--stage", "3", "--out", "x"]), 2);
    }
}
