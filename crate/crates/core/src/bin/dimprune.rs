//! Command-line front end. Stages talk to each other only through
//! checkpoint files.
//!
//! Exit codes: 0 ok, 1 internal, 2 config, 3 i/o, 4 numeric, 5 usage,
//! 6 malformed file. Failures print one JSON record on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dimprune::checkpoint::{Checkpoint, PlainCheckpoint, ScoredCheckpoint};
use dimprune::config::RunConfig;
use dimprune::cost::{calibrate_mac_factor, model_cost, CostConvention};
use dimprune::pipeline::{evaluate_split, run_finetune, run_prune, run_search, StageKind};
use dimprune::pruner::validate_rho;
use dimprune::report::build_report;
use dimprune::{attach_scores, Backbone, BackboneConfig, Error, Result};

#[derive(Parser)]
#[command(
    name = "dimprune",
    version,
    about = "Dimension search and structured pruning for windowed-attention backbones"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted override, e.g. `--set search.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    SwinT,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Train weights and scores jointly; writes `<out_dir>/search.ckpt`.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Rank-and-prune a search checkpoint at keep ratio `--rho`.
    Prune {
        checkpoint: PathBuf,
        #[arg(long)]
        rho: f64,
        /// Defaults to `pruned_rho<rho>.ckpt` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warm-start training of a pruned checkpoint.
    Finetune {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and loss of a checkpoint on a dataset split.
    Eval {
        checkpoint: PathBuf,
        /// Take the dataset from this config instead of the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Closed-form parameter and FLOP counts.
    Cost {
        /// Model taken from the `[model]` table of a run config.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "swin-t")]
        preset: Preset,
        /// Classes for the presets (default 100 for swin-t, 4 for desk).
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,0.8,0.6,0.4,0.2")]
        rho: Vec<f64>,
        /// 1, 2, or `auto` to calibrate against `--target-flops`.
        #[arg(long, default_value = "1")]
        mac_factor: String,
        #[arg(long, default_value_t = 4.49e9)]
        target_flops: f64,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        include_bias: bool,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        include_rpb: bool,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        include_norms_and_head: bool,
        /// Print the per-entry tables as well as the summary.
        #[arg(long)]
        detail: bool,
        /// Print one JSON record per entry instead of tables.
        #[arg(long)]
        jsonl: bool,
    },
    /// Accuracy / size table over every search and fine-tune checkpoint in a directory.
    Report {
        dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Print JSON lines instead of the table.
        #[arg(long)]
        jsonl: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } => 2,
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Usage(_) => 5,
        Error::Format(_) => 6,
        Error::Internal(_) => 1,
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let record = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{record}");
    ExitCode::from(code)
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

/// An out-of-range `--rho` is a usage error, distinct from a bad config file.
fn rho_arg(rho: f64) -> Result<()> {
    validate_rho(rho).map_err(|_| Error::Usage(format!("--rho must lie in (0, 1], got {rho}")))
}

fn rho_tag(rho: f64) -> String {
    format!("rho{rho}")
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)?;
    print_json(&serde_json::json!({ "wrote": path, "stage": ck.stage() }));
    Ok(())
}

fn cmd_search(cfg: &ConfigArgs, init: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(&cfg.config, &cfg.overrides)?;
    run.check_paths()?;
    let stage = run.stage(StageKind::Search);
    let start = match init {
        Some(p) => match Checkpoint::load(p)? {
            Checkpoint::Scored(c) => c,
            Checkpoint::Plain(c) => ScoredCheckpoint {
                stage: c.stage,
                model: attach_scores(c.model)?,
                train: None,
                data: c.data,
            },
        },
        None => ScoredCheckpoint {
            stage: "init".into(),
            model: attach_scores(Backbone::init(&run.model, stage.seed)?)?,
            train: None,
            data: None,
        },
    };
    let log = run.out_dir.join("search_metrics.jsonl");
    let (out, history) = run_search(&stage, start, Some(&log))?;
    if let Some(last) = history.last() {
        print_json(&serde_json::to_value(last).map_err(|e| Error::Internal(e.to_string()))?);
    }
    save(&Checkpoint::Scored(out), &run.out_dir.join("search.ckpt"))
}

fn cmd_prune(checkpoint: &Path, rho: f64, out: Option<&Path>) -> Result<()> {
    rho_arg(rho)?;
    let ck = Checkpoint::load(checkpoint)?.into_scored()?;
    let (pruned, report) = run_prune(&ck, rho)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = out.map_or_else(|| dir.join(format!("pruned_{}.ckpt", rho_tag(rho))), Path::to_path_buf);
    let report_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    print_json(&serde_json::json!({
        "rho": rho,
        "params_before": report.params_before,
        "params_after": report.params_after,
        "report": report_path,
    }));
    save(&Checkpoint::Plain(pruned), &path)
}

fn cmd_finetune(checkpoint: &Path, cfg: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(&cfg.config, &cfg.overrides)?;
    run.check_paths()?;
    let start: PlainCheckpoint = Checkpoint::load(checkpoint)?.into_plain()?;
    let tag = rho_tag(start.rho.unwrap_or(1.0));
    let log = run.out_dir.join(format!("finetune_{tag}_metrics.jsonl"));
    let (tuned, history) = run_finetune(&run.stage(StageKind::Finetune), start, Some(&log))?;
    if let Some(last) = history.last() {
        print_json(&serde_json::to_value(last).map_err(|e| Error::Internal(e.to_string()))?);
    }
    let path = out.map_or_else(|| run.out_dir.join(format!("finetune_{tag}.ckpt")), Path::to_path_buf);
    save(&Checkpoint::Plain(tuned), &path)
}

fn cmd_eval(checkpoint: &Path, config: Option<&Path>, overrides: &[String], split: &str, batch: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = match config {
        Some(p) => RunConfig::load(p, overrides)?.data,
        None => ck
            .data()
            .cloned()
            .ok_or_else(|| Error::Usage("checkpoint records no dataset; pass --config".into()))?,
    };
    let scores = match &ck {
        Checkpoint::Scored(c) => Some(&c.model.scores),
        Checkpoint::Plain(_) => None,
    };
    let r = evaluate_split(ck.backbone(), scores, &data, split, batch)?;
    print_json(&serde_json::json!({
        "checkpoint": checkpoint,
        "stage": ck.stage(),
        "split": split,
        "accuracy": r.accuracy,
        "loss": r.loss,
        "samples": r.samples,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cost(
    config: Option<&Path>,
    preset: Preset,
    num_classes: Option<usize>,
    rhos: &[f64],
    mac_factor: &str,
    target_flops: f64,
    flags: (bool, bool, bool),
    detail: bool,
    jsonl: bool,
) -> Result<()> {
    let model = match (config, preset) {
        (Some(p), _) => RunConfig::load(p, &[])?.model,
        (None, Preset::SwinT) => BackboneConfig::swin_tiny(num_classes.unwrap_or(100)),
        (None, Preset::Desk) => {
            let desk = BackboneConfig::desk();
            BackboneConfig {
                num_classes: num_classes.unwrap_or(desk.num_classes),
                ..desk
            }
        }
    };
    for &r in rhos {
        rho_arg(r)?;
    }
    let mut conv = CostConvention {
        mac_factor: 1,
        include_bias: flags.0,
        include_rpb: flags.1,
        include_norms_and_head: flags.2,
    };
    match mac_factor {
        "auto" => {
            let cal = calibrate_mac_factor(&model, &conv, target_flops, 0.05)?;
            conv.mac_factor = cal.mac_factor;
            let record = serde_json::json!({ "calibration": cal, "target_flops": target_flops });
            if jsonl {
                print_json(&record);
            } else {
                println!(
                    "calibrated mac_factor = {} ({} flops, {:+.2}% vs target)",
                    cal.mac_factor,
                    cal.flops,
                    100.0 * cal.rel_error
                );
            }
        }
        m => {
            conv.mac_factor = m
                .parse()
                .map_err(|_| Error::Usage(format!("--mac-factor must be 1, 2 or auto, got '{m}'")))?;
        }
    }
    let reports = rhos
        .iter()
        .map(|&r| model_cost(&model, r, &conv))
        .collect::<Result<Vec<_>>>()?;
    if jsonl {
        for rep in &reports {
            for mut rec in rep.site_records() {
                rec["rho"] = serde_json::json!(rep.rho);
                print_json(&rec);
            }
        }
        return Ok(());
    }
    if detail {
        for rep in &reports {
            println!("{}", rep.render_table());
        }
    }
    println!(
        "{:>5}  {:>10}  {:>9}  {:>12}  {:>12}  {:>14}",
        "rho", "params(M)", "flops(G)", "backbone(M)", "params", "flops"
    );
    for rep in &reports {
        println!(
            "{:>5.2}  {:>10.3}  {:>9.3}  {:>12.3}  {:>12}  {:>14}",
            rep.rho.unwrap_or(1.0),
            rep.total.params as f64 / 1e6,
            rep.total.flops as f64 / 1e9,
            rep.backbone.params as f64 / 1e6,
            rep.total.params,
            rep.total.flops
        );
    }
    Ok(())
}

fn cmd_report(dir: &Path, batch: usize, jsonl: bool) -> Result<()> {
    let report = build_report(dir, batch)?;
    let (table, lines) = (report.render_table(), report.to_jsonl());
    for (name, text) in [("report.txt", &table), ("report.jsonl", &lines)] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    print!("{}", if jsonl { lines } else { table });
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { cfg, init } => cmd_search(&cfg, init.as_deref()),
        Command::Prune { checkpoint, rho, out } => cmd_prune(&checkpoint, rho, out.as_deref()),
        Command::Finetune { checkpoint, cfg, out } => cmd_finetune(&checkpoint, &cfg, out.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            overrides,
            split,
            batch_size,
        } => cmd_eval(&checkpoint, config.as_deref(), &overrides, &split, batch_size),
        Command::Cost {
            config,
            preset,
            num_classes,
            rho,
            mac_factor,
            target_flops,
            include_bias,
            include_rpb,
            include_norms_and_head,
            detail,
            jsonl,
        } => cmd_cost(
            config.as_deref(),
            preset,
            num_classes,
            &rho,
            &mac_factor,
            target_flops,
            (include_bias, include_rpb, include_norms_and_head),
            detail,
            jsonl,
        ),
        Command::Report { dir, batch_size, jsonl } => cmd_report(&dir, batch_size, jsonl),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "), 5);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), exit_code(&e)),
    }
}
