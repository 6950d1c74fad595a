//! Command-line harness for the full pipeline: synthesize a dataset, run
//! supervised then reinforcement training, evaluate retrieval quality
//! across inference modes, and report routing statistics.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use routembed_core::checkpoint;
use routembed_core::config::RunConfig;
use routembed_core::eval::{evaluate, route_stats, EvalMode, EvalOptions};
use routembed_core::model::Model;
use routembed_core::rl::{heldout_reward, train_rl};
use routembed_core::train::{train_sft, write_rl_csv, write_sft_csv};
use routembed_core::world::{
    annotate_and_filter, generate_corpus, read_dataset, split_pairs, write_dataset, Corpus,
    JudgeAssignment,
};

#[derive(Parser)]
#[command(
    name = "routembed",
    about = "Dual-adapter embedder with gated chain-of-thought routing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, annotate, and filter a synthetic dataset file.
    GenData(Common),
    /// Stage 1: supervised training of both adapters, probes, and gate.
    TrainSft(Common),
    /// Stage 2: embedding-guided policy optimization on top of a Stage-1
    /// checkpoint.
    TrainRl {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint (defaults to checkpoint_path in the config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of base,cot,adaptive,oracle.
        #[arg(long, default_value = "base,cot,adaptive,oracle")]
        modes: String,
    },
    /// Per-side, per-stratum gate trigger rates on the held-out split.
    RouteStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = (|| match cli.command {
        Command::GenData(c) => gen_data(&load_config(&c)?),
        Command::TrainSft(c) => train_sft_cmd(&load_config(&c)?),
        Command::TrainRl { common, checkpoint } => {
            train_rl_cmd(&load_config(&common)?, checkpoint.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            modes,
        } => eval_cmd(&load_config(&common)?, checkpoint.as_deref(), &modes),
        Command::RouteStats { common, checkpoint } => {
            route_stats_cmd(&load_config(&common)?, checkpoint.as_deref())
        }
    })();
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let mut corpus = generate_corpus(&cfg.world)?;
    let stats = annotate_and_filter(&mut corpus, &cfg.world, JudgeAssignment::default());
    std::fs::create_dir_all(cfg.dataset_path.parent().unwrap_or(Path::new(".")))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&cfg.dataset_path)?);
    write_dataset(&corpus, cfg.world.n_attributes, &mut w)?;
    w.flush()?;
    println!(
        "wrote {} pairs over {} targets to {}",
        corpus.pairs.len(),
        corpus.targets.len(),
        cfg.dataset_path.display()
    );
    println!(
        "clean rate: easy {:.1}% ({}/{}), hard {:.1}% ({}/{}), overall {:.1}%",
        100.0 * stats.clean_rate(routembed_core::world::Difficulty::Easy),
        stats.easy_clean,
        stats.easy_total,
        100.0 * stats.clean_rate(routembed_core::world::Difficulty::Hard),
        stats.hard_clean,
        stats.hard_total,
        100.0 * stats.overall_rate()
    );
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, usize)> {
    let file = std::fs::File::open(&cfg.dataset_path)
        .with_context(|| format!("opening dataset {}", cfg.dataset_path.display()))?;
    Ok(read_dataset(std::io::BufReader::new(file))?)
}

fn load_model(cfg: &RunConfig, checkpoint_arg: Option<&Path>) -> Result<Model> {
    let path = checkpoint_arg.unwrap_or(&cfg.checkpoint_path);
    checkpoint::load_from_path(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train_sft_cmd(cfg: &RunConfig) -> Result<()> {
    let (corpus, _) = load_corpus(cfg)?;
    let (train_idx, _) = split_pairs(&corpus, cfg.eval_frac);
    let model = Model::new(cfg.backbone.clone(), cfg.seed)?;
    let rows = train_sft(&model, &corpus, &train_idx, &cfg.sft)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join("sft_checkpoint.json");
    checkpoint::save_to_path(&model, &ckpt)?;
    let metrics = cfg.out_dir.join("sft_metrics.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&metrics)?);
    write_sft_csv(&rows, &mut w)?;
    w.flush()?;
    if let Some(last) = rows.last() {
        println!(
            "sft done: {} steps, final ntp {:.4}, contrastive {:.4}/{:.4}, route {:.4}",
            rows.len(),
            last.ntp,
            last.cl_base,
            last.cl_cot,
            last.route
        );
    }
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn train_rl_cmd(cfg: &RunConfig, checkpoint_arg: Option<&Path>) -> Result<()> {
    let (corpus, _) = load_corpus(cfg)?;
    let (train_idx, eval_idx) = split_pairs(&corpus, cfg.eval_frac);
    let mut model = load_model(cfg, checkpoint_arg)?;
    let run = train_rl(&mut model, &corpus, &train_idx, &cfg.rl)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join("rl_checkpoint.json");
    checkpoint::save_to_path(&model, &ckpt)?;
    let metrics = cfg.out_dir.join("rl_metrics.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&metrics)?);
    write_rl_csv(&run.rows, &mut w)?;
    w.flush()?;
    let (gap, fmt) = heldout_reward(
        &model,
        &corpus,
        &eval_idx,
        &run.cache,
        &cfg.rl.hyper,
        cfg.seed,
    )?;
    println!(
        "rl done: {} steps over a pool of {} queries; held-out gap reward {:.4}, format reward {:.3}",
        run.rows.len(),
        run.pool_len,
        gap,
        fmt
    );
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn parse_modes(spec: &str) -> Result<Vec<EvalMode>> {
    let mut modes = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mode: EvalMode = part.parse()?;
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    if modes.is_empty() {
        bail!("no eval modes requested");
    }
    Ok(modes)
}

fn eval_cmd(cfg: &RunConfig, checkpoint_arg: Option<&Path>, modes: &str) -> Result<()> {
    let modes = parse_modes(modes)?;
    let (corpus, _) = load_corpus(cfg)?;
    let (_, eval_idx) = split_pairs(&corpus, cfg.eval_frac);
    let model = load_model(cfg, checkpoint_arg)?;
    let opts = EvalOptions {
        max_gen: cfg.eval_max_gen,
        temperature: cfg.eval_temperature,
        seed: cfg.seed,
    };
    let (report, _) = evaluate(&model, &corpus, &eval_idx, &modes, &opts)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let json_path = cfg.out_dir.join("eval_report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;

    let csv_path = cfg.out_dir.join("eval_report.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(
        w,
        "mode,stratum,n,hit_at_1,ndcg_at_5,mean_reasoning_tokens,trigger_rate_query,trigger_rate_target"
    )?;
    let opt_cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in &report.modes {
        writeln!(
            w,
            "{},all,{},{},{},{},{},{}",
            m.mode,
            m.n_encoded,
            m.hit_at_1,
            m.ndcg_at_5,
            m.mean_reasoning_tokens,
            opt_cell(m.trigger_rate_query),
            opt_cell(m.trigger_rate_target)
        )?;
        for s in &m.per_stratum {
            writeln!(
                w,
                "{},{},{},{},{},,,",
                m.mode, s.stratum, s.n, s.hit_at_1, s.ndcg_at_5
            )?;
        }
    }
    w.flush()?;

    for m in &report.modes {
        println!(
            "{:<9} hit@1 {:.4}  ndcg@5 {:.4}  reasoning tokens {:.2}",
            m.mode.to_string(),
            m.hit_at_1,
            m.ndcg_at_5,
            m.mean_reasoning_tokens
        );
    }
    println!("report: {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn route_stats_cmd(cfg: &RunConfig, checkpoint_arg: Option<&Path>) -> Result<()> {
    let (corpus, _) = load_corpus(cfg)?;
    let (_, eval_idx) = split_pairs(&corpus, cfg.eval_frac);
    let model = load_model(cfg, checkpoint_arg)?;
    let opts = EvalOptions {
        max_gen: cfg.eval_max_gen,
        temperature: cfg.eval_temperature,
        seed: cfg.seed,
    };
    let (_, artifacts) = evaluate(&model, &corpus, &eval_idx, &[EvalMode::Adaptive], &opts)?;
    let rows = route_stats(&corpus, &eval_idx, &artifacts);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("route_stats.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(w, "side,stratum,n,triggered,trigger_rate")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{}", r.side, r.stratum, r.n, r.triggered, r.trigger_rate)?;
        println!(
            "{:<7} {:<5} n={:<5} trigger rate {:.3}",
            r.side, r.stratum, r.n, r.trigger_rate
        );
    }
    w.flush()?;
    println!("stats: {}", path.display());
    Ok(())
}
