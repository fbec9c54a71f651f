//! Command-line harness: experiment runs, cost accounting, bound
//! verification, similarity statistics, decoding, and trade-off curves.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tokenskip_core::flops::{dense_flops, skip_flops, FlopsQuery};
use tokenskip_core::harness::{
    bound_rows_csv, emit_tradeoff_curve, merge_stats, run_all, run_bound_experiment,
    ExperimentConfig,
};
use tokenskip_core::model::{ModelConfig, WeightInit};

const OUT_ENV: &str = "TOKENSKIP_OUT";

#[derive(Parser)]
#[command(
    name = "tokenskip",
    about = "Desk-scale decoder runtime with skip-FFN routing, skip KV-cache pruning, and cost/error accounting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Gaussian,
    Orthogonal,
}

impl From<InitArg> for WeightInit {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::Gaussian => WeightInit::Gaussian,
            InitArg::Orthogonal => WeightInit::Orthogonal,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline for every configured seed and write artifacts.
    Run {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's output_dir, then
        /// $TOKENSKIP_OUT, then ./tokenskip-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytical MAC accounting for a model config, plus a sweep CSV.
    Flops {
        /// Model config JSON (architecture only).
        #[arg(long)]
        config: PathBuf,
        /// Dense baseline token count N.
        #[arg(long)]
        baseline_n: usize,
        /// Tokens through attention (N1).
        #[arg(long)]
        n1: usize,
        /// Tokens through the FFN (N2).
        #[arg(long)]
        n2: usize,
        /// Sweep points for the budget curve.
        #[arg(long, default_value_t = 32)]
        sweep_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed skip-error bound verification.
    Bound {
        /// Experiment config JSON (schedule must enable SF).
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Weight init override for the per-seed models.
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity-density statistics of the mock-encoded token stream.
    MergeStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefill and greedy-decode once, printing the token ids.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured number of decode steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// FLOPs-ratio / wall-clock rows for several configs.
    Curve {
        /// Experiment config JSON; repeat for each curve point.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cli_out: Option<PathBuf>, cfg_out: Option<&Path>) -> PathBuf {
    cli_out
        .or_else(|| cfg_out.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("tokenskip-out"))
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json_file(path)
        .with_context(|| format!("loading experiment config {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load_experiment(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            let dir = out_dir(out, cfg.output_dir.as_deref());
            cfg.output_dir = Some(dir.clone());
            let reports = run_all(&cfg)?;
            for report in &reports {
                println!(
                    "seed {}: {} tokens ({} evicted), flops ratio {:.4}, prefill {:.2} ms, decode {:.2} ms",
                    report.seed,
                    report.token_counts.assembled_total,
                    report.evicted_positions.len(),
                    report.flops.ratio,
                    report.wall_clock.prefill_ms,
                    report.wall_clock.decode_ms,
                );
            }
            println!("artifacts written under {}", dir.display());
        }
        Command::Flops {
            config,
            baseline_n,
            n1,
            n2,
            sweep_points,
            out,
        } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading model config {}", config.display()))?;
            let model: ModelConfig = serde_json::from_str(&text).context("parsing model config")?;
            model.validate().context("validating model config")?;
            if sweep_points == 0 {
                bail!("--sweep-points must be at least 1");
            }

            let dense = dense_flops(&model, baseline_n)?;
            let skip = skip_flops(&FlopsQuery {
                cfg: model.clone(),
                total_tokens: baseline_n.max(n1),
                attention_tokens: n1,
                ffn_tokens: n2,
            })?;
            let ratio = skip.total_macs as f64 / dense.total_macs as f64;
            let report = serde_json::json!({
                "baseline_n": baseline_n,
                "n1": n1,
                "n2": n2,
                "dense": dense,
                "skip": skip,
                "ratio": ratio,
            });
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");

            // Budget sweep: scale N1 from 0 to the baseline, keeping the
            // requested N2/N1 proportion.
            let frac2 = if n1 == 0 { 0.0 } else { n2 as f64 / n1 as f64 };
            let mut csv = String::from("n1,n2,skip_macs,ratio\n");
            for t in 0..=sweep_points {
                let n1_t = baseline_n * t / sweep_points;
                let n2_t = ((n1_t as f64) * frac2).round() as usize;
                let s = skip_flops(&FlopsQuery {
                    cfg: model.clone(),
                    total_tokens: baseline_n.max(n1_t),
                    attention_tokens: n1_t,
                    ffn_tokens: n2_t.min(n1_t),
                })?;
                csv.push_str(&format!(
                    "{},{},{},{:.6}\n",
                    n1_t,
                    n2_t.min(n1_t),
                    s.total_macs,
                    s.total_macs as f64 / dense.total_macs as f64
                ));
            }
            let dir = out_dir(out, None);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("flops.json"), &json)?;
            fs::write(dir.join("flops_sweep.csv"), &csv)?;
            println!("wrote {}/flops.json and flops_sweep.csv", dir.display());
        }
        Command::Bound {
            config,
            seeds,
            init,
            out,
        } => {
            let cfg = load_experiment(&config)?;
            let rows = run_bound_experiment(&cfg, seeds, init.map(Into::into))?;
            let violations = rows
                .iter()
                .filter(|r| r.report.eps_total_measured > r.report.eps_total_bound)
                .count();
            let worst = rows
                .iter()
                .map(|r| r.report.eps_total_measured / r.report.eps_total_bound)
                .fold(0.0f64, f64::max);
            println!(
                "{} seeds: {} bound violations, worst measured/bound ratio {:.4}",
                rows.len(),
                violations,
                worst
            );
            let dir = out_dir(out, cfg.output_dir.as_deref());
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("bound.json"), serde_json::to_string_pretty(&rows)?)?;
            fs::write(dir.join("bound.csv"), bound_rows_csv(&rows))?;
            println!("wrote {}/bound.json and bound.csv", dir.display());
            if violations > 0 {
                bail!("{violations} seeds exceeded the bound");
            }
        }
        Command::MergeStats { config, seed, out } => {
            let cfg = load_experiment(&config)?;
            let density = merge_stats(&cfg, seed)?;
            for group in &density.groups {
                println!("{}: {} tokens, mean similarity {:.4}", group.group, group.count, group.mean);
            }
            for skipped in &density.skipped_groups {
                eprintln!("warning: group {skipped} has fewer than two tokens, skipped");
            }
            let dir = out_dir(out, cfg.output_dir.as_deref());
            fs::create_dir_all(&dir)?;
            fs::write(
                dir.join("similarity.json"),
                serde_json::to_string_pretty(&density)?,
            )?;
            fs::write(dir.join("similarity.csv"), density.to_csv())?;
            println!("wrote {}/similarity.json and similarity.csv", dir.display());
        }
        Command::Decode { config, seed, steps } => {
            let mut cfg = load_experiment(&config)?;
            if let Some(steps) = steps {
                cfg.decode_steps = steps;
            }
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let report = tokenskip_core::harness::run_experiment(&cfg, seed, None)?;
            let ids: Vec<String> = report.decoded_ids.iter().map(|id| id.to_string()).collect();
            println!("{}", ids.join(" "));
        }
        Command::Curve { configs, out } => {
            let cfgs: Vec<ExperimentConfig> = configs
                .iter()
                .map(|p| load_experiment(p))
                .collect::<Result<_>>()?;
            let csv = emit_tradeoff_curve(&cfgs)?;
            print!("{csv}");
            let dir = out_dir(out, None);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("curve.csv"), &csv)?;
            println!("wrote {}/curve.csv", dir.display());
        }
    }
    Ok(())
}
