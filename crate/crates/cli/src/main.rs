mod config;
mod streams;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use deepcmc::channel::{generate_dataset, ChannelMatrix};
use deepcmc::checkpoint::Checkpoint;
use deepcmc::dataset::{read_dataset, write_dataset};
use deepcmc::harness::{cluster_users, emit_results, evaluate, ResultRow};
use deepcmc::trainer::{fine_tune, rd_sweep, train, TrainOutcome};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "deepcmc", version, about = "Learned rate-distortion compression of MIMO channel state")]
struct Cli {
    /// TOML run configuration with optional [scene], [array], [codec] and [train] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic channels, one dataset file per user.
    GenData {
        #[arg(long, required = true)]
        out: Vec<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Train a model from scratch on one dataset per user.
    Train(TrainArgs),
    /// Initialize a joint model from a single-user checkpoint and fine-tune it.
    FineTune {
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Train one single-user model per λ and tabulate the trade-off.
    RdSweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compress channels into framed bitstreams.
    Encode {
        #[arg(long)]
        model: PathBuf,
        /// One dataset per user branch.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        /// One bitstream file per user branch.
        #[arg(long, required = true)]
        out: Vec<PathBuf>,
    },
    /// Reconstruct channels from bitstreams.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long, required = true)]
        out: Vec<PathBuf>,
    },
    /// Measure rate, NMSE and correlation with the real coder in the loop.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Series name used when appending to a result table.
        #[arg(long, default_value = "model")]
        series: String,
    },
    /// Group users within a distance threshold.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render result rows (JSON) as a CSV table and an SVG plot.
    Plot {
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// One dataset per user.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// One value, or one per user.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_users(paths: &[PathBuf]) -> Result<Vec<Vec<ChannelMatrix>>> {
    let data = paths
        .iter()
        .map(|p| read_dataset(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let n = data[0].len();
    ensure!(data.iter().all(|d| d.len() == n), "user datasets differ in length");
    Ok(data)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn finish_training(cfg: &RunConfig, command: &str, outcome: &TrainOutcome, args: &TrainArgs) -> Result<()> {
    outcome.checkpoint.save(&args.out)?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(r) = &args.report {
        write_json(r, &outcome.report)?;
        outputs.push(r);
    }
    if let Some(h) = &outcome.report.held_out {
        log::info!(
            "held-out: rate {:.4} bits/entry (entropy {:.4}), NMSE {:.2} dB, rho {:.4}",
            h.rate_bits_per_entry,
            h.estimated_entropy,
            h.nmse_db,
            h.rho
        );
    }
    cfg.manifest(command, display(&outputs)).write(&manifest_path(&args.out))?;
    Ok(())
}

fn train_config(cfg: &RunConfig, args: &TrainArgs) -> deepcmc::trainer::TrainConfig {
    let mut t = cfg.train.clone();
    if !args.lambda.is_empty() {
        t.lambdas = args.lambda.clone();
    }
    if let Some(s) = args.steps {
        t.steps = s;
        t.fine_tune_steps = s;
    }
    t
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData { out, count } => {
            let mut scene = cfg.scene.clone();
            scene.n_users = out.len();
            let data = generate_dataset(&scene, &cfg.array, count)?;
            for (path, user) in out.iter().zip(&data) {
                write_dataset(path, user).with_context(|| format!("writing {}", path.display()))?;
            }
            let refs: Vec<&Path> = out.iter().map(PathBuf::as_path).collect();
            cfg.manifest("gen-data", display(&refs)).write(&manifest_path(&out[0]))?;
        }
        Command::Train(args) => {
            let data = load_users(&args.data)?;
            let outcome = train(&cfg.codec, &data, &train_config(&cfg, &args))?;
            finish_training(&cfg, "train", &outcome, &args)?;
        }
        Command::FineTune { init, args } => {
            let single = Checkpoint::load(&init).with_context(|| format!("loading {}", init.display()))?;
            let data = load_users(&args.data)?;
            let outcome = fine_tune(&single, &data, &train_config(&cfg, &args))?;
            finish_training(&cfg, "fine-tune", &outcome, &args)?;
        }
        Command::RdSweep {
            data,
            lambdas,
            steps,
            out_dir,
        } => {
            ensure!(lambdas.len() >= 2, "a sweep needs at least two λ values");
            let users = load_users(std::slice::from_ref(&data))?;
            let mut t = cfg.train.clone();
            if let Some(s) = steps {
                t.steps = s;
            }
            fs::create_dir_all(&out_dir)?;
            let points = rd_sweep(&cfg.codec, &users, &lambdas, &t)?;
            let mut rows = Vec::new();
            let mut outputs = Vec::new();
            for (lambda, outcome) in &points {
                let path = out_dir.join(format!("lambda_{lambda}.dcmc"));
                outcome.checkpoint.save(&path)?;
                write_json(&path.with_extension("report.json"), &outcome.report)?;
                outputs.push(path.display().to_string());
                let Some(h) = &outcome.report.held_out else {
                    bail!("dataset too small for a held-out split")
                };
                rows.push(ResultRow {
                    series: "single-user".into(),
                    lambda: *lambda,
                    rate_bits_per_entry: h.rate_bits_per_entry,
                    estimated_entropy: h.estimated_entropy,
                    nmse_db: h.nmse_db,
                    rho: h.rho,
                });
            }
            let (csv, svg, json) = (out_dir.join("results.csv"), out_dir.join("rd.svg"), out_dir.join("rows.json"));
            emit_results(&rows, &csv, &svg)?;
            write_json(&json, &rows)?;
            outputs.extend(display(&[&csv, &svg, &json]));
            cfg.manifest("rd-sweep", outputs).write(&out_dir.join("manifest.json"))?;
        }
        Command::Encode { model, input, out } => {
            ensure!(input.len() == out.len(), "need one output per input");
            let frozen = Checkpoint::load(&model)?.freeze()?;
            ensure!(
                input.len() == frozen.model().n_users(),
                "model has {} user branches, got {} inputs",
                frozen.model().n_users(),
                input.len()
            );
            let data = load_users(&input)?;
            for (user, (list, path)) in data.iter().zip(&out).enumerate() {
                let refs: Vec<&ChannelMatrix> = list.iter().collect();
                let mut all = Vec::with_capacity(refs.len());
                for chunk in refs.chunks(64) {
                    all.extend(frozen.compress(chunk, user)?);
                }
                streams::write(path, &all)?;
            }
            let refs: Vec<&Path> = out.iter().map(PathBuf::as_path).collect();
            cfg.manifest("encode", display(&refs)).write(&manifest_path(&out[0]))?;
        }
        Command::Decode { model, input, out } => {
            ensure!(input.len() == out.len(), "need one output per input");
            let frozen = Checkpoint::load(&model)?.freeze()?;
            let per_user = input.iter().map(|p| streams::read(p)).collect::<Result<Vec<_>>>()?;
            let n = per_user[0].len();
            ensure!(per_user.iter().all(|s| s.len() == n), "users carry different stream counts");
            let mut recon: Vec<Vec<ChannelMatrix>> = vec![Vec::with_capacity(n); per_user.len()];
            for start in (0..n).step_by(64) {
                let end = (start + 64).min(n);
                let chunk: Vec<_> = per_user.iter().map(|s| s[start..end].to_vec()).collect();
                for (user, hs) in frozen.decompress(&chunk)?.into_iter().enumerate() {
                    recon[user].extend(hs);
                }
            }
            for (path, hs) in out.iter().zip(&recon) {
                write_dataset(path, hs)?;
            }
            let refs: Vec<&Path> = out.iter().map(PathBuf::as_path).collect();
            cfg.manifest("decode", display(&refs)).write(&manifest_path(&out[0]))?;
        }
        Command::Evaluate {
            model,
            data,
            out,
            series,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let frozen = ckpt.freeze()?;
            let users = load_users(&data)?;
            let result = evaluate(&frozen, &users, cfg.train.eval_chunk)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            if let Some(path) = out {
                let row = ResultRow {
                    series,
                    lambda: ckpt.lambdas.iter().sum::<f64>() / ckpt.lambdas.len() as f64,
                    rate_bits_per_entry: result.rate_bits_per_entry,
                    estimated_entropy: result.estimated_entropy,
                    nmse_db: result.nmse_db,
                    rho: result.rho,
                };
                write_json(&path, &serde_json::json!({ "result": result, "rows": [row] }))?;
                cfg.manifest("evaluate", display(&[&path])).write(&manifest_path(&path))?;
            }
        }
        Command::Cluster { data, threshold, out } => {
            let users = read_dataset(&data)?;
            let positions: Vec<(f64, f64)> = users.iter().map(|h| h.position).collect();
            let clusters = cluster_users(&positions, threshold);
            println!("{}", serde_json::to_string_pretty(&clusters)?);
            if let Some(path) = out {
                write_json(&path, &clusters)?;
                cfg.manifest("cluster", display(&[&path])).write(&manifest_path(&path))?;
            }
        }
        Command::Plot { input, csv, svg } => {
            let mut rows: Vec<ResultRow> = Vec::new();
            for path in &input {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let value: serde_json::Value = serde_json::from_str(&text)?;
                let list = value.get("rows").cloned().unwrap_or(value);
                rows.extend(serde_json::from_value::<Vec<ResultRow>>(list)?);
            }
            emit_results(&rows, &csv, &svg)?;
            cfg.manifest("plot", display(&[&csv, &svg])).write(&manifest_path(&csv))?;
        }
    }
    Ok(())
}
