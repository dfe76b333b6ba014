use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use graftnet::archive::write_atomic;
use graftnet::config::{Preset, RunConfig};
use graftnet::data::{decode_image, ingest_market_layout, synth_dataset};
use graftnet::eval::{evaluate, extract_feature};
use graftnet::train::{fit, load_checkpoint, save_checkpoint, TrainState, STATE_FILE, WEIGHTS_FILE};
use graftnet::{GraftedNet, GraftedNetConfig, WeightArchive};

/// Resolved configuration written next to the weights of every run.
const CONFIG_FILE: &str = "config.txt";
const REPORT_FILE: &str = "report.txt";
const HISTORY_FILE: &str = "history.csv";

#[derive(Parser)]
#[command(name = "gnet", version, about = "Grafted ResNet/fire-block person re-identification network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter counts (the inference model unless --scope is given).
    CountParams {
        #[arg(long, default_value_t = 8)]
        groups: usize,
        #[arg(long, default_value_t = 751)]
        classes: usize,
        /// Count one scope of the full training model: rootstock, scion,
        /// reduction, objective or accompanying.
        #[arg(long)]
        scope: Option<String>,
    },
    /// Train from a configuration file (or a preset).
    Train {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Start from a built-in preset instead of a file: standard or desk.
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the configured seed and GNET_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained weights on a query/gallery layout.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        /// Directory with bounding_box_train, query and bounding_box_test.
        #[arg(long)]
        dataset: PathBuf,
        /// Run configuration; defaults to config.txt next to the weights.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report and per-query CSV into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the feature of one image as comma-separated values.
    Extract {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate the synthetic dataset as a Market-1501 style layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 4)]
        cameras: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient checks, metric checks and parameter counts.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::CountParams { groups, classes, scope } => count_params(groups, classes, scope.as_deref())?,
        Command::Train {
            config,
            preset,
            seed,
            out,
            resume,
        } => train(config.as_deref(), preset.as_deref(), seed, out, resume)?,
        Command::Eval {
            weights,
            dataset,
            config,
            out,
        } => eval(&weights, &dataset, config.as_deref(), out.as_deref())?,
        Command::Extract {
            weights,
            image,
            out,
            config,
        } => extract(&weights, &image, &out, config.as_deref())?,
        Command::Synth {
            out,
            ids,
            per_id,
            cameras,
            seed,
        } => {
            let ds = synth_dataset(ids, per_id, cameras, seed)?;
            ds.write_market_layout(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{}", ds.counts());
        }
        Command::Selftest { seed } => return Ok(selftest(seed)),
    }
    Ok(ExitCode::SUCCESS)
}

fn millions(n: usize, decimals: usize) -> String {
    format!("{:.*}M", decimals, n as f64 / 1e6)
}

fn count_params(groups: usize, classes: usize, scope: Option<&str>) -> Result<()> {
    let cfg = GraftedNetConfig {
        reduction_groups: groups,
        ..GraftedNetConfig::new(classes)
    };
    let net = GraftedNet::<f32>::build(cfg)?;
    match scope {
        Some(scope) => {
            if !graftnet::model::SCOPES.contains(&scope) {
                bail!("unknown scope `{scope}` (one of {})", graftnet::model::SCOPES.join(", "));
            }
            let n = net.count_params(&[scope]);
            println!("{n} ({})", millions(n, 3));
        }
        None => {
            let n = net.strip_for_inference().count_params(&[]);
            println!("total={n} ({})", millions(n, 1));
        }
    }
    Ok(())
}

fn resolve_config(config: Option<&Path>, preset: Option<&str>) -> Result<RunConfig> {
    match (config, preset) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display())),
        (None, Some("desk")) => Ok(RunConfig::preset(Preset::Desk)),
        (None, Some("standard")) => Ok(RunConfig::preset(Preset::Standard)),
        (None, Some(other)) => bail!("unknown preset `{other}` (standard, desk)"),
        (None, None) => bail!("train needs --config or --preset"),
    }
}

fn train(config: Option<&Path>, preset: Option<&str>, seed: Option<u64>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut cfg = resolve_config(config, preset)?;
    cfg.apply_env()?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let has_checkpoint = dir.join(WEIGHTS_FILE).exists() || dir.join(STATE_FILE).exists();
    if has_checkpoint && !resume {
        bail!("{} already holds a checkpoint; pass --resume to continue it", dir.display());
    }

    let data = cfg.load_dataset()?;
    let (_, classes) = data.train_labels()?;
    println!("{}", data.counts());
    let mut net = GraftedNet::<f32>::build(cfg.model_config(classes)?)?;
    let mut state = if resume && has_checkpoint {
        let saved = std::fs::read_to_string(dir.join(CONFIG_FILE)).context("reading the run's config.txt")?;
        if saved != cfg.to_text() {
            bail!("configuration differs from the one the checkpoint was trained with");
        }
        let state = load_checkpoint(&dir, &mut net)?;
        println!("resuming at epoch {}", state.epoch);
        state
    } else {
        let pretrained = match &cfg.model.pretrained {
            Some(p) => Some(WeightArchive::read_file(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        net.init_params(cfg.seed, pretrained.as_ref())?;
        TrainState::new(cfg.seed)
    };
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;

    let epochs = cfg.train.sgd.total_epochs;
    let outcome = fit(&mut net, &mut state, &data, &cfg.train, epochs, cfg.stop.as_ref(), |net, state, report| {
        let stats = state.history.last().expect("an epoch just finished");
        let mut line = format!(
            "epoch {} lr {:.5}/{:.5} joint {:.4} per image",
            stats.epoch + 1,
            stats.lr.0,
            stats.lr.1,
            stats.mean_joint()
        );
        if let Some(acc) = stats.accompanying {
            let _ = write!(line, ", accompanying {:.4}", acc / stats.images as f64);
        }
        if let Some(r) = report {
            let _ = write!(line, ", rank-1 {:.4} mAP {:.4}", r.rank1(), r.map);
        }
        println!("{line}");
        save_checkpoint(&dir, net, state)
    })?;
    save_checkpoint(&dir, &net, &state)?;
    write_atomic(&dir.join(HISTORY_FILE), history_csv(&state).as_bytes())?;
    if let Some(report) = &outcome.report {
        write_atomic(&dir.join(REPORT_FILE), report.to_text().as_bytes())?;
        print!("{}", report.to_text());
    }
    println!(
        "trained {} epochs{}; weights in {}",
        outcome.epochs_run,
        if outcome.reached { " (stop target reached)" } else { "" },
        dir.join(WEIGHTS_FILE).display()
    );
    Ok(())
}

fn history_csv(state: &TrainState) -> String {
    let mut s = String::from("epoch,images,lr_pretrained,lr_fresh,joint,accompanying\n");
    for h in &state.history {
        let acc = h.accompanying.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{acc}", h.epoch + 1, h.images, h.lr.0, h.lr.1, h.joint);
    }
    s
}

/// Builds the network described by the run config and loads `weights`,
/// which may be a full training archive or a stripped inference one.
fn load_model(weights: &Path, config: Option<&Path>) -> Result<(RunConfig, GraftedNet<f32>)> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => weights.with_file_name(CONFIG_FILE),
    };
    let cfg = RunConfig::load(&config_path).with_context(|| format!("reading config {}", config_path.display()))?;
    let archive = WeightArchive::read_file(weights).with_context(|| format!("reading {}", weights.display()))?;
    let classes = match archive.get("objective.h1.weight") {
        Some(entry) => entry.shape[0],
        None => 2,
    };
    let mut model_cfg = cfg.model_config(classes)?;
    let stripped = archive.get("objective.h1.weight").is_none();
    if stripped {
        model_cfg.with_objective = false;
        model_cfg.with_accompanying = false;
    }
    let mut net = GraftedNet::<f32>::build(model_cfg)?;
    net.load_weights(&archive).with_context(|| format!("loading {}", weights.display()))?;
    Ok((cfg, net.strip_for_inference()))
}

fn eval(weights: &Path, dataset: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (cfg, mut net) = load_model(weights, config)?;
    let data = ingest_market_layout(dataset)?;
    let report = evaluate(&mut net, &data.query, &data.gallery, cfg.norm())?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(REPORT_FILE), report.to_text().as_bytes())?;
        write_atomic(&dir.join("per_query.csv"), report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn extract(weights: &Path, image: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let (cfg, mut net) = load_model(weights, config)?;
    let hw = net.config.arch.input_hw;
    let mut img = graftnet::data::resize_bilinear(&decode_image(image)?, hw)?;
    cfg.norm().apply(&mut img)?;
    let feature = extract_feature(&mut net, &img)?;
    let line = feature.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    write_atomic(out, format!("{line}\n").as_bytes())?;
    println!("wrote {} values to {}", feature.len(), out.display());
    Ok(())
}

fn selftest(seed: u64) -> ExitCode {
    let results = graftnet::selftest::run(seed);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
