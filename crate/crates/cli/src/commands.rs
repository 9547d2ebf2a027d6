use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use evbalance::agent::QParams;
use evbalance::data::{
    aggregate_hourly, generate_synthetic, load_regions, load_series, load_series_with_step, save_regions, save_series,
    split_train_test, DatasetBundle, SeriesKind, HOUR_SECS,
};
use evbalance::demand::pretrain;
use evbalance::graph::{
    build_adjacency, export_network, import_adjacency, load_edges, merge_empty_regions, StationNetwork,
};
use evbalance::training::{
    evaluate_policy, final_window_penalties, load_metrics, run_training, save_comparison, save_metrics,
    LambdaComparison,
};

use crate::manifest::RunManifest;
use crate::settings::Settings;
use crate::CliError;

pub const OCCUPANCY_FILE: &str = "occupancy.csv";
pub const PRICE_FILE: &str = "price.csv";
pub const REGIONS_FILE: &str = "regions.csv";
pub const STATIONS_FILE: &str = "stations.csv";
pub const EDGES_FILE: &str = "edges.csv";
/// Optional edge list in a raw directory that replaces the geographic proxy.
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const GNN_PARAMS_FILE: &str = "gnn_params.txt";
pub const Q_PARAMS_FILE: &str = "qparams.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const LONG_FILE: &str = "long.csv";

#[derive(Debug, Parser)]
#[command(
    name = "evb",
    version,
    about = "Dynamic pricing experiments for EV charging networks"
)]
pub struct Cli {
    /// Seed for every random draw; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate raw 5-minute data (or generate a synthetic bundle) and build
    /// the station graph.
    Preprocess(PreprocessArgs),
    /// Fit the message-passing demand model on the training split.
    Pretrain(PretrainArgs),
    /// Train the pricing agent.
    Train(TrainArgs),
    /// Roll out a trained policy greedily on the held-out split.
    Evaluate(EvaluateArgs),
    /// Merge finished runs into comparison and long-format tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["raw_dir", "synthetic"])))]
pub struct PreprocessArgs {
    /// Directory holding regions.csv, occupancy.csv and price.csv at 5-minute
    /// resolution, plus an optional adjacency.csv.
    pub raw_dir: Option<PathBuf>,
    #[arg(long, num_args = 3, value_names = ["N_REGIONS", "N_HOURS", "SEED"])]
    pub synthetic: Option<Vec<u64>>,
    /// `delaunay` or `knn:K`.
    #[arg(long)]
    pub adjacency: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Preprocessed data directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Extra `KEY=VALUE` settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `analytic` or `gnn`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub gnn_params: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Extra `KEY=VALUE` settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Use double Q-learning targets.
    #[arg(long)]
    pub double: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained Q-network parameter file.
    #[arg(long)]
    pub params: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories produced by `train`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    let mut settings = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let mut config_inputs = Vec::new();
    if let Some(path) = &cli.config {
        config_inputs.push(path.clone());
    }
    let finish = |settings: &mut Settings| -> Result<(), CliError> {
        if let Some(seed) = cli.seed {
            settings.set("seed", &seed.to_string())?;
        }
        Ok(())
    };
    match cli.command {
        Command::Preprocess(args) => {
            if let Some(a) = &args.adjacency {
                settings.set("adjacency", a)?;
            }
            finish(&mut settings)?;
            preprocess(&args, &settings, &cli.out)
        }
        Command::Pretrain(args) => {
            let mut pairs = Vec::new();
            push_opt(&mut pairs, "pretrain_epochs", args.epochs);
            push_opt(&mut pairs, "pretrain_lr", args.lr);
            push_opt(&mut pairs, "gnn_hidden", args.hidden);
            apply(&mut settings, &pairs, &args.overrides)?;
            finish(&mut settings)?;
            cmd_pretrain(&args.data, &settings, &config_inputs, &cli.out)
        }
        Command::Train(args) => {
            let mut pairs = model_pairs(&args.model);
            push_opt(&mut pairs, "episodes", args.episodes);
            if args.double {
                pairs.push(("double", "true".into()));
            }
            apply(&mut settings, &pairs, &args.model.overrides)?;
            finish(&mut settings)?;
            cmd_train(&args.data, &settings, &config_inputs, &cli.out)
        }
        Command::Evaluate(args) => {
            let pairs = model_pairs(&args.model);
            apply(&mut settings, &pairs, &args.model.overrides)?;
            finish(&mut settings)?;
            cmd_evaluate(&args.data, &args.params, &settings, &config_inputs, &cli.out)
        }
        Command::Report(args) => cmd_report(&args.runs, &cli.out),
    }
}

fn push_opt<T: ToString>(pairs: &mut Vec<(&'static str, String)>, key: &'static str, value: Option<T>) {
    if let Some(v) = value {
        pairs.push((key, v.to_string()));
    }
}

fn model_pairs(args: &ModelArgs) -> Vec<(&'static str, String)> {
    let mut pairs = Vec::new();
    push_opt(&mut pairs, "model", args.model.clone());
    push_opt(&mut pairs, "gnn_params", args.gnn_params.as_ref().map(|p| p.display()));
    push_opt(&mut pairs, "lambda", args.lambda);
    push_opt(&mut pairs, "kappa", args.kappa);
    pairs
}

/// Named flags first, then generic `--set` pairs, so `--set` wins.
fn apply(settings: &mut Settings, pairs: &[(&str, String)], overrides: &[String]) -> Result<(), CliError> {
    for (k, v) in pairs {
        settings.set(k, v)?;
    }
    settings.apply_overrides(overrides.iter().map(String::as_str))
}

fn preprocess(args: &PreprocessArgs, settings: &Settings, out: &Path) -> Result<(), CliError> {
    let method = settings.adjacency()?;
    let mut config = BTreeMap::from([("adjacency".to_string(), settings.str("adjacency").to_string())]);
    let outputs = [OCCUPANCY_FILE, PRICE_FILE, REGIONS_FILE, STATIONS_FILE, EDGES_FILE].map(|f| out.join(f));

    let (bundle, network) = if let Some(dims) = &args.synthetic {
        let (n_regions, n_hours, seed) = (dims[0] as usize, dims[1] as usize, dims[2]);
        config.insert("synthetic".into(), format!("{n_regions} {n_hours} {seed}"));
        let mut manifest = RunManifest::new("preprocess", seed, config);
        outputs.iter().for_each(|p| manifest.add_output(p));
        manifest.write(out)?;

        let bundle = generate_synthetic(n_regions, n_hours, seed)?;
        let network = build_adjacency(&merge_empty_regions(&bundle.regions)?, method)?;
        (bundle, network)
    } else {
        let raw = args.raw_dir.as_ref().expect("clap requires a source");
        config.insert("raw_dir".into(), raw.display().to_string());
        let mut manifest = RunManifest::new("preprocess", settings.seed()?, config);
        let adjacency_path = raw.join(ADJACENCY_FILE);
        let mut inputs = vec![raw.join(REGIONS_FILE), raw.join(OCCUPANCY_FILE), raw.join(PRICE_FILE)];
        if adjacency_path.exists() {
            inputs.push(adjacency_path.clone());
        }
        for p in &inputs {
            manifest.add_input(p)?;
        }
        outputs.iter().for_each(|p| manifest.add_output(p));
        manifest.write(out)?;

        let regions = load_regions(&inputs[0])?;
        let (occupancy, _) = load_series(&inputs[1], SeriesKind::Occupancy)?;
        let (price, _) = load_series(&inputs[2], SeriesKind::Price)?;
        let bundle = DatasetBundle::new(aggregate_hourly(&occupancy)?, aggregate_hourly(&price)?, regions)?;
        let merged = merge_empty_regions(&bundle.regions)?;
        let network = if adjacency_path.exists() {
            let net = import_adjacency(&merged, &load_edges(&adjacency_path)?)?;
            if !net.assert_connected().connected {
                log::warn!("{} does not connect every station", adjacency_path.display());
            }
            net
        } else {
            build_adjacency(&merged, method)?
        };
        (bundle, network)
    };

    save_series(&bundle.occupancy, &outputs[0])?;
    save_series(&bundle.price, &outputs[1])?;
    save_regions(&bundle.regions, &outputs[2])?;
    export_network(&network, &outputs[3], &outputs[4])?;
    println!(
        "wrote {} hourly rows for {} stations ({} edges) to {}",
        bundle.n_steps(),
        network.len(),
        network.edge_count(),
        out.display()
    );
    Ok(())
}

/// A preprocessed directory: the hourly bundle with columns in network order.
pub struct Prepared {
    pub bundle: DatasetBundle,
    pub network: StationNetwork,
    pub files: Vec<PathBuf>,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared, CliError> {
    let files: Vec<PathBuf> = [REGIONS_FILE, OCCUPANCY_FILE, PRICE_FILE, EDGES_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let regions = load_regions(&files[0])?;
    let (occupancy, _) = load_series_with_step(&files[1], SeriesKind::Occupancy, HOUR_SECS)?;
    let (price, _) = load_series_with_step(&files[2], SeriesKind::Price, HOUR_SECS)?;
    let network = import_adjacency(&merge_empty_regions(&regions)?, &load_edges(&files[3])?)?;
    let bundle = DatasetBundle::new(occupancy, price, regions)?.select_stations(network.station_ids())?;
    Ok(Prepared { bundle, network, files })
}

fn start_manifest(
    command: &str,
    settings: &Settings,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(command, settings.seed()?, settings.snapshot().clone());
    for p in inputs {
        manifest.add_input(p)?;
    }
    for p in outputs {
        manifest.add_output(p);
    }
    manifest.write(out)
}

fn gnn_input(settings: &Settings) -> Option<PathBuf> {
    (settings.str("model") == "gnn" && !settings.str("gnn_params").is_empty())
        .then(|| PathBuf::from(settings.str("gnn_params")))
}

fn cmd_pretrain(data: &Path, settings: &Settings, extra: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let prepared = load_prepared(data)?;
    let config = settings.pretrain_config()?;
    let params_path = out.join(GNN_PARAMS_FILE);
    let inputs: Vec<PathBuf> = prepared.files.iter().chain(extra).cloned().collect();
    start_manifest("pretrain", settings, &inputs, std::slice::from_ref(&params_path), out)?;

    if config.epochs == 0 {
        log::warn!("0 epochs requested: writing the initial parameters");
    }
    let (train, _) = split_train_test(&prepared.bundle, settings.parse("train_fraction")?)?;
    let outcome = pretrain(&train, &prepared.network, &config)?;
    outcome.params.save(&params_path)?;
    println!("final_mse = {:.6e}", outcome.final_loss);
    println!("wrote {}", params_path.display());
    Ok(())
}

fn cmd_train(data: &Path, settings: &Settings, extra: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let prepared = load_prepared(data)?;
    let config = settings.train_config()?;
    let metrics_path = out.join(METRICS_FILE);
    let params_path = out.join(Q_PARAMS_FILE);
    let inputs: Vec<PathBuf> = prepared
        .files
        .iter()
        .chain(extra)
        .cloned()
        .chain(gnn_input(settings))
        .collect();
    start_manifest(
        "train",
        settings,
        &inputs,
        &[metrics_path.clone(), params_path.clone()],
        out,
    )?;

    let model = settings.demand_model()?;
    let (train, _) = split_train_test(&prepared.bundle, settings.parse("train_fraction")?)?;
    let outcome = run_training(&config, &train, &prepared.network, &model)?;
    save_metrics(&metrics_path, &outcome.metrics)?;
    outcome.params.save(&params_path)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "episode {}: cumulative reward {:.4}, utilization variance {:.6}",
            last.episode, last.cumulative_reward, last.mean_util_variance
        );
    }
    println!("wrote {} and {}", metrics_path.display(), params_path.display());
    Ok(())
}

fn cmd_evaluate(
    data: &Path,
    params: &Path,
    settings: &Settings,
    extra: &[PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    let prepared = load_prepared(data)?;
    let eval_path = out.join(EVALUATION_FILE);
    let inputs: Vec<PathBuf> = prepared
        .files
        .iter()
        .chain(extra)
        .cloned()
        .chain(std::iter::once(params.to_path_buf()))
        .chain(gnn_input(settings))
        .collect();
    start_manifest("evaluate", settings, &inputs, std::slice::from_ref(&eval_path), out)?;

    let q = QParams::load(params)?;
    let model = settings.demand_model()?;
    let (_, test) = split_train_test(&prepared.bundle, settings.parse("train_fraction")?)?;
    let metrics = evaluate_policy(
        &q,
        &test,
        &prepared.network,
        &model,
        settings.parse("lambda")?,
        settings.parse("kappa")?,
    )?;
    save_metrics(&eval_path, &[metrics])?;
    println!(
        "held-out: cumulative reward {:.4}, utilization variance {:.6}",
        metrics.cumulative_reward, metrics.mean_util_variance
    );
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let comparison_path = out.join(COMPARISON_FILE);
    let long_path = out.join(LONG_FILE);
    let mut manifest = RunManifest::new("report", 0, BTreeMap::new());
    for dir in runs {
        manifest.add_input(&dir.join(METRICS_FILE))?;
    }
    manifest.add_output(&comparison_path);
    manifest.add_output(&long_path);
    manifest.write(out)?;

    let mut rows = Vec::with_capacity(runs.len());
    let file = File::create(&long_path).map_err(|e| CliError::io(&long_path, e))?;
    let mut long = BufWriter::new(file);
    writeln!(long, "run,episode,metric,value").map_err(|e| CliError::io(&long_path, e))?;
    for dir in runs {
        let metrics = load_metrics(dir.join(METRICS_FILE))?;
        let lambda: f64 = RunManifest::read(dir)?
            .config
            .get("lambda")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Usage(format!("{} records no lambda", dir.display())))?;
        let (v, o) = final_window_penalties(&metrics);
        rows.push(LambdaComparison {
            lambda,
            final_variance_penalty: v,
            final_overload_penalty: o,
        });
        let label = run_label(dir);
        for m in &metrics {
            for (name, value) in m.named_values() {
                writeln!(long, "{label},{},{name},{value:.16e}", m.episode).map_err(|e| CliError::io(&long_path, e))?;
            }
        }
    }
    long.flush().map_err(|e| CliError::io(&long_path, e))?;
    save_comparison(&comparison_path, &rows)?;
    println!("wrote {} and {}", comparison_path.display(), long_path.display());
    Ok(())
}
