use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asgat::config::KeyValues;
use asgat::experiments::{
    ablate_heads, density_sweep, export_filter_responses, frequency_sweep, heat_baseline, HeadMode,
};
use asgat::graph::{homophily, load_graph, split_per_class};
use asgat::model::{GraphContext, Model};
use asgat::train::{grid_search, macro_f1, micro_f1, per_beta_accuracy, train_in_context, GridSpace, TrainConfig};
use asgat::{Error, Graph, Result, Split};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "asgat", version, about = "Adaptive spectral graph attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Graph in the canonical TSV format.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = ["exact", "cheb", "arma", "heat"])]
    backend: Option<String>,
    /// Flat `key = value` file of hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Split file; without it a per-class 60/20/20 split is drawn.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Seed of the generated split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Directory for cached eigendecompositions.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its curves and checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the test nodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Grid search over the `grid.*` lists of the config file.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Number of generated splits (seeds 0..n).
        #[arg(long, default_value_t = 10)]
        splits: usize,
    },
    /// Edge homophily per node and in bins.
    Homophily(Common),
    /// Zero the filter on each band of a tiling of [0, 2].
    AblateFreq {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_step)]
        step: f64,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Zero heads of a trained model.
    AblateHeads {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["keep-one", "drop-one"])]
        mode: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Attention density and epoch time for each k.
    Density {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
    },
    /// Sample the learned filters on a uniform grid.
    Filters {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fixed heat-kernel attention for each scale.
    HeatBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        s_list: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        splits: usize,
    },
    /// Draw a per-class 60/20/20 split.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_step(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if [1.0, 0.5, 0.25].contains(&v) => Ok(v),
        _ => Err(format!("step must be one of 1.0, 0.5, 0.25, got `{s}`")),
    }
}

struct Setup {
    graph: Graph,
    cfg: TrainConfig,
    kv: KeyValues,
}

impl Common {
    fn setup(&self) -> Result<Setup> {
        let graph = load_graph(&self.dataset)?;
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        if let Some(b) = &self.backend {
            kv.insert("backend", b);
        }
        let mut cfg = TrainConfig::default();
        cfg.apply(&kv)?;
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(Setup { graph, cfg, kv })
    }

    fn split(&self, g: &Graph) -> Result<Split> {
        match &self.split {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                Split::parse(&text, g.num_nodes())
            }
            None => split_per_class(g, self.split_seed),
        }
    }

    fn splits(&self, g: &Graph, count: usize) -> Result<Vec<Split>> {
        if count == 0 {
            return Err(Error::Config("need at least one split".into()));
        }
        (0..count as u64).map(|s| split_per_class(g, s)).collect()
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn context(&self, g: &Graph, cfg: &TrainConfig) -> Result<GraphContext> {
        GraphContext::new(g, cfg.backend, cfg.normalize_features, self.cache_dir.as_deref())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A checkpoint from `--model`, or a freshly trained model. The returned
/// config carries the model's backend so the context matches it.
fn obtain_model(common: &Common, s: &Setup, split: &Split, path: Option<&Path>) -> Result<(Model, TrainConfig)> {
    match path {
        Some(p) => {
            let model = Model::load(p)?;
            let cfg = TrainConfig {
                backend: model.cfg.backend,
                ..s.cfg.clone()
            };
            Ok((model, cfg))
        }
        None => {
            let ctx = common.context(&s.graph, &s.cfg)?;
            let r = train_in_context(&s.cfg, &ctx, &s.graph, split, &mut |_, _| Ok(()))?;
            log::info!("trained {} epochs, selected epoch {}", r.epochs_trained(), r.best_epoch);
            Ok((r.model, s.cfg.clone()))
        }
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Train(c) => {
            let s = c.setup()?;
            let split = c.split(&s.graph)?;
            let ctx = c.context(&s.graph, &s.cfg)?;
            let r = train_in_context(&s.cfg, &ctx, &s.graph, &split, &mut |_, _| Ok(()))?;
            let curves = c.write("curves.csv", &r.curves_csv())?;
            let model = c.out.join("model.ckpt");
            r.model.save(&model)?;
            c.write("split.txt", &split.to_text())?;
            Ok(json!({
                "command": "train",
                "backend": s.cfg.backend.name(),
                "epochs": r.epochs_trained(),
                "best_epoch": r.best_epoch,
                "val_loss": r.val_loss,
                "val_acc": r.val_acc,
                "test_micro_f1": r.test_micro_f1,
                "test_macro_f1": r.test_macro_f1,
                "wall_time_secs": r.wall_time_secs,
                "curves": path_str(&curves),
                "model": path_str(&model),
            }))
        }
        Command::Eval { common: c, model } => {
            let s = c.setup()?;
            let split = c.split(&s.graph)?;
            let (model, cfg) = obtain_model(&c, &s, &split, Some(&model))?;
            let ctx = c.context(&s.graph, &cfg)?;
            let pred = model.predict(&ctx)?;
            let labels = s.graph.labels();
            let mut csv = String::from("node,label,prediction,set\n");
            for (v, (&p, &y)) in pred.iter().zip(labels).enumerate() {
                let set = if split.train[v] {
                    "train"
                } else if split.val[v] {
                    "val"
                } else if split.test[v] {
                    "test"
                } else {
                    "none"
                };
                csv.push_str(&format!("{v},{y},{p},{set}\n"));
            }
            let out = c.write("predictions.csv", &csv)?;
            let bins = per_beta_accuracy(&model, &ctx, &s.graph, &split)?;
            Ok(json!({
                "command": "eval",
                "backend": cfg.backend.name(),
                "test_micro_f1": micro_f1(&pred, labels, &split.test)?,
                "test_macro_f1": macro_f1(&pred, labels, &split.test)?,
                "beta_bin_accuracy": bins.accuracy,
                "beta_bin_counts": bins.counts,
                "predictions": path_str(&out),
            }))
        }
        Command::Grid { common: c, splits } => {
            let s = c.setup()?;
            let splits = c.splits(&s.graph, splits)?;
            let space = GridSpace::from_key_values(&s.kv, &s.cfg)?;
            let resume = c.out.join("grid.tsv");
            let r = grid_search(&space, &s.cfg, &s.graph, &splits, Some(&resume))?;
            let out = c.write("grid.csv", &r.to_csv())?;
            let best = &r.cells[r.best_index];
            Ok(json!({
                "command": "grid",
                "backend": s.cfg.backend.name(),
                "cells": r.cells.len(),
                "best_cell": r.best_index,
                "best_score": best.score,
                "best_test_micro_f1": best.mean_test_micro_f1,
                "best": {
                    "lr": r.best.lr,
                    "hidden": r.best.hidden,
                    "weight_decay": r.best.weight_decay,
                    "heads": r.best.heads,
                    "dropout": r.best.dropout,
                    "k": r.best.k,
                },
                "csv": path_str(&out),
            }))
        }
        Command::Homophily(c) => {
            let s = c.setup()?;
            let report = homophily(&s.graph);
            let mut csv = String::from("node,degree,same_label,beta\n");
            for (v, h) in report.nodes.iter().enumerate() {
                match h {
                    Some(h) => csv.push_str(&format!("{v},{},{},{}\n", h.degree, h.same, h.beta())),
                    None => csv.push_str(&format!("{v},0,0,\n")),
                }
            }
            let out = c.write("homophily.csv", &csv)?;
            Ok(json!({
                "command": "homophily",
                "nodes": s.graph.num_nodes(),
                "edges": s.graph.num_edges(),
                "beta": report.beta,
                "zero_bin": report.zero_bin,
                "bins": report.bins,
                "csv": path_str(&out),
            }))
        }
        Command::AblateFreq { common: c, step, model } => {
            let s = c.setup()?;
            let split = c.split(&s.graph)?;
            let (model, cfg) = obtain_model(&c, &s, &split, model.as_deref())?;
            let ctx = c.context(&s.graph, &cfg)?;
            let rows = frequency_sweep(&model, &ctx, &s.graph, &split, step)?;
            let mut csv = String::from("lo,hi,points,micro_f1,delta\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{},{}\n", r.lo, r.hi, r.points, r.micro_f1, r.delta));
            }
            let out = c.write("ablate_freq.csv", &csv)?;
            let worst = rows.iter().min_by(|a, b| a.delta.total_cmp(&b.delta));
            Ok(json!({
                "command": "ablate-freq",
                "backend": cfg.backend.name(),
                "step": step,
                "bands": rows.len(),
                "most_harmful_band": worst.map(|r| [r.lo, r.hi]),
                "most_harmful_delta": worst.map(|r| r.delta),
                "csv": path_str(&out),
            }))
        }
        Command::AblateHeads { common: c, mode, model } => {
            let mode = HeadMode::from_name(&mode)?;
            let s = c.setup()?;
            let split = c.split(&s.graph)?;
            let (model, cfg) = obtain_model(&c, &s, &split, model.as_deref())?;
            let ctx = c.context(&s.graph, &cfg)?;
            let rows = ablate_heads(&model, &ctx, &s.graph, &split, mode)?;
            let mut csv = String::from("head,micro_f1,delta\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.head, r.micro_f1, r.delta));
            }
            let out = c.write("ablate_heads.csv", &csv)?;
            let mean = rows.iter().map(|r| r.delta).sum::<f64>() / rows.len() as f64;
            Ok(json!({
                "command": "ablate-heads",
                "backend": cfg.backend.name(),
                "mode": mode.name(),
                "heads": rows.len(),
                "mean_delta": mean,
                "csv": path_str(&out),
            }))
        }
        Command::Density { common: c, k_list } => {
            let s = c.setup()?;
            let split = c.split(&s.graph)?;
            let rows = density_sweep(&s.cfg, &s.graph, &split, &k_list)?;
            let mut csv = String::from("k,density,epoch_secs\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.k, r.density, r.epoch_secs));
            }
            let out = c.write("density.csv", &csv)?;
            Ok(json!({
                "command": "density",
                "backend": s.cfg.backend.name(),
                "k": k_list,
                "density": rows.iter().map(|r| r.density).collect::<Vec<_>>(),
                "csv": path_str(&out),
            }))
        }
        Command::Filters { common: c, resolution, model } => {
            let s = c.setup()?;
            let split = c.split(&s.graph)?;
            let (model, cfg) = obtain_model(&c, &s, &split, model.as_deref())?;
            let csv = export_filter_responses(&model, resolution)?;
            let out = c.write("filters.csv", &csv)?;
            Ok(json!({
                "command": "filters",
                "backend": cfg.backend.name(),
                "resolution": resolution,
                "heads": model.cfg.heads,
                "csv": path_str(&out),
            }))
        }
        Command::HeatBaseline { common: c, s_list, splits } => {
            let s = c.setup()?;
            let splits = c.splits(&s.graph, splits)?;
            let r = heat_baseline(&s.cfg, &s.graph, &splits, &s_list)?;
            let mut csv = String::from("scale,mean_val_acc,mean_test_micro_f1\n");
            for row in &r.rows {
                csv.push_str(&format!("{},{},{}\n", row.scale, row.mean_val_acc, row.mean_test_micro_f1));
            }
            let out = c.write("heat_baseline.csv", &csv)?;
            let best = r.best_row();
            Ok(json!({
                "command": "heat-baseline",
                "best_scale": best.scale,
                "best_mean_val_acc": best.mean_val_acc,
                "best_mean_test_micro_f1": best.mean_test_micro_f1,
                "csv": path_str(&out),
            }))
        }
        Command::Split { common: c, seed } => {
            let s = c.setup()?;
            let split = split_per_class(&s.graph, seed)?;
            let out = c.write(&format!("split_{seed}.txt"), &split.to_text())?;
            let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
            Ok(json!({
                "command": "split",
                "seed": seed,
                "train": count(&split.train),
                "val": count(&split.val),
                "test": count(&split.test),
                "file": path_str(&out),
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
