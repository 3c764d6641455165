//! Full-graph training with early stopping, evaluation metrics and a
//! resumable grid search.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Adam;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::{homophily, Graph, Split};
use crate::model::{argmax_rows, AsgatConfig, Backend, ForwardOptions, ForwardPass, GraphContext, Model};

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub hidden: usize,
    pub filter_hidden: usize,
    pub heads: usize,
    pub k: usize,
    pub backend: Backend,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub normalize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-4,
            dropout: 0.6,
            hidden: 64,
            filter_hidden: 32,
            heads: 8,
            k: 12,
            backend: Backend::Exact,
            max_epochs: 2000,
            patience: 100,
            seed: 0,
            normalize_features: true,
        }
    }
}

pub const GRID_LR: [f64; 6] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2];
pub const GRID_HIDDEN: [usize; 5] = [32, 64, 128, 256, 512];
pub const GRID_WEIGHT_DECAY: [f64; 3] = [1e-5, 1e-4, 1e-3];
pub const GRID_DROPOUT: [f64; 5] = [0.1, 0.2, 0.4, 0.6, 0.8];
pub const GRID_HEADS: std::ops::RangeInclusive<usize> = 2..=18;
pub const GRID_K: std::ops::RangeInclusive<usize> = 3..=18;

const KNOWN_KEYS: [&str; 16] = [
    "lr",
    "weight_decay",
    "dropout",
    "hidden",
    "filter_hidden",
    "heads",
    "k",
    "backend",
    "cheb_order",
    "arma_p",
    "arma_q",
    "arma_iters",
    "heat_scale",
    "max_epochs",
    "patience",
    "seed",
];

impl TrainConfig {
    pub fn model_config(&self, g: &Graph) -> AsgatConfig {
        AsgatConfig {
            heads: self.heads,
            k: self.k,
            hidden: self.hidden,
            filter_hidden: self.filter_hidden,
            dropout: self.dropout,
            backend: self.backend,
            feature_dim: g.feature_dim(),
            class_count: g.class_count(),
        }
    }

    /// Overrides fields from a key/value file. Keys starting with `grid.` are
    /// left for [`GridSpace::from_key_values`]; any other unknown key is an
    /// error.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for key in kv.keys() {
            if !key.starts_with("grid.") && key != "normalize_features" && !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
        }
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = kv.parsed(stringify!($field))? {
                    self.$field = v;
                }
            };
        }
        set!(lr);
        set!(weight_decay);
        set!(dropout);
        set!(hidden);
        set!(filter_hidden);
        set!(heads);
        set!(k);
        set!(max_epochs);
        set!(patience);
        set!(seed);
        set!(normalize_features);
        if let Some(name) = kv.get("backend") {
            self.backend = Backend::from_name(name)?;
        }
        match &mut self.backend {
            Backend::Chebyshev { order } => {
                if let Some(v) = kv.parsed("cheb_order")? {
                    *order = v;
                }
            }
            Backend::Arma { p, q, iters } => {
                if let Some(v) = kv.parsed("arma_p")? {
                    *p = v;
                }
                if let Some(v) = kv.parsed("arma_q")? {
                    *q = v;
                }
                if let Some(v) = kv.parsed("arma_iters")? {
                    *iters = v;
                }
            }
            Backend::Heat { scale } => {
                if let Some(v) = kv.parsed("heat_scale")? {
                    *scale = v;
                }
            }
            Backend::Exact => {}
        }
        self.backend.validate()
    }

    /// Checks that every grid-searched value lies in the published search space.
    pub fn check_grid_ranges(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} outside the grid-search space")));
        if !GRID_LR.contains(&self.lr) {
            return bad("learning rate");
        }
        if !GRID_HIDDEN.contains(&self.hidden) {
            return bad("hidden size");
        }
        if !GRID_WEIGHT_DECAY.contains(&self.weight_decay) {
            return bad("weight decay");
        }
        if !GRID_DROPOUT.contains(&self.dropout) {
            return bad("dropout");
        }
        if !GRID_HEADS.contains(&self.heads) {
            return bad("head count");
        }
        if !GRID_K.contains(&self.k) {
            return bad("k");
        }
        Ok(())
    }

    /// Stable identifier of the grid-searched fields, used as the resume key.
    pub fn cell_key(&self) -> String {
        format!(
            "lr={};hidden={};wd={};heads={};dropout={};k={};backend={:?}",
            self.lr, self.hidden, self.weight_decay, self.heads, self.dropout, self.k, self.backend
        )
    }
}

/// One epoch of a run. Epochs are numbered from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_micro_f1: f64,
    pub test_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub best_epoch: usize,
    pub test_micro_f1: f64,
    pub test_macro_f1: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub curves: Vec<EpochRecord>,
    pub wall_time_secs: f64,
    /// Parameters at the selected epoch.
    pub model: Model,
}

impl RunResult {
    pub fn epochs_trained(&self) -> usize {
        self.curves.len()
    }

    /// `epoch,train_loss,val_loss,val_acc` rows with a header.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.curves {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc);
        }
        out
    }
}

/// Stops once `patience` consecutive epochs improve neither the best
/// validation loss nor the best validation accuracy.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_acc: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_acc: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch; returns `true` when training should stop.
    pub fn update(&mut self, val_loss: f64, val_acc: f64) -> bool {
        let mut improved = false;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            improved = true;
        }
        if val_acc > self.best_acc {
            self.best_acc = val_acc;
            improved = true;
        }
        self.stale = if improved { 0 } else { self.stale + 1 };
        self.stale >= self.patience
    }
}

fn masked_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

fn check_metric_inputs(pred: &[usize], truth: &[usize], mask: &[bool]) -> Result<Vec<usize>> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Shape("prediction, truth and mask lengths differ".into()));
    }
    let idx = masked_indices(mask);
    if idx.is_empty() {
        return Err(Error::Validation("metric over an empty mask".into()));
    }
    Ok(idx)
}

/// Micro-averaged F1; for single-label multiclass data this is accuracy.
pub fn micro_f1(pred: &[usize], truth: &[usize], mask: &[bool]) -> Result<f64> {
    let idx = check_metric_inputs(pred, truth, mask)?;
    let correct = idx.iter().filter(|&&i| pred[i] == truth[i]).count();
    Ok(correct as f64 / idx.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes present in the
/// predictions or the truth within the mask.
pub fn macro_f1(pred: &[usize], truth: &[usize], mask: &[bool]) -> Result<f64> {
    let idx = check_metric_inputs(pred, truth, mask)?;
    let classes = idx.iter().flat_map(|&i| [pred[i], truth[i]]).max().unwrap_or(0) + 1;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for &i in &idx {
        if pred[i] == truth[i] {
            tp[pred[i]] += 1;
        } else {
            fp[pred[i]] += 1;
            fneg[truth[i]] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            continue;
        }
        present += 1;
        total += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok(total / present as f64)
}

/// Loss and accuracy of `logits` on `rows`.
fn loss_and_accuracy(logits: &crate::linalg::Matrix, labels: &[usize], rows: &[usize]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0;
    for &r in rows {
        let row = logits.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[labels[r]];
        let arg = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        correct += usize::from(arg == labels[r]);
    }
    (loss / rows.len() as f64, correct as f64 / rows.len() as f64)
}

/// Trains on `g` with a freshly prepared context.
pub fn train(cfg: &TrainConfig, g: &Graph, split: &Split) -> Result<RunResult> {
    let ctx = GraphContext::new(g, cfg.backend, cfg.normalize_features, None)?;
    train_in_context(cfg, &ctx, g, split, &mut |_, _| Ok(()))
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => {
            log::warn!("epoch {epoch}: {msg}");
            Error::Diverged { epoch }
        }
        other => other,
    }
}

/// Epoch-by-epoch training state. [`train_in_context`] drives it to
/// completion; sweeps that need per-epoch control drive it directly.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    ctx: &'a GraphContext,
    labels: &'a [usize],
    test_mask: &'a [bool],
    train_rows: Vec<usize>,
    train_targets: Vec<usize>,
    val_rows: Vec<usize>,
    model: Model,
    rng: ChaCha8Rng,
    adam: Adam,
    stopper: EarlyStopping,
    curves: Vec<EpochRecord>,
    best: Option<(f64, f64, usize, Model)>,
    start: Instant,
    stopped: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, ctx: &'a GraphContext, g: &'a Graph, split: &'a Split) -> Result<Self> {
        if split.len() != g.num_nodes() || ctx.num_nodes() != g.num_nodes() {
            return Err(Error::Validation("split, context and graph sizes differ".into()));
        }
        if cfg.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        let train_rows = split.train_indices();
        let val_rows = split.val_indices();
        if train_rows.is_empty() || val_rows.is_empty() || split.test_indices().is_empty() {
            return Err(Error::Validation("train, validation and test sets must be nonempty".into()));
        }
        let labels = g.labels();
        Ok(Self {
            train_targets: train_rows.iter().map(|&r| labels[r]).collect(),
            train_rows,
            val_rows,
            labels,
            test_mask: &split.test,
            model: Model::init(cfg.model_config(g), cfg.seed)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20b),
            adam: Adam::new(cfg.lr, cfg.weight_decay),
            stopper: EarlyStopping::new(cfg.patience),
            curves: Vec::new(),
            best: None,
            start: Instant::now(),
            stopped: false,
            cfg: cfg.clone(),
            ctx,
        })
    }

    /// Current (last-updated) parameters.
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn curves(&self) -> &[EpochRecord] {
        &self.curves
    }

    /// True once early stopping fired or the epoch cap was reached.
    pub fn is_done(&self) -> bool {
        self.stopped || self.curves.len() >= self.cfg.max_epochs
    }

    /// Runs one epoch: training forward/backward, Adam step, evaluation.
    /// `observe` sees the training pass before the update.
    pub fn epoch(&mut self, observe: &mut dyn FnMut(usize, &ForwardPass) -> Result<()>) -> Result<&EpochRecord> {
        let epoch = self.curves.len() + 1;
        let (train_loss, grads, pass) = self
            .model
            .loss_and_grads(
                self.ctx,
                &self.train_rows,
                &self.train_targets,
                ForwardOptions {
                    dropout_rng: Some(&mut self.rng),
                    ..Default::default()
                },
            )
            .map_err(|e| divergence(epoch, e))?;
        if !train_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        observe(epoch, &pass)?;
        drop(pass);
        {
            let mut tensors = self.model.params.tensors_mut();
            if self.cfg.backend.learns_filter() {
                self.adam.step(&mut tensors, &grads)?;
            } else {
                self.adam.step(&mut tensors[6..], &grads[6..])?;
            }
        }

        let logits = self.model.predict_logits(self.ctx).map_err(|e| divergence(epoch, e))?;
        let (val_loss, val_acc) = loss_and_accuracy(&logits, self.labels, &self.val_rows);
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let pred = argmax_rows(&logits);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            test_micro_f1: micro_f1(&pred, self.labels, self.test_mask)?,
            test_macro_f1: macro_f1(&pred, self.labels, self.test_mask)?,
        };
        let better = match &self.best {
            None => true,
            Some((bl, ba, _, _)) => val_loss < *bl || (val_loss == *bl && val_acc > *ba),
        };
        if better {
            self.best = Some((val_loss, val_acc, epoch, self.model.clone()));
        }
        self.stopped = self.stopper.update(val_loss, val_acc);
        self.curves.push(record);
        Ok(self.curves.last().expect("just pushed"))
    }

    /// Result at the selected epoch. Errors if no epoch has run.
    pub fn finish(self) -> Result<RunResult> {
        let (val_loss, val_acc, best_epoch, model) =
            self.best.ok_or_else(|| Error::Validation("no epoch was trained".into()))?;
        let rec = &self.curves[best_epoch - 1];
        Ok(RunResult {
            best_epoch,
            test_micro_f1: rec.test_micro_f1,
            test_macro_f1: rec.test_macro_f1,
            val_loss,
            val_acc,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
            curves: self.curves,
            model,
        })
    }
}

/// Trains on a prepared context. `observe` sees every training forward pass
/// (epoch number and pass) before the parameter update.
pub fn train_in_context(
    cfg: &TrainConfig,
    ctx: &GraphContext,
    g: &Graph,
    split: &Split,
    observe: &mut dyn FnMut(usize, &ForwardPass) -> Result<()>,
) -> Result<RunResult> {
    let mut trainer = Trainer::new(cfg, ctx, g, split)?;
    while !trainer.is_done() {
        trainer.epoch(observe)?;
    }
    trainer.finish()
}

/// Accuracy on test nodes grouped by node homophily `β_v` into the bins
/// `[0, 0.2], (0.2, 0.4], …, (0.8, 1]`. Empty bins are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaBins {
    pub accuracy: [Option<f64>; 5],
    pub counts: [usize; 5],
}

pub fn per_beta_accuracy(model: &Model, ctx: &GraphContext, g: &Graph, split: &Split) -> Result<BetaBins> {
    let pred = model.predict(ctx)?;
    let report = homophily(g);
    let mut correct = [0usize; 5];
    let mut counts = [0usize; 5];
    for v in split.test_indices() {
        if let Some(h) = report.nodes[v] {
            let b = h.bin();
            counts[b] += 1;
            correct[b] += usize::from(pred[v] == g.labels()[v]);
        }
    }
    let mut accuracy = [None; 5];
    for b in 0..5 {
        if counts[b] > 0 {
            accuracy[b] = Some(correct[b] as f64 / counts[b] as f64);
        }
    }
    Ok(BetaBins { accuracy, counts })
}

/// Value lists for the grid-searched hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpace {
    pub lr: Vec<f64>,
    pub hidden: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub heads: Vec<usize>,
    pub dropout: Vec<f64>,
    pub k: Vec<usize>,
}

impl GridSpace {
    /// The single cell of `base`.
    pub fn single(base: &TrainConfig) -> Self {
        Self {
            lr: vec![base.lr],
            hidden: vec![base.hidden],
            weight_decay: vec![base.weight_decay],
            heads: vec![base.heads],
            dropout: vec![base.dropout],
            k: vec![base.k],
        }
    }

    /// Reads `grid.lr`, `grid.hidden`, … lists; absent keys keep `base`.
    pub fn from_key_values(kv: &KeyValues, base: &TrainConfig) -> Result<Self> {
        let mut s = Self::single(base);
        if let Some(v) = kv.list("grid.lr")? {
            s.lr = v;
        }
        if let Some(v) = kv.list("grid.hidden")? {
            s.hidden = v;
        }
        if let Some(v) = kv.list("grid.weight_decay")? {
            s.weight_decay = v;
        }
        if let Some(v) = kv.list("grid.heads")? {
            s.heads = v;
        }
        if let Some(v) = kv.list("grid.dropout")? {
            s.dropout = v;
        }
        if let Some(v) = kv.list("grid.k")? {
            s.k = v;
        }
        Ok(s)
    }

    /// Cells in iteration order (learning rate outermost, k innermost).
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &hidden in &self.hidden {
                for &weight_decay in &self.weight_decay {
                    for &heads in &self.heads {
                        for &dropout in &self.dropout {
                            for &k in &self.k {
                                out.push(TrainConfig {
                                    lr,
                                    hidden,
                                    weight_decay,
                                    heads,
                                    dropout,
                                    k,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Outcome of one grid cell: mean over splits of the validation accuracy and
/// test micro-F1 at each run's selected epoch. A diverged cell scores `−∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub config: TrainConfig,
    pub score: f64,
    pub mean_test_micro_f1: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: TrainConfig,
    pub best_index: usize,
    pub cells: Vec<CellResult>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,lr,hidden,weight_decay,heads,dropout,k,score,test_micro_f1,diverged\n");
        for (i, c) in self.cells.iter().enumerate() {
            let t = &c.config;
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{},{}",
                t.lr, t.hidden, t.weight_decay, t.heads, t.dropout, t.k, c.score, c.mean_test_micro_f1, c.diverged
            );
        }
        out
    }
}

const RESUME_HEADER: &str = "key\tscore\ttest_micro_f1\tdiverged";

fn load_resume(path: &Path) -> Result<HashMap<String, (f64, f64, bool)>> {
    let mut done = HashMap::new();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != RESUME_HEADER {
                return Err(Error::parse(1, "not a grid-search results file"));
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        // A torn trailing line from an interrupted run is skipped.
        if f.len() != 4 {
            continue;
        }
        let score = f[1].parse::<f64>().map_err(|_| Error::parse(i + 1, "bad score"))?;
        let test = f[2].parse::<f64>().map_err(|_| Error::parse(i + 1, "bad test score"))?;
        let div = f[3].parse::<bool>().map_err(|_| Error::parse(i + 1, "bad diverged flag"))?;
        done.insert(f[0].to_string(), (score, test, div));
    }
    Ok(done)
}

/// Evaluates every cell of `space` on every split, in parallel across cells,
/// and returns the cell with the highest mean validation accuracy (first
/// cell on ties). With `resume`, finished cells are appended to that file and
/// cells already recorded there are not rerun.
pub fn grid_search(
    space: &GridSpace,
    base: &TrainConfig,
    g: &Graph,
    splits: &[Split],
    resume: Option<&Path>,
) -> Result<GridResult> {
    let cells = space.cells(base);
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    if splits.is_empty() {
        return Err(Error::Config("grid search needs at least one split".into()));
    }
    let ctx = GraphContext::new(g, base.backend, base.normalize_features, None)?;
    let done = match resume {
        Some(p) => load_resume(p)?,
        None => HashMap::new(),
    };
    let writer = match resume {
        Some(p) => {
            let fresh = !p.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if fresh {
                writeln!(f, "{RESUME_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };

    let results: Vec<Result<CellResult>> = cells
        .par_iter()
        .map(|cell| {
            let key = cell.cell_key();
            if let Some(&(score, test, diverged)) = done.get(&key) {
                return Ok(CellResult {
                    config: cell.clone(),
                    score,
                    mean_test_micro_f1: test,
                    diverged,
                });
            }
            let mut val = 0.0;
            let mut test = 0.0;
            let mut diverged = false;
            for split in splits {
                match train_in_context(cell, &ctx, g, split, &mut |_, _| Ok(())) {
                    Ok(r) => {
                        val += r.val_acc;
                        test += r.test_micro_f1;
                    }
                    Err(Error::Diverged { epoch }) => {
                        log::warn!("cell {key} diverged at epoch {epoch}");
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let n = splits.len() as f64;
            let (score, test) = if diverged {
                (f64::NEG_INFINITY, f64::NAN)
            } else {
                (val / n, test / n)
            };
            if let (Some(w), Some(p)) = (&writer, resume) {
                let mut f = w.lock().expect("results file lock");
                writeln!(f, "{key}\t{score}\t{test}\t{diverged}").map_err(|e| Error::io(p, e))?;
            }
            Ok(CellResult {
                config: cell.clone(),
                score,
                mean_test_micro_f1: test,
                diverged,
            })
        })
        .collect();
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut best_index = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.score > cells[best_index].score {
            best_index = i;
        }
    }
    Ok(GridResult {
        best: cells[best_index].config.clone(),
        best_index,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        let all = [true; 4];
        assert_eq!(micro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], &all).unwrap(), 1.0);
        assert_eq!(micro_f1(&[1, 0, 0, 1], &[0, 1, 1, 0], &all).unwrap(), 0.0);
        assert_eq!(micro_f1(&[0, 1, 1, 1], &[0, 1, 1, 0], &all).unwrap(), 0.75);
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], &all).unwrap(), 1.0);
        let m = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], &all).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[2, 2, 5], &[2, 2, 0], &[true, true, false]).unwrap(), 1.0);
        assert!(micro_f1(&[0], &[0], &[false]).is_err());
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(100);
        let mut stopped_at = None;
        for epoch in 1..=1000 {
            let e = epoch.min(40) as f64;
            if s.update(1.0 / e, e / 100.0) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(140));
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        c.apply(&KeyValues::parse("backend = cheb\ncheb_order = 7\nlr = 0.01\nnormalize_features = false\n").unwrap())
            .unwrap();
        assert_eq!(c.backend, Backend::Chebyshev { order: 7 });
        assert_eq!(c.lr, 0.01);
        assert!(!c.normalize_features);
        assert!(c.apply(&KeyValues::parse("learning_rate = 1\n").unwrap()).is_err());
        assert!(TrainConfig::default().check_grid_ranges().is_ok());
        let off = TrainConfig {
            lr: 0.02,
            ..TrainConfig::default()
        };
        assert!(off.check_grid_ranges().is_err());
    }
}
