//! Analysis protocols run on trained models: frequency-band and head
//! ablations, attention density sweeps, filter export and the fixed
//! heat-kernel baseline.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::approx::arma::uniform_grid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::model::{argmax_rows, in_band, Backend, ForwardOptions, GraphContext, Model};
use crate::train::{micro_f1, train_in_context, Trainer, TrainConfig};

/// SHA-256 of the model's checkpoint text.
pub fn model_checksum(model: &Model) -> [u8; 32] {
    Sha256::digest(model.to_checkpoint().to_text().as_bytes()).into()
}

fn test_micro_f1(model: &Model, ctx: &GraphContext, g: &Graph, split: &Split, opts: ForwardOptions<'_>) -> Result<f64> {
    let pass = model.forward(ctx, opts)?;
    micro_f1(&argmax_rows(pass.logits()), g.labels(), &split.test)
}

/// Bands `[0, s), [s, 2s), …, [2 − s, 2]` for `s ∈ {1.0, 0.5, 0.25}`.
pub fn frequency_bands(step: f64) -> Result<Vec<(f64, f64)>> {
    if ![1.0, 0.5, 0.25].contains(&step) {
        return Err(Error::Validation(format!("frequency step {step} is not one of 1.0, 0.5, 0.25")));
    }
    let count = (2.0 / step) as usize;
    Ok((0..count).map(|i| (i as f64 * step, (i + 1) as f64 * step)).collect())
}

/// Test micro-F1 with the filter response zeroed on `[lo, hi)` minus the
/// unablated test micro-F1. `lo == hi` is the empty band.
pub fn ablate_frequency(model: &Model, ctx: &GraphContext, g: &Graph, split: &Split, lo: f64, hi: f64) -> Result<f64> {
    if !(0.0..=2.0).contains(&lo) || !(0.0..=2.0).contains(&hi) || lo > hi {
        return Err(Error::Validation(format!("invalid frequency band [{lo}, {hi})")));
    }
    let base = test_micro_f1(model, ctx, g, split, ForwardOptions::default())?;
    if lo == hi {
        return Ok(0.0);
    }
    let ablated = test_micro_f1(
        model,
        ctx,
        g,
        split,
        ForwardOptions {
            zero_band: Some((lo, hi)),
            ..Default::default()
        },
    )?;
    Ok(ablated - base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandAblation {
    pub lo: f64,
    pub hi: f64,
    /// Response points (eigenvalues, or the backend's sample points) in the band.
    pub points: usize,
    pub micro_f1: f64,
    pub delta: f64,
}

/// Ablates every band of the tiling with the given step.
pub fn frequency_sweep(model: &Model, ctx: &GraphContext, g: &Graph, split: &Split, step: f64) -> Result<Vec<BandAblation>> {
    let base = test_micro_f1(model, ctx, g, split, ForwardOptions::default())?;
    let points = ctx.response_points();
    frequency_bands(step)?
        .into_iter()
        .map(|(lo, hi)| {
            let delta = ablate_frequency(model, ctx, g, split, lo, hi)?;
            Ok(BandAblation {
                lo,
                hi,
                points: points.iter().filter(|&&l| in_band(l, lo, hi)).count(),
                micro_f1: base + delta,
                delta,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Zero every head except one.
    KeepOne,
    /// Zero a single head.
    DropOne,
}

impl HeadMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "keep-one" => Ok(Self::KeepOne),
            "drop-one" => Ok(Self::DropOne),
            other => Err(Error::Config(format!("unknown head ablation mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::KeepOne => "keep-one",
            Self::DropOne => "drop-one",
        }
    }

    fn scale(&self, heads: usize, h: usize) -> Vec<f64> {
        (0..heads)
            .map(|i| match (self, i == h) {
                (Self::KeepOne, true) | (Self::DropOne, false) => 1.0,
                _ => 0.0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadAblation {
    pub head: usize,
    pub micro_f1: f64,
    pub delta: f64,
}

/// Test micro-F1 delta for each head under `mode`. Zeroed heads contribute
/// zero blocks, so layer widths are unchanged.
pub fn ablate_heads(model: &Model, ctx: &GraphContext, g: &Graph, split: &Split, mode: HeadMode) -> Result<Vec<HeadAblation>> {
    let heads = model.cfg.heads;
    if heads == 1 && mode == HeadMode::KeepOne {
        log::warn!("keep-one ablation of a single-head model is the unablated model");
    }
    let base = test_micro_f1(model, ctx, g, split, ForwardOptions::default())?;
    (0..heads)
        .map(|h| {
            let f1 = test_micro_f1(
                model,
                ctx,
                g,
                split,
                ForwardOptions {
                    head_scale: Some(mode.scale(heads, h)),
                    ..Default::default()
                },
            )?;
            Ok(HeadAblation {
                head: h,
                micro_f1: f1,
                delta: f1 - base,
            })
        })
        .collect()
}

pub const WARMUP_EPOCHS: usize = 3;
pub const TIMED_EPOCHS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityRow {
    pub k: usize,
    pub density: f64,
    /// Median over the timed epochs, in seconds.
    pub epoch_secs: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// For each `k`: attention density (mean over heads of nonzeros / N²) after
/// one trained epoch, and the median epoch time over `TIMED_EPOCHS` epochs
/// after `WARMUP_EPOCHS` warm-up epochs. Runs sequentially so timings do not
/// compete for cores.
pub fn density_sweep(cfg: &TrainConfig, g: &Graph, split: &Split, k_values: &[usize]) -> Result<Vec<DensityRow>> {
    let n = g.num_nodes();
    if let Some(&bad) = k_values.iter().find(|&&k| k < 1 || k > n) {
        return Err(Error::Validation(format!("k = {bad} outside [1, {n}]")));
    }
    let ctx = GraphContext::new(g, cfg.backend, cfg.normalize_features, None)?;
    let epochs = WARMUP_EPOCHS + TIMED_EPOCHS;
    k_values
        .iter()
        .map(|&k| {
            let run_cfg = TrainConfig {
                k,
                max_epochs: epochs,
                patience: epochs + 1,
                ..cfg.clone()
            };
            let mut trainer = Trainer::new(&run_cfg, &ctx, g, split)?;
            let mut density = None;
            let mut times = Vec::with_capacity(TIMED_EPOCHS);
            for e in 0..epochs {
                let start = Instant::now();
                trainer.epoch(&mut |_, _| Ok(()))?;
                let secs = start.elapsed().as_secs_f64();
                if e == 0 {
                    let pass = trainer.model().forward(&ctx, ForwardOptions::default())?;
                    density = Some(pass.attention_set(0).density());
                }
                if e >= WARMUP_EPOCHS {
                    times.push(secs);
                }
            }
            Ok(DensityRow {
                k,
                density: density.expect("at least one epoch"),
                epoch_secs: median(times),
            })
        })
        .collect()
}

/// CSV `lambda,head_0,…` of the model's filter on a uniform grid of
/// `resolution` points over `[0, 2]`.
pub fn export_filter_responses(model: &Model, resolution: usize) -> Result<String> {
    if resolution < 1 {
        return Err(Error::Validation("resolution must be at least 1".into()));
    }
    let grid = uniform_grid(resolution);
    let resp = model.filter_response(&grid);
    let mut out = String::from("lambda");
    for h in 0..model.cfg.heads {
        let _ = write!(out, ",head_{h}");
    }
    out.push('\n');
    for (i, l) in grid.iter().enumerate() {
        let _ = write!(out, "{l}");
        for h in 0..model.cfg.heads {
            let _ = write!(out, ",{}", resp[(i, h)]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatRow {
    pub scale: f64,
    pub mean_val_acc: f64,
    pub mean_test_micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatBaseline {
    pub rows: Vec<HeatRow>,
    /// Index into `rows` of the scale with the highest mean validation
    /// accuracy (first on ties).
    pub best: usize,
}

impl HeatBaseline {
    pub fn best_row(&self) -> &HeatRow {
        &self.rows[self.best]
    }
}

/// Trains the fixed heat-kernel model for every scale `s` on every split.
pub fn heat_baseline(base: &TrainConfig, g: &Graph, splits: &[Split], s_values: &[f64]) -> Result<HeatBaseline> {
    if s_values.is_empty() || splits.is_empty() {
        return Err(Error::Validation("heat baseline needs at least one scale and one split".into()));
    }
    let rows = s_values
        .par_iter()
        .map(|&scale| {
            let backend = Backend::Heat { scale };
            backend.validate()?;
            let cfg = TrainConfig { backend, ..base.clone() };
            let ctx = GraphContext::new(g, backend, cfg.normalize_features, None)?;
            let mut val = 0.0;
            let mut test = 0.0;
            for split in splits {
                let r = train_in_context(&cfg, &ctx, g, split, &mut |_, _| Ok(()))?;
                val += r.val_acc;
                test += r.test_micro_f1;
            }
            let n = splits.len() as f64;
            Ok(HeatRow {
                scale,
                mean_val_acc: val / n,
                mean_test_micro_f1: test / n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.mean_val_acc > rows[best].mean_val_acc {
            best = i;
        }
    }
    Ok(HeatBaseline { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_tile_the_spectrum() {
        for step in [1.0, 0.5, 0.25] {
            let bands = frequency_bands(step).unwrap();
            assert_eq!(bands.len(), (2.0 / step) as usize);
            assert_eq!(bands[0].0, 0.0);
            assert_eq!(bands.last().unwrap().1, 2.0);
            for l in [-1e-15, 0.0, 0.25, 0.5, 0.999, 1.0, 1.75, 2.0] {
                assert_eq!(bands.iter().filter(|(lo, hi)| in_band(l, *lo, *hi)).count(), 1, "λ = {l}");
            }
        }
        assert!(frequency_bands(0.3).is_err());
    }

    #[test]
    fn head_masks() {
        assert_eq!(HeadMode::KeepOne.scale(3, 1), vec![0.0, 1.0, 0.0]);
        assert_eq!(HeadMode::DropOne.scale(3, 1), vec![1.0, 0.0, 1.0]);
        assert_eq!(HeadMode::from_name("drop-one").unwrap(), HeadMode::DropOne);
        assert!(HeadMode::from_name("drop-two").is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
