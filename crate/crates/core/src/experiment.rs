//! Distribution-shift experiment: reconstruct phantoms with a mismatched
//! prior, a matched prior and the test-time adapted mismatched prior.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::deq::{loss_selfsup, DeqBackwardConfig};
use crate::error::{invalid, Result};
use crate::fixed_point::{run_pnp, PnPConfig};
use crate::forward_model::{mask_for_ratio, MeasurementOp};
use crate::image::{ComplexImage, RealImage};
use crate::metrics::{psnr, ssim};
use crate::synthetic::{gen_phantom, gen_texture};
use crate::ttt::{best_iterate, ttt_adapt, TttConfig, TttOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageDomain {
    Phantom,
    Texture,
}

impl ImageDomain {
    pub fn generate(self, n: usize, seed: u64) -> Result<RealImage> {
        match self {
            ImageDomain::Phantom => gen_phantom(n, seed),
            ImageDomain::Texture => gen_texture(n, seed),
        }
    }

    /// `count` images with seeds `first_seed, first_seed + 1, ...`.
    pub fn dataset(self, n: usize, count: usize, first_seed: u64) -> Result<Vec<RealImage>> {
        (0..count as u64).map(|i| self.generate(n, first_seed + i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorLabel {
    Natural,
    Matched,
    PnpTtt,
}

impl PriorLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorLabel::Natural => "natural",
            PriorLabel::Matched => "matched",
            PriorLabel::PnpTtt => "pnp_ttt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub prior: PriorLabel,
    pub cs_ratio: f64,
    pub image_id: usize,
    /// `-1` for reconstructions without adaptation.
    pub ttt_iteration: i64,
    pub loss: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSettings {
    pub experiment_id: String,
    pub cs_ratios: Vec<f64>,
    pub mask_seed: u64,
    /// Seed mixed into the (noise-free by default) measurement simulation.
    pub measurement_seed: u64,
    pub noise_sigma: f64,
    pub pnp: PnPConfig,
    pub deq: DeqBackwardConfig,
    pub ttt: TttConfig,
    /// Write measured wall times; off keeps result files reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for ShiftSettings {
    fn default() -> Self {
        Self {
            experiment_id: "shift".into(),
            cs_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            mask_seed: 0,
            measurement_seed: 0,
            noise_sigma: 0.0,
            pnp: PnPConfig::default(),
            deq: DeqBackwardConfig::default(),
            ttt: TttConfig::default(),
            record_wall_time: false,
        }
    }
}

impl ShiftSettings {
    pub fn validate(&self) -> Result<()> {
        if self.cs_ratios.is_empty() || self.cs_ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(invalid("cs ratios must be non-empty and lie in (0, 1]"));
        }
        self.pnp.validate()?;
        self.deq.validate()?;
        self.ttt.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub cs_ratio: f64,
    pub image_id: usize,
    pub prior: PriorLabel,
    pub message: String,
}

/// Results of one (ratio, image) work item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemResult {
    pub ratio_index: usize,
    pub image_id: usize,
    pub rows: Vec<ResultRow>,
    /// Highest-PSNR adaptation iterate.
    pub best: Option<ResultRow>,
    pub failures: Vec<ItemFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment_id: String,
    pub cs_ratios: Vec<f64>,
    pub num_images: usize,
    /// Rows: natural, matched, pnp_ttt (per-image best iterate), pnp_ttt_fixed
    /// (single best iteration per ratio), pnp_ttt_final, and the delta row.
    pub table: Vec<TableRow>,
    /// Iteration chosen for `pnp_ttt_fixed` at each ratio.
    pub fixed_iteration: Vec<usize>,
    /// Mean PSNR and loss over images at each recorded adaptation iteration, per ratio.
    pub trace_iterations: Vec<Vec<usize>>,
    pub trace_mean_psnr: Vec<Vec<f64>>,
    pub trace_mean_loss: Vec<Vec<f64>>,
    pub failures: Vec<ItemFailure>,
}

impl Summary {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.label == label)
    }
}

pub const DELTA_LABEL: &str = "pnp_ttt - natural";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub best: Vec<ResultRow>,
    pub summary: Summary,
}

/// Simulated measurement of `gt`; the noise seed depends on the ratio value
/// and image id only, so single-ratio runs reproduce sweep items.
pub fn measure(settings: &ShiftSettings, op: &MeasurementOp, ratio: f64, image_id: usize, gt: &RealImage) -> Result<ComplexImage> {
    let seed = settings.measurement_seed ^ ratio.to_bits().rotate_left(17) ^ image_id as u64;
    op.simulate(gt, seed)
}

/// PnP reconstruction from zero with a fixed prior, as a result row.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    settings: &ShiftSettings,
    label: PriorLabel,
    op: &MeasurementOp,
    y: &ComplexImage,
    gt: &RealImage,
    params: &DenoiserParams,
    ratio: f64,
    image_id: usize,
) -> Result<(ResultRow, RealImage)> {
    let start = Instant::now();
    let (n, m) = gt.shape();
    let res = run_pnp(&RealImage::zeros(n, m), y, op, params, &settings.pnp)?;
    let row = ResultRow {
        experiment_id: settings.experiment_id.clone(),
        prior: label,
        cs_ratio: ratio,
        image_id,
        ttt_iteration: -1,
        loss: loss_selfsup(&res.x_bar, y, op, params, settings.pnp.gamma)?,
        psnr_db: psnr(&res.x_bar, gt, 1.0)?,
        ssim: ssim(&res.x_bar, gt)?,
        wall_time_s: if settings.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    Ok((row, res.x_bar))
}

fn failed_row(settings: &ShiftSettings, label: PriorLabel, ratio: f64, image_id: usize, iteration: i64) -> ResultRow {
    ResultRow {
        experiment_id: settings.experiment_id.clone(),
        prior: label,
        cs_ratio: ratio,
        image_id,
        ttt_iteration: iteration,
        loss: f64::NAN,
        psnr_db: f64::NAN,
        ssim: f64::NAN,
        wall_time_s: 0.0,
    }
}

/// Adaptation rows (one per recorded iteration) and the raw outcome.
#[derive(Debug)]
pub struct Adapted {
    pub rows: Vec<ResultRow>,
    pub best: Option<ResultRow>,
    pub outcome: TttOutcome,
}

#[allow(clippy::too_many_arguments)]
pub fn adapt(
    settings: &ShiftSettings,
    prior: &DenoiserParams,
    op: &MeasurementOp,
    y: &ComplexImage,
    gt: &RealImage,
    ratio: f64,
    image_id: usize,
) -> Result<Adapted> {
    let start = Instant::now();
    let (n, m) = gt.shape();
    let x0 = RealImage::zeros(n, m);
    let outcome = ttt_adapt(&x0, y, op, prior, &settings.pnp, &settings.deq, &settings.ttt, Some(gt))?;
    let elapsed = if settings.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let rows: Vec<ResultRow> = outcome
        .trace
        .entries
        .iter()
        .map(|e| ResultRow {
            experiment_id: settings.experiment_id.clone(),
            prior: PriorLabel::PnpTtt,
            cs_ratio: ratio,
            image_id,
            ttt_iteration: e.index as i64,
            loss: e.loss,
            psnr_db: e.psnr_db.unwrap_or(f64::NAN),
            ssim: e.ssim.unwrap_or(f64::NAN),
            wall_time_s: elapsed,
        })
        .collect();
    let best = if rows.is_empty() {
        None
    } else {
        let (i, _) = best_iterate(&outcome.trace, &outcome.iterates, Some(gt))?;
        Some(rows[i].clone())
    };
    Ok(Adapted { rows, best, outcome })
}

/// Runs one work item: natural and matched reconstructions plus adaptation
/// of the natural prior.
pub fn run_item(
    settings: &ShiftSettings,
    natural: &DenoiserParams,
    matched: &DenoiserParams,
    op: &MeasurementOp,
    ratio_index: usize,
    image_id: usize,
    gt: &RealImage,
) -> Result<ItemResult> {
    let ratio = settings.cs_ratios[ratio_index];
    let y = measure(settings, op, ratio, image_id, gt)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut fail = |prior: PriorLabel, e: &crate::Error| {
        warn!("{} failed (ratio {ratio}, image {image_id}): {e}", prior.as_str());
        failures.push(ItemFailure { cs_ratio: ratio, image_id, prior, message: e.to_string() });
    };
    for (label, params) in [(PriorLabel::Natural, natural), (PriorLabel::Matched, matched)] {
        match reconstruct(settings, label, op, &y, gt, params, ratio, image_id) {
            Ok((row, _)) => rows.push(row),
            Err(e) => {
                fail(label, &e);
                rows.push(failed_row(settings, label, ratio, image_id, -1));
            }
        }
    }
    let mut best = None;
    match adapt(settings, natural, op, &y, gt, ratio, image_id) {
        Ok(a) => {
            if let Some(e) = &a.outcome.failure {
                fail(PriorLabel::PnpTtt, e);
            }
            rows.extend(a.rows);
            best = a.best;
        }
        Err(e) => fail(PriorLabel::PnpTtt, &e),
    }
    info!("ratio {ratio} image {image_id} done");
    Ok(ItemResult { ratio_index, image_id, rows, best, failures })
}

/// Full ratio x image grid. Work items run on the current rayon pool; output
/// order is (ratio, image, prior, iteration) regardless of scheduling.
pub fn run_shift_experiment(
    settings: &ShiftSettings,
    natural: &DenoiserParams,
    matched: &DenoiserParams,
    test_images: &[RealImage],
) -> Result<SweepOutput> {
    settings.validate()?;
    if test_images.is_empty() {
        return Err(invalid("no test images"));
    }
    let (n, m) = test_images[0].shape();
    if n != m || test_images.iter().any(|im| im.shape() != (n, m)) {
        return Err(invalid("test images must be square and share one size"));
    }
    let ops: Vec<MeasurementOp> = settings
        .cs_ratios
        .iter()
        .map(|&r| MeasurementOp::with_noise(mask_for_ratio(n, r, settings.mask_seed)?, settings.noise_sigma))
        .collect::<Result<_>>()?;
    let items: Vec<(usize, usize)> =
        (0..settings.cs_ratios.len()).flat_map(|r| (0..test_images.len()).map(move |i| (r, i))).collect();
    let results: Vec<ItemResult> = items
        .par_iter()
        .map(|&(r, i)| run_item(settings, natural, matched, &ops[r], r, i, &test_images[i]))
        .collect::<Result<_>>()?;
    let summary = summarize(settings, test_images.len(), &results);
    let rows = results.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let best = results.iter().filter_map(|r| r.best.clone()).collect();
    Ok(SweepOutput { rows, best, summary })
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

pub fn summarize(settings: &ShiftSettings, num_images: usize, results: &[ItemResult]) -> Summary {
    let nr = settings.cs_ratios.len();
    let by_ratio = |r: usize| results.iter().filter(move |it| it.ratio_index == r);
    let plain = |label: PriorLabel, r: usize, f: fn(&ResultRow) -> f64| {
        mean(by_ratio(r).flat_map(|it| it.rows.iter().filter(|row| row.prior == label).map(f)))
    };
    let mut table = Vec::new();
    for label in [PriorLabel::Natural, PriorLabel::Matched] {
        table.push(TableRow {
            label: label.as_str().into(),
            psnr_db: (0..nr).map(|r| plain(label, r, |row| row.psnr_db)).collect(),
            ssim: (0..nr).map(|r| plain(label, r, |row| row.ssim)).collect(),
        });
    }
    table.push(TableRow {
        label: PriorLabel::PnpTtt.as_str().into(),
        psnr_db: (0..nr).map(|r| mean(by_ratio(r).filter_map(|it| it.best.as_ref().map(|b| b.psnr_db)))).collect(),
        ssim: (0..nr).map(|r| mean(by_ratio(r).filter_map(|it| it.best.as_ref().map(|b| b.ssim)))).collect(),
    });

    let mut trace_iterations = Vec::with_capacity(nr);
    let mut trace_mean_psnr = Vec::with_capacity(nr);
    let mut trace_mean_loss = Vec::with_capacity(nr);
    let mut trace_mean_ssim = Vec::with_capacity(nr);
    for r in 0..nr {
        let mut iterations: Vec<i64> = by_ratio(r)
            .flat_map(|it| it.rows.iter().filter(|row| row.prior == PriorLabel::PnpTtt).map(|row| row.ttt_iteration))
            .collect();
        iterations.sort_unstable();
        iterations.dedup();
        let at = |k: i64, f: fn(&ResultRow) -> f64| {
            mean(by_ratio(r).flat_map(|it| {
                it.rows.iter().filter(move |row| row.prior == PriorLabel::PnpTtt && row.ttt_iteration == k).map(f)
            }))
        };
        trace_mean_psnr.push(iterations.iter().map(|&k| at(k, |row| row.psnr_db)).collect::<Vec<_>>());
        trace_mean_ssim.push(iterations.iter().map(|&k| at(k, |row| row.ssim)).collect::<Vec<_>>());
        trace_mean_loss.push(iterations.iter().map(|&k| at(k, |row| row.loss)).collect::<Vec<_>>());
        trace_iterations.push(iterations.into_iter().map(|k| k as usize).collect::<Vec<_>>());
    }
    let fixed_index: Vec<Option<usize>> = trace_mean_psnr
        .iter()
        .map(|p| {
            let mut best: Option<usize> = None;
            for (i, &v) in p.iter().enumerate() {
                if !v.is_nan() && best.is_none_or(|b| v > p[b]) {
                    best = Some(i);
                }
            }
            best
        })
        .collect();
    let pick = |series: &[Vec<f64>], idx: &[Option<usize>]| -> Vec<f64> {
        series.iter().zip(idx).map(|(s, i)| i.map_or(f64::NAN, |i| s[i])).collect()
    };
    table.push(TableRow {
        label: "pnp_ttt_fixed".into(),
        psnr_db: pick(&trace_mean_psnr, &fixed_index),
        ssim: pick(&trace_mean_ssim, &fixed_index),
    });
    let last: Vec<Option<usize>> = trace_mean_psnr.iter().map(|p| p.len().checked_sub(1)).collect();
    table.push(TableRow {
        label: "pnp_ttt_final".into(),
        psnr_db: pick(&trace_mean_psnr, &last),
        ssim: pick(&trace_mean_ssim, &last),
    });
    let delta = TableRow {
        label: DELTA_LABEL.into(),
        psnr_db: table[2].psnr_db.iter().zip(&table[0].psnr_db).map(|(a, b)| a - b).collect(),
        ssim: table[2].ssim.iter().zip(&table[0].ssim).map(|(a, b)| a - b).collect(),
    };
    table.push(delta);
    let fixed_iteration = fixed_index
        .iter()
        .zip(&trace_iterations)
        .map(|(i, its)| i.map_or(0, |i| its[i]))
        .collect();

    Summary {
        experiment_id: settings.experiment_id.clone(),
        cs_ratios: settings.cs_ratios.clone(),
        num_images,
        table,
        fixed_iteration,
        trace_iterations,
        trace_mean_psnr,
        trace_mean_loss,
        failures: results.iter().flat_map(|r| r.failures.iter().cloned()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::fixed_point::AndersonConfig;

    fn tiny_prior(seed: u64) -> DenoiserParams {
        let cfg = DenoiserConfig { depth: 2, channels: 2, lipschitz_target: 0.5, residual: false, sn_reference_size: 32, ..Default::default() };
        let mut p = init_params(&cfg, seed).unwrap();
        for _ in 0..10 {
            p.spectral_normalize_in_place();
        }
        p
    }

    fn settings() -> ShiftSettings {
        ShiftSettings {
            cs_ratios: vec![0.2, 0.5],
            pnp: PnPConfig { max_iter: 15, ..Default::default() },
            deq: DeqBackwardConfig { anderson: AndersonConfig { max_iter: 15, ..Default::default() }, ..Default::default() },
            ttt: TttConfig { num_iter: 2, lr: 1e-3, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn sweep_layout_and_delta_row() {
        let imgs = ImageDomain::Phantom.dataset(32, 2, 0).unwrap();
        let out = run_shift_experiment(&settings(), &tiny_prior(1), &tiny_prior(2), &imgs).unwrap();
        // per item: natural, matched, 3 adaptation rows
        assert_eq!(out.rows.len(), 2 * 2 * 5);
        assert_eq!(out.best.len(), 4);
        let keys: Vec<(u64, usize, i64)> =
            out.rows.iter().map(|r| (r.cs_ratio.to_bits(), r.image_id, r.ttt_iteration)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let s = &out.summary;
        let delta = s.row(DELTA_LABEL).unwrap();
        let ttt = s.row("pnp_ttt").unwrap();
        let nat = s.row("natural").unwrap();
        for r in 0..2 {
            assert_eq!(delta.psnr_db[r], ttt.psnr_db[r] - nat.psnr_db[r]);
            assert!(ttt.psnr_db[r] >= s.trace_mean_psnr[r][0] - 1e-12);
        }
        assert_eq!(s.trace_iterations[0], vec![0, 1, 2]);
        assert!(s.failures.is_empty());
    }

    #[test]
    fn sweep_is_deterministic_and_iteration_zero_matches_natural() {
        let imgs = ImageDomain::Phantom.dataset(32, 1, 5).unwrap();
        let a = run_shift_experiment(&settings(), &tiny_prior(3), &tiny_prior(4), &imgs).unwrap();
        let b = run_shift_experiment(&settings(), &tiny_prior(3), &tiny_prior(4), &imgs).unwrap();
        assert_eq!(a, b);
        for chunk in a.rows.chunks(5) {
            assert_eq!(chunk[0].prior, PriorLabel::Natural);
            assert_eq!(chunk[2].ttt_iteration, 0);
            assert_eq!(chunk[0].psnr_db, chunk[2].psnr_db);
            assert_eq!(chunk[0].loss, chunk[2].loss);
        }
    }

    #[test]
    fn invalid_settings_rejected() {
        let imgs = ImageDomain::Phantom.dataset(32, 1, 0).unwrap();
        let p = tiny_prior(1);
        let bad = ShiftSettings { cs_ratios: vec![0.0], ..settings() };
        assert!(run_shift_experiment(&bad, &p, &p, &imgs).is_err());
        assert!(run_shift_experiment(&settings(), &p, &p, &[]).is_err());
    }
}
