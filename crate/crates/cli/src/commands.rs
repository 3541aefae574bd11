//! Subcommand implementations. Each takes a fully resolved config (flags
//! already applied) and returns what it wrote, so tests can drive them
//! without the binary.

use std::path::{Path, PathBuf};

use log::{info, warn};
use pnpttt_core::denoiser::{init_params, DenoiserParams};
use pnpttt_core::experiment::{
    adapt, measure, reconstruct as reconstruct_one, run_shift_experiment, ImageDomain, PriorLabel, ResultRow,
    SweepOutput,
};
use pnpttt_core::forward_model::{mask_for_ratio, MeasurementOp};
use pnpttt_core::image::RealImage;
use pnpttt_core::training::{make_training_pairs, train_denoiser, TrainReport};
use rayon::prelude::*;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::results::{mean_trace, write_json, write_mean_trace, write_rows, write_trace, TraceRow};
use crate::{checkpoint, dataset, pgm};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const PHANTOM_TRAIN: &str = "phantom_train.ds";
pub const TEXTURE_TRAIN: &str = "texture_train.ds";
pub const PHANTOM_TEST: &str = "phantom_test.ds";

fn manifest(cfg: &ExperimentConfig, command: &str, outputs: &[&str]) -> serde_json::Value {
    json!({
        "command": command,
        "code_version": CODE_VERSION,
        "seeds": cfg.seeds,
        "outputs": outputs,
        "config": cfg,
    })
}

fn ratio_tag(ratio: f64) -> String {
    format!("r{:03}", (ratio * 1000.0).round() as u64)
}

#[derive(Debug)]
pub struct GenDataOutput {
    pub phantom_train: PathBuf,
    pub texture_train: PathBuf,
    pub phantom_test: PathBuf,
}

/// Writes training sets of both domains plus held-out test phantoms.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenDataOutput> {
    let n = cfg.image_size;
    let seeds = &cfg.seeds;
    let sets = [
        (PHANTOM_TRAIN, ImageDomain::Phantom, cfg.num_train_images, seeds.data),
        (TEXTURE_TRAIN, ImageDomain::Texture, cfg.num_train_images, seeds.data),
        (PHANTOM_TEST, ImageDomain::Phantom, cfg.num_test_images, seeds.test_data()),
    ];
    for (name, domain, count, first_seed) in sets {
        let images = domain.dataset(n, count, first_seed)?;
        dataset::save(&out.join(name), &images, (n, n))?;
        info!("wrote {count} {domain:?} images to {}", out.join(name).display());
    }
    let mut m = manifest(cfg, "gen-data", &[PHANTOM_TRAIN, TEXTURE_TRAIN, PHANTOM_TEST]);
    m["datasets"] = json!([
        { "file": PHANTOM_TRAIN, "domain": "phantom", "count": cfg.num_train_images, "first_seed": seeds.data, "size": n },
        { "file": TEXTURE_TRAIN, "domain": "texture", "count": cfg.num_train_images, "first_seed": seeds.data, "size": n },
        { "file": PHANTOM_TEST, "domain": "phantom", "count": cfg.num_test_images, "first_seed": seeds.test_data(), "size": n },
    ]);
    write_json(&out.join("manifest.json"), &m)?;
    Ok(GenDataOutput {
        phantom_train: out.join(PHANTOM_TRAIN),
        texture_train: out.join(TEXTURE_TRAIN),
        phantom_test: out.join(PHANTOM_TEST),
    })
}

/// Trains a prior from the config's initialization on `data`, saving the
/// checkpoint to `output` and the report next to it as `<output>.json`.
pub fn train_prior(cfg: &ExperimentConfig, data: &Path, output: &Path) -> Result<(DenoiserParams, TrainReport)> {
    let images = dataset::load(data)?;
    if images.is_empty() {
        return Err(CliError::Config(format!("{} holds no images", data.display())));
    }
    let train_cfg = cfg.train_config();
    let (pairs, skipped) = make_training_pairs(&images, &train_cfg)?;
    if skipped > 0 {
        warn!("{skipped} images smaller than the patch size were skipped");
    }
    let init = init_params(&cfg.denoiser, cfg.seeds.init)?;
    let (params, report) = train_denoiser(&init, &pairs, &train_cfg)?;
    checkpoint::save(output, &params)?;
    let mut report_path = output.as_os_str().to_owned();
    report_path.push(".json");
    write_json(
        Path::new(&report_path),
        &json!({ "code_version": CODE_VERSION, "data": data, "config": cfg, "report": report }),
    )?;
    println!(
        "validation PSNR {:.2} dB (noisy input {:.2} dB)",
        report.validation_psnr, report.validation_input_psnr
    );
    Ok((params, report))
}

/// Test images from `data`, else `cfg.test_data`, else freshly generated
/// phantoms; at most `num_test_images`, all `image_size` square.
pub fn test_images(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<RealImage>> {
    let mut images = match data.or(cfg.test_data.as_deref()) {
        Some(path) => dataset::load(path)?,
        None => ImageDomain::Phantom.dataset(cfg.image_size, cfg.num_test_images, cfg.seeds.test_data())?,
    };
    images.truncate(cfg.num_test_images);
    if images.is_empty() {
        return Err(CliError::Config("no test images".into()));
    }
    let n = cfg.image_size;
    if let Some(im) = images.iter().find(|im| im.shape() != (n, n)) {
        let (h, w) = im.shape();
        return Err(CliError::Config(format!("configured image size {n}x{n} does not match test data {h}x{w}")));
    }
    Ok(images)
}

fn operators(cfg: &ExperimentConfig) -> Result<Vec<MeasurementOp>> {
    cfg.cs_ratios
        .iter()
        .map(|&r| Ok(MeasurementOp::with_noise(mask_for_ratio(cfg.image_size, r, cfg.seeds.mask)?, cfg.noise_sigma)?))
        .collect()
}

fn load_prior(cfg: &ExperimentConfig, path: &Path) -> Result<DenoiserParams> {
    let params = checkpoint::load(path)?;
    if params.config != cfg.denoiser {
        warn!("{}: denoiser config differs from the experiment config; using the checkpoint's", path.display());
    }
    Ok(params)
}

#[derive(Debug)]
pub struct ReconstructOutput {
    pub rows: Vec<ResultRow>,
    /// Reconstructions per ratio, in image order.
    pub images: Vec<Vec<RealImage>>,
}

/// PnP reconstruction of every test image at every ratio with one prior.
/// Writes `results.csv` and one reconstruction dataset per ratio, plus PGM
/// previews when `pgm_previews` is set.
pub fn reconstruct(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    data: Option<&Path>,
    label: PriorLabel,
    out: &Path,
    pgm_previews: bool,
) -> Result<ReconstructOutput> {
    let params = load_prior(cfg, ckpt)?;
    let images = test_images(cfg, data)?;
    let ops = operators(cfg)?;
    let settings = cfg.shift_settings();
    let mut rows = Vec::new();
    let mut recons = Vec::new();
    for (op, &ratio) in ops.iter().zip(&cfg.cs_ratios) {
        let done = images
            .par_iter()
            .enumerate()
            .map(|(i, gt)| {
                let y = measure(&settings, op, ratio, i, gt)?;
                reconstruct_one(&settings, label, op, &y, gt, &params, ratio, i)
            })
            .collect::<pnpttt_core::Result<Vec<_>>>()?;
        let (r, x): (Vec<_>, Vec<_>) = done.into_iter().unzip();
        let tag = ratio_tag(ratio);
        dataset::save(&out.join("reconstructions").join(format!("{tag}.ds")), &x, (cfg.image_size, cfg.image_size))?;
        if pgm_previews {
            for (i, im) in x.iter().enumerate() {
                pgm::save(&out.join("reconstructions").join(format!("{tag}_i{i:03}.pgm")), im)?;
            }
        }
        rows.extend(r);
        recons.push(x);
    }
    write_rows(&out.join("results.csv"), &rows)?;
    write_json(&out.join("manifest.json"), &manifest(cfg, "reconstruct", &["results.csv", "reconstructions"]))?;
    Ok(ReconstructOutput { rows, images: recons })
}

#[derive(Debug)]
pub struct TttOutput {
    pub rows: Vec<ResultRow>,
    pub best: Vec<ResultRow>,
    pub trace: Vec<TraceRow>,
    /// `(cs_ratio, image_id, message)` of every failed adaptation.
    pub failures: Vec<(f64, usize, String)>,
}

/// Test-time adaptation of one prior on every test image at every ratio.
/// A failed inner solve ends that image's trace and the run moves on.
pub fn ttt(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    data: Option<&Path>,
    out: &Path,
    save_adapted: Option<&Path>,
) -> Result<TttOutput> {
    let params = load_prior(cfg, ckpt)?;
    let images = test_images(cfg, data)?;
    let ops = operators(cfg)?;
    let settings = cfg.shift_settings();
    let items: Vec<(usize, usize)> =
        (0..ops.len()).flat_map(|r| (0..images.len()).map(move |i| (r, i))).collect();
    let results = items
        .par_iter()
        .map(|&(r, i)| {
            let ratio = cfg.cs_ratios[r];
            let attempt = measure(&settings, &ops[r], ratio, i, &images[i])
                .and_then(|y| adapt(&settings, &params, &ops[r], &y, &images[i], ratio, i));
            let adapted = match attempt {
                Ok(a) => a,
                Err(e) => {
                    warn!("adaptation failed (ratio {ratio}, image {i}): {e}");
                    let row = ResultRow {
                        experiment_id: cfg.experiment_id.clone(),
                        prior: PriorLabel::PnpTtt,
                        cs_ratio: ratio,
                        image_id: i,
                        ttt_iteration: 0,
                        loss: f64::NAN,
                        psnr_db: f64::NAN,
                        ssim: f64::NAN,
                        wall_time_s: 0.0,
                    };
                    return Ok((vec![row], None, Vec::new(), Some(e.to_string())));
                }
            };
            if let Some(dir) = save_adapted {
                checkpoint::save(&dir.join(format!("{}_i{i:03}.ckpt", ratio_tag(ratio))), &adapted.outcome.params)?;
            }
            let trace = adapted
                .outcome
                .trace
                .entries
                .iter()
                .map(|e| TraceRow {
                    experiment_id: cfg.experiment_id.clone(),
                    cs_ratio: ratio,
                    image_id: i,
                    iteration: e.index,
                    loss: e.loss,
                    psnr_db: e.psnr_db.unwrap_or(f64::NAN),
                    ssim: e.ssim.unwrap_or(f64::NAN),
                    forward_residual: e.forward_residual,
                    adjoint_residual: e.adjoint_residual,
                })
                .collect();
            let failure = adapted.outcome.failure.as_ref().map(ToString::to_string);
            Ok((adapted.rows, adapted.best, trace, failure))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut output = TttOutput { rows: Vec::new(), best: Vec::new(), trace: Vec::new(), failures: Vec::new() };
    for (&(r, i), (rows, best, trace, failure)) in items.iter().zip(results) {
        output.rows.extend(rows);
        output.best.extend(best);
        output.trace.extend(trace);
        if let Some(msg) = failure {
            output.failures.push((cfg.cs_ratios[r], i, msg));
        }
    }
    write_rows(&out.join("results.csv"), &output.rows)?;
    write_rows(&out.join("best.csv"), &output.best)?;
    write_trace(&out.join("trace.csv"), &output.trace)?;
    let mut m = manifest(cfg, "ttt", &["results.csv", "best.csv", "trace.csv"]);
    m["failures"] = json!(output.failures);
    write_json(&out.join("manifest.json"), &m)?;
    Ok(output)
}

/// Both prior checkpoints, or a config error naming every missing one.
pub fn sweep_checkpoints(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    let mut missing = Vec::new();
    let mut check = |key: &str, path: &Option<PathBuf>| match path {
        Some(p) if p.is_file() => Some(p.clone()),
        Some(p) => {
            missing.push(format!("{key} ({} not found)", p.display()));
            None
        }
        None => {
            missing.push(format!("{key} (not set)"));
            None
        }
    };
    let natural = check("natural_checkpoint", &cfg.natural_checkpoint);
    let matched = check("matched_checkpoint", &cfg.matched_checkpoint);
    match (natural, matched) {
        (Some(n), Some(m)) => Ok((n, m)),
        _ => Err(CliError::Config(format!("missing checkpoints: {}", missing.join(", ")))),
    }
}

/// Full ratio x image grid with the mismatched, matched and adapted priors.
/// Writes `results.csv`, `best.csv`, `trace_mean.csv`, `summary.json` and
/// `manifest.json`.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutput> {
    let (natural_path, matched_path) = sweep_checkpoints(cfg)?;
    let natural = load_prior(cfg, &natural_path)?;
    let matched = load_prior(cfg, &matched_path)?;
    let images = test_images(cfg, None)?;
    let output = run_shift_experiment(&cfg.shift_settings(), &natural, &matched, &images)?;
    write_rows(&out.join("results.csv"), &output.rows)?;
    write_rows(&out.join("best.csv"), &output.best)?;
    write_mean_trace(&out.join("trace_mean.csv"), &mean_trace(&output.summary))?;
    write_json(&out.join("summary.json"), &output.summary)?;
    write_json(
        &out.join("manifest.json"),
        &manifest(cfg, "sweep", &["results.csv", "best.csv", "trace_mean.csv", "summary.json"]),
    )?;
    Ok(output)
}
