use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use pnpttt_cli::commands::{self, PHANTOM_TEST, PHANTOM_TRAIN, TEXTURE_TRAIN};
use pnpttt_cli::config::ExperimentConfig;
use pnpttt_cli::results::read_trace;
use pnpttt_cli::{checkpoint, dataset, CliError};
use pnpttt_core::denoiser::{denoise, init_params, DenoiserConfig};
use pnpttt_core::experiment::PriorLabel;
use pnpttt_core::image::RealImage;

/// Small, fast configuration shared by most tests.
fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        image_size: 32,
        cs_ratios: vec![0.3],
        num_test_images: 2,
        num_train_images: 6,
        ..Default::default()
    };
    cfg.denoiser = DenoiserConfig { depth: 3, channels: 4, lipschitz_target: 1.5, sn_reference_size: 16, ..Default::default() };
    cfg.train.epochs = 2;
    cfg.train.patch_size = 16;
    cfg.train.patches_per_image = 2;
    cfg.pnp.max_iter = 30;
    cfg.anderson.max_iter = 30;
    cfg.ttt.num_iter = 3;
    cfg
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: ExperimentConfig,
    natural: PathBuf,
    matched: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = small_config();
        commands::gen_data(&cfg, &root.join("data")).unwrap();
        let natural = root.join("natural.ckpt");
        let matched = root.join("matched.ckpt");
        commands::train_prior(&cfg, &root.join("data").join(TEXTURE_TRAIN), &natural).unwrap();
        commands::train_prior(&cfg, &root.join("data").join(PHANTOM_TRAIN), &matched).unwrap();
        Fixture { _dir: dir, root, cfg, natural, matched }
    })
}

fn test_data() -> PathBuf {
    fixture().root.join("data").join(PHANTOM_TEST)
}

#[test]
fn gen_data_is_byte_identical_and_empty_counts_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.num_train_images = 0;
    cfg.num_test_images = 0;
    let out = commands::gen_data(&cfg, &dir.path().join("a")).unwrap();
    assert!(dataset::load(&out.phantom_train).unwrap().is_empty());
    assert_eq!(std::fs::metadata(&out.texture_train).unwrap().len(), dataset::file_size(0, 32, 32) as u64);

    cfg.num_train_images = 3;
    cfg.num_test_images = 2;
    let a = commands::gen_data(&cfg, &dir.path().join("a")).unwrap();
    let b = commands::gen_data(&cfg, &dir.path().join("b")).unwrap();
    for (x, y) in [(&a.phantom_train, &b.phantom_train), (&a.texture_train, &b.texture_train), (&a.phantom_test, &b.phantom_test)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert_eq!(
        std::fs::read(dir.path().join("a/manifest.json")).unwrap(),
        std::fs::read(dir.path().join("b/manifest.json")).unwrap()
    );
    let train = dataset::load(&a.phantom_train).unwrap();
    let test = dataset::load(&a.phantom_test).unwrap();
    assert!(test.iter().all(|t| train.iter().all(|s| s != t)));
}

#[test]
fn unwritable_output_reports_path() {
    let err = commands::gen_data(&small_config(), Path::new("/proc/forbidden/out")).unwrap_err();
    assert!(matches!(err, CliError::Io { .. }));
    assert!(err.to_string().contains("/proc/forbidden"));
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.train.epochs = 0;
    let path = f.root.join("zero.ckpt");
    commands::train_prior(&cfg, &test_data(), &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), init_params(&cfg.denoiser, cfg.seeds.init).unwrap());
    assert!(f.root.join("zero.ckpt.json").is_file());
}

#[test]
fn loaded_checkpoint_reproduces_denoiser_outputs() {
    let f = fixture();
    let (trained, _) = {
        let path = f.root.join("again.ckpt");
        commands::train_prior(&f.cfg, &f.root.join("data").join(PHANTOM_TRAIN), &path).unwrap()
    };
    let loaded = checkpoint::load(&f.matched).unwrap();
    assert_eq!(trained, loaded);
    let x = &dataset::load(&test_data()).unwrap()[0];
    assert_eq!(denoise(x, &trained).unwrap().data(), denoise(x, &loaded).unwrap().data());
}

#[test]
fn corrupt_dataset_fails_training_with_checksum_error() {
    let f = fixture();
    let mut bytes = std::fs::read(test_data()).unwrap();
    bytes[100] ^= 2;
    let bad = f.root.join("bad.ds");
    std::fs::write(&bad, bytes).unwrap();
    let err = commands::train_prior(&f.cfg, &bad, &f.root.join("never.ckpt")).unwrap_err();
    assert!(matches!(err, CliError::Checksum { .. }), "{err}");
}

#[test]
fn reconstruct_is_deterministic_and_writes_outputs() {
    let f = fixture();
    let (a, b) = (f.root.join("rec_a"), f.root.join("rec_b"));
    let ra = commands::reconstruct(&f.cfg, &f.natural, Some(&test_data()), PriorLabel::Natural, &a, true).unwrap();
    commands::reconstruct(&f.cfg, &f.natural, Some(&test_data()), PriorLabel::Natural, &b, false).unwrap();
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
    assert_eq!(ra.rows.len(), 2);
    assert!(ra.rows.iter().all(|r| r.ttt_iteration == -1 && r.prior == PriorLabel::Natural));
    let saved = dataset::load(&a.join("reconstructions/r300.ds")).unwrap();
    assert_eq!(saved, ra.images[0]);
    assert!(a.join("reconstructions/r300_i001.pgm").is_file());
}

#[test]
fn reconstruct_of_zero_measurement_is_near_zero() {
    let f = fixture();
    let zeros = f.root.join("zeros.ds");
    dataset::save(&zeros, &[RealImage::zeros(32, 32)], (32, 32)).unwrap();
    let out = commands::reconstruct(&f.cfg, &f.matched, Some(&zeros), PriorLabel::Matched, &f.root.join("rec_zero"), false)
        .unwrap();
    let x = &out.images[0][0];
    assert!(x.data().iter().all(|v| v.abs() < 0.05), "max {}", x.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
}

#[test]
fn reconstruct_rejects_size_mismatch() {
    let f = fixture();
    let other = f.root.join("small.ds");
    dataset::save(&other, &[RealImage::zeros(16, 16)], (16, 16)).unwrap();
    let err = commands::reconstruct(&f.cfg, &f.natural, Some(&other), PriorLabel::Natural, &f.root.join("rec_bad"), false)
        .unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
}

#[test]
fn ttt_without_iterations_reproduces_reconstruction() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.ttt.num_iter = 0;
    let t = commands::ttt(&cfg, &f.natural, Some(&test_data()), &f.root.join("ttt0"), None).unwrap();
    let r = commands::reconstruct(&cfg, &f.natural, Some(&test_data()), PriorLabel::Natural, &f.root.join("rec0"), false)
        .unwrap();
    assert_eq!(t.rows.len(), r.rows.len());
    for (a, b) in t.rows.iter().zip(&r.rows) {
        assert_eq!(a.ttt_iteration, 0);
        assert_eq!((a.cs_ratio, a.image_id), (b.cs_ratio, b.image_id));
        assert_eq!((a.loss, a.psnr_db, a.ssim), (b.loss, b.psnr_db, b.ssim));
    }
}

#[test]
fn ttt_trace_counts_and_adapted_checkpoints() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.ttt.num_iter = 4;
    cfg.ttt.record_every = 2;
    let out = f.root.join("ttt_trace");
    let adapted = f.root.join("adapted");
    let t = commands::ttt(&cfg, &f.natural, Some(&test_data()), &out, Some(&adapted)).unwrap();
    let trace = read_trace(&out.join("trace.csv")).unwrap();
    assert_eq!(trace.len(), 2 * (4 / 2 + 1));
    assert_eq!(trace.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 2, 4, 0, 2, 4]);
    assert_eq!(t.rows.len(), trace.len());
    assert_eq!(t.best.len(), 2);
    assert!(trace.iter().filter(|r| r.iteration == 4).all(|r| r.adjoint_residual.is_none()));
    assert!(checkpoint::load(&adapted.join("r300_i000.ckpt")).is_ok());
    let none = f.root.join("ttt_nosave");
    commands::ttt(&cfg, &f.natural, Some(&test_data()), &none, None).unwrap();
    assert!(std::fs::read_dir(&none).unwrap().all(|e| !e.unwrap().path().extension().is_some_and(|x| x == "ckpt")));
}

#[test]
fn ttt_marks_diverging_items_failed_and_continues() {
    let f = fixture();
    let mut wild = checkpoint::load(&f.natural).unwrap();
    wild.config.spectral_norm = false;
    wild.config.residual = false;
    for layer in &mut wild.layers {
        layer.weights.iter_mut().for_each(|w| *w *= 40.0);
    }
    let path = f.root.join("wild.ckpt");
    checkpoint::save(&path, &wild).unwrap();
    let t = commands::ttt(&f.cfg, &path, Some(&test_data()), &f.root.join("ttt_wild"), None).unwrap();
    assert_eq!(t.failures.len(), 2);
    assert!(t.rows.iter().all(|r| r.psnr_db.is_nan()));
}

#[test]
fn sweep_lists_missing_checkpoints() {
    let mut cfg = small_config();
    cfg.matched_checkpoint = Some(PathBuf::from("/nonexistent/matched.ckpt"));
    let err = commands::sweep(&cfg, &fixture().root.join("sweep_missing")).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CliError::Config(_)));
    assert!(msg.contains("natural_checkpoint (not set)") && msg.contains("/nonexistent/matched.ckpt"), "{msg}");
}

#[test]
fn single_item_sweep_composes_ttt_and_reconstructions() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.num_test_images = 1;
    cfg.test_data = Some(test_data());
    cfg.natural_checkpoint = Some(f.natural.clone());
    cfg.matched_checkpoint = Some(f.matched.clone());
    let s = commands::sweep(&cfg, &f.root.join("sweep1")).unwrap();
    let nat = commands::reconstruct(&cfg, &f.natural, None, PriorLabel::Natural, &f.root.join("s_nat"), false).unwrap();
    let mat = commands::reconstruct(&cfg, &f.matched, None, PriorLabel::Matched, &f.root.join("s_mat"), false).unwrap();
    let ttt = commands::ttt(&cfg, &f.natural, None, &f.root.join("s_ttt"), None).unwrap();
    let mut expected = nat.rows;
    expected.extend(mat.rows);
    expected.extend(ttt.rows);
    assert_eq!(s.rows, expected);
    assert_eq!(s.best, ttt.best);
    let delta = s.summary.row(pnpttt_core::experiment::DELTA_LABEL).unwrap().psnr_db[0];
    assert_eq!(delta, s.summary.row("pnp_ttt").unwrap().psnr_db[0] - s.summary.row("natural").unwrap().psnr_db[0]);
    for file in ["results.csv", "best.csv", "trace_mean.csv", "summary.json", "manifest.json"] {
        assert!(f.root.join("sweep1").join(file).is_file(), "{file}");
    }
}

#[test]
fn binary_runs_gen_data_with_config_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, "image_size = 32\nnum_test_images = 1\n[seeds]\ndata = 3\n").unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_pnpttt"))
        .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"])
        .args(["gen-data", "--count", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(dataset::load(&out.join(PHANTOM_TRAIN)).unwrap().len(), 2);
    assert_eq!(dataset::load(&out.join(PHANTOM_TEST)).unwrap()[0].shape(), (32, 32));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["data"], 3);

    let failed = Command::new(env!("CARGO_BIN_EXE_pnpttt"))
        .args(["--out", out.to_str().unwrap(), "sweep"])
        .output()
        .unwrap();
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("missing checkpoints"));
}

/// Default-sized phantom prior: denoising gain at the training noise level and
/// near-lossless reconstruction from a full mask.
#[test]
fn trained_phantom_prior_quality() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig { cs_ratios: vec![1.0], num_test_images: 3, ..Default::default() };
    let data = commands::gen_data(&cfg, &dir.path().join("data")).unwrap();
    let ckpt = dir.path().join("matched.ckpt");
    let (_, report) = commands::train_prior(&cfg, &data.phantom_train, &ckpt).unwrap();
    println!("validation {:.2} dB vs input {:.2} dB", report.validation_psnr, report.validation_input_psnr);
    assert!(report.validation_psnr >= report.validation_input_psnr + 2.0);
    cfg.test_data = Some(data.phantom_test);
    let rec = commands::reconstruct(&cfg, &ckpt, None, PriorLabel::Matched, &dir.path().join("rec"), false).unwrap();
    for row in &rec.rows {
        println!("full mask image {}: {:.2} dB", row.image_id, row.psnr_db);
        assert!(row.psnr_db > 40.0);
    }
}
