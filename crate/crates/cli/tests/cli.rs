use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dps_mri::phantoms::{load_manifest, ClassLabel, Split};

fn dps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dps")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = dps(args);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_MODEL: &str = r#"
[model]
base_channels = 8
channel_mult = [1, 2]
per_level_resolutions = [[16, 16], [8, 8]]
embed_dim = 16
norm_groups = 4
use_class_embedding = true
sigma_data = 0.5
p_mean = -1.2
p_std = 1.2

[train]
steps = 2
batch_size = 2
warmup_steps = 1
log_every = 2
max_val_items = 2
"#;

fn tiny_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["--seed", "3", "data", "gen", "--out", p(&data), "--train", "5", "--val", "1", "--test", "1", "--sizes", "48"]);
    data
}

#[test]
fn full_command_line_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = tiny_dataset(dir);
    let manifest = load_manifest(&data).unwrap();
    assert_eq!(manifest.entries.len(), 4 * 7);

    let den_cfg = dir.join("den.toml");
    fs::write(&den_cfg, TINY_MODEL.replace("[model]", "noise_multiplier = 1.5\nn2n_correction = false\n\n[arch]").replace("use_class_embedding = true", "use_class_embedding = false")).unwrap();
    let den_ckpt = dir.join("den.ckpt");
    ok(&["denoise", "train", "--data", p(&data), "--out", p(&den_ckpt), "--config", p(&den_cfg)]);
    let den = dir.join("denoised");
    ok(&["denoise", "apply", "--data", p(&data), "--ckpt", p(&den_ckpt), "--out", p(&den)]);
    assert_eq!(load_manifest(&den).unwrap().entries.len(), manifest.entries.len());

    let model_cfg = dir.join("model.toml");
    fs::write(&model_cfg, TINY_MODEL).unwrap();
    let ckpt = dir.join("embed.ckpt");
    ok(&["scorenet", "train", "--data", p(&den), "--regime", "all-embed", "--out", p(&ckpt), "--config", p(&model_cfg)]);
    let per = dir.join("se.ckpt");
    fs::write(&model_cfg, TINY_MODEL.replace("use_class_embedding = true", "use_class_embedding = false")).unwrap();
    ok(&["scorenet", "train", "--data", p(&den), "--regime", "per-class", "--class", "SE_AX", "--out", p(&per), "--config", p(&model_cfg)]);

    let test_item = manifest.entries.iter().find(|e| e.split == Split::Test && e.label == ClassLabel::FseAx).unwrap();
    let (k, m) = (dir.join("y.bin"), dir.join("mask.toml"));
    let said = ok(&["data", "measure", "--data", p(&data), "--id", &test_item.id, "--r", "2", "--etl", "4", "--out-kspace", p(&k), "--out-mask", p(&m)]);
    assert!(said.starts_with("R = 2"), "{said}");

    let recon = dir.join("recon.f32");
    ok(&[
        "--seed", "1", "recon", "dps", "--kspace", p(&k), "--mask", p(&m), "--out", p(&recon), "--ckpt", p(&ckpt),
        "--class", "FSE_AX", "--ns", "2", "--nt", "4", "--save-samples", "--save-stddev",
    ]);
    let n_px = test_item.height * test_item.width * 4;
    for f in ["recon.f32", "recon.f32.sample0", "recon.f32.sample1", "recon.f32.stddev"] {
        assert_eq!(fs::metadata(dir.join(f)).unwrap().len() as usize, n_px, "{f}");
    }
    assert!(dir.join("recon.f32.toml").exists());
    // Same seed, same bytes.
    let again = dir.join("again.f32");
    ok(&[
        "--seed", "1", "recon", "dps", "--kspace", p(&k), "--mask", p(&m), "--out", p(&again), "--ckpt", p(&ckpt),
        "--class", "FSE_AX", "--ns", "2", "--nt", "4",
    ]);
    assert_eq!(fs::read(&recon).unwrap(), fs::read(&again).unwrap());

    let l1 = dir.join("l1.f32");
    ok(&["recon", "l1", "--kspace", p(&k), "--mask", p(&m), "--out", p(&l1), "--iters", "10"]);
    assert_eq!(fs::metadata(&l1).unwrap().len() as usize, n_px);

    let audit = dir.join("audit");
    ok(&["--seed", "4", "exp", "audit", "--data", p(&data), "--out", p(&audit)]);
    assert!(audit.join("audit.csv").exists() && audit.join("audit.png").exists());

    let results = dir.join("ablation");
    let exp_cfg = dir.join("exp.toml");
    fs::write(
        &exp_cfg,
        format!(
            r#"dataset = "{}"
output_dir = "{}"
max_slices = 2
baselines = ["l1-wavelet", "zero-filled"]
r_targets = [2.0]
ns_sweep = [1, 2]

[sampler]
n_t = 3
n_s = 1

[cs]
n_iters = 5

[[models]]
regime = "all-embed"
data = "denoised"
checkpoint = "{}"
"#,
            p(&data),
            p(&results),
            p(&ckpt)
        ),
    )
    .unwrap();
    let said = ok(&["exp", "ablation", "--config", p(&exp_cfg)]);
    assert!(said.starts_with("6 rows"), "{said}");
    let csv = fs::read_to_string(results.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("slice_id,class,method,regime,R_target,R_achieved,N_s,nrmse,wall_time_s\n"));

    let rerendered = dir.join("rerendered");
    ok(&["report", "--results", p(&results), "--out", p(&rerendered)]);
    assert_eq!(csv, fs::read_to_string(rerendered.join("results.csv")).unwrap());

    let sweep_cfg = dir.join("sweep.toml");
    fs::write(&sweep_cfg, fs::read_to_string(&exp_cfg).unwrap().replace(p(&results), p(&dir.join("sweep")))).unwrap();
    let said = ok(&["exp", "sweep", "--config", p(&sweep_cfg)]);
    assert!(said.starts_with("4 rows"), "{said}");
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // Unknown verb and missing required flag (argument parsing).
    assert_eq!(code(&dps(&["frobnicate"])), 2);
    assert_eq!(code(&dps(&["recon", "l1"])), 2);
    // Missing and malformed config files.
    assert_eq!(code(&dps(&["exp", "ablation", "--config", p(&dir.join("nope.toml"))])), 2);
    let bad = dir.join("bad.toml");
    fs::write(&bad, "r_targets = \"fast\"").unwrap();
    assert_eq!(code(&dps(&["exp", "ablation", "--config", p(&bad)])), 2);
    // A config with nothing to evaluate.
    let empty = dir.join("empty.toml");
    fs::write(&empty, "max_slices = 2\n").unwrap();
    let out = dps(&["exp", "sweep", "--config", p(&empty)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
    // A missing checkpoint names the regime.
    let missing = dir.join("missing.toml");
    fs::write(
        &missing,
        format!("dataset = \"{}\"\n[[models]]\nregime = \"all\"\ndata = \"raw\"\n", p(&tiny_dataset(dir))),
    )
    .unwrap();
    let out = dps(&["exp", "ablation", "--config", p(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("all/raw"));
    // Invalid class label and regime.
    assert_eq!(code(&dps(&["scorenet", "train", "--data", p(dir), "--regime", "per-class", "--class", "T2_FLAIR", "--out", "x"])), 2);
    assert_eq!(code(&dps(&["scorenet", "train", "--data", p(dir), "--regime", "some", "--out", "x"])), 2);
}

#[test]
fn numerical_failure_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = tiny_dataset(dir);
    let model_cfg = dir.join("model.toml");
    fs::write(&model_cfg, TINY_MODEL).unwrap();
    let ckpt = dir.join("m.ckpt");
    ok(&["scorenet", "train", "--data", p(&data), "--regime", "all-embed", "--out", p(&ckpt), "--config", p(&model_cfg), "--steps", "1"]);
    let id = load_manifest(&data).unwrap().entries[0].id.clone();
    let (k, m) = (dir.join("y.bin"), dir.join("mask.toml"));
    ok(&["data", "measure", "--data", p(&data), "--id", &id, "--r", "2", "--out-kspace", p(&k), "--out-mask", p(&m)]);
    // An absurd guidance weight overflows the iterate.
    let sampler = dir.join("sampler.toml");
    fs::write(&sampler, "n_t = 5\nguidance_weight = 1e308\n").unwrap();
    let out = dps(&[
        "recon", "dps", "--kspace", p(&k), "--mask", p(&m), "--out", p(&dir.join("x.f32")), "--ckpt", p(&ckpt),
        "--class", "FSE_AX", "--ns", "1", "--config", p(&sampler),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical failure"));
}
