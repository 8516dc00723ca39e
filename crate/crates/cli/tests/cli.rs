//! Black-box tests of the starclust binary: file outputs, determinism,
//! exit codes, eval tables.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_starclust"))
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("starclust-cli-{}-{}", name, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited with a code")
}

const SMALL_SYNTH: &str = "\
synth.width=96
synth.height=96
synth.n_cluster=40
synth.n_background=30
synth.center_x_px=48
synth.center_y_px=48
synth.cluster_sigma_px=7
synth.psf_sigma_px=2
synth.noise_sigma=10
";

#[test]
fn synth_writes_three_files_and_is_deterministic() {
    let dir = tmpdir("synth");
    let cfg = dir.join("synth.cfg");
    write(&cfg, &format!("seed=9\nout={}\n{SMALL_SYNTH}", dir.join("a").display()));
    let out = bin().args(["synth", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    for f in ["field.fits", "catalogue.csv", "truth.txt"] {
        assert!(dir.join("a").join(f).exists(), "{f} missing");
    }
    let fits = std::fs::read(dir.join("a/field.fits")).unwrap();
    starclust_core::fits::read_fits(&fits, None).expect("generated FITS parses");

    // same seed again, different directory: byte-identical outputs
    let cfg2 = dir.join("synth2.cfg");
    write(&cfg2, &format!("seed=9\nout={}\n{SMALL_SYNTH}", dir.join("b").display()));
    let out = bin().args(["synth", "--config"]).arg(&cfg2).output().unwrap();
    assert_eq!(code(&out), 0);
    for f in ["field.fits", "catalogue.csv", "truth.txt"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn synth_with_no_cluster_records_zero_members() {
    let dir = tmpdir("synth0");
    let cfg = dir.join("synth.cfg");
    write(
        &cfg,
        &format!(
            "seed=3\nout={}\nsynth.width=64\nsynth.height=64\nsynth.n_cluster=0\nsynth.n_background=5\nsynth.center_x_px=32\nsynth.center_y_px=32\n",
            dir.display()
        ),
    );
    let out = bin().args(["synth", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0);
    let truth = std::fs::read_to_string(dir.join("truth.txt")).unwrap();
    assert!(truth.contains("n_members=0"), "truth: {truth}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn synth_rejects_invalid_spec_with_exit_2() {
    let dir = tmpdir("synthbad");
    let cfg = dir.join("synth.cfg");
    // center outside the frame
    write(
        &cfg,
        &format!(
            "out={}\nsynth.width=64\nsynth.height=64\nsynth.center_x_px=500\nsynth.center_y_px=32\n",
            dir.display()
        ),
    );
    let out = bin().args(["synth", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

fn small_field(dir: &Path, seed: u64) -> PathBuf {
    let field = dir.join("field");
    let cfg = dir.join("gen.cfg");
    write(
        &cfg,
        &format!("seed={seed}\nout={}\n{SMALL_SYNTH}", field.display()),
    );
    let out = bin().args(["synth", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0);
    field
}

fn detect_cfg(dir: &Path, field: &Path, out_name: &str, seed: u64) -> PathBuf {
    let cfg = dir.join(format!("{out_name}.cfg"));
    write(
        &cfg,
        &format!(
            "seed={seed}\nout={}\ninput.image={}\ninput.catalogue={}\npatch.sizes=8,16\n\
             train.epochs=2\ntrain.latent_dim=8\nreference.center_x_px=48\nreference.center_y_px=48\nreference.radius_px=14\n",
            dir.join(out_name).display(),
            field.join("field.fits").display(),
            field.join("catalogue.csv").display(),
        ),
    );
    cfg
}

#[test]
fn detect_produces_report_with_schema_fields() {
    let dir = tmpdir("detect");
    let field = small_field(&dir, 11);
    let cfg = detect_cfg(&dir, &field, "det", 11);
    let out = bin().args(["detect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("det/report.json")).unwrap())
            .unwrap();
    for key in ["center_px", "center_sky", "radius_arcsec", "members", "iou", "scales"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    for f in ["vae_s8.ckpt", "vae_s16.ckpt", "gmm_s8.txt", "gmm_s16.txt", "heatmap.pgm", "heatmap.csv", "report.txt"] {
        assert!(dir.join("det").join(f).exists(), "{f} missing");
    }
    // checkpoints load back
    let ck = std::fs::read(dir.join("det/vae_s8.ckpt")).unwrap();
    let (_, ps) = starclust_core::vae::load_checkpoint(&ck).unwrap();
    assert_eq!(ps, 8);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn oversized_patch_scale_fails_with_exit_2_naming_the_scale() {
    let dir = tmpdir("badscale");
    let field = small_field(&dir, 12);
    let cfg = dir.join("det.cfg");
    write(
        &cfg,
        &format!(
            "out={}\ninput.image={}\ninput.catalogue={}\npatch.sizes=8,128\n",
            dir.join("det").display(),
            field.join("field.fits").display(),
            field.join("catalogue.csv").display(),
        ),
    );
    let out = bin().args(["detect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("128"), "message must name the scale: {stderr}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn missing_input_fails_with_exit_4() {
    let dir = tmpdir("noinput");
    let cfg = dir.join("det.cfg");
    write(
        &cfg,
        &format!(
            "out={}\ninput.image=/nonexistent/field.fits\ninput.catalogue=/nonexistent/catalogue.csv\n",
            dir.join("det").display()
        ),
    );
    let out = bin().args(["detect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 4);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn blank_field_is_degenerate_with_exit_3_and_diagnostic_report() {
    let dir = tmpdir("blank");
    let field = dir.join("field");
    let gen = dir.join("gen.cfg");
    write(
        &gen,
        &format!(
            "seed=2\nout={}\nsynth.width=64\nsynth.height=64\nsynth.n_cluster=0\nsynth.n_background=0\nsynth.noise_sigma=0\nsynth.center_x_px=32\nsynth.center_y_px=32\n",
            field.display()
        ),
    );
    assert_eq!(code(&bin().args(["synth", "--config"]).arg(&gen).output().unwrap()), 0);

    let cfg = dir.join("det.cfg");
    write(
        &cfg,
        &format!(
            "out={}\ninput.image={}\ninput.catalogue={}\npatch.sizes=8,16\ntrain.epochs=1\ntrain.latent_dim=4\n",
            dir.join("det").display(),
            field.join("field.fits").display(),
            field.join("catalogue.csv").display(),
        ),
    );
    let out = bin().args(["detect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.join("det/report.json")).unwrap();
    assert!(report.contains("\"degenerate\": true"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn parallel_mode_changes_no_output_bit() {
    let dir = tmpdir("parallel");
    let field = small_field(&dir, 21);
    let seq_cfg = detect_cfg(&dir, &field, "seq", 21);
    let par_cfg_path = dir.join("par.cfg");
    let mut text = std::fs::read_to_string(&seq_cfg).unwrap();
    text = text.replace(
        &format!("out={}", dir.join("seq").display()),
        &format!("out={}", dir.join("par").display()),
    );
    text.push_str("parallel=true\n");
    write(&par_cfg_path, &text);

    assert_eq!(code(&bin().args(["detect", "--config"]).arg(&seq_cfg).output().unwrap()), 0);
    assert_eq!(code(&bin().args(["detect", "--config"]).arg(&par_cfg_path).output().unwrap()), 0);
    for f in [
        "report.json",
        "heatmap.pgm",
        "heatmap.csv",
        "vae_s8.ckpt",
        "vae_s16.ckpt",
        "gmm_s8.txt",
        "gmm_s16.txt",
        "latents_s8.csv",
        "latents_s16.csv",
    ] {
        let a = std::fs::read(dir.join("seq").join(f)).unwrap();
        let b = std::fs::read(dir.join("par").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between sequential and parallel runs");
    }
    // atomic writes leave no temp files behind
    for entry in std::fs::read_dir(dir.join("seq")).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(
            !name.to_string_lossy().ends_with(".tmp~"),
            "leftover temp file {name:?}"
        );
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_config_key_fails_with_exit_2() {
    let dir = tmpdir("badkey");
    let cfg = dir.join("c.cfg");
    write(&cfg, "no.such.key=1\n");
    let out = bin().args(["detect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_computes_deltas_and_handles_missing_iou() {
    let dir = tmpdir("eval");
    let report = dir.join("report.json");
    let reference = dir.join("reference.json");

    // identity comparison: all deltas zero, iou echoed
    write(
        &report,
        "{\"radius_arcsec\": 50.0, \"members\": 10, \"iou\": 0.9}\n",
    );
    write(
        &reference,
        "{\"radius_arcsec\": 50.0, \"members\": 10, \"iou\": 0.9}\n",
    );
    let out = bin()
        .args(["eval", "--report"])
        .arg(&report)
        .arg("--reference")
        .arg(&reference)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("0.00"), "deltas should be zero: {table}");
    assert!(table.contains("0.9000"));

    // a hand-built pair: 77.13 vs 89 -> delta -11.87
    write(
        &report,
        "{\"name\": \"06055+2039\", \"radius_arcsec\": 77.13, \"members\": 98, \"iou\": 0.8595}\n",
    );
    write(
        &reference,
        "{\"name\": \"06055+2039\", \"radius_arcsec\": 89, \"members\": 119}\n",
    );
    let out = bin()
        .args(["eval", "--report"])
        .arg(&report)
        .arg("--reference")
        .arg(&reference)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("-11.87"), "radius delta: {table}");
    assert!(table.contains("-21"), "member delta: {table}");
    // reference had no iou: the iou_ref column is absent
    assert!(!table.contains("iou_ref"), "{table}");

    // schema mismatch: missing members
    write(&reference, "{\"radius_arcsec\": 89}\n");
    let out = bin()
        .args(["eval", "--report"])
        .arg(&report)
        .arg("--reference")
        .arg(&reference)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn help_and_unknown_commands() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("USAGE"));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(code(&out), 2);
    let out = bin().output().unwrap();
    assert_eq!(code(&out), 2);
}
