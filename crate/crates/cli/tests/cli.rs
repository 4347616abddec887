use std::path::Path;
use std::process::{Command, Output};

fn synlungs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synlungs"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = synlungs(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &str = r#"
seed = 5
output_dir = "out"
n_twins = 2
lesions_per_twin = [1, 2]
scanners = ["W12", "W20"]
filter_cutoffs = [0.6]
n_views = 90
phantom_dims = [40, 40, 32]
phantom_spacing = [5.0, 5.0, 5.0]
recon_dims = [40, 40]
out_spacing = 5.0
"#;

#[test]
fn stages_chain_into_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let s = ["--seed", "9"];
    let run = |rest: &[&str]| ok(d, &[&s[..], rest].concat());
    run(&["phantom", "gen", "--out", "ph.mhd", "--dims", "48,48,32", "--spacing", "5,5,5"]);
    run(&["lesion", "synth", "--out", "a.mhd", "--id", "A", "--diameter", "10", "--margin", "spiculated"]);
    run(&["lesion", "synth", "--out", "b.mhd", "--id", "B", "--diameter", "6"]);
    run(&["lesion", "embed", "--phantom", "ph.mhd", "--lesion", "a.mhd", "--lesion", "b.mhd", "--out", "mu.mhd"]);
    assert!(d.join("mu_mask.mhd").exists());
    run(&[
        "ct", "simulate", "--input", "mu.mhd", "--out", "recon.mhd", "--scanner", "W20", "--filter", "hann:0.5",
        "--views", "90", "--i0", "1e5", "--spr", "0.02",
    ]);
    run(&["label", "--input", "mu_features.csv", "--out", "labels.csv", "--threshold", "0.4", "--mode", "det"]);
    run(&["export", "scan", "--volume", "recon.mhd", "--mask", "mu_mask.mhd", "--labels", "labels.csv", "--scan-id", "s1", "--out-dir", "ds"]);
    run(&["export", "patches", "--dataset", "ds", "--no-standardize"]);

    let manifest = std::fs::read_to_string(d.join("ds/manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{manifest}");
    assert!(rows.iter().all(|r| r.starts_with("s1,") && r.ends_with(",W20,0.5")), "{manifest}");
    for id in ["A", "B"] {
        assert!(d.join(format!("ds/patches/s1_{id}.mhd")).exists());
    }

    let dice = ok(d, &["qc", "dice", "--pred", "ds/masks/s1.mhd", "--truth", "ds/masks/s1.mhd"]);
    assert!(String::from_utf8_lossy(&dice.stdout).starts_with("dice 1.000000"));
}

#[test]
fn pipeline_counts_scans_and_repeats_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.toml"), SMALL).unwrap();
    ok(d, &["--config", "cfg.toml", "pipeline", "run"]);
    ok(d, &["--config", "cfg.toml", "--threads", "2", "pipeline", "run", "--out", "again"]);

    let scans = std::fs::read_dir(d.join("out/volumes"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mhd"))
        .count();
    assert_eq!(scans, 4);
    let a = std::fs::read(d.join("out/manifest.csv")).unwrap();
    let b = std::fs::read(d.join("again/manifest.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.toml"), "seed = 1\nn_twinz = 3\n").unwrap();
    let out = synlungs(d, &["--config", "cfg.toml", "pipeline", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_twinz"));
}

#[test]
fn negative_cutoff_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.toml"), "seed = 1\nfilter_cutoffs = [-1.0]\n").unwrap();
    let out = synlungs(d, &["--config", "cfg.toml", "pipeline", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = synlungs(d, &["ct", "simulate", "--input", "x.mhd", "--out", "y.mhd", "--filter", "hann:-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_twins_exit_1_but_still_write_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // Nodules of at least 28 mm cannot fit the lungs of a 40 x 40 x 32 phantom
    // at 5 mm within a handful of attempts.
    let cfg = format!(
        "{SMALL}\nmax_placement_attempts = 3\n[gamma]\na = 2.5\nb = 0.35\nmin_size = 28.0\nmax_size = 30.0\n"
    )
    .replace("lesions_per_twin = [1, 2]", "lesions_per_twin = [1, 1]");
    std::fs::write(d.join("cfg.toml"), cfg).unwrap();
    let out = synlungs(d, &["--config", "cfg.toml", "pipeline", "run"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("twins failed"));
    assert!(d.join("out/manifest.csv").exists());
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synlungs(tmp.path(), &["qc", "dice", "--pred", "nope.mhd", "--truth", "nope.mhd"]);
    assert_eq!(out.status.code(), Some(1));
}
