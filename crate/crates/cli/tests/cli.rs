use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nmsparse::nm::{decode_nmcx, decompress};
use nmsparse::rng::SeededRng;
use nmsparse::tensor::{decode_nmsp, encode_nmsp, DenseMatrix};

fn nmsparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmsparse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn random_nmsp(file: &Path, rows: usize, cols: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let m = DenseMatrix::from_fn(rows, cols, |_, _| rng.normal() as f32);
    fs::write(file, encode_nmsp(&m)).unwrap();
}

const TOY: &[&str] = &["--data", "blobs", "--hidden", "16,8", "--epochs", "3", "--warmup-epochs", "1", "--batch-size", "32", "--synthetic-train", "300", "--synthetic-test", "100"];

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["--out", path(&out), "train", "--variant", "sr-ste", "--pattern", "2:4", "--lambda-w", "0.0002"];
    args.extend(TOY);
    let o = nmsparse(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "sad.jsonl", "checkpoint.bin", "checkpoint.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,split,loss,accuracy,lr,sad_total_prev_epoch");
    assert!(metrics.lines().last().unwrap().starts_with("3,test,"));
    assert_eq!(fs::read_to_string(out.join("sad.jsonl")).unwrap().lines().count(), 3);
    assert!(stdout(&o).contains("test accuracy"));
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args = vec!["--out", path(&a), "--seed", "4", "train", "--variant", "ste", "--pattern", "1:4"];
    args.extend(TOY);
    assert!(nmsparse(&args).status.success());
    let manifest = a.join("manifest.json");
    let o = nmsparse(&["--out", path(&b), "--config", path(&manifest), "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "sad.jsonl", "checkpoint.bin", "checkpoint.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn dense_pattern_trains_like_dense_forward() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut args = vec!["--out", path(&a), "train", "--variant", "ste", "--pattern", "4:4"];
    args.extend(TOY);
    assert!(nmsparse(&args).status.success());
    let mut args = vec!["--out", path(&b), "train", "--variant", "dense", "--pattern", "4:4"];
    args.extend(TOY);
    assert!(nmsparse(&args).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = nmsparse(&["--out", path(&out), "train", "--pattern", "3:8", "--hidden", "100"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not divisible"));
    assert_eq!(nmsparse(&["train", "--pattern", "5:4"]).status.code(), Some(2));
    assert_eq!(nmsparse(&["train", "--variant", "bogus"]).status.code(), Some(2));
    assert_eq!(nmsparse(&["frobnicate"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = nmsparse(&["--data-dir", path(&dir.path().join("nothing")), "--out", path(&dir.path().join("o")), "train", "--epochs", "1", "--warmup-epochs", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["--out", path(&out), "train", "--lr-constant", "1e30", "--momentum", "0"];
    args.extend(TOY);
    let o = nmsparse(&args);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn project_reports_half_sparsity_and_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.nmsp");
    random_nmsp(&input, 8, 8, 11);
    let out = dir.path().join("out");
    let o = nmsparse(&["--out", path(&out), "project", path(&input), "--pattern", "2:4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("sparsity 0.5000"), "{text}");
    assert!(text.contains("nonzeros per group 0:0 1:0 2:16"), "{text}");

    let nmsp = fs::read(out.join("w.nmsp")).unwrap();
    let nmcx = fs::read(out.join("w.nmcx")).unwrap();
    let (projected, _) = decode_nmsp(&nmsp, 0).unwrap();
    assert_eq!(decompress(&decode_nmcx(&nmcx).unwrap()).unwrap(), projected);

    // projecting the projection changes nothing
    let again = dir.path().join("again");
    let o = nmsparse(&["--out", path(&again), "project", path(&out.join("w.nmsp")), "--pattern", "2:4", "--out-prefix", "w"]);
    assert!(o.status.success());
    assert_eq!(fs::read(again.join("w.nmsp")).unwrap(), nmsp);
    assert_eq!(fs::read(again.join("w.nmcx")).unwrap(), nmcx);
}

#[test]
fn project_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.nmsp");
    random_nmsp(&input, 4, 6, 1);
    let out = dir.path().join("out");
    // 6 columns do not split into groups of 4
    assert_eq!(nmsparse(&["--out", path(&out), "project", path(&input)]).status.code(), Some(3));
    fs::write(&input, b"NMSPgarbage").unwrap();
    assert_eq!(nmsparse(&["--out", path(&out), "project", path(&input)]).status.code(), Some(3));
    random_nmsp(&input, 4, 8, 1);
    assert_eq!(nmsparse(&["--out", path(&out), "project", path(&input), "--pattern", "0:4"]).status.code(), Some(2));
    assert_eq!(
        nmsparse(&["--out", path(&out), "project", path(&input), "--out-prefix", "../escape"]).status.code(),
        Some(2)
    );
}

#[test]
fn compare_single_variant_summary_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let mut args = vec!["--out", path(&out), "compare", "--variants", "sr-ste", "--seeds", "2", "--pattern", "2:4"];
    args.extend(TOY);
    let o = nmsparse(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("sr-ste_0.0002-seed2");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last_acc = metrics.lines().last().unwrap().split(',').nth(3).unwrap().to_string();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 1);
    assert_eq!(summary[0]["final_test_accuracy"].as_f64().unwrap(), last_acc.parse::<f64>().unwrap());
    assert!(fs::read_to_string(out.join("summary.md")).unwrap().contains("| sr-ste:0.0002 | 2 |"));
    // the combined CSV carries the run's rows verbatim after its variant and seed
    let combined = fs::read_to_string(out.join("compare.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        assert!(combined.contains(&format!("sr-ste:0.0002,2,{line}")));
    }
}

#[test]
fn sad_analysis_t0_is_zero_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["--out", path(out), "sad-analysis", "--iters", "0,1,10", "--seeds", "1,2", "--pattern", "2:4"];
        args.extend(TOY);
        let o = nmsparse(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(a.join("sad_analysis.jsonl")).unwrap();
    assert_eq!(text, fs::read_to_string(b.join("sad_analysis.jsonl")).unwrap());
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2 * 2 * 3);
    for r in &rows {
        if r["t"] == 0 {
            assert_eq!(r["total"], 0);
        }
    }
    let csv = fs::read_to_string(a.join("sad_analysis.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "seed,scheme,t,layer,sad,sad_normalized");
}

#[test]
fn fetch_verifies_digests_and_never_writes_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let mirror = dir.path().join("mirror");
    fs::create_dir(&mirror).unwrap();
    fs::write(mirror.join("train-images-idx3-ubyte"), b"not mnist").unwrap();
    let data = dir.path().join("data");
    let o = nmsparse(&["--data-dir", path(&data), "fetch", "--mirror", path(&mirror)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest mismatch"));
    assert!(!data.join("train-images-idx3-ubyte").exists());
}
