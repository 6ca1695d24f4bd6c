//! End-to-end tests of the `pamm` binary: artifact layout, determinism of
//! generated files, exit codes, and resume behaviour. A small four-family
//! dataset is generated once and shared across tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn pamm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pamm"))
        .args(args)
        .output()
        .expect("failed to spawn pamm")
}

fn ok(args: &[&str]) -> Output {
    let out = pamm(args);
    assert!(
        out.status.success(),
        "pamm {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    pamm(args).status.code().expect("no exit code")
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    /// pamm-gate trained for 2 steps; checkpoints at steps 0 and 2.
    gate_run: PathBuf,
    /// baseline at step 0 (untrained).
    base_run: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.txt");
        fs::write(
            &spec,
            "family.rattled-small.count=6\nfamily.rattled-large.count=6\n\
             family.strained.count=6\nfamily.mdlike.count=6\n",
        )
        .unwrap();
        let data = dir.path().join("data");
        ok(&["gen", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);

        let gate_run = dir.path().join("gate");
        ok(&[
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--variant",
            "pamm-gate",
            "--seed",
            "0",
            "--steps",
            "2",
            "--out",
            gate_run.to_str().unwrap(),
        ]);
        let base_run = dir.path().join("base");
        ok(&[
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--variant",
            "baseline",
            "--seed",
            "0",
            "--steps",
            "0",
            "--out",
            base_run.to_str().unwrap(),
        ]);
        Fixture { _dir: dir, data, gate_run, base_run }
    })
}

fn data_path() -> &'static str {
    fixture().data.to_str().unwrap()
}

fn gate_checkpoint() -> PathBuf {
    fixture().gate_run.join("checkpoint-00002.txt")
}

fn base_checkpoint() -> PathBuf {
    fixture().base_run.join("checkpoint-00000.txt")
}

/// Data lines of a CSV: everything after the `#` provenance prefix and the
/// column header.
fn csv_rows(text: &str) -> Vec<&str> {
    text.lines().skip_while(|l| l.starts_with('#')).skip(1).collect()
}

#[test]
fn gen_writes_all_artifacts_and_is_deterministic() {
    let fx = fixture();
    for name in ["rattled-small", "rattled-large", "strained", "mdlike"] {
        assert!(fx.data.join(format!("{name}.data")).is_file(), "missing {name}.data");
    }
    let manifest = read(&fx.data.join("manifest.csv"));
    assert!(manifest.starts_with("# spec="));
    for split in ["train", "val", "test"] {
        assert!(
            manifest.lines().any(|l| l.ends_with(&format!(",{split}"))),
            "no {split} rows in manifest"
        );
    }

    // Regenerating from the same spec reproduces every file byte for byte.
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(
        &spec,
        "family.rattled-small.count=6\nfamily.rattled-large.count=6\n\
         family.strained.count=6\nfamily.mdlike.count=6\n",
    )
    .unwrap();
    let again = dir.path().join("data2");
    ok(&["gen", "--spec", spec.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    for name in
        ["rattled-small.data", "rattled-large.data", "strained.data", "mdlike.data", "manifest.csv"]
    {
        assert_eq!(read(&fx.data.join(name)), read(&again.join(name)), "{name} differs on rerun");
    }
}

#[test]
fn gen_rejects_oversized_rattle_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, "family.rattled-small.amplitude=5.0\n").unwrap();
    let out = pamm(&[
        "gen",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("amplitude"));
}

#[test]
fn train_writes_metrics_checkpoints_and_record() {
    let fx = fixture();
    let metrics = read(&fx.gate_run.join("metrics.csv"));
    assert!(metrics.starts_with("# config="));
    assert_eq!(
        metrics.lines().nth(1).unwrap(),
        "step,split,family,energy_mae_per_atom,force_mae,variant,seed"
    );
    // Evaluations at steps 0 and 2 cover both held-out splits, with an
    // overall row in each; per-family rows depend on which families the
    // hash split placed in val/test.
    for (step, split) in [("0", "val"), ("0", "test"), ("2", "val"), ("2", "test")] {
        assert!(
            csv_rows(&metrics).iter().any(|r| r.starts_with(&format!("{step},{split},overall,"))),
            "missing overall row for step {step} split {split}"
        );
    }
    assert!(csv_rows(&metrics).iter().all(|r| r.starts_with("0,") || r.starts_with("2,")));
    let record = read(&fx.gate_run.join("record.json"));
    assert!(record.contains("\"status\": \"done\""));
    assert!(record.contains("checkpoint-00000.txt"));
    assert!(record.contains("checkpoint-00002.txt"));
    assert!(gate_checkpoint().is_file());
}

#[test]
fn train_rerun_reproduces_metrics_byte_for_byte() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("run");
    ok(&[
        "train",
        "--dataset",
        data_path(),
        "--variant",
        "pamm-gate",
        "--seed",
        "0",
        "--steps",
        "2",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(read(&fx.gate_run.join("metrics.csv")), read(&again.join("metrics.csv")));
    assert_eq!(read(&gate_checkpoint()), read(&again.join("checkpoint-00002.txt")));
}

#[test]
fn resume_from_mid_checkpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "train.eval_interval=1\n").unwrap();
    let full = dir.path().join("full");
    let resumed = dir.path().join("resumed");
    let common = [
        "--dataset",
        data_path(),
        "--variant",
        "pamm-gate",
        "--seed",
        "0",
        "--steps",
        "2",
        "--config",
        cfg.to_str().unwrap(),
    ];
    let mut args = vec!["train"];
    args.extend_from_slice(&common);
    args.extend(["--out", full.to_str().unwrap()]);
    ok(&args);

    let mid = full.join("checkpoint-00001.txt");
    let mut args = vec!["train"];
    args.extend_from_slice(&common);
    args.extend(["--checkpoint", mid.to_str().unwrap(), "--out", resumed.to_str().unwrap()]);
    ok(&args);
    assert_eq!(
        read(&full.join("checkpoint-00002.txt")),
        read(&resumed.join("checkpoint-00002.txt")),
        "resumed run diverged from the uninterrupted run"
    );
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let out = pamm(&[
        "train", "--dataset", data_path(), "--variant", "bogus", "--out", "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    assert_eq!(
        exit_code(&[
            "train",
            "--dataset",
            "/nonexistent/data",
            "--variant",
            "baseline",
            "--out",
            "/tmp/unused",
        ]),
        3
    );
}

#[test]
fn controls_emits_one_row_per_variant_with_matched_param_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ctl");
    ok(&[
        "controls", "--dataset", data_path(), "--seed", "0", "--steps", "1", "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out.join("controls.csv"));
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 8);
    let expected = [
        "baseline",
        "pamm-gate",
        "pamm-affine",
        "pair-only",
        "triplet-only",
        "no-gate",
        "random-bucket",
        "mlp-control",
    ];
    for (row, variant) in rows.iter().zip(expected) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], variant);
        assert_eq!(cells[1], "done", "{variant} run failed");
        let mem: f64 = cells[2].parse().unwrap();
        if variant == "mlp-control" {
            // Budget-matched to the structured tables within 1%.
            assert!((mem - 32768.0).abs() / 32768.0 < 0.01, "mlp-control params {mem}");
        }
        if variant == "baseline" {
            assert_eq!(mem, 0.0);
        }
    }
    // Per-variant run directories hold their own records.
    assert!(out.join("pamm-gate").join("record.json").is_file());
}

#[test]
fn sweep_covers_requested_bucket_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    ok(&[
        "sweep-buckets",
        "--dataset",
        data_path(),
        "--seed",
        "0",
        "--steps",
        "0",
        "--buckets",
        "64,128",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out.join("sweep.csv"));
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 2);
    for (row, (m, params)) in rows.iter().zip([(64, 4096), (128, 8192)]) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], m.to_string());
        assert_eq!(cells[1], "done");
        assert_eq!(cells[2], params.to_string(), "memory params at M={m}");
        assert_eq!(cells[3], (4 * params).to_string(), "f32 bytes at M={m}");
    }
}

#[test]
fn sweep_rejects_non_power_of_two_buckets() {
    let out = pamm(&[
        "sweep-buckets", "--dataset", data_path(), "--buckets", "63", "--out", "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("power of two"));
}

#[test]
fn eval_families_reports_overall_plus_each_family() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fam.csv");
    ok(&[
        "eval-families",
        "--checkpoint",
        gate_checkpoint().to_str().unwrap(),
        "--dataset",
        data_path(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out);
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("overall,"));
    for row in &rows {
        assert_eq!(row.split(',').count(), 3);
    }
}

#[test]
fn eval_families_paired_mode_adds_columns_and_flags_untrained_species() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fam.csv");
    ok(&[
        "eval-families",
        "--checkpoint",
        gate_checkpoint().to_str().unwrap(),
        "--baseline-checkpoint",
        base_checkpoint().to_str().unwrap(),
        "--dataset",
        data_path(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out);
    for row in csv_rows(&csv) {
        assert_eq!(row.split(',').count(), 5, "paired row shape: {row}");
    }
    // The step-0 baseline has touched no species embedding, so every family
    // is flagged rather than silently scored.
    assert!(csv.contains("# warning"), "expected untrained-species warnings:\n{csv}");
}

#[test]
fn analyze_motif_freq_reaches_full_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("freq.csv");
    ok(&[
        "analyze",
        "--checkpoint",
        gate_checkpoint().to_str().unwrap(),
        "--dataset",
        data_path(),
        "--mode",
        "motif-freq",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out);
    assert!(csv.starts_with("# config="));
    let rows = csv_rows(&csv);
    assert!(!rows.is_empty());
    let last_cumulative: f64 = rows.last().unwrap().split(',').last().unwrap().parse().unwrap();
    assert!((last_cumulative - 1.0).abs() < 1e-9, "cumulative ends at {last_cumulative}");
}

#[test]
fn analyze_gate_usage_rejects_variants_without_a_gate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gate.csv");
    ok(&[
        "analyze",
        "--checkpoint",
        gate_checkpoint().to_str().unwrap(),
        "--dataset",
        data_path(),
        "--mode",
        "gate-usage",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(read(&out).lines().nth(1).unwrap(), "statistic,family,layer,value");

    let denied = pamm(&[
        "analyze",
        "--checkpoint",
        base_checkpoint().to_str().unwrap(),
        "--dataset",
        data_path(),
        "--mode",
        "gate-usage",
        "--out",
        dir.path().join("g2.csv").to_str().unwrap(),
    ]);
    assert_eq!(denied.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&denied.stderr).contains("baseline"));
}

#[test]
fn analyze_motif_delta_against_self_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("delta.csv");
    let ckpt = gate_checkpoint();
    ok(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--baseline-checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        data_path(),
        "--mode",
        "motif-delta",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out);
    for row in csv_rows(&csv) {
        let delta: f64 = row.split(',').last().unwrap().parse().unwrap();
        assert_eq!(delta, 0.0, "self-comparison row {row}");
    }

    // Without the reference checkpoint the mode is unusable.
    let missing = pamm(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        data_path(),
        "--mode",
        "motif-delta",
        "--out",
        dir.path().join("d2.csv").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}
