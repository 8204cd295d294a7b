//! End-to-end runs of the `moeq` binary over a tempdir workspace.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moeq_cli::container::{decode_predictor, decode_quantized, parse_plan};
use moeq_cli::load_report_csv;
use moeq_core::quant::BitWidth;

fn moeq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moeq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_ok(dir: &Path, args: &[&str]) -> String {
    let out = moeq(dir, args);
    assert!(
        out.status.success(),
        "moeq {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn expect_exit(dir: &Path, args: &[&str], code: i32) -> String {
    let out = moeq(dir, args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "moeq {args:?}:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).expect("utf-8 stderr")
}

const SPEC: &str = "vocab_size = 48\nhidden_dim = 12\nffnn_dim = 24\nnum_layers = 2\n\
                    num_experts = 4\ntop_k = 2\nnum_shared_experts = 1\nseed = 7\n";

/// Builds a model in `dir` and returns its path.
fn build_model_file(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("model.spec"), SPEC).unwrap();
    expect_ok(dir, &["build", "--spec", "model.spec", "--out", "model.moeq"]);
    dir.join("model.moeq")
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_model_file(dir);

    let stdout = expect_ok(
        dir,
        &[
            "profile", "--model", "model.moeq", "--calib-seed", "3", "--calib-seqs", "4",
            "--calib-len", "48", "--out", "usage.txt",
        ],
    );
    assert!(stdout.contains("block 0"));
    assert_eq!(stdout, std::fs::read_to_string(dir.join("usage.txt")).unwrap());

    let scores = expect_ok(
        dir,
        &["score", "--model", "model.moeq", "--method", "outlier", "--out", "scores.txt"],
    );
    for line in scores.lines() {
        let (id, value) = line.rsplit_once(' ').expect("id and score");
        assert!(id.starts_with("layer"), "{line}");
        value.parse::<f64>().expect("numeric score");
    }

    expect_ok(
        dir,
        &[
            "plan", "--model", "model.moeq", "--strategy", "attn,freq:2", "--calib-seed", "3",
            "--calib-seqs", "4", "--calib-len", "48", "--out", "plan.txt",
        ],
    );
    let plan = parse_plan(&std::fs::read_to_string(dir.join("plan.txt")).unwrap()).unwrap();
    assert_eq!(plan.default_bits, BitWidth::B2);
    assert_eq!(plan.provenance.len(), 2);

    expect_ok(
        dir,
        &[
            "quantize", "--model", "model.moeq", "--plan", "plan.txt", "--calib-seed", "3",
            "--calib-seqs", "4", "--calib-len", "48", "--group", "16", "--out", "model.moeqz",
        ],
    );
    let (qm, calib_seed) =
        decode_quantized(&std::fs::read(dir.join("model.moeqz")).unwrap()).unwrap();
    assert_eq!(calib_seed, 3);
    assert_eq!(qm.weights.len(), 2 * (4 + (4 + 1) * 3));

    expect_ok(
        dir,
        &[
            "eval", "--model", "model.moeqz", "--eval-seed", "9", "--eval-seqs", "4",
            "--eval-len", "48", "--out", "report.csv",
        ],
    );
    let report = load_report_csv(&dir.join("report.csv")).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.calib_seed, 3);
    assert_eq!(report.eval_seed, 9);
    assert!(report.rows[0].mean_ppl >= 1.0);
    assert!(report.rows[0].avg_bits < 64.0);

    let fp = expect_ok(
        dir,
        &[
            "eval", "--model", "model.moeq", "--eval-seed", "9", "--eval-seqs", "4",
            "--eval-len", "48", "--out", "fp.csv",
        ],
    );
    assert!(fp.contains("fp,64"));
}

#[test]
fn quantized_eval_rejects_calibration_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_model_file(dir);
    expect_ok(
        dir,
        &[
            "plan", "--model", "model.moeq", "--strategy", "uniform:4", "--out", "plan.txt",
        ],
    );
    expect_ok(
        dir,
        &[
            "quantize", "--model", "model.moeq", "--plan", "plan.txt", "--calib-seed", "3",
            "--calib-seqs", "4", "--calib-len", "48", "--backend", "rtn", "--out", "model.moeqz",
        ],
    );
    let stderr = expect_exit(
        dir,
        &[
            "eval", "--model", "model.moeqz", "--eval-seed", "3", "--eval-seqs", "4",
            "--eval-len", "48", "--out", "report.csv",
        ],
        2,
    );
    assert!(stderr.contains("collides"), "{stderr}");
}

#[test]
fn compare_renders_markdown_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_model_file(dir);
    let base = [
        "compare", "--model", "model.moeq", "--strategies", "fp;uniform:4", "--seeds", "42",
        "--calib-seed", "3", "--calib-seqs", "4", "--calib-len", "48", "--eval-seed", "9",
        "--eval-seqs", "4", "--eval-len", "48", "--backend", "rtn",
    ];

    let mut md = base.to_vec();
    md.extend(["--out", "report.md"]);
    let stdout = expect_ok(dir, &md);
    assert!(stdout.contains("| fp | 64.0000 |"), "{stdout}");
    assert!(stdout.contains("| uniform:4 | 4.0000 |"), "{stdout}");

    let mut csv = base.to_vec();
    csv.extend(["--out", "report.csv"]);
    expect_ok(dir, &csv);
    let report = load_report_csv(&dir.join("report.csv")).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].strategy, "uniform:4");
    assert_eq!(report.rows[1].strategy, "fp");
}

#[test]
fn predictor_scoring_saves_container() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_model_file(dir);
    let stdout = expect_ok(
        dir,
        &[
            "score", "--model", "model.moeq", "--method", "predictor", "--epochs", "2",
            "--hidden", "8", "--calib-seed", "3", "--calib-seqs", "4", "--calib-len", "32",
            "--save-predictor", "bsp.bspq", "--out", "scores.txt",
        ],
    );
    assert!(stdout.starts_with("block "));
    let bsp = decode_predictor(&std::fs::read(dir.join("bsp.bspq")).unwrap()).unwrap();
    assert_eq!(bsp.hidden, 8);
    assert_eq!(bsp.blocks.len(), 2);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_model_file(dir);

    let stderr = expect_exit(
        dir,
        &["plan", "--model", "model.moeq", "--strategy", "bogus", "--out", "plan.txt"],
        2,
    );
    assert!(stderr.contains("bogus"), "{stderr}");

    expect_exit(
        dir,
        &["plan", "--model", "model.moeq", "--strategy", "fp", "--out", "plan.txt"],
        2,
    );
    expect_exit(
        dir,
        &["plan", "--model", "model.moeq", "--strategy", "attn", "--hi", "5", "--out", "p.txt"],
        2,
    );

    std::fs::write(dir.join("broken.spec"), "vocab_size = lots\n").unwrap();
    expect_exit(dir, &["build", "--spec", "broken.spec", "--out", "m.moeq"], 2);

    // Unknown flags are a usage error too.
    expect_exit(dir, &["build", "--nope", "x"], 2);
}
