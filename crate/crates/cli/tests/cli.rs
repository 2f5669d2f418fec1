//! End-to-end checks of the `svtnet` binary: every command is exercised
//! through `std::process::Command` against a temporary workspace, the same
//! way a shell user would drive it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn svtnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_svtnet"))
}

fn run(args: &[&str]) -> Output {
    svtnet().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Generates a small synthetic set and returns the index path.
fn small_synth(dir: &Path, scenes: &str, points: &str) -> PathBuf {
    let out = run(&[
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--scenes",
        scenes,
        "--copies",
        "3",
        "--points",
        points,
        "--seed",
        "0",
    ]);
    assert_success(&out);
    dir.join("index.csv")
}

#[test]
fn gen_synth_is_deterministic_and_guards_nonempty_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    small_synth(&a, "3", "256");
    small_synth(&b, "3", "256");

    let index_a = fs::read(a.join("index.csv")).unwrap();
    let index_b = fs::read(b.join("index.csv")).unwrap();
    assert_eq!(index_a, index_b, "same seed must produce identical indexes");
    let cloud_a = fs::read(a.join("clouds/scene000_copy0.bin")).unwrap();
    let cloud_b = fs::read(b.join("clouds/scene000_copy0.bin")).unwrap();
    assert_eq!(cloud_a, cloud_b, "same seed must produce identical clouds");

    // A second run into the now-populated directory must refuse...
    let refused = run(&["gen-synth", "--out", a.to_str().unwrap(), "--scenes", "3"]);
    assert_eq!(refused.status.code(), Some(1));
    let err = stderr(&refused);
    assert_eq!(err.lines().count(), 1, "errors are one line: {err}");
    assert!(err.starts_with("error:"));

    // ...unless forced.
    let forced = run(&[
        "gen-synth",
        "--out",
        a.to_str().unwrap(),
        "--scenes",
        "3",
        "--points",
        "256",
        "--force",
    ]);
    assert_success(&forced);
}

#[test]
fn index_rows_tag_the_last_copy_as_test() {
    let tmp = tempfile::tempdir().unwrap();
    let index = small_synth(tmp.path(), "2", "256");
    let text = fs::read_to_string(index).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        let expected = if fields[0].contains("copy2") { "test" } else { "train" };
        assert_eq!(fields[3], expected, "row {row}");
    }
}

#[test]
fn params_prints_per_block_table() {
    let out = run(&["params", "--variant", "svt"]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("variant svt"));
    for needle in ["conv0", "resblock1", "asvt", "csvt", "gem", "total", "937129"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }

    let asvt = stdout(&run(&["params", "--variant", "asvt"]));
    assert!(asvt.contains("408737"));
    assert!(!asvt.contains("csvt"));
}

#[test]
fn voxelize_reports_occupancy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("synth");
    small_synth(&dir, "1", "256");
    let cloud = dir.join("clouds/scene000_copy0.bin");
    let coords = tmp.path().join("coords.txt");
    let out = run(&[
        "voxelize",
        "--cloud",
        cloud.to_str().unwrap(),
        "--out",
        coords.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert!(stdout(&out).contains("256 points"));
    let lines = fs::read_to_string(coords).unwrap();
    for line in lines.lines() {
        assert_eq!(line.split(' ').count(), 3, "coordinate line {line}");
    }
}

/// Train, embed, and eval chained end to end on a small set; embedding
/// twice with different worker counts must agree byte for byte.
#[test]
fn train_embed_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let index = small_synth(&data, "4", "512");
    let run_dir = tmp.path().join("run");

    let config = tmp.path().join("train.cfg");
    fs::write(
        &config,
        "variant = svt\nepochs = 2\nbatch_init = 4\nmax_iterations = 6\nseed = 3\n",
    )
    .unwrap();

    let trained = run(&[
        "train",
        "--index",
        index.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_success(&trained);
    assert!(run_dir.join("final.ckpt").exists());
    assert!(run_dir.join("epoch_000.ckpt").exists());
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,active_fraction,batch_size,lr"));
    assert_eq!(log.lines().count(), 3, "header plus one line per epoch");

    let ckpt = run_dir.join("final.ckpt");
    let embed = |out: &Path, split: &str, workers: &str| {
        let r = run(&[
            "embed",
            "--index",
            index.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            split,
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_success(&r);
    };
    let db = tmp.path().join("db.csv");
    let q1 = tmp.path().join("queries.csv");
    let q2 = tmp.path().join("queries_w3.csv");
    embed(&db, "train", "1");
    embed(&q1, "test", "1");
    embed(&q2, "test", "3");
    assert_eq!(
        fs::read(&q1).unwrap(),
        fs::read(&q2).unwrap(),
        "worker count must not change descriptors"
    );

    let curves = tmp.path().join("curves");
    let eval = run(&[
        "eval",
        "--db",
        db.to_str().unwrap(),
        "--queries",
        q1.to_str().unwrap(),
        "--out",
        curves.to_str().unwrap(),
    ]);
    assert_success(&eval);
    let text = stdout(&eval);
    assert!(text.contains("AR@1%") && text.contains("AR@1"));
    assert!(text.contains("queries"), "row label column present");
    assert!(text.contains("NOT reproducible"), "scale note printed");
    let curve = fs::read_to_string(curves.join("curve_queries.csv")).unwrap();
    assert!(curve.starts_with("n,recall"));
}

#[test]
fn dump_commands_expose_attention_and_tokens() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let index = small_synth(&data, "2", "256");
    let run_dir = tmp.path().join("run");
    let config = tmp.path().join("train.cfg");
    fs::write(&config, "variant = svt\nepochs = 1\nbatch_init = 4\nmax_iterations = 1\n").unwrap();
    assert_success(&run(&[
        "train",
        "--index",
        index.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let ckpt = run_dir.join("final.ckpt");
    let cloud = data.join("clouds/scene000_copy0.bin");

    let dumps = tmp.path().join("dumps");
    assert_success(&run(&[
        "dump-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--cloud",
        cloud.to_str().unwrap(),
        "--out",
        dumps.to_str().unwrap(),
    ]));
    let attention = fs::read_to_string(dumps.join("attention.csv")).unwrap();
    let n = attention.lines().count();
    assert!(n > 0);
    assert_eq!(attention.lines().next().unwrap().split(',').count(), n, "attention is square");
    // Attention rows are softmax outputs and sum to one.
    for line in attention.lines() {
        let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
    }
    assert!(fs::read_to_string(dumps.join("attended.csv"))
        .unwrap()
        .starts_with("i,j,k,"));

    let tokens = run(&[
        "dump-tokens",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--cloud",
        cloud.to_str().unwrap(),
    ]);
    assert_success(&tokens);
    for line in stdout(&tokens).lines() {
        assert_eq!(line.split(' ').count(), 4, "token line {line}");
    }
}

#[test]
fn check_grads_tiny_exits_zero() {
    let out = run(&["check-grads", "--tiny"]);
    assert_success(&out);
    assert!(stdout(&out).contains("gradient checks passed"));
}

#[test]
fn errors_are_one_line_with_distinct_exit_codes() {
    // Usage errors (unknown flags, bad enum values) exit 2.
    let usage = run(&["params", "--variant", "nope"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(stderr(&usage).lines().count(), 1);

    let unknown = run(&["params", "--no-such-flag"]);
    assert_eq!(unknown.status.code(), Some(2));

    // Runtime errors exit 1 with a single error: line.
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&[
        "train",
        "--index",
        tmp.path().join("absent.csv").to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let err = stderr(&missing);
    assert_eq!(err.lines().count(), 1, "got: {err}");
    assert!(err.starts_with("error:"));

    // A config file with an unknown key names the key and the line.
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nnot_a_key = 5\n").unwrap();
    let bad_cfg = run(&[
        "train",
        "--index",
        tmp.path().join("absent.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(bad_cfg.status.code(), Some(1));
    let err = stderr(&bad_cfg);
    assert!(err.contains("not_a_key"), "got: {err}");
    assert!(err.contains("line 2"), "got: {err}");
}

#[test]
fn dump_tokens_requires_a_cluster_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let index = small_synth(&data, "2", "256");
    let run_dir = tmp.path().join("run");
    let config = tmp.path().join("train.cfg");
    fs::write(&config, "variant = asvt\nepochs = 1\nbatch_init = 4\nmax_iterations = 1\n").unwrap();
    assert_success(&run(&[
        "train",
        "--index",
        index.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let out = run(&[
        "dump-tokens",
        "--checkpoint",
        run_dir.join("final.ckpt").to_str().unwrap(),
        "--cloud",
        data.join("clouds/scene000_copy0.bin").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("no cluster attention branch"),
        "got: {}",
        stderr(&out)
    );
}

/// Re-embedding with a saved checkpoint must reproduce descriptors exactly,
/// regardless of variant.
#[test]
fn checkpoints_round_trip_descriptors_for_all_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let index = small_synth(&data, "2", "256");
    for variant in ["svt", "asvt", "csvt"] {
        let run_dir = tmp.path().join(format!("run_{variant}"));
        let config = tmp.path().join(format!("{variant}.cfg"));
        fs::write(
            &config,
            format!("variant = {variant}\nepochs = 1\nbatch_init = 4\nmax_iterations = 2\n"),
        )
        .unwrap();
        assert_success(&run(&[
            "train",
            "--index",
            index.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ]));
        let ckpt = run_dir.join("final.ckpt");
        let d1 = tmp.path().join(format!("{variant}_1.csv"));
        let d2 = tmp.path().join(format!("{variant}_2.csv"));
        for d in [&d1, &d2] {
            assert_success(&run(&[
                "embed",
                "--index",
                index.to_str().unwrap(),
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out",
                d.to_str().unwrap(),
            ]));
        }
        assert_eq!(fs::read(&d1).unwrap(), fs::read(&d2).unwrap());
    }
}
