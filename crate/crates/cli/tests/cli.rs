use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nalp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nalp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Twelve facts over three roles; valid and test repeat the first three.
fn toy_dataset(dir: &Path) {
    let train = [
        "r0\tv1\tr1\tv4",
        "r0\tv2\tr1\tv7",
        "r0\tv3\tr1\tv0\tr2\tv5",
        "r0\tv5\tr1\tv2",
        "r0\tv6\tr1\tv6\tr2\tv1",
        "r0\tv7\tr1\tv3",
        "r0\tv0\tr1\tv1\tr2\tv2",
        "r0\tv4\tr1\tv5\tr2\tv3",
        "r0\tv1\tr1\tv2\tr2\tv6",
        "r0\tv2\tr1\tv3\tr2\tv0",
        "r0\tv6\tr1\tv4",
        "r0\tv3\tr1\tv7\tr2\tv4",
    ];
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("train.tsv"), train.join("\n") + "\n").unwrap();
    let held = train[..3].join("\n") + "\n";
    fs::write(dir.join("valid.tsv"), &held).unwrap();
    fs::write(dir.join("test.tsv"), &held).unwrap();
}

/// Trains on the toy set; `overrides` are flag/value pairs replacing or
/// extending the defaults below.
fn train_toy(data: &Path, out: &Path, overrides: &[(&str, &str)]) -> Output {
    let mut flags = vec![
        ("--dataset", data.to_str().unwrap()),
        ("--format", "tsv-rv"),
        ("--k", "16"),
        ("--nf", "16"),
        ("--n-gfcn", "32"),
        ("--batch-size", "4"),
        ("--lr", "1e-2"),
        ("--max-epochs", "150"),
        ("--patience", "1000"),
        ("--seed", "0"),
        ("--out", out.to_str().unwrap()),
    ];
    for &(flag, value) in overrides {
        match flags.iter_mut().find(|(f, _)| *f == flag) {
            Some(slot) => slot.1 = value,
            None => flags.push((flag, value)),
        }
    }
    let mut args = vec!["train"];
    for (f, v) in flags {
        args.extend([f, v]);
    }
    nalp(&args)
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn grad_check_example_passes() {
    let o = nalp(&["grad-check", "--k", "4", "--nf", "3", "--n-gfcn", "5", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("max relative error:")).unwrap();
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_typed_mixed_variant() {
    let o = nalp(&["grad-check", "--mode", "tnalp+", "--aggregator", "emean", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("role_type"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&nalp(&["--no-such-flag"])), 1);
    assert_eq!(code(&nalp(&["train"])), 1);
    assert_eq!(code(&nalp(&["grad-check", "--mode", "nalpx"])), 1);
    // elementwise encoders need n_f = k
    assert_eq!(code(&nalp(&["grad-check", "--encoder", "mul", "--k", "4", "--nf", "3"])), 1);
}

#[test]
fn help_exits_zero() {
    let o = nalp(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("grad-check"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dir.path().join("out");
    let o = nalp(&["train", "--dataset", path_str(&missing), "--out", path_str(&out)]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    for split in ["train", "valid", "test"] {
        fs::write(bad.join(format!("{split}.tsv")), "r0\tv0\tr1\n").unwrap();
    }
    let o = nalp(&["train", "--dataset", path_str(&bad), "--format", "tsv-rv", "--out", path_str(&out)]);
    assert_eq!(code(&o), 2);

    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    toy_dataset(&dir.path().join("toy"));
    let toy = dir.path().join("toy");
    let o = nalp(&[
        "evaluate",
        "--checkpoint",
        path_str(&ckpt),
        "--dataset",
        path_str(&toy),
        "--format",
        "tsv-rv",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    toy_dataset(&data);
    let o = train_toy(&data, &dir.path().join("out"), &[("--lr", "1e300")]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_evaluate_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    toy_dataset(&data);
    let run = dir.path().join("run");
    let o = train_toy(&data, &run, &[("--mode", "tnalp+"), ("--k-type", "4"), ("--n-tfcn", "6")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("model.ckpt").is_file());
    assert!(run.join("train.log").is_file());

    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    for line in ["command=train", "mode=tnalp+", "sampler=mixed", "seed=0", "k=16", "nf=16"] {
        assert!(config.lines().any(|l| l == line), "missing {line} in\n{config}");
    }

    let ckpt = run.join("model.ckpt");
    let ev = dir.path().join("eval");
    let o = nalp(&[
        "evaluate",
        "--checkpoint",
        path_str(&ckpt),
        "--dataset",
        path_str(&data),
        "--format",
        "tsv-rv",
        "--task",
        "value",
        "--out",
        path_str(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(ev.join("report.tsv")).unwrap();
    assert!(tsv.starts_with("task\tcategory\tmetric\tvalue\tcount\n"));
    assert!(tsv.lines().any(|l| l.starts_with("value\toverall\tmrr\t")));
    assert!(!tsv.lines().any(|l| l.starts_with("role\t")));
    assert!(ev.join("report.txt").is_file());
    assert!(ev.join("config.txt").is_file());

    let an = dir.path().join("analysis");
    let o = nalp(&[
        "analyze",
        "--checkpoint",
        path_str(&ckpt),
        "--dataset",
        path_str(&data),
        "--format",
        "tsv-rv",
        "--split",
        "test",
        "--fact",
        "1",
        "--position",
        "1",
        "--top",
        "4",
        "--out",
        path_str(&an),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(an.join("analysis.tsv")).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "token\td\tscore");
    assert_eq!(lines.len(), 5);
    let ds: Vec<i64> = lines[1..].iter().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(ds.windows(2).all(|w| w[0] <= w[1]), "{ds:?}");

    let o = nalp(&[
        "analyze",
        "--checkpoint",
        path_str(&ckpt),
        "--dataset",
        path_str(&data),
        "--format",
        "tsv-rv",
        "--fact",
        "99",
        "--out",
        path_str(&an),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn overfit_toy_ranks_every_value_first() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    toy_dataset(&data);
    let run = dir.path().join("run");
    let o = train_toy(&data, &run, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev = dir.path().join("eval");
    let o = nalp(&[
        "evaluate",
        "--checkpoint",
        path_str(&run.join("model.ckpt")),
        "--dataset",
        path_str(&data),
        "--format",
        "tsv-rv",
        "--task",
        "value",
        "--out",
        path_str(&ev),
    ]);
    assert_eq!(code(&o), 0);
    let tsv = fs::read_to_string(ev.join("report.tsv")).unwrap();
    let mrr = tsv.lines().find(|l| l.starts_with("value\toverall\tmrr\t")).unwrap();
    assert_eq!(mrr.split('\t').nth(3).unwrap(), "1.000000", "{tsv}");
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    toy_dataset(&data);
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let o = train_toy(&data, &run, &[("--mode", "nalp+"), ("--max-epochs", "20"), ("--seed", "5")]);
        assert_eq!(code(&o), 0);
        let ev = run.join("eval");
        let o = nalp(&[
            "--workers",
            if name == "a" { "1" } else { "3" },
            "evaluate",
            "--checkpoint",
            path_str(&run.join("model.ckpt")),
            "--dataset",
            path_str(&data),
            "--format",
            "tsv-rv",
            "--out",
            path_str(&ev),
        ]);
        assert_eq!(code(&o), 0);
        runs.push((
            fs::read(run.join("model.ckpt")).unwrap(),
            fs::read(ev.join("report.tsv")).unwrap(),
            fs::read(ev.join("report.txt")).unwrap(),
        ));
    }
    assert!(runs[0] == runs[1]);
}

#[test]
fn subset_drops_binary_facts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    toy_dataset(&data);
    let out = dir.path().join("sub");
    let o = nalp(&[
        "subset",
        "--dataset",
        path_str(&data),
        "--format",
        "tsv-rv",
        "--keep-pct",
        "0",
        "--seed",
        "1",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let train = fs::read_to_string(out.join("train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 7);
    assert!(train.lines().all(|l| l.split('\t').count() == 6));
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("keep_pct=0\n"));

    // 1:1 with five binary and seven n-ary training facts keeps everything
    let o = nalp(&[
        "subset",
        "--dataset",
        path_str(&data),
        "--format",
        "tsv-rv",
        "--ratio",
        "1:1",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("train.tsv")).unwrap().lines().count(), 12);

    let o = nalp(&["subset", "--dataset", path_str(&data), "--out", path_str(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn flops_reports_counts() {
    let o = nalp(&["flops", "--roles", "5", "--values", "20", "--k", "4", "--nf", "3", "--n-gfcn", "5"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    // 5·4 + 20·4 + 2·4·3 + 2·3 + 2·3·5 + 5 + 5 + 1
    assert!(text.lines().any(|l| l == "params_nalp\t171"), "{text}");
    assert!(text.lines().any(|l| l == "params_type\t0"));

    assert_eq!(code(&nalp(&["flops", "--roles", "5"])), 1);
}
