use std::path::Path;
use std::process::{Command, Output};

fn ksoftmax(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksoftmax"))
        .args(args)
        .current_dir(dir)
        .env_remove("KSOFTMAX_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--synth.vocab",
    "20",
    "--synth.tokens",
    "2000",
    "--model.d",
    "6",
    "--model.embed_dim",
    "4",
    "--train.max_epochs",
    "2",
];

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec!["train", "--out", out];
    a.extend_from_slice(TINY);
    a.extend_from_slice(extra);
    a
}

#[test]
fn train_then_eval_prints_one_ppl_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = ksoftmax(dir.path(), &train_args("run", &["--seed", "4"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "config.toml",
        "metrics.csv",
        "train.log",
        "best/checkpoint.bin",
        "last/checkpoint.bin",
    ] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let o = ksoftmax(dir.path(), &["eval", "--checkpoint", "run/best", "--split", "test"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let ppl: f64 = out.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(ppl > 1.0 && ppl < 40.0, "{out}");
}

#[test]
fn config_file_flags_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.toml"),
        "[model]\nkernels = \"lin,rbf\"\n[train]\nseed = 9\nlearning_rate = 0.01\n",
    )
    .unwrap();
    let o = ksoftmax(
        dir.path(),
        &train_args(
            "run",
            &[
                "--config",
                "cfg.toml",
                "--train.learning-rate",
                "0.002",
                "--set",
                "model.rho=0.5",
            ],
        ),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = std::fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(echo.contains("kernels = \"lin,rbf\""), "{echo}");
    assert!(echo.contains("learning_rate = 0.002"), "{echo}");
    assert!(echo.contains("rho = 0.5"), "{echo}");
    assert!(echo.contains("seed = 9"), "{echo}");
    let header = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,train_loss,dev_ppl,pi_mean_1,pi_mean_2,reg_term\n"));
}

#[test]
fn identical_argv_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = ksoftmax(
            dir.path(),
            &train_args(out, &["--seed", "2", "--model.kernels", "lin,pow"]),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in [
        "metrics.csv",
        "config.toml",
        "best/checkpoint.bin",
        "last/checkpoint.bin",
        "best/vocab.txt",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let log = |d: &str| std::fs::read_to_string(dir.path().join(d).join("train.log")).unwrap();
    let (la, lb) = (log("a"), log("b"));
    assert_eq!(
        la.lines().skip(1).collect::<Vec<_>>(),
        lb.lines().skip(1).collect::<Vec<_>>()
    );
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ksoftmax"))
        .args(train_args("run", &[]))
        .current_dir(dir.path())
        .env("KSOFTMAX_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = std::fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(echo.contains("seed = 17"), "{echo}");
}

#[test]
fn validation_errors_exit_one_with_specific_messages() {
    let dir = tempfile::tempdir().unwrap();
    let o = ksoftmax(dir.path(), &["train", "--out", "x", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bogus"));

    let o = ksoftmax(dir.path(), &["train", "--out", "x", "--train.lernrate", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lernrate"));

    std::fs::write(
        dir.path().join("bad.toml"),
        "[train]\nbatch_size = 8\nmax_epochs = \"many\"\n",
    )
    .unwrap();
    let o = ksoftmax(dir.path(), &["train", "--out", "x", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("line 3") && e.contains("max_epochs"), "{e}");

    let o = ksoftmax(dir.path(), &["train", "--out", "x", "--model.kernels", "rbf:gama=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gama"));
}

#[test]
fn divergence_exits_two_and_keeps_last_state() {
    let dir = tempfile::tempdir().unwrap();
    let o = ksoftmax(
        dir.path(),
        &train_args(
            "run",
            &[
                "--model.kernels",
                "pol:p=3",
                "--train.optimizer",
                "sgd",
                "--train.learning_rate",
                "1e200",
            ],
        ),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence detected at step"));
    assert!(dir.path().join("run/last/checkpoint.bin").exists());
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = ksoftmax(
        dir.path(),
        &["gradcheck", "--kernel", "rbf", "--dims", "2,8,32", "--trials", "100"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("PASS")).count(), 3);
    let o = ksoftmax(
        dir.path(),
        &[
            "gradcheck",
            "--kernel",
            "rbf",
            "--trials",
            "5",
            "--rel-tol",
            "0",
            "--abs-tol",
            "0",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn curves_write_one_csv_per_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let o = ksoftmax(
        dir.path(),
        &[
            "curves",
            "--kernels",
            "rbf,wav,log,pow",
            "--xmax",
            "10",
            "--steps",
            "200",
            "--out",
            "c",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for k in ["rbf", "wav", "log", "pow"] {
        let csv = std::fs::read_to_string(dir.path().join("c").join(format!("{k}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 201, "{k}");
    }
}

#[test]
fn grid_emits_ranked_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "grid",
        "--out",
        "g",
        "--jobs",
        "2",
        "--axis",
        "model.rho=0.001,0.01,0.1,1",
        "--model.kernels",
        "lin,rbf",
    ];
    args.extend_from_slice(TINY);
    let o = ksoftmax(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("g/grid.tsv")).unwrap();
    assert_eq!(table, stdout(&o));
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().next().unwrap().contains("model.rho"));
}

#[test]
fn synth_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "synth",
        "--zipf-s",
        "1.2",
        "--vocab",
        "30",
        "--tokens",
        "500",
        "--seed",
        "3",
        "--out",
        "corpus.txt",
    ];
    assert_eq!(ksoftmax(dir.path(), &args).status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("corpus.txt")).unwrap();
    assert_eq!(text.split_whitespace().count(), 500);
    let o = ksoftmax(dir.path(), &args[..args.len() - 2]);
    assert_eq!(stdout(&o), text);

    let o = ksoftmax(
        dir.path(),
        &train_args("run", &["--data.corpus", "corpus.txt", "--seed", "1"]),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let probe = [
        "probe",
        "--checkpoint",
        "run/best",
        "--query",
        "w1",
        "--context",
        "w2 w3",
        "--top",
        "3",
    ];
    let a = ksoftmax(dir.path(), &probe);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(stdout(&a).starts_with("query w1"));
    assert_eq!(stdout(&a), stdout(&ksoftmax(dir.path(), &probe)));
    let mut tsv = probe.to_vec();
    tsv.push("--tsv");
    assert!(stdout(&ksoftmax(dir.path(), &tsv)).lines().all(|l| l.contains('\t')));

    let o = ksoftmax(
        dir.path(),
        &["probe", "--checkpoint", "run/best", "--query", "nosuchword"],
    );
    assert_eq!(o.status.code(), Some(1));
}
