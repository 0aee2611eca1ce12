use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vminet::train::{read_metrics, synthetic, write_cifar_file, Split};

fn vminet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vminet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_is_reproducible() {
    let a = vminet(&["verify", "--seed", "1"]);
    let b = vminet(&["verify", "--seed", "1"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("6/6 suites passed"));
    let few = vminet(&["verify", "--seed", "1", "--trials", "2"]);
    assert_eq!(few.status.code(), Some(0));
}

#[test]
fn bench_writes_the_documented_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = vminet(&[
        "bench",
        "--kernel",
        "separable_sa,vmi_sa_matrix",
        "--lengths",
        "32,64,128",
        "--dim",
        "8",
        "--reps",
        "5",
        "--out",
        path(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kernel,L,D,median_s,iqr_s"));
    assert_eq!(lines.count(), 6);
    assert!(stdout(&o).contains("slope"));
}

#[test]
fn eval_reproduces_the_final_logged_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (train_bin, val_bin) = (dir.path().join("train.bin"), dir.path().join("val.bin"));
    write_cifar_file(&synthetic(48, 3, 1, Split::Train).unwrap(), &train_bin).unwrap();
    write_cifar_file(&synthetic(40, 3, 2, Split::Val).unwrap(), &val_bin).unwrap();
    let run = dir.path().join("run");
    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        format!(
            "# two quick epochs\nepochs = 2\nbatch_size = 16\nlr_base = 0.005\ndata = {}\nval_data = {}\noutput_dir = {}\n",
            path(&train_bin),
            path(&val_bin),
            path(&run)
        ),
    )
    .unwrap();
    let t = vminet(&["train", "--config", path(&config)]);
    assert_eq!(
        t.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&t.stderr)
    );
    let logged = read_metrics(&run.join("metrics.csv"))
        .unwrap()
        .last()
        .unwrap()
        .val_acc;

    let e = vminet(&[
        "eval",
        "--checkpoint",
        path(&run.join("checkpoint.vmin")),
        "--data",
        path(&val_bin),
        "--batch-size",
        "9",
    ]);
    assert_eq!(
        e.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&e.stderr)
    );
    let acc: f64 = stdout(&e)
        .trim()
        .strip_prefix("accuracy ")
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(acc, logged);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(vminet(&["verify", "--bogus"]).status.code(), Some(2));
    assert_eq!(vminet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        vminet(&["bench", "--kernel", "vmi_sa_matrix"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(vminet(&[]).status.code(), Some(2));
}

#[test]
fn help_documents_every_flag() {
    let top = vminet(&["--help"]);
    assert_eq!(top.status.code(), Some(0));
    for sub in ["train", "eval", "bench", "verify"] {
        assert!(stdout(&top).contains(sub));
    }
    let cases: [(&str, &[&str]); 4] = [
        ("train", &["--config"]),
        ("eval", &["--checkpoint", "--data", "--batch-size"]),
        (
            "bench",
            &[
                "--kernel",
                "--lengths",
                "--dim",
                "--reps",
                "--out",
                "--seed",
            ],
        ),
        ("verify", &["--seed", "--trials"]),
    ];
    for (sub, flags) in cases {
        let h = stdout(&vminet(&[sub, "--help"]));
        for f in flags {
            assert!(h.contains(f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = vminet(&["train", "--config", path(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cfg"));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "learning_rate = 1\n").unwrap();
    assert_eq!(
        vminet(&["train", "--config", path(&bad)]).status.code(),
        Some(1)
    );
}
