use std::path::Path;
use std::process::{Command, Output};

fn acfseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acfseg"))
        .args(args)
        .current_dir(cwd)
        .env("ACFSEG_THREADS", "1")
        .output()
        .expect("spawn acfseg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Tiny dataset plus a config that trains for a handful of steps.
fn setup(dir: &Path) {
    std::fs::write(dir.join("spec.txt"), "num_train = 4\nnum_val = 2\nimage_size = 32\n").unwrap();
    std::fs::write(
        dir.join("train.cfg"),
        "base_channels = 4\nreduced_channels = 4\nhead_channels = 4\nbatch_size = 2\ncrop = 32\nmax_iter = 4\ncheckpoint_every = 2\neval_every = 2\n",
    )
    .unwrap();
    let o = acfseg(&["gen-data", "--spec", "spec.txt", "--out", "data", "--seed", "5"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "--data", "d", "--out", "o", "--nope"],
        &["eval", "--data", "d"],
        &["simmap", "--checkpoint", "c", "--image", "i", "--row", "1", "--col", "1", "--stage", "middle", "--out", "o"],
        &[],
    ] {
        let o = acfseg(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error:") || stderr(&o).contains("Usage"), "{args:?}");
    }
    assert_eq!(acfseg(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.cfg"), "learning_rate = 0.1\n").unwrap();
    std::fs::write(p.join("bad.ppm"), b"P6\n4 4\n255\nabc").unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["train", "--data", "missing", "--out", "run"], "manifest.txt"),
        (&["train", "--config", "bad.cfg", "--data", "missing", "--out", "run"], "unknown key `learning_rate`"),
        (&["infer", "--checkpoint", "missing.ckpt", "--image", "bad.ppm", "--out", "x.pgm"], "missing.ckpt"),
        (&["gradcheck", "--op", "no_such_op"], "unknown op `no_such_op`"),
    ];
    for (args, needle) in cases {
        let o = acfseg(args, p);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains(needle), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn size_mismatch_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    let label = p.join("data/labels/train_0001.pgm");
    std::fs::write(&label, [b"P5\n8 8\n255\n".as_slice(), &[0u8; 64]].concat()).unwrap();
    let o = acfseg(&["train", "--config", "train.cfg", "--data", "data", "--out", "run"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train_0001"), "{}", stderr(&o));
    assert!(!p.join("run/metrics.csv").exists());
}

#[test]
fn pipeline_commands_produce_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);

    let o = acfseg(&["train", "--config", "train.cfg", "--data", "data", "--out", "run"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "final.ckpt", "ckpt_000002.ckpt", "eval.csv"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("iter,lr,loss_total"));

    let o = acfseg(&["eval", "--checkpoint", "run/final.ckpt", "--data", "data", "--scales", "0.75,1", "--flip"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("class_id,class_name,iou_coarse,iou_fine\n0,background,"), "{csv}");
    assert!(csv.contains("summary,miou,"));

    let o = acfseg(&["eval", "--checkpoint", "run/final.ckpt", "--data", "data", "--out", "report.csv"], p);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(p.join("report.csv")).unwrap().contains("summary,pixel_accuracy,"));

    let o = acfseg(&["infer", "--checkpoint", "run/final.ckpt", "--image", "data/images/val_0000.ppm", "--out", "pred.pgm"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = acfseg::data::netpbm::read_pgm(&p.join("pred.pgm")).unwrap();
    assert_eq!((pred.width, pred.height), (32, 32));
    assert!(pred.data.iter().all(|&v| v < 4));
    for k in 0..4 {
        let prob = acfseg::data::netpbm::read_pgm(&p.join(format!("pred_prob{k}.pgm"))).unwrap();
        assert_eq!((prob.width, prob.height), (32, 32));
    }

    for stage in ["coarse", "fine"] {
        let out = format!("sim_{stage}.pgm");
        let args = ["simmap", "--checkpoint", "run/final.ckpt", "--image", "data/images/val_0000.ppm", "--row", "9", "--col", "30", "--stage", stage, "--out", &out];
        let o = acfseg(&args, p);
        assert!(o.status.success(), "{}", stderr(&o));
        let sim = acfseg::data::netpbm::read_pgm(&p.join(&out)).unwrap();
        assert_eq!((sim.width, sim.height), (4, 4));
        // Anchor (9, 30) maps to cell (1, 3), whose self-similarity is 1.
        assert_eq!(sim.data[4 + 3], 255);
    }
}

#[test]
fn gradcheck_subcommand_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = acfseg(&["gradcheck", "--op", "relu", "--op", "softmax", "--seeds", "2", "--seed", "10"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("relu") && out.contains("seed  11"), "{out}");
    assert!(out.ends_with("4 checks, 0 failed\n"), "{out}");
    let list = stdout(&acfseg(&["gradcheck", "--list"], dir.path()));
    assert!(list.lines().any(|l| l == "acf_sum"));
}
