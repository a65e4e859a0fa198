use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nodule_cascade::eval::auc;
use nodule_cascade::nn::{load_checkpoint, save_checkpoint, ArchConfig, ArchId, Model, ModelCheckpoint};
use nodule_cascade::rng::derive_seed;
use nodule_cascade::{Label, MaskVolume};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodule-cascade"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four small phantoms under `dir/data`.
fn phantoms(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&[
        "gen-phantom",
        "--seed",
        "7",
        "--cases-per-class",
        "2",
        "--dims",
        "32,32,12",
        "--malignant-diameter",
        "8,10",
        "--out",
        s(&d),
    ]);
    d
}

#[test]
fn gen_phantom_counts_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let a = ok(&["gen-phantom", "--seed", "7", "--cases-per-class", "2", "--dims", "32,32,12", "--malignant-diameter", "8,10", "--out", s(&t.path().join("a"))]);
    let b = ok(&["gen-phantom", "--seed", "7", "--cases-per-class", "2", "--dims", "32,32,12", "--malignant-diameter", "8,10", "--out", s(&t.path().join("b"))]);
    assert_eq!(a, b);
    assert_eq!(a.trim().len(), 64);
    let n = fs::read_dir(t.path().join("a/volumes"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "mhd")
        .count();
    assert_eq!(n, 4);
    let cfg = fs::read_to_string(t.path().join("a/config.txt")).unwrap();
    assert!(cfg.contains("seed = 7\n") && cfg.contains("cases-per-class = 2\n"), "{cfg}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["gen-phantom", "--seed", "7"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["gen-phantom", "--out", "x", "--seed", "seven"]).status.code(), Some(2));
    assert_eq!(run(&["train-cls", "--volumes", "v", "--labels", "l", "--out", "o"]).status.code(), Some(2));
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.txt");
    fs::write(&cfg, "no-such-key = 1\n").unwrap();
    let out = run(&["gen-phantom", "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    let blocker = t.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = run(&["gen-phantom", "--cases-per-class", "1", "--dims", "32,32,12", "--malignant-diameter", "8,10", "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn config_file_with_flag_override() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.txt");
    fs::write(&cfg, format!("seed = 3\ncases-per-class = 1\ndims = 32,32,12\nmalignant-diameter = 8,10\nout = {}\n", s(&t.path().join("x")))).unwrap();
    ok(&["gen-phantom", "--config", s(&cfg), "--seed", "4"]);
    let echo = fs::read_to_string(t.path().join("x/config.txt")).unwrap();
    assert!(echo.contains("seed = 4\n"), "{echo}");
    // the echoed config reproduces the run
    let again = t.path().join("again.txt");
    fs::write(&again, echo.replace(s(&t.path().join("x")), s(&t.path().join("y")))).unwrap();
    ok(&["gen-phantom", "--config", s(&again)]);
    assert_eq!(
        fs::read(t.path().join("x/manifest.csv")).unwrap(),
        fs::read(t.path().join("y/manifest.csv")).unwrap()
    );
}

#[test]
fn build_masks_pads_and_handles_empty_tables() {
    let t = tempfile::tempdir().unwrap();
    let d = phantoms(t.path());
    let m = t.path().join("m");
    ok(&["build-masks", "--volumes", s(&d.join("volumes")), "--annotations", s(&d.join("annotations.csv")), "--out", s(&m)]);
    assert!(fs::read_to_string(m.join("config.txt")).unwrap().contains("pad = 5\n"));
    let slices = fs::read_to_string(m.join("slices.csv")).unwrap();
    assert!(slices.starts_with("seriesuid,slice_index\n"));
    // padded by 5 on each side of the nodule, clamped to the 12 slices
    let first_uid = slices.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let got: Vec<usize> = slices
        .lines()
        .filter_map(|l| l.strip_prefix(&format!("{first_uid},")))
        .map(|z| z.parse().unwrap())
        .collect();
    let mask = MaskVolume::load(m.join(format!("{first_uid}.mhd"))).unwrap();
    let occupied: Vec<usize> = (0..12).filter(|&z| mask.voxels[z * 1024..(z + 1) * 1024].iter().any(|&v| v > 0)).collect();
    let expected: Vec<usize> = (occupied[0].saturating_sub(5)..=(occupied[occupied.len() - 1] + 5).min(11)).collect();
    assert_eq!(got, expected);

    let m2 = t.path().join("m2");
    ok(&["build-masks", "--volumes", s(&d.join("volumes")), "--annotations", s(&d.join("annotations.csv")), "--out", s(&m2)]);
    for f in fs::read_dir(&m).unwrap() {
        let name = f.unwrap().file_name();
        if name == "config.txt" {
            continue;
        }
        assert_eq!(fs::read(m.join(&name)).unwrap(), fs::read(m2.join(&name)).unwrap(), "{name:?}");
    }

    let empty = t.path().join("empty.csv");
    fs::write(&empty, "seriesuid,coordX,coordY,coordZ,diameter_mm\n").unwrap();
    let e = t.path().join("e");
    ok(&["build-masks", "--volumes", s(&d.join("volumes")), "--annotations", s(&empty), "--out", s(&e)]);
    assert_eq!(fs::read_dir(&e).unwrap().filter(|f| f.as_ref().unwrap().path().extension().unwrap() == "mhd").count(), 0);

    let orphan = t.path().join("orphan.csv");
    fs::write(&orphan, "seriesuid,coordX,coordY,coordZ,diameter_mm\nmissing,0,0,0,5\n").unwrap();
    let vols = d.join("volumes");
    let args = ["build-masks", "--volumes", s(&vols), "--annotations", s(&orphan), "--out", s(&e)];
    assert!(run(&args).status.success());
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(run(&strict).status.code(), Some(1));
}

#[test]
fn train_seg_defaults_zero_epochs_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let d = phantoms(t.path());
    let (vols, masks) = (d.join("volumes"), d.join("masks"));
    let base = |out: &Path, extra: &[&str]| {
        let mut a = vec!["train-seg", "--volumes", s(&vols), "--masks", s(&masks)];
        a.extend_from_slice(extra);
        a.extend(["--out", s(out)]);
        a.iter().map(|x| x.to_string()).collect::<Vec<_>>()
    };
    let call = |a: Vec<String>| ok(&a.iter().map(String::as_str).collect::<Vec<_>>());

    let z = t.path().join("zero");
    call(base(&z, &["--epochs", "0", "--seed", "5"]));
    let ck = load_checkpoint(z.join("checkpoint.json")).unwrap();
    let init: Model<f32> = Model::new(ArchConfig::new(ArchId::Segmentation, 32, 32), derive_seed(5, "seg-init")).unwrap();
    assert_eq!(ck.tensors, ModelCheckpoint::from_model(&init, Default::default()).tensors);
    let echo = fs::read_to_string(z.join("config.txt")).unwrap();
    assert!(echo.contains("batch-size = 16\n") && echo.contains("lr = 0.0001\n"), "{echo}");
    assert_eq!(fs::read_to_string(z.join("history.csv")).unwrap(), "epoch,train_loss,val_loss,val_accuracy\n");

    let a = t.path().join("a");
    let b = t.path().join("b");
    let da = call(base(&a, &["--epochs", "1", "--max-steps", "1", "--batch-size", "4"]));
    let db = call(base(&b, &["--epochs", "1", "--max-steps", "1", "--batch-size", "4"]));
    assert_eq!(da, db);
    for f in ["checkpoint.json", "checkpoint.bin", "history.csv", "split.csv", "config.txt"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        if f == "config.txt" {
            assert_eq!(String::from_utf8(x).unwrap().replace(s(&a), ""), String::from_utf8(y).unwrap().replace(s(&b), ""));
        } else {
            assert_eq!(x, y, "{f}");
        }
    }
}

fn seg_with_head_bias(hw: usize, bias: f32) -> ModelCheckpoint {
    let mut m: Model<f32> = Model::new(ArchConfig::new(ArchId::Segmentation, hw, hw), 0).unwrap();
    let last = m.net.params.len();
    m.net.params[last - 2].iter_mut().for_each(|v| *v = 0.0);
    m.net.params[last - 1][0] = bias;
    ModelCheckpoint::from_model(&m, Default::default())
}

#[test]
fn screen_infer_and_eval() {
    let t = tempfile::tempdir().unwrap();
    let d = phantoms(t.path());
    let vols = d.join("volumes");
    let quiet = t.path().join("quiet.json");
    save_checkpoint(&seg_with_head_bias(32, -20.0), &quiet).unwrap();

    let sc = t.path().join("screen");
    ok(&["screen", "--seg-ckpt", s(&quiet), "--volumes", s(&vols), "--out", s(&sc)]);
    assert!(fs::read_to_string(sc.join("config.txt")).unwrap().contains("threshold = 0.35\n"));
    let one = fs::read_dir(&sc)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_str().unwrap().ends_with(".screen.csv"))
        .unwrap();
    let text = fs::read_to_string(one).unwrap();
    assert!(text.starts_with("seriesuid,slice_index,max_prob,suspicious\n"));
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));

    // a classifier checkpoint to pair with it
    let cls: Model<f32> = Model::new(ArchConfig::new(ArchId::Classifier, 32, 32), 1).unwrap();
    let cls_path = t.path().join("cls.json");
    save_checkpoint(&ModelCheckpoint::from_model(&cls, Default::default()), &cls_path).unwrap();

    let inf = t.path().join("infer");
    ok(&["infer", "--seg-ckpt", s(&quiet), "--cls-ckpt", s(&cls_path), "--volumes", s(&vols), "--out", s(&inf)]);
    let verdicts = fs::read_to_string(inf.join("verdicts.csv")).unwrap();
    assert_eq!(verdicts.lines().next().unwrap(), "seriesuid,case_score,label,n_suspicious_slices,no_findings");
    assert_eq!(verdicts.lines().count(), 5);
    assert!(verdicts.lines().skip(1).all(|l| l.ends_with(",0.000000,benign,0,1")), "{verdicts}");

    // swapped checkpoints are rejected at runtime
    let bad = run(&["infer", "--seg-ckpt", s(&cls_path), "--cls-ckpt", s(&quiet), "--volumes", s(&vols), "--out", s(&inf)]);
    assert_eq!(bad.status.code(), Some(1));

    // a loud screener sends every slice to the classifier
    let loud = t.path().join("loud.json");
    save_checkpoint(&seg_with_head_bias(32, 20.0), &loud).unwrap();
    let inf2 = t.path().join("infer2");
    ok(&["infer", "--seg-ckpt", s(&loud), "--cls-ckpt", s(&cls_path), "--volumes", s(&vols), "--out", s(&inf2), "--workers", "2"]);

    let ev = t.path().join("eval");
    let labels = d.join("labels.csv");
    let stdout = ok(&[
        "eval",
        "--labels",
        s(&labels),
        "--verdicts",
        &format!("quiet={}", s(&inf.join("verdicts.csv"))),
        "--verdicts",
        &format!("loud={}", s(&inf2.join("verdicts.csv"))),
        "--seg-ckpt",
        s(&loud),
        "--volumes",
        s(&vols),
        "--masks",
        s(&d.join("masks")),
        "--out",
        s(&ev),
    ]);
    assert!(stdout.contains("Accuracy"), "{stdout}");
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    let scores = fs::read_to_string(ev.join("case_scores.csv")).unwrap();
    let truths: Vec<bool> = scores
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<Label>().unwrap().is_malignant())
        .collect();
    for (col, row) in [(2usize, 1usize), (3, 2)] {
        let sc: Vec<f64> = scores.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
        let reported: f64 = report.lines().nth(row).unwrap().split(',').nth(5).unwrap().parse().unwrap();
        assert!((reported - auc(&sc, &truths).unwrap()).abs() < 1e-4, "{report}");
    }
    let seg = fs::read_to_string(ev.join("segmentation.csv")).unwrap();
    assert!(seg.starts_with("level,auc,items\npixel,0.500000,"), "{seg}");
    assert!(ev.join("roc_pixel.csv").exists() && ev.join("roc_case_loud.csv").exists());
}
