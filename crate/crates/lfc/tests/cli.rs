use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfc_core::checkpoint;
use lfc_core::model::{ModelBranch, Role, SegNetConfig};

fn lfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfc")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    let out = lfc(&[
        "gen-data", "--out", p(&data), "--seed", "5", "--source-train", "20", "--target-train", "6", "--target-test", "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn write_config(root: &Path, name: &str, text: &str) -> PathBuf {
    let path = root.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&lfc(&["gen-data"])), 2);
    assert_eq!(code(&lfc(&["no-such-command"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let spec = write_config(dir.path(), "bad.spec", "name = x\nbackground_level = 2\n");
    let out = lfc(&["gen-data", "--out", p(&dir.path().join("d")), "--source-spec", p(&spec)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_is_deterministic_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let manifest = fs::read_to_string(data.join("target/test/manifest.txt")).unwrap();
    assert!(manifest.contains("count = 4\n"));
    assert_eq!(fs::read_dir(data.join("source/train/images")).unwrap().count(), 20);

    let again = lfc(&["gen-data", "--out", p(&data), "--seed", "5", "--source-train", "20", "--target-train", "6", "--target-test", "4"]);
    assert_eq!(code(&again), 3);
    let other = dir.path().join("other");
    let out = lfc(&["gen-data", "--out", p(&other), "--seed", "5", "--source-train", "20", "--target-train", "6", "--target-test", "4"]);
    assert_eq!(code(&out), 0);
    assert_eq!(files(&data), files(&other));
    let forced = lfc(&["gen-data", "--out", p(&other), "--seed", "6", "--source-train", "20", "--target-train", "6", "--target-test", "4", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_ne!(files(&data), files(&other));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let report = dir.path().join("oracle.csv");
    let out = lfc(&["evaluate", "--oracle", "--data", p(&data), "--split", "test", "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class,metric,mean,std,n,excluded");
    assert_eq!(&lines[1..], ["disc,dice,100,0,4,0", "disc,asd,0,0,4,0", "cup,dice,100,0,4,0", "cup,asd,0,0,4,0"]);
    let missing = lfc(&["evaluate", "--model", p(&dir.path().join("nope.ckpt")), "--data", p(&data), "--out", p(&report)]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn source_training_with_zero_epochs_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = write_config(dir.path(), "run.cfg", "seed = 9\nsource_epochs = 0\n");
    let out_dir = dir.path().join("src");
    let out = lfc(&["train-source", "--data", p(&data), "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut init = ModelBranch::build(SegNetConfig::default(), 9).unwrap();
    init.role = Role::Source;
    assert_eq!(fs::read(out_dir.join("model.ckpt")).unwrap(), checkpoint::encode(&init));
    let resolved = fs::read_to_string(out_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("source_epochs = 0\n") && resolved.contains("tau = 0.99\n"));

    let report = dir.path().join("val.csv");
    let out = lfc(&["evaluate", "--model", p(&out_dir.join("model.ckpt")), "--data", p(&data), "--split", "source", "--out", p(&report)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&report).unwrap(), fs::read(out_dir.join("source_val_report.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = write_config(dir.path(), "bad.cfg", "seed = 1\nwarmup = 3\n");
    let out = lfc(&["train-source", "--data", p(&data), "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `warmup`"));
}

#[test]
fn adapt_modes_evaluate_and_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = write_config(dir.path(), "run.cfg", "seed = 2\nsource_epochs = 1\nepochs = 2\n");
    let src = dir.path().join("src");
    assert_eq!(code(&lfc(&["train-source", "--data", p(&data), "--config", p(&cfg), "--out", p(&src)])), 0);
    let ckpt = src.join("model.ckpt");
    let before = fs::read(&ckpt).unwrap();

    let run = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["adapt", "--source-model", p(&ckpt), "--data", p(&data), "--config", p(&cfg), "--out"];
        let out_s = out_dir.to_str().unwrap().to_string();
        args.push(&out_s);
        args.extend_from_slice(extra);
        let out = lfc(&args);
        (code(&out), out_dir, String::from_utf8_lossy(&out.stderr).into_owned())
    };

    let (c, e2h, err) = run("e2h", &["--ablation", "no_easy2hard"]);
    assert_eq!(c, 0, "{err}");
    let steps = fs::read_to_string(e2h.join("step_log.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(steps.as_bytes());
    let omega_col = rdr.headers().unwrap().iter().position(|h| h == "omega").unwrap();
    for rec in rdr.records() {
        assert!(rec.unwrap()[omega_col].split(';').all(|w| w == "1"));
    }

    let (c, s2t, err) = run("s2t", &["--ablation", "no_src2tgt"]);
    assert_eq!(c, 0, "{err}");
    assert!(!s2t.join("momentum.ckpt").exists());
    let epoch_log = fs::read_to_string(s2t.join("epoch_log.csv")).unwrap();
    assert_eq!(epoch_log.lines().next().unwrap(), "epoch,alpha,mean_omega,l_fix,l_sl,l_total,dice_val");
    assert!(epoch_log.lines().skip(1).all(|l| l.split(',').nth(4) == Some("")));

    let (c, full_a, _) = run("full_a", &[]);
    assert_eq!(c, 0);
    let (c, full_b, _) = run("full_b", &[]);
    assert_eq!(c, 0);
    assert_eq!(files(&full_a), files(&full_b));
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    let report = dir.path().join("eval.csv");
    let out = lfc(&["evaluate", "--model", p(&full_a.join("model.ckpt")), "--data", p(&data), "--out", p(&report)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&report).unwrap(), fs::read(full_a.join("report.csv")).unwrap());
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 5);

    let (c, _, _) = run("full_a", &[]);
    assert_eq!(c, 3);

    let wild = write_config(dir.path(), "wild.cfg", "seed = 2\nepochs = 3\nlr = 1e300\n");
    let out_dir = dir.path().join("wild");
    let out = lfc(&["adapt", "--source-model", p(&ckpt), "--data", p(&data), "--config", p(&wild), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("divergence.txt").exists());
}

#[test]
fn ablation_suite_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = write_config(dir.path(), "run.cfg", "seed = 1\nsource_epochs = 1\nepochs = 1\n");
    let out_dir = dir.path().join("suite");
    let out = lfc(&["ablate-suite", "--data", p(&data), "--config", p(&cfg), "--seeds", "2", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "mode,seeds,disc_dice,disc_asd,cup_dice,cup_asd,mean_dice");
    let modes: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["full", "no_easy2hard", "no_src2tgt", "no_adaptation"]);

    let report = dir.path().join("raw.csv");
    let src = out_dir.join("source/model.ckpt");
    assert_eq!(code(&lfc(&["evaluate", "--model", p(&src), "--data", p(&data), "--out", p(&report)])), 0);
    assert_eq!(
        fs::read(&report).unwrap(),
        fs::read(out_dir.join("no_adaptation/seed1/report.csv")).unwrap()
    );
}
