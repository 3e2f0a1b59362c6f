use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
levels=2
channels=2,4
latent-channels=1,2
patch-size=8
volume-edge=16
radius-min=3
radius-max=4
train-count=3
val-count=2
test-count=2
max-iters=4
val-every=2
save-every=2
val-samples=1
infer-samples=2
";

fn hved(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hved")).args(args).env_remove("HVED_SEED").output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(extra: &str) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("{SMALL}{extra}")).unwrap();
    let data = dir.path().join("data");
    ok(hved(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    (dir, cfg, data)
}

#[test]
fn gen_data_writes_manifest_and_volumes() {
    let (_dir, _cfg, data) = setup("");
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "train_0000 1000 train");
    assert_eq!(lines[6], "test_0001 1006 test");
    for m in ["flair", "t1", "t1c", "t2", "seg"] {
        assert!(data.join(format!("val_0001_{m}.hvt")).is_file());
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let (dir, cfg, data) = setup("");
    let run = dir.path().join("run");
    ok(hved(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--log-every", "1"]));
    for f in ["last.ckpt", "best.ckpt", "loss_log.csv", "val_log.csv", "config.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "iter,lr,dice,ce,l2,kl,total");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[6], v[2] + v[3] + 0.1 * v[4] + 0.1 * v[5]);
    }

    // T2 only: one encoder, four reconstructions.
    let input = dir.path().join("case");
    fs::create_dir_all(&input).unwrap();
    fs::copy(data.join("test_0000_t2.hvt"), input.join("t2.hvt")).unwrap();
    let out = dir.path().join("pred");
    ok(hved(&["infer", "--ckpt", s(&run.join("best.ckpt")), "--subset", "0001", "--in", s(&input), "--out", s(&out)]));
    for f in ["recon_flair", "recon_t1", "recon_t1c", "recon_t2", "seg_probs", "labels"] {
        assert!(out.join(format!("{f}.hvt")).is_file(), "{f}");
    }

    // FLAIR requested but absent: fails before writing anything.
    let missing = dir.path().join("pred2");
    let res = hved(&["infer", "--ckpt", s(&run.join("best.ckpt")), "--subset", "1001", "--in", s(&input), "--out", s(&missing)]);
    assert_eq!(res.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&res.stderr).contains("flair"));
    assert!(!missing.exists());

    let report = dir.path().join("report.csv");
    let table = ok(hved(&["eval", "--ckpt", s(&run.join("best.ckpt")), "--data", s(&data), "--out", s(&report)]));
    assert!(table.contains("means"));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert_eq!(csv.lines().next().unwrap(), "subset-mask,complete,core,enhancing");
    let again = dir.path().join("report2.csv");
    ok(hved(&["eval", "--ckpt", s(&run.join("best.ckpt")), "--data", s(&data), "--out", s(&again)]));
    assert_eq!(csv, fs::read_to_string(&again).unwrap());
}

#[test]
fn eval_with_moments_baseline_adds_columns() {
    let (dir, cfg, data) = setup("");
    let poe = dir.path().join("poe");
    ok(hved(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&poe)]));
    let mcfg = dir.path().join("moments.cfg");
    fs::write(&mcfg, format!("{SMALL}fusion=moments\n")).unwrap();
    let moments = dir.path().join("moments");
    ok(hved(&["train", "--config", s(&mcfg), "--data", s(&data), "--out", s(&moments)]));
    let report = dir.path().join("report.csv");
    ok(hved(&[
        "eval",
        "--ckpt",
        s(&poe.join("best.ckpt")),
        "--ckpt-baseline",
        s(&moments.join("best.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&report),
    ]));
    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 17);
    assert!(lines[0].ends_with("baseline-complete,baseline-core,baseline-enhancing"));
    assert!(lines.iter().all(|l| l.split(',').count() == 7));
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let (dir, cfg, data) = setup("");
    let text = fs::read_to_string(&cfg).unwrap().replace("max-iters=4", "max-iters=0");
    fs::write(&cfg, text).unwrap();
    let run = dir.path().join("run");
    ok(hved(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    assert!(run.join("last.ckpt").is_file());
    assert!(!run.join("best.ckpt").exists());
    assert!(!run.join("loss_log.csv").exists());
}

#[test]
fn seeded_runs_are_identical_and_seed_env_overrides() {
    let (dir, cfg, data) = setup("");
    let log = |name: &str, seed: Option<&str>| {
        let run = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hved"));
        cmd.args(["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
        match seed {
            Some(v) => cmd.env("HVED_SEED", v),
            None => cmd.env_remove("HVED_SEED"),
        };
        ok(cmd.output().unwrap());
        fs::read_to_string(run.join("loss_log.csv")).unwrap()
    };
    let a = log("a", None);
    assert_eq!(a, log("b", None));
    assert_ne!(a, log("c", Some("7")));
}

#[test]
fn resume_matches_uninterrupted_log() {
    let (dir, cfg, data) = setup("");
    let full = dir.path().join("full");
    ok(hved(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]));
    let half_cfg = dir.path().join("half.cfg");
    fs::write(&half_cfg, fs::read_to_string(&cfg).unwrap().replace("max-iters=4", "max-iters=2")).unwrap();
    let part = dir.path().join("part");
    ok(hved(&["train", "--config", s(&half_cfg), "--data", s(&data), "--out", s(&part)]));
    ok(hved(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--resume",
        s(&part.join("last.ckpt")),
    ]));
    assert_eq!(
        fs::read_to_string(full.join("loss_log.csv")).unwrap(),
        fs::read_to_string(part.join("loss_log.csv")).unwrap()
    );
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lr=abc\n").unwrap();
    let out = hved(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    let out = hved(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = hved(&["eval", "--ckpt", s(&junk), "--data", s(dir.path()), "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(4));

    let out = hved(&["infer", "--ckpt", s(&junk), "--subset", "0000", "--in", s(dir.path()), "--out", s(dir.path())]);
    assert!(!out.status.success());
}
