use std::fs;
use std::path::Path;
use std::process::Command;

fn daaf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_daaf")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("nope.txt");
    let out = daaf(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&cfg)), "{err}");
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let out = daaf(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
    assert_eq!(daaf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(daaf(&[]).status.code(), Some(1));
    let help = daaf(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["gen-data", "train", "eval", "viz", "branch-out", "ablate", "shuffle"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn bad_config_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "groups = 5\n").unwrap();
    let out = daaf(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("groups"));
}

/// gen-data, train, eval, viz, branch-out, shuffle and a tiny ablation, end to end.
#[test]
fn commands_produce_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let out = daaf(&[
        "gen-data",
        "--ids",
        "8",
        "--per-id",
        "6",
        "--seed",
        "7",
        "--out",
        s(&data),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for split in ["train", "query", "gallery"] {
        assert!(data.join(format!("{split}.txt")).is_file());
    }
    assert!(fs::read_to_string(data.join("dataset.txt"))
        .unwrap()
        .contains("seed = 7"));

    let cfg = root.join("cfg.txt");
    fs::write(
        &cfg,
        "p = 2\nk = 2\nsteps = 6\nlog_interval = 2\ncheckpoint_interval = 3\ndecoder_channels = 4\n",
    )
    .unwrap();
    let run = root.join("run");
    let out = daaf(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,total,reid,mask,keypoint,seconds");
    assert_eq!(lines.len(), 1 + 6 / 2);
    for f in ["config.txt", "final.daaf", "ckpt-000003.daaf", "ckpt-000006.daaf"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ck = run.join("final.daaf");

    let ev = root.join("eval");
    let out = daaf(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&ev),
        "--distmat",
        "--occlusion",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(report.starts_with("metric,value\nmap,"));
    let d = daaf::eval::decode_distmat(&fs::read(ev.join("distmat.bin")).unwrap()).unwrap();
    assert_eq!(d.shape(), &[8, 4 * 6 - 8]);
    assert!(ev.join("cmc.csv").is_file() && ev.join("occlusion.csv").is_file());

    let viz = root.join("viz");
    let out = daaf(&[
        "viz",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&viz),
        "--samples",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // Holistic plus six groups, each as PGM and overlay, for two samples.
    assert_eq!(fs::read_dir(&viz).unwrap().count(), 2 * 7 * 2);

    let bo = root.join("branch");
    let out = daaf(&[
        "branch-out",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&bo),
        "--samples",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files = |p: &Path| {
        fs::read_dir(p)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().is_file())
            .count()
    };
    assert_eq!(files(&bo), 3 * (1 + 17));
    assert_eq!(files(&bo.join("gt")), 3 * (1 + 17));

    let sh = root.join("shuffle");
    let out = daaf(&["shuffle", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&sh)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(sh.join("shuffle.csv")).unwrap().lines().count(),
        1 + 36
    );
    assert!(fs::read_to_string(sh.join("shuffle-summary.csv"))
        .unwrap()
        .contains("decoupling_score,"));

    let ab = root.join("ablate");
    let out = daaf(&[
        "ablate",
        "--suite",
        "hab-pab",
        "--seeds",
        "0",
        "--steps",
        "2",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&ab),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(ab.join("hab-pab.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["baseline", "+hab", "+pab", "+both"]);
    assert!(
        table.lines().nth(1).unwrap().contains(",0.000000,0.000000,"),
        "baseline delta is zero"
    );
}

#[test]
fn training_resumes_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(
        daaf(&["gen-data", "--ids", "8", "--per-id", "4", "--out", s(&data)])
            .status
            .code(),
        Some(0)
    );
    let cfg = root.join("cfg.txt");
    fs::write(
        &cfg,
        "p = 2\nk = 2\nsteps = 4\nlog_interval = 1\ncheckpoint_interval = 2\ndecoder_channels = 4\n",
    )
    .unwrap();
    let a = root.join("a");
    assert_eq!(
        daaf(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)])
            .status
            .code(),
        Some(0)
    );
    let b = root.join("b");
    let half = root.join("half.txt");
    fs::write(
        &half,
        fs::read_to_string(&cfg).unwrap().replace("steps = 4", "steps = 2"),
    )
    .unwrap();
    assert_eq!(
        daaf(&["train", "--config", s(&half), "--data", s(&data), "--out", s(&b)])
            .status
            .code(),
        Some(0)
    );
    let out = daaf(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&b),
        "--resume",
        s(&b.join("ckpt-000002.daaf")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let losses = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(
        fs::read(a.join("final.daaf")).unwrap(),
        fs::read(b.join("final.daaf")).unwrap()
    );
}
