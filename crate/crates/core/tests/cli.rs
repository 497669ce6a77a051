use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use usra_core::cli::parse_manifest;

const TINY: &str = "\
# tiny run for command-level tests
pretrain_frames = 8
pretrain_epochs = 1
batch_lusr = 2
batch_svea = 4
episodes = 2
episode_length = 10
replay_capacity = 64
warmup_steps = 5
update_every = 2
";

fn usra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usra")).args(args).output().unwrap()
}

fn usra_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usra"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn manifest(dir: &Path) -> Vec<(String, String)> {
    parse_manifest(&fs::read_to_string(dir.join("manifest.txt")).unwrap())
}

fn lookup<'a>(m: &'a [(String, String)], key: &str) -> &'a str {
    &m.iter().find(|(k, _)| k == key).unwrap().1
}

fn pretrain_and_train(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = usra(&["pretrain", "--config", s(cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = usra(&["train", "--config", s(cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "seed = 1\n\ngamma = 1.5\n").unwrap();
    let o = usra(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    fs::write(&bad, "seed = 1\nlearning_rate = 3\n").unwrap();
    let o = usra(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"));

    fs::write(&bad, "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(code(&usra(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("o"))])), 2);
    assert_eq!(code(&usra(&["train", "--bogus"])), 2);
    assert_eq!(code(&usra(&["--help"])), 0);
}

#[test]
fn train_without_pretraining_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "");
    let o = usra(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("pretrain"));
    let cfg = write_config(dir.path(), "l.cfg", "method = lusr\n");
    assert_eq!(code(&usra(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r2"))])), 4);
}

#[test]
fn full_pipeline_with_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "seed = 3\n");
    let run = pretrain_and_train(dir.path(), &cfg, "run");
    for f in ["pretrain.ckpt", "pretrain_losses.csv", "final.ckpt", "metrics.csv", "manifest.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let m = manifest(&run);
    assert_eq!(lookup(&m, "command"), "train");
    assert_eq!(lookup(&m, "seed"), "3");
    let hash = usra_core::cli::blob_hash(&fs::read(run.join("final.ckpt")).unwrap());
    assert_eq!(lookup(&m, "checkpoint_sha1"), hash);

    let csv = dir.path().join("eval.csv");
    let ckpt = run.join("final.ckpt");
    let o = usra(&["eval", "--ckpt", s(&ckpt), "--domain", "color_hard", "--episodes", "1", "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = |p: &Path| fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(lines(&csv), 2);
    let o = usra(&["eval", "--ckpt", s(&ckpt), "--domain", "all", "--episodes", "1", "--csv", s(&csv)]);
    assert_eq!(code(&o), 0);
    assert_eq!(lines(&csv), 7);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("checkpoint,domain,episodes,seed,mean_return\n"));
    for row in text.lines().skip(1) {
        let r: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(r.abs() <= 200.0);
    }
    let o = usra(&["eval", "--ckpt", s(&ckpt), "--domain", "fog", "--csv", s(&csv)]);
    assert_eq!(code(&o), 2);

    let svg = dir.path().join("curve.svg");
    let o = usra(&["plot", "--log", s(&run.join("metrics.csv")), "--out", s(&svg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let paths: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("path")).collect();
    assert_eq!(paths.len(), 2);
    let classes: Vec<_> = paths.iter().map(|p| p.attribute("class").unwrap()).collect();
    assert_eq!(classes, ["raw", "smoothed"]);
}

#[test]
fn corrupt_checkpoint_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "");
    let out = dir.path().join("p");
    assert_eq!(code(&usra(&["pretrain", "--config", s(&cfg), "--out", s(&out)])), 0);
    let ckpt = out.join("pretrain.ckpt");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let o = usra(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let csv = dir.path().join("e.csv");
    assert_eq!(code(&usra(&["eval", "--ckpt", s(&ckpt), "--domain", "train", "--csv", s(&csv)])), 5);
    let gone = dir.path().join("none.ckpt");
    assert_eq!(code(&usra(&["eval", "--ckpt", s(&gone), "--domain", "train", "--csv", s(&csv)])), 4);
}

#[test]
fn plot_rejects_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("m.csv");
    fs::write(&log, format!("{}\n", usra_core::trainer::METRICS_CSV_HEADER)).unwrap();
    let o = usra(&["plot", "--log", s(&log), "--out", s(&dir.path().join("x.svg"))]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("x.svg").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "seed = 11\n");
    let a = pretrain_and_train(dir.path(), &cfg, "a");
    let b = pretrain_and_train(dir.path(), &cfg, "b");
    for f in ["pretrain.ckpt", "pretrain_losses.csv", "final.ckpt", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = usra(&["train", "--config", s(&cfg), "--seed", "12", "--out", s(&b)]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn ablation_grid_writes_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "seed = 5\n");
    let out = dir.path().join("abl");
    let o = usra(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cells = ["randconv_static", "randconv_differential", "jitter_static", "jitter_differential"];
    for c in cells {
        assert!(out.join(c).join("metrics.csv").exists(), "{c}");
        let m = manifest(&out.join(c));
        let want = if c.ends_with("static") { "1" } else { "10" };
        assert_eq!(lookup(&m, "config.encoder_lr_divisor"), want);
        assert_eq!(lookup(&m, "config.method"), "usra");
    }
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("aug,lr_mode,encoder_lr_divisor,"));

    let one = dir.path().join("one");
    let o = usra(&["ablate", "--aug", "jitter", "--lr-mode", "static", "--config", s(&cfg), "--out", s(&one)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(one.join("ablation.csv")).unwrap().lines().count(), 2);
    assert_eq!(code(&usra(&["ablate", "--aug", "cutout", "--out", s(&one)])), 2);
}

#[test]
fn gradcheck_reports_injected_fault() {
    let o = usra_env(&["gradcheck"], "USRA_GRADCHECK_FAULT", "1");
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    let networks = ["encoder", "projection", "decoder", "q_head"];
    for n in networks {
        assert!(out.lines().any(|l| l.starts_with(n)), "{n}");
    }
    assert!(out.contains("FAIL"));
}
