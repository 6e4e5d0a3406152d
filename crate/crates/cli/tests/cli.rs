use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resadapter"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "unet": {"base_channels": 4, "groups": 2, "time_embed_dim": 8},
  "train": {"steps": 6, "batch_size": 2, "lr": 0.001},
  "eval": {"buckets": [[8, 8], [16, 16]], "n_batches": 1, "batch_size": 2, "ablation_alphas": [0, 1]}
}"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("tiny.json"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn train_base(&self, out: &str) {
        let o = run(&["train-base", "--config", &self.s("tiny.json"), "--out", &self.s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

fn pgm_header(p: &Path) -> (String, Vec<u8>) {
    let bytes = std::fs::read(p).unwrap();
    let text = String::from_utf8_lossy(&bytes[..20.min(bytes.len())]).into_owned();
    (text, bytes)
}

#[test]
fn help_lists_flags_with_defaults() {
    let o = run(&["sample", "--help"]);
    assert_eq!(code(&o), 0);
    let h = stdout(&o);
    for flag in ["--model", "--adapter", "--alpha", "--size", "--steps", "--guidance", "--seed", "--out"] {
        assert!(h.contains(flag), "missing {flag}");
    }
    assert!(h.contains("[default: 25]") && h.contains("[default: 7.5]"), "{h}");
    let top = stdout(&run(&["--help"]));
    assert!(top.contains("lr 1e-4") && top.contains("adam_beta1 0.95") && top.contains("guidance_scale 7.5"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["sample", "--size", "16by16", "--model", "m", "--out", "o"])), 1);
}

#[test]
fn config_errors_name_key_paths() {
    let w = Work::new();
    for (text, path) in [
        (r#"{"train": {"lr": -1}}"#, "train.lr"),
        (r#"{"train": {"learning_rate": 1}}"#, "learning_rate"),
        (r#"{"eval": {"buckets": [[8, 8], [7, 8]]}}"#, "eval.buckets[1]"),
    ] {
        std::fs::write(w.path("bad.json"), text).unwrap();
        let o = run(&["train-base", "--config", &w.s("bad.json"), "--out", &w.s("m.rsbm")]);
        assert_eq!(code(&o), 2, "{text}");
        assert!(stderr(&o).contains(path), "{text}: {}", stderr(&o));
        assert!(!w.path("m.rsbm").exists());
    }
}

#[test]
fn full_pipeline() {
    let w = Work::new();
    w.train_base("m.rsbm");
    let trace = std::fs::read_to_string(w.path("m.rsbm.trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    assert!(trace.lines().all(|l| l.split('\t').nth(2) == Some("base")));

    let o = run(&["inspect", "--file", &w.s("m.rsbm")]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("RSBM"));

    let o = run(&[
        "train-adapter",
        "--model",
        &w.s("m.rsbm"),
        "--config",
        &w.s("tiny.json"),
        "--out",
        &w.s("a.rsad"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = std::fs::read_to_string(w.path("a.rsad.trace.tsv")).unwrap();
    assert!(trace.lines().all(|l| l.contains("\tadapter\t")));
    let o = run(&["inspect", "--file", &w.s("a.rsad")]);
    assert!(stdout(&o).contains("RSAD") && stdout(&o).contains("rank: 4"), "{}", stdout(&o));

    // sampling is byte-deterministic and the header stores width first
    let sample = |out: &str| {
        let o = run(&[
            "sample",
            "--model",
            &w.s("m.rsbm"),
            "--adapter",
            &w.s("a.rsad"),
            "--size",
            "24x16",
            "--steps",
            "5",
            "--seed",
            "3",
            "--out",
            &w.s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    sample("one.pgm");
    sample("two.pgm");
    let (head, one) = pgm_header(&w.path("one.pgm"));
    assert!(head.starts_with("P5\n16 24\n255\n"), "{head:?}");
    assert_eq!(one.len(), "P5\n16 24\n255\n".len() + 24 * 16);
    assert_eq!(one, std::fs::read(w.path("two.pgm")).unwrap());

    let o = run(&["merge", "--model", &w.s("m.rsbm"), "--adapter", &w.s("a.rsad"), "--out", &w.s("merged.rsbm")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&run(&["inspect", "--file", &w.s("merged.rsbm")])).contains("RSBM"));

    let o = run(&[
        "eval",
        "--model",
        &w.s("m.rsbm"),
        "--adapter",
        &w.s("a.rsad"),
        "--config",
        &w.s("tiny.json"),
        "--out",
        &w.s("r.jsonl"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(w.path("r.jsonl")).unwrap();
    // 2 buckets x (base, base+resadapter, 3 modes x 2 alphas) rows, then metadata
    assert_eq!(report.lines().count(), 2 * 8 + 1);
    for line in report.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(report.contains("conv_lora@0") && report.contains("base+resadapter"));

    let o = run(&[
        "bench-tiled",
        "--model",
        &w.s("m.rsbm"),
        "--adapter",
        &w.s("a.rsad"),
        "--target",
        "16x16",
        "--tile",
        "8x8",
        "--overlap",
        "4",
        "--steps",
        "2",
        "--repeats",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("ratio") && stdout(&o).contains("9 tiles per step"), "{}", stdout(&o));
}

#[test]
fn incompatible_adapters_are_refused() {
    let w = Work::new();
    w.train_base("m.rsbm");
    let o = run(&[
        "train-adapter",
        "--model",
        &w.s("m.rsbm"),
        "--config",
        &w.s("tiny.json"),
        "--out",
        &w.s("a.rsad"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // fingerprints cover the architecture, so the second base is wider
    let other = TINY.replace(r#""base_channels": 4"#, r#""base_channels": 6"#);
    std::fs::write(w.path("other.json"), other).unwrap();
    let o = run(&["train-base", "--config", &w.s("other.json"), "--out", &w.s("m2.rsbm")]);
    assert_eq!(code(&o), 0);

    let o = run(&[
        "train-adapter",
        "--model",
        &w.s("m2.rsbm"),
        "--config",
        &w.s("other.json"),
        "--resume",
        &w.s("a.rsad"),
        "--out",
        &w.s("b.rsad"),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("fingerprint"), "{}", stderr(&o));
    assert!(!w.path("b.rsad").exists());
    for cmd in [
        vec!["merge", "--model", &w.s("m2.rsbm"), "--adapter", &w.s("a.rsad"), "--out", &w.s("x.rsbm")],
        vec!["sample", "--model", &w.s("m2.rsbm"), "--adapter", &w.s("a.rsad"), "--out", &w.s("x.pgm")],
    ] {
        let o = run(&cmd);
        assert_eq!(code(&o), 2, "{cmd:?}");
    }
}

#[test]
fn malformed_files_and_divergence() {
    let w = Work::new();
    std::fs::write(w.path("junk.rsbm"), b"NOPE and more").unwrap();
    let o = run(&["inspect", "--file", &w.s("junk.rsbm")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
    let o = run(&["inspect", "--file", &w.s("absent.rsbm")]);
    assert_eq!(code(&o), 2);

    let hot = TINY.replace(r#""lr": 0.001"#, r#""lr": 1e300"#);
    std::fs::write(w.path("hot.json"), hot).unwrap();
    let o = run(&["train-base", "--config", &w.s("hot.json"), "--out", &w.s("m.rsbm")]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric"));
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let o = run(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("conv2d.weight") && out.contains("simple_loss/mid.attn.v.weight"));
    assert!(!out.contains("FAIL"));
}
