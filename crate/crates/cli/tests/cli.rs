use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vitmil::io::{
    read_embeddings, read_json, write_embeddings, write_labels, Checkpoint, CorpusManifest, EmbeddingFile,
    EmbeddingSidecar, LabelRow, Split,
};
use vitmil::mil::MilConfig;
use vitmil::params::ParamStore;
use vitmil::pipeline::{Metrics, MilCheckpointConfig, RunRecord, MIL_KIND};
use vitmil::tensor::Tensor;

const TINY: &str = r#"{
  "dino": {"epochs": 1, "warmup_epochs": 0, "batch_size": 8, "max_tiles": 16,
           "head": {"out_dim": 16}, "augment": {"n_local": 1}},
  "mil": {"epochs": 2, "query_dim": 8}
}"#;

fn vitmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitmil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vitmil(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` except run records, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_counts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&[
            "synth", "--seed", "5", "--n-slides", "10", "--grid", "4x4", "--positive-fraction", "0.5", "--out", s(dir),
        ]);
    }
    let m: CorpusManifest = read_json(&a.join("manifest.json")).unwrap();
    assert_eq!(m.slides.len(), 10);
    assert_eq!(m.slides.iter().filter(|s| s.label == 1).count(), 5);
    for slide in &m.slides {
        let any = slide.instance_labels.contains(&1);
        assert_eq!(u8::from(any), slide.label);
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    let rec: RunRecord = read_json(&a.join("run.json")).unwrap();
    assert_eq!(rec.command, "synth");
    assert_eq!(rec.seed, Some(5));
    assert_eq!(rec.config_hash.len(), 64);
}

#[test]
fn show_config_prints_effective_settings() {
    let out = ok(&["--preset", "paper", "--show-config"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["dino"]["lr_max"], 5e-4);
    assert_eq!(v["dino"]["ema_start"], 0.9995);
    assert_eq!(v["mil"]["lr"], 2e-5);
    assert_eq!(v["tile"]["patch_size"], 224);

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"mil": {"epochs": 7}}"#).unwrap();
    let out = ok(&["--config", s(&cfg), "--show-config"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mil"]["epochs"], 7);
    assert_eq!(v["tile"]["patch_size"], 32);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // missing mandatory seed
    assert_eq!(code(&vitmil(&["pretrain", "--tiles", "x", "--out", "y"])), 2);
    assert_eq!(code(&vitmil(&["train-mil", "--embeddings", "x", "--labels", "l", "--out", "y"])), 2);
    assert_eq!(code(&vitmil(&["--preset", "huge", "--show-config"])), 2);
    assert_eq!(code(&vitmil(&[])), 2);
    // missing input
    let missing = tmp.path().join("nope");
    assert_eq!(code(&vitmil(&["tile", "--slides", s(&missing), "--out", s(tmp.path())])), 3);
    // invalid configuration
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"dino": {"epoch": 3}}"#).unwrap();
    assert_eq!(code(&vitmil(&["--config", s(&cfg), "--show-config"])), 4);
    assert_eq!(code(&vitmil(&["embed", "--tiles", "t", "--checkpoint", "c", "--k-last", "9", "--out", "o"])), 4);
}

#[test]
fn diverging_pretraining_exits_with_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["synth", "--seed", "1", "--n-slides", "2", "--grid", "3x3", "--out", s(&t.join("slides"))]);
    ok(&["tile", "--slides", s(&t.join("slides")), "--out", s(&t.join("tiles"))]);
    let cfg = t.join("boom.json");
    fs::write(
        &cfg,
        r#"{"dino": {"epochs": 3, "warmup_epochs": 0, "batch_size": 4, "lr_max": 1e300, "lr_min": 1e299,
                     "weight_decay": 0.0, "augment": {"n_local": 1}}}"#,
    )
    .unwrap();
    let out = vitmil(&[
        "--config", s(&cfg), "pretrain", "--tiles", s(&t.join("tiles")), "--seed", "1", "--out", s(&t.join("pre")),
    ]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_is_idempotent_and_checks_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = t.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    let p = |name: &str| t.join(name);

    ok(&["synth", "--seed", "3", "--n-slides", "8", "--grid", "4x4", "--out", s(&p("slides"))]);
    ok(&["tile", "--slides", s(&p("slides")), "--out", s(&p("tiles"))]);
    let labels = p("slides").join("labels.csv");
    for out in ["pre", "pre2"] {
        ok(&[
            "--config", c, "pretrain", "--tiles", s(&p("tiles")), "--labels", s(&labels), "--seed", "3", "--out",
            s(&p(out)),
        ]);
    }
    assert_eq!(snapshot(&p("pre")), snapshot(&p("pre2")));
    let loss = fs::read_to_string(p("pre").join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss,teacher_entropy"));

    let ckpt = p("pre").join("teacher.ckpt");
    for out in ["emb", "emb2"] {
        ok(&["--config", c, "embed", "--tiles", s(&p("tiles")), "--checkpoint", s(&ckpt), "--k-last", "4", "--out", s(&p(out))]);
    }
    assert_eq!(snapshot(&p("emb")), snapshot(&p("emb2")));
    let (file, side) = read_embeddings(&p("emb"), "slide_0000").unwrap();
    assert_eq!(file.dim, 80);
    assert_eq!(side.coords.len(), file.n_instances());

    for out in ["mil", "mil2"] {
        ok(&[
            "--config", c, "train-mil", "--embeddings", s(&p("emb")), "--labels", s(&labels), "--seed", "3", "--out",
            s(&p(out)),
        ]);
    }
    assert_eq!(snapshot(&p("mil")), snapshot(&p("mil2")));
    let model = p("mil").join("mil.ckpt");

    let out = ok(&[
        "--config", c, "eval", "--model", s(&model), "--embeddings", s(&p("emb")), "--labels", s(&labels), "--split",
        "all", "--out", s(&p("eval")),
    ]);
    let m: Metrics = read_json(&p("eval").join("metrics.json")).unwrap();
    assert_eq!(m.n_test, 8);
    assert_eq!(m.threshold, 0.5);
    assert!((0.0..=1.0).contains(&m.auc));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"auc\""));
    let roc = fs::read_to_string(p("eval").join("roc.dat")).unwrap();
    assert_eq!(roc.lines().next(), Some("0.000000 0.000000"));

    // deleting a downstream artifact and re-running reproduces it
    let before = fs::read(p("eval").join("metrics.json")).unwrap();
    fs::remove_file(p("eval").join("metrics.json")).unwrap();
    ok(&[
        "--config", c, "eval", "--model", s(&model), "--embeddings", s(&p("emb")), "--labels", s(&labels), "--split",
        "all", "--out", s(&p("eval")),
    ]);
    assert_eq!(fs::read(p("eval").join("metrics.json")).unwrap(), before);

    let slide = p("slides").join("slide_0001.png");
    ok(&["heatmap", "--model", s(&model), "--slide", s(&slide), "--embeddings", s(&p("emb")), "--out", s(&p("heat"))]);
    let overlay = image::open(p("heat").join("slide_0001_overlay.png")).unwrap();
    let src = image::open(&slide).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (src.width(), src.height()));

    // embeddings from a different pre-training run
    ok(&[
        "--config", c, "pretrain", "--tiles", s(&p("tiles")), "--seed", "4", "--epochs", "1", "--out", s(&p("pre4")),
    ]);
    ok(&[
        "--config", c, "embed", "--tiles", s(&p("tiles")), "--checkpoint", s(&p("pre4").join("teacher.ckpt")),
        "--out", s(&p("emb4")),
    ]);
    let out = vitmil(&[
        "--config", c, "eval", "--model", s(&model), "--embeddings", s(&p("emb4")), "--labels", s(&labels), "--out",
        s(&p("eval4")),
    ]);
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    let expected = vitmil::io::sha256_hex(&fs::read(&ckpt).unwrap());
    let found = vitmil::io::sha256_hex(&fs::read(p("pre4").join("teacher.ckpt")).unwrap());
    assert!(err.contains(&expected) && err.contains(&found), "{err}");

    // a non-ViT checkpoint handed to embed
    let out = vitmil(&["embed", "--tiles", s(&p("tiles")), "--checkpoint", s(&model), "--out", s(&p("emb5"))]);
    assert_eq!(code(&out), 4);
}

#[test]
fn eval_reports_perfect_separation() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let emb = t.join("emb");
    let mut labels = Vec::new();
    for i in 0..6u8 {
        let id = format!("s{i}");
        let label = i % 2;
        // one-dimensional instances equal to the label
        let file = EmbeddingFile {
            slide_id: id.clone(),
            dim: 1,
            rows: vec![f64::from(label); 3],
        };
        let side = EmbeddingSidecar {
            slide_id: id.clone(),
            embedder_hash: "h".into(),
            k_last: 1,
            patch_size: 8,
            grid_rows: 1,
            grid_cols: 3,
            coords: vec![(0, 0), (0, 1), (0, 2)],
            label: Some(label),
            instance_labels: None,
        };
        write_embeddings(&emb, &file, &side).unwrap();
        labels.push(LabelRow {
            slide_id: id,
            label,
            split: Split::Test,
        });
    }
    let labels_path = t.join("labels.csv");
    write_labels(&labels_path, &labels).unwrap();

    // score = 4 * (x - 0.5) on both streams
    let mut params = ParamStore::new();
    params.push("w_p", Tensor::new(&[1, 1], vec![8.0]).unwrap());
    params.push("w_q", Tensor::new(&[1, 1], vec![1.0]).unwrap());
    params.push("w_v", Tensor::new(&[1, 1], vec![1.0]).unwrap());
    params.push("w_b", Tensor::new(&[1, 1], vec![8.0]).unwrap());
    let meta = MilCheckpointConfig {
        dim: 1,
        query_dim: 1,
        embedder_hash: "h".into(),
        training: MilConfig::default(),
    };
    let model = t.join("mil.ckpt");
    Checkpoint::new(MIL_KIND, &meta, params).unwrap().save(&model).unwrap();

    ok(&[
        "eval", "--model", s(&model), "--embeddings", s(&emb), "--labels", s(&labels_path), "--out", s(&t.join("ev")),
    ]);
    let m: Metrics = read_json(&t.join("ev").join("metrics.json")).unwrap();
    assert_eq!(m.auc, 1.0);
    assert_eq!(m.n_test, 6);
}
