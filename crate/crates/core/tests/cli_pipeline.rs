//! Command-line contract: exit codes, file formats and config echo.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use binsem::corpus::SPECIAL_TOKENS;
use binsem::encoder::{AttentionExport, Checkpoint};
use binsem::heads::EvalReport;
use binsem::pipeline::{read_jsonl, read_vocab, Embedding, PipelineConfig, Prediction, RESOLVED_CONFIG};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn binsem(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binsem"))
        .args(args)
        .env("BINSEM_THREADS", "2")
        .output()
        .expect("run binsem")
}

fn ok(args: &[&Path]) {
    let out = binsem(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fresh_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

/// Desk config with one pre-training and one fine-tuning epoch.
fn quick_config(dir: &Path) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixture("cli.json")).unwrap()).unwrap();
    v["pretrain"]["epochs"] = 1.into();
    v["finetune"]["epochs"] = 1.into();
    let p = dir.join("quick.json");
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

struct Prepared {
    dir: PathBuf,
}

impl Prepared {
    fn p(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// records → corpus → vocab → checkpoint → dataset → task checkpoint, once
/// per test binary.
fn prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| {
        let dir = fresh_dir("cli_pipeline");
        let cfg = quick_config(&dir);
        let p = |n: &str| dir.join(n);
        let a = |s: &str| PathBuf::from(s);
        ok(&[&a("normalize"), &a("--mode"), &a("balanced"), &fixture("corpus.jsonl"), &a("-o"), &p("nf.jsonl")]);
        ok(&[&a("vocab"), &p("nf.jsonl"), &a("-o"), &p("vocab.tsv")]);
        ok(&[&a("--config"), &cfg, &a("pretrain"), &p("nf.jsonl"), &a("--vocab"), &p("vocab.tsv"), &a("-o"), &p("ckpt")]);
        ok(&[
            &a("--config"),
            &cfg,
            &a("make-dataset"),
            &p("nf.jsonl"),
            &a("--vocab"),
            &p("vocab.tsv"),
            &a("-o"),
            &p("data"),
        ]);
        ok(&[&a("--config"), &cfg, &a("finetune"), &p("ckpt"), &p("data"), &a("-o"), &p("task")]);
        Prepared { dir }
    })
}

#[test]
fn vocabulary_starts_with_specials() {
    let v = read_vocab(&prepared().p("vocab.tsv")).unwrap();
    for (id, tok) in SPECIAL_TOKENS.iter().enumerate() {
        assert_eq!(v.id_of(tok), Some(id as u32), "{tok}");
        assert_eq!(v.token_of(id as u32), Some(*tok));
    }
}

#[test]
fn resolved_config_is_echoed() {
    let p = prepared();
    for dir in ["ckpt", "data", "task"] {
        let cfg = PipelineConfig::load(&p.p(dir).join(RESOLVED_CONFIG)).unwrap();
        assert_eq!(cfg.seed, 7, "{dir}");
        assert_eq!(cfg.pretrain.epochs, 1, "{dir}");
    }
    assert!(p.p("vocab.tsv.config.json").exists());
}

#[test]
fn flags_override_config() {
    let d = fresh_dir("cli_override");
    let a = |s: &str| PathBuf::from(s);
    ok(&[
        &a("--config"),
        &fixture("cli.json"),
        &a("--seed"),
        &a("99"),
        &a("--mode"),
        &a("coarse"),
        &a("normalize"),
        &fixture("corpus.jsonl"),
        &a("-o"),
        &d.join("nf.jsonl"),
    ]);
    let cfg = PipelineConfig::load(&d.join("nf.jsonl.config.json")).unwrap();
    assert_eq!(cfg.seed, 99);
    assert_eq!(cfg.mode.to_string(), "coarse");
    let nf = fs::read_to_string(d.join("nf.jsonl")).unwrap();
    assert!(nf.contains("mov_reg8_ptr"), "coarse mode collapses memory operands");
    assert!(!nf.contains("qwordptr"));
}

#[test]
fn same_seed_pretraining_logs_are_identical() {
    let p = prepared();
    let d = fresh_dir("cli_repeat");
    let cfg = quick_config(&d);
    let a = |s: &str| PathBuf::from(s);
    ok(&[&a("--config"), &cfg, &a("pretrain"), &p.p("nf.jsonl"), &a("--vocab"), &p.p("vocab.tsv"), &a("-o"), &d.join("again")]);
    let first = fs::read(p.p("ckpt/training_log.jsonl")).unwrap();
    let second = fs::read(d.join("again/training_log.jsonl")).unwrap();
    assert!(!first.is_empty());
    assert_eq!(first, second);
    assert_eq!(fs::read(p.p("ckpt/weights.bin")).unwrap(), fs::read(d.join("again/weights.bin")).unwrap());
}

#[test]
fn missing_input_is_a_validation_error() {
    let d = fresh_dir("cli_missing");
    let a = |s: &str| PathBuf::from(s);
    let out = binsem(&[&a("normalize"), &d.join("absent.jsonl"), &a("-o"), &d.join("nf.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
    assert!(!d.join("nf.jsonl").exists());

    let out = binsem(&[&a("--config"), &d.join("absent.json"), &a("vocab"), &fixture("corpus.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_is_rejected() {
    let d = fresh_dir("cli_bad_config");
    let a = |s: &str| PathBuf::from(s);
    for (name, body) in [
        ("unknown.json", r#"{ "seed": 1, "learning_rate": 0.1 }"#),
        ("heads.json", r#"{ "encoder": { "d_hidden": 64, "n_heads": 3 } }"#),
        ("split.json", r#"{ "dataset": { "split": [0.5, 0.1, 0.1] } }"#),
    ] {
        fs::write(d.join(name), body).unwrap();
        let out = binsem(&[&a("--config"), &d.join(name), &a("normalize"), &fixture("corpus.jsonl"), &a("-o"), &d.join("x")]);
        assert_eq!(out.status.code(), Some(1), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!d.join("x").exists(), "{name}");
    }
    let out = binsem(&[&a("--mode"), &a("medium"), &a("vocab")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn vocabulary_mismatch_fails_before_training() {
    let p = prepared();
    let d = fresh_dir("cli_mismatch");
    let cfg = quick_config(&d);
    let a = |s: &str| PathBuf::from(s);
    // a dataset over the fine-mode vocabulary cannot feed a balanced-mode checkpoint
    ok(&[&a("--mode"), &a("fine"), &a("normalize"), &fixture("corpus.jsonl"), &a("-o"), &d.join("nf.jsonl")]);
    ok(&[&a("vocab"), &d.join("nf.jsonl"), &a("-o"), &d.join("vocab.tsv")]);
    ok(&[
        &a("--config"),
        &cfg,
        &a("--mode"),
        &a("fine"),
        &a("make-dataset"),
        &d.join("nf.jsonl"),
        &a("--vocab"),
        &d.join("vocab.tsv"),
        &a("-o"),
        &d.join("data"),
    ]);
    let out = binsem(&[&a("--config"), &cfg, &a("finetune"), &p.p("ckpt"), &d.join("data"), &a("-o"), &d.join("task")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("task/head.bin").exists());
}

#[test]
fn eval_report_has_f1_and_auc() {
    let p = prepared();
    let a = |s: &str| PathBuf::from(s);
    let out = p.p("eval.json");
    ok(&[&a("eval"), &a("--task"), &a("binsim"), &p.p("task"), &p.p("data/test.jsonl"), &a("-o"), &out]);
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(raw["f1"].is_number());
    assert!(raw.get("auc").is_some());
    let report: EvalReport = serde_json::from_value(raw).unwrap();
    assert!(report.n > 0);
    let csv = fs::read_to_string(p.p("eval.json.pairs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("pair,P,R,F1"));

    // a classifier task cannot score a pair checkpoint
    let code = binsem(&[&a("eval"), &a("--task"), &a("compiler"), &p.p("task"), &p.p("data/test.jsonl"), &a("-o"), &p.p("x.json")]).status.code();
    assert_eq!(code, Some(1));
}

#[test]
fn predict_embed_and_attention_outputs_parse() {
    let p = prepared();
    let a = |s: &str| PathBuf::from(s);
    ok(&[&a("predict"), &p.p("task"), &p.p("data/test.jsonl"), &a("-o"), &p.p("pred.jsonl")]);
    let preds: Vec<Prediction> = read_jsonl(&p.p("pred.jsonl")).unwrap();
    let n_test = fs::read_to_string(p.p("data/test.jsonl")).unwrap().lines().count();
    assert_eq!(preds.len(), n_test);

    ok(&[&a("embed"), &p.p("ckpt"), &p.p("nf.jsonl"), &a("-o"), &p.p("emb.jsonl")]);
    let emb: Vec<Embedding> = read_jsonl(&p.p("emb.jsonl")).unwrap();
    let d_hidden = Checkpoint::load(&p.p("ckpt")).unwrap().model.cfg.d_hidden;
    assert!(!emb.is_empty());
    assert!(emb.iter().all(|e| e.embedding.len() == d_hidden));

    ok(&[&a("export-attn"), &p.p("ckpt"), &p.p("nf.jsonl"), &a("--index"), &a("2"), &a("-o"), &p.p("attn.json")]);
    let ex: AttentionExport = serde_json::from_str(&fs::read_to_string(p.p("attn.json")).unwrap()).unwrap();
    assert!(ex.true_len > 2);

    let out = binsem(&[&a("export-attn"), &p.p("ckpt"), &p.p("nf.jsonl"), &a("--index"), &a("100000"), &a("-o"), &p.p("y.json")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_merges_listings_and_records() {
    let d = fresh_dir("cli_ingest");
    let a = |s: &str| PathBuf::from(s);
    ok(&[
        &a("ingest"),
        &fixture("listing.asm"),
        &fixture("corpus.jsonl"),
        &a("--hints"),
        &fixture("hints.json"),
        &a("-o"),
        &d.join("records.jsonl"),
    ]);
    let recs = binsem::ingest::read_records(&d.join("records.jsonl")).unwrap();
    let wc = recs.iter().find(|r| r.function_name == "count_words").expect("listing function");
    assert_eq!(wc.binary_id, "wc-gcc-O0");
    assert_eq!(wc.instructions.len(), 22);
    ok(&[&a("normalize"), &d.join("records.jsonl"), &a("-o"), &d.join("nf.jsonl")]);
    let text = fs::read_to_string(d.join("nf.jsonl")).unwrap();
    for tok in ["call_libcputs", "call_self", "call_innerfunc", "call_externfunc", "mov_reg4_dispstr"] {
        assert!(text.contains(tok), "{tok} missing");
    }

    ok(&[&a("stats"), &d.join("nf.jsonl"), &a("--records"), &d.join("records.jsonl"), &a("-o"), &d.join("stats.json")]);
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("stats.json")).unwrap()).unwrap();
    assert!(stats["functions"].as_u64().unwrap() > 0);
}
