// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lincirc::dictionary::{DictionaryModule, DictionarySet, HookSpec, Site};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lincirc"));
    c.env("LINCIRC_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lincirc")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "lincirc {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A run configuration small enough for every command to finish in seconds.
fn small_config(dir: &Path) -> PathBuf {
    let out = dir.join("init");
    ok(&["init-config", "--out", s(&out)]);
    let mut c = read_json(&out.join("config.json"));
    c["model"] = serde_json::json!({
        "n_layers": 2, "d_model": 16, "n_heads": 2, "d_head": 8, "d_mlp": 32,
        "vocab_size": c["model"]["vocab_size"], "max_seq_len": 64
    });
    c["lm"]["steps"] = 30.into();
    c["lm"]["batch_size"] = 8.into();
    c["lm"]["warmup"] = 5.into();
    c["lm"]["lr"] = 3e-3.into();
    c["corpus"]["count"] = 200.into();
    c["corpus"]["dict_count"] = 80.into();
    c["corpus"]["eval_count"] = 12.into();
    let dicts = c["dictionaries"].as_array_mut().unwrap();
    dicts.retain(|d| d["hook"]["layer"].as_u64().unwrap() < 2);
    for d in dicts {
        let t = &mut d["train"];
        t["batch_size"] = 64.into();
        t["token_budget"] = 4096.into();
        t["buffer_size"] = 512.into();
        t["expansion_factor"] = 4.into();
        t["lr"] = 3e-3.into();
    }
    c["prune"]["min_max_act"] = 0.0.into();
    c["prune"]["min_norm"] = 0.0.into();
    c["finetune_budget"] = 1024.into();
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    p
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    model: PathBuf,
    dicts: PathBuf,
}

/// Runs the training commands once for all tests.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = small_config(&root);
        let cfg = s(&config);
        let lm = root.join("lm");
        ok(&["train-lm", "--config", cfg, "--seed", "3", "--out", s(&lm)]);
        let model = lm.join("model.lcgt");
        let td = root.join("td");
        ok(&["train-dict", "--config", cfg, "--seed", "3", "--out", s(&td), "--model", s(&model)]);
        let pd = root.join("pd");
        ok(&["prune-dict", "--config", cfg, "--out", s(&pd), "--model", s(&model), "--dicts", s(&td.join("dicts"))]);
        let fd = root.join("fd");
        ok(&["finetune-dict", "--config", cfg, "--out", s(&fd), "--model", s(&model), "--dicts", s(&pd.join("dicts"))]);
        Pipeline {
            _dir: dir,
            root,
            config,
            model,
            dicts: fd.join("dicts"),
        }
    })
}

fn manifest_outputs(m: &Value) -> Vec<String> {
    m["outputs"].as_array().unwrap().iter().map(|e| e["path"].as_str().unwrap().to_string()).collect()
}

#[test]
fn training_commands_write_manifests() {
    let p = pipeline();
    let m = read_json(&p.root.join("lm/train-lm.manifest.json"));
    assert_eq!(m["command"], "train-lm");
    assert_eq!(m["seed"], 3);
    let outs = manifest_outputs(&m);
    for f in ["model.lcgt", "loss.csv", "lm_report.json"] {
        assert!(outs.iter().any(|o| o == f), "{f} missing from {outs:?}");
    }
    let report = read_json(&p.root.join("lm/lm_report.json"));
    assert_eq!(report["heldout"].as_array().unwrap().len(), 2);
    let loss = std::fs::read_to_string(p.root.join("lm/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 31);
    let set = DictionarySet::load_dir(&p.dicts).unwrap();
    assert_eq!(set.modules.len(), HookSpec::inventory(2).len());
    let prune = read_json(&p.root.join("pd/prune.json"));
    assert_eq!(prune.as_array().unwrap().len(), set.modules.len());
}

#[test]
fn identical_seed_gives_identical_manifests() {
    let p = pipeline();
    let cfg = s(&p.config);
    let a = p.root.join("det_a");
    let b = p.root.join("det_b");
    for o in [&a, &b] {
        ok(&["train-lm", "--config", cfg, "--seed", "3", "--out", s(o)]);
    }
    let ma = std::fs::read(a.join("train-lm.manifest.json")).unwrap();
    let mb = std::fs::read(b.join("train-lm.manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let original = read_json(&p.root.join("lm/train-lm.manifest.json"));
    assert_eq!(read_json(&a.join("train-lm.manifest.json"))["outputs"], original["outputs"]);

    let c = p.root.join("det_c");
    ok(&["train-lm", "--config", cfg, "--seed", "4", "--out", s(&c)]);
    let mc = read_json(&c.join("train-lm.manifest.json"));
    assert_ne!(mc["outputs"], original["outputs"]);
}

#[test]
fn gen_corpus_round_trips() {
    let p = pipeline();
    let out = p.root.join("corpus");
    for (fam, n) in [("bracket", "7"), ("induction", "5"), ("ioi", "6"), ("mixture", "9")] {
        let o = out.join(fam);
        ok(&["gen-corpus", "--family", fam, "--count", n, "--out", s(&o)]);
        let c = lincirc::toymodel::Corpus::load(&o.join("corpus.json")).unwrap();
        assert_eq!(c.sequences.len(), n.parse::<usize>().unwrap());
    }
    let e = run(&["gen-corpus", "--family", "induction", "--seq-len", "2", "--out", s(&out.join("bad"))]);
    assert!(!e.status.success());
    assert!(String::from_utf8_lossy(&e.stderr).starts_with("error[usage]:"));
}

#[test]
fn graph_attribution_and_export() {
    let p = pipeline();
    let (cfg, model, dicts) = (s(&p.config), s(&p.model), s(&p.dicts));
    let g = p.root.join("graph");
    ok(&["build-graph", "--config", cfg, "--out", s(&g), "--model", model, "--dicts", dicts, "--family", "ioi"]);
    let verify = read_json(&g.join("verify.json"));
    assert_eq!(verify["passed"], true);
    assert!(std::fs::read_to_string(g.join("graph.dot")).unwrap().starts_with("digraph"));
    let graph_json = g.join("graph.json");

    let a = p.root.join("attr");
    ok(&[
        "attribute", "--config", cfg, "--out", s(&a), "--graph", s(&graph_json),
        "--tau", "0.01", "--method", "hierarchical", "--detach-errors", "false",
    ]);
    let attr = read_json(&a.join("attribution.json"));
    assert_eq!(attr["result"]["method"], "hierarchical");
    assert_eq!(attr["result"]["options"]["detach_errors"], false);
    assert!(attr["surviving_count"].as_u64().unwrap() >= 1);
    assert!(std::fs::read_to_string(a.join("attribution.dot")).unwrap().starts_with("digraph"));

    // With τ = 0 and every leaf kept, the leaves account for the whole root.
    let full = p.root.join("attr_full");
    ok(&[
        "attribute", "--config", cfg, "--out", s(&full), "--graph", s(&graph_json),
        "--tau", "0", "--detach-errors", "false",
    ]);
    let rec = read_json(&full.join("attribution.json"))["recovery"].as_f64().unwrap();
    assert!((rec - 1.0).abs() < 1e-3, "recovery {rec}");

    // Building inline matches attributing a saved graph.
    let inline = p.root.join("attr_inline");
    ok(&[
        "attribute", "--config", cfg, "--out", s(&inline), "--model", model, "--dicts", dicts,
        "--family", "ioi", "--tau", "0.01", "--method", "hierarchical", "--detach-errors", "false",
    ]);
    assert_eq!(read_json(&inline.join("attribution.json")), attr);

    for format in ["dot", "json"] {
        let e = p.root.join(format!("export_{format}"));
        ok(&[
            "export", "--out", s(&e), "--graph", s(&graph_json),
            "--attribution", s(&a.join("attribution.json")), "--format", format,
        ]);
    }
    let exported = read_json(&p.root.join("export_json/export.json"));
    let kept = exported["nodes"].as_array().unwrap().iter().filter(|n| n["surviving"] == true).count();
    assert_eq!(kept as u64, attr["surviving_count"].as_u64().unwrap());
    let dot = std::fs::read_to_string(p.root.join("export_dot/export.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
}

#[test]
fn qk_attribution_is_complete() {
    let p = pipeline();
    let out = p.root.join("qk");
    ok(&[
        "qk-attribute", "--config", s(&p.config), "--out", s(&out), "--model", s(&p.model),
        "--dicts", s(&p.dicts), "--family", "induction", "--layer", "1", "--head", "0", "--key", "2",
        "--qk-depth", "2", "--top-k", "3",
    ]);
    let qk = read_json(&out.join("qk.json"));
    assert!(qk["residual"].as_f64().unwrap().abs() < 1e-3);
    assert!(qk["top"].as_array().unwrap().len() <= 3);
}

#[test]
fn sweep_writes_curves() {
    let p = pipeline();
    let out = p.root.join("sweep");
    ok(&[
        "sweep", "--config", s(&p.config), "--out", s(&out), "--model", s(&p.model), "--dicts", s(&p.dicts),
        "--inputs", "ioi", "--grid", "6", "--samples", "3",
    ]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let parsed = lincirc::attribution::ThresholdSweep::from_csv(&csv).unwrap();
    assert_eq!(parsed.points.len(), 12);
    assert!(parsed.points.iter().all(|pt| pt.n_inputs == 3));
    let json = read_json(&out.join("sweep.json"));
    assert_eq!(json["points"].as_array().unwrap().len(), 12);
}

#[test]
fn untrained_dictionary_explains_little() {
    let p = pipeline();
    let dir = p.root.join("untrained");
    let hook = HookSpec::new(1, Site::ResidPreAttn);
    DictionarySet::new(vec![DictionaryModule::init(hook, 16, 64, 0.0, 11)]).save_dir(&dir).unwrap();
    let out = p.root.join("eval_untrained");
    ok(&["eval-dict", "--config", s(&p.config), "--out", s(&out), "--model", s(&p.model), "--dicts", s(&dir)]);
    let ev = read_json(&out.join("eval.json"))[0]["metrics"]["explained_variance"].as_f64().unwrap();
    let out = p.root.join("eval_trained");
    ok(&["eval-dict", "--config", s(&p.config), "--out", s(&out), "--model", s(&p.model), "--dicts", s(&p.dicts)]);
    let trained = read_json(&out.join("eval.json"));
    let trained_ev = trained
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["hook"] == "L1.resid-pre-attn")
        .unwrap()["metrics"]["explained_variance"]
        .as_f64()
        .unwrap();
    assert!(ev < 0.2, "untrained EV {ev}");
    assert!(trained_ev > ev, "trained {trained_ev} vs untrained {ev}");
}

#[test]
fn errors_print_one_classified_line() {
    let p = pipeline();
    let out = p.root.join("errors");
    let junk = p.root.join("junk.json");
    std::fs::write(&junk, "not json").unwrap();
    let cases: [(&[&str], &str); 6] = [
        (&["build-graph", "--model", "/nonexistent/model.lcgt", "--dicts", s(&p.dicts)], "io"),
        (&["attribute", "--graph", s(&junk)], "json"),
        (&["attribute", "--tau", "0.1"], "usage"),
        (
            &["build-graph", "--model", s(&p.model), "--dicts", s(&p.dicts), "--root", "logit:0:9999", "--family", "ioi"],
            "invalid_input",
        ),
        (
            &["build-graph", "--model", s(&p.model), "--dicts", s(&p.dicts), "--root", "nonsense"],
            "invalid_input",
        ),
        (&["train-lm", "--config", s(&junk)], "json"),
    ];
    for (args, class) in cases {
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--out", s(&out)]);
        let o = run(&full);
        assert!(!o.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&o.stderr);
        let last = err.lines().last().unwrap_or("");
        assert!(last.starts_with(&format!("error[{class}]: ")), "{args:?}: {err}");
        assert_eq!(err.lines().filter(|l| l.starts_with("error[")).count(), 1);
    }
    let o = bin().env("LINCIRC_THREADS", "zero").args(["init-config", "--out", s(&out)]).output().unwrap();
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[usage]:"));
}

#[test]
fn missing_dictionaries_are_reported() {
    let p = pipeline();
    let set = DictionarySet::load_dir(&p.dicts).unwrap();
    let partial = p.root.join("partial");
    DictionarySet::new(set.modules.iter().filter(|m| m.hook.site != Site::Mlp).cloned().collect())
        .save_dir(&partial)
        .unwrap();
    let o = run(&[
        "build-graph", "--out", s(&p.root.join("partial_out")), "--model", s(&p.model),
        "--dicts", s(&partial), "--family", "ioi",
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[missing_dictionary]:"));
}
