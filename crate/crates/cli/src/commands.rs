// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command implementations. Every command writes its artifacts under the
//! output directory followed by `<command>.manifest.json`.

use std::fmt;
use std::borrow::Cow;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lincirc::attribution::{
    attribute, default_grid, leaf_sum_evaluate, qk_attribute_recursive, sparsity_sweep_with, AttributionOptions,
    AttributionResult, Method,
};
use lincirc::dictionary::{
    collect_feature_stats, evaluate_dictionary, finetune_decoder, prune_features, train_dictionaries,
    DictTrainConfig, DictionaryMetrics, DictionaryModule, DictionarySet, HookSpec, Site,
};
use lincirc::lingraph::{
    build_graph, graph_from_json, graph_to_dot, graph_to_json, verify_graph, GraphExport, LinearGraph, RootSpec,
};
use lincirc::numerics::seeds::derive_seed;
use lincirc::toymodel::corpus::{
    generate_bracket_corpus, generate_induction_corpus, generate_ioi_corpus, generate_mixture,
};
use lincirc::toymodel::train::{bigram_baseline_loss, evaluate_answers, train_lm_with_progress};
use lincirc::toymodel::{ActivationCache, Corpus, Family, TokenSequence, Transformer, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{self, Manifest, MANIFEST_SCHEMA_VERSION};
use crate::{AttrArgs, Cli, Command, CorpusFamily, InputArgs, ModelArgs};

/// Bad flag values or combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A built graph did not reproduce the cached forward pass.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn input(&mut self, p: &Path) -> anyhow::Result<()> {
        if !p.exists() {
            return Err(lincirc::Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)).into());
        }
        self.inputs.push(p.to_path_buf());
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| lincirc::Error::io(&p, e))?;
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let s = serde_json::to_string_pretty(value).map_err(lincirc::Error::from)?;
        self.write(name, s + "\n")
    }

    fn finish(mut self, command: &str, params: serde_json::Value) -> anyhow::Result<()> {
        let outputs = std::mem::take(&mut self.outputs);
        let m = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config_sha256: manifest::sha256_bytes(self.cfg.to_json().as_bytes()),
            params,
            inputs: manifest::entries(&self.inputs, None)?,
            outputs: manifest::entries(&outputs, Some(&self.out))?,
        };
        self.write_json(&format!("{command}.manifest.json"), &m)
    }

    fn vocab(&self) -> Vocabulary {
        Vocabulary::standard()
    }

    fn pad_of(vocab: &Vocabulary) -> usize {
        vocab.pad()
    }

    fn mixture(&self, vocab: &Vocabulary, count: usize, stream: &str) -> Vec<TokenSequence> {
        let c = &self.cfg.corpus;
        generate_mixture(vocab, count, c.weights, c.induction_len, derive_seed(self.seed, stream))
    }

    /// Sequences from `path`, or a generated mixture of `count` from `stream`.
    fn corpus_or_mixture(
        &mut self,
        path: Option<&Path>,
        vocab: &Vocabulary,
        count: usize,
        stream: &str,
    ) -> anyhow::Result<Vec<TokenSequence>> {
        match path {
            Some(p) => {
                self.input(p)?;
                let c = Corpus::load(p)?;
                if c.vocabulary.tokens() != vocab.tokens() {
                    return Err(lincirc::Error::InvalidInput(format!("{} uses a different vocabulary", p.display())).into());
                }
                Ok(c.sequences)
            }
            None => Ok(self.mixture(vocab, count, stream)),
        }
    }

    fn load_model(&mut self, path: &Path) -> anyhow::Result<(Transformer, Vocabulary)> {
        self.input(path)?;
        let (model, side) = Transformer::load(path)?;
        Ok((model, side.vocabulary))
    }

    fn load_dicts(&mut self, dir: &Path) -> anyhow::Result<DictionarySet> {
        self.input(dir)?;
        let d = DictionarySet::load_dir(dir)?;
        if d.modules.is_empty() {
            return Err(lincirc::Error::InvalidInput(format!("no dictionaries in {}", dir.display())).into());
        }
        Ok(d)
    }

    fn load_model_and_dicts(&mut self, m: &ModelArgs) -> anyhow::Result<(Transformer, Vocabulary, DictionarySet)> {
        let (model, vocab) = self.load_model(&m.model)?;
        let dicts = self.load_dicts(&m.dicts)?;
        Ok((model, vocab, dicts))
    }

    fn options(&self, a: &AttrArgs) -> anyhow::Result<(Method, AttributionOptions)> {
        let c = &self.cfg.attribution;
        let method = match &a.method {
            Some(m) => Method::parse(m)?,
            None => c.method,
        };
        let tau = a.tau.unwrap_or(c.tau);
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(usage(format!("--tau must be a finite non-negative number, got {tau}")));
        }
        Ok((
            method,
            AttributionOptions {
                tau,
                detach_errors: a.detach_errors.unwrap_or(c.detach_errors),
                detach_biases: a.detach_biases.unwrap_or(c.detach_biases),
            },
        ))
    }
}

fn family_corpus(vocab: &Vocabulary, family: CorpusFamily, count: usize, seq_len: usize, max_depth: usize, cfg: &RunConfig, seed: u64) -> anyhow::Result<Vec<TokenSequence>> {
    Ok(match family {
        CorpusFamily::Mixture => {
            let c = &cfg.corpus;
            generate_mixture(vocab, count, c.weights, c.induction_len, seed)
        }
        CorpusFamily::Bracket => {
            if max_depth == 0 {
                return Err(usage("--max-depth must be at least 1"));
            }
            generate_bracket_corpus(vocab, count, max_depth, seed)
        }
        CorpusFamily::Induction => {
            if seq_len < 4 {
                return Err(usage("--seq-len must be at least 4"));
            }
            generate_induction_corpus(vocab, count, seq_len, seed)
        }
        CorpusFamily::Ioi => generate_ioi_corpus(vocab, count, seed),
    })
}

fn family_name(f: CorpusFamily) -> &'static str {
    match f {
        CorpusFamily::Mixture => "mixture",
        CorpusFamily::Bracket => "bracket",
        CorpusFamily::Induction => "induction",
        CorpusFamily::Ioi => "ioi",
    }
}

/// Held-out prompts of one family, drawn from their own substream.
fn heldout(vocab: &Vocabulary, family: CorpusFamily, count: usize, cfg: &RunConfig, seed: u64) -> anyhow::Result<Vec<TokenSequence>> {
    let stream = format!("data/heldout/{}", family_name(family));
    family_corpus(vocab, family, count, 24, 3, cfg, derive_seed(seed, &stream))
}

/// Parses `L{layer}.{site}`.
fn parse_hook(s: &str) -> anyhow::Result<HookSpec> {
    let bad = || usage(format!("bad hook {s:?}; expected L<layer>.<site>"));
    let rest = s.strip_prefix('L').ok_or_else(bad)?;
    let (layer, site) = rest.split_once('.').ok_or_else(bad)?;
    Ok(HookSpec::new(layer.parse().map_err(|_| bad())?, Site::parse(site)?))
}

/// The input sequence and the answer (position, token) it carries, if any.
fn select_input(ctx: &mut Ctx, a: &InputArgs, vocab: &Vocabulary) -> anyhow::Result<TokenSequence> {
    let seqs = if let Some(text) = &a.input {
        let mut ids = Vec::new();
        for t in text.split_whitespace() {
            ids.push(vocab.id(t).ok_or_else(|| lincirc::Error::InvalidInput(format!("unknown token {t:?}")))?);
        }
        if ids.first() != Some(&vocab.bos()) {
            ids.insert(0, vocab.bos());
        }
        vec![TokenSequence {
            tokens: ids,
            answer_pos: None,
            answer_token: None,
            family: Family::Induction,
            depths: None,
            first_b_pos: None,
            ioi: None,
        }]
    } else if let Some(p) = &a.corpus {
        ctx.input(p)?;
        Corpus::load(p)?.sequences
    } else {
        let family = if a.family == CorpusFamily::Mixture { CorpusFamily::Induction } else { a.family };
        heldout(vocab, family, a.index + 1, &ctx.cfg, ctx.seed)?
    };
    let s = seqs
        .into_iter()
        .nth(a.index)
        .ok_or_else(|| lincirc::Error::InvalidInput(format!("no sequence at index {}", a.index)))?;
    if a.input.is_some() && a.index != 0 {
        return Err(usage("--index applies to corpora only"));
    }
    Ok(s)
}

/// `answer` roots at the sequence's answer logit, or at the argmax logit of
/// the last position when the sequence has no answer.
fn resolve_root(spec: &str, seq: &TokenSequence, cache: &ActivationCache) -> anyhow::Result<RootSpec> {
    if spec != "answer" {
        return Ok(RootSpec::parse(spec)?);
    }
    Ok(answer_root(seq, cache))
}

fn answer_root(seq: &TokenSequence, cache: &ActivationCache) -> RootSpec {
    if let (Some(pos), Some(token)) = (seq.answer_pos, seq.answer_token) {
        return RootSpec::Logit { pos, token };
    }
    let pos = cache.seq_len() - 1;
    let row = cache.logits.row(pos);
    let token = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
    RootSpec::Logit { pos, token }
}

fn build_for(
    model: &Transformer,
    dicts: &DictionarySet,
    seq: &TokenSequence,
    root: &str,
) -> anyhow::Result<(LinearGraph, ActivationCache)> {
    seq.validate(model.config.vocab_size, model.config.max_seq_len)?;
    let (_, cache) = model.forward_with_cache(&seq.tokens)?;
    let root = resolve_root(root, seq, &cache)?;
    let graph = build_graph(model, &cache, dicts, root)?;
    Ok((graph, cache))
}

#[derive(Serialize, Deserialize)]
pub struct AttributionFile {
    pub root: String,
    pub recovery: Option<f64>,
    pub surviving_count: usize,
    /// Surviving nodes by descending score magnitude.
    pub top: Vec<RankedNode>,
    pub result: AttributionResult,
}

#[derive(Serialize, Deserialize)]
pub struct RankedNode {
    pub node: String,
    pub score: f64,
}

fn attribution_file(graph: &LinearGraph, r: AttributionResult) -> AttributionFile {
    let top = r
        .ranked()
        .into_iter()
        .take(50)
        .map(|v| RankedNode {
            node: graph.nodes[v].id.to_string(),
            score: r.scores[v],
        })
        .collect();
    AttributionFile {
        root: graph.nodes[graph.root].id.to_string(),
        recovery: leaf_sum_evaluate(&r).ok(),
        surviving_count: r.surviving_count(),
        top,
        result: r,
    }
}

fn read_graph(ctx: &mut Ctx, p: &Path) -> anyhow::Result<LinearGraph> {
    ctx.input(p)?;
    let bytes = std::fs::read(p).map_err(|e| lincirc::Error::io(p, e))?;
    let export: GraphExport = serde_json::from_slice(&bytes).map_err(lincirc::Error::from)?;
    Ok(graph_from_json(&export)?)
}

#[derive(Serialize)]
struct DictEval {
    hook: String,
    d_sae: usize,
    alive: usize,
    metrics: DictionaryMetrics,
}

fn dict_config(cfg: &RunConfig, hook: HookSpec, seed: u64, stream: &str) -> DictTrainConfig {
    let mut c = cfg
        .dictionaries
        .iter()
        .find(|d| d.hook == hook)
        .map(|d| d.train.clone())
        .unwrap_or_else(|| DictTrainConfig::toy(hook.site));
    c.seed = derive_seed(seed, &format!("{stream}/{hook}"));
    c
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.common.seed.unwrap_or(cfg.seed);
    let out = cli.common.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| lincirc::Error::io(&out, e))?;
    let mut ctx = Ctx {
        cfg,
        seed,
        out,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    if let Some(p) = &cli.common.config {
        ctx.input(p)?;
    }
    match &cli.command {
        Command::InitConfig => {
            let s = ctx.cfg.to_json();
            ctx.write("config.json", s + "\n")?;
            ctx.finish("init-config", json!({}))
        }
        Command::GenCorpus {
            family,
            count,
            seq_len,
            max_depth,
        } => {
            let vocab = ctx.vocab();
            let count = count.unwrap_or(ctx.cfg.corpus.count);
            let stream = format!("data/{}", family_name(*family));
            let seqs = family_corpus(&vocab, *family, count, *seq_len, *max_depth, &ctx.cfg, derive_seed(seed, &stream))?;
            let p = ctx.path("corpus.json");
            Corpus::new(vocab, seqs).save(&p)?;
            ctx.finish(
                "gen-corpus",
                json!({"family": family_name(*family), "count": count, "seq_len": seq_len, "max_depth": max_depth}),
            )
        }
        Command::TrainLm { corpus, steps } => {
            let vocab = ctx.vocab();
            let mut lm = ctx.cfg.lm.clone();
            if let Some(s) = steps {
                lm.steps = *s;
            }
            let count = ctx.cfg.corpus.count;
            let train = ctx.corpus_or_mixture(corpus.as_deref(), &vocab, count, "data/lm")?;
            let mut config = ctx.cfg.model.clone();
            config.vocab_size = vocab.len();
            let log_every = lm.log_every.max(1);
            let (model, report) = train_lm_with_progress(&config, &train, &lm, Ctx::pad_of(&vocab), seed, |step, loss| {
                if step % log_every == 0 {
                    eprintln!("step {step} loss {loss:.4}");
                }
            })?;
            let n = ctx.cfg.corpus.eval_count;
            let mut evals = Vec::new();
            for (family, f) in [
                (Family::Bracket, CorpusFamily::Bracket),
                (Family::Induction, CorpusFamily::Induction),
                (Family::Ioi, CorpusFamily::Ioi),
            ] {
                let seqs = heldout(&vocab, f, n, &ctx.cfg, seed)?;
                if seqs.iter().all(|s| s.answer_pos.is_none()) {
                    continue;
                }
                evals.push((family, evaluate_answers(&model, &seqs)?, bigram_baseline_loss(&train, &seqs, vocab.len())));
            }
            let p = ctx.path("model.lcgt");
            model.save(&p, &vocab, json!({"steps": lm.steps, "seed": seed}))?;
            let csv: String = std::iter::once("step,loss\n".to_string())
                .chain(report.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
                .collect();
            ctx.write("loss.csv", csv)?;
            let heldout: Vec<_> = evals
                .iter()
                .map(|(f, e, b)| json!({"family": f, "accuracy": e.accuracy, "loss": e.loss, "count": e.count, "bigram_loss": b}))
                .collect();
            ctx.write_json(
                "lm_report.json",
                &json!({"final_loss": report.losses.last(), "steps": report.losses.len(), "heldout": heldout}),
            )?;
            ctx.finish("train-lm", json!({"steps": lm.steps, "train_sequences": train.len()}))
        }
        Command::TrainDict {
            model,
            corpus,
            hooks,
            budget,
        } => {
            let (model, vocab) = ctx.load_model(model)?;
            let n = ctx.cfg.corpus.dict_count;
            let seqs = ctx.corpus_or_mixture(corpus.as_deref(), &vocab, n, "data/dict")?;
            let selected: Vec<HookSpec> = match hooks {
                Some(h) => h.split(',').map(|s| parse_hook(s.trim())).collect::<anyhow::Result<_>>()?,
                None => ctx.cfg.dictionaries.iter().map(|d| d.hook).collect(),
            };
            if selected.is_empty() {
                return Err(usage("no hooks selected"));
            }
            let specs: Vec<(HookSpec, DictTrainConfig)> = selected
                .iter()
                .map(|&h| {
                    let mut c = dict_config(&ctx.cfg, h, seed, "dict-init");
                    if let Some(b) = budget {
                        c.token_budget = *b;
                    }
                    (h, c)
                })
                .collect();
            let trained = train_dictionaries(&model, &seqs, &specs, Ctx::pad_of(&vocab), |step, msg| {
                eprintln!("step {step} {msg}");
            })?;
            let histories: Vec<_> = trained.iter().map(|(m, h)| json!({"hook": m.hook.to_string(), "history": h})).collect();
            let set = DictionarySet::new(trained.into_iter().map(|(m, _)| m).collect());
            let dir = ctx.path("dicts");
            set.save_dir(&dir)?;
            ctx.write_json("train_dict.json", &histories)?;
            let hooks: Vec<String> = selected.iter().map(|h| h.to_string()).collect();
            ctx.finish("train-dict", json!({"hooks": hooks, "budget": budget}))
        }
        Command::PruneDict { m, corpus } => {
            let (model, vocab, dicts) = ctx.load_model_and_dicts(m)?;
            let n = ctx.cfg.corpus.eval_count;
            let seqs = ctx.corpus_or_mixture(corpus.as_deref(), &vocab, n, "data/eval")?;
            let refs: Vec<&DictionaryModule> = dicts.modules.iter().collect();
            let stats = collect_feature_stats(&model, &refs, &seqs, Ctx::pad_of(&vocab))?;
            let mut pruned = Vec::new();
            let mut report = Vec::new();
            for (module, st) in dicts.modules.iter().zip(&stats) {
                let p = prune_features(module, Some(st), &ctx.cfg.prune)?;
                report.push(json!({"hook": module.hook.to_string(), "d_sae": module.d_sae(), "alive_before": module.n_alive(), "alive_after": p.n_alive()}));
                pruned.push(p);
            }
            let dir = ctx.path("dicts");
            DictionarySet::new(pruned).save_dir(&dir)?;
            ctx.write_json("prune.json", &report)?;
            let thresholds = ctx.cfg.prune;
            ctx.finish("prune-dict", json!({"thresholds": thresholds}))
        }
        Command::FinetuneDict { m, corpus, budget } => {
            let (model, vocab, dicts) = ctx.load_model_and_dicts(m)?;
            let n = ctx.cfg.corpus.dict_count;
            let seqs = ctx.corpus_or_mixture(corpus.as_deref(), &vocab, n, "data/finetune")?;
            let budget = budget.unwrap_or(ctx.cfg.finetune_budget);
            let mut tuned = Vec::new();
            let mut report = Vec::new();
            for module in &dicts.modules {
                let mut c = dict_config(&ctx.cfg, module.hook, seed, "finetune");
                c.lambda = 0.0;
                c.token_budget = budget;
                let (t, h) = finetune_decoder(&model, &seqs, module, &c, Ctx::pad_of(&vocab))?;
                report.push(json!({"hook": module.hook.to_string(), "history": h}));
                tuned.push(t);
            }
            let dir = ctx.path("dicts");
            DictionarySet::new(tuned).save_dir(&dir)?;
            ctx.write_json("finetune.json", &report)?;
            ctx.finish("finetune-dict", json!({"budget": budget}))
        }
        Command::EvalDict { m, corpus } => {
            let (model, vocab, dicts) = ctx.load_model_and_dicts(m)?;
            let n = ctx.cfg.corpus.eval_count;
            let seqs = ctx.corpus_or_mixture(corpus.as_deref(), &vocab, n, "data/eval")?;
            let mut evals = Vec::new();
            for module in &dicts.modules {
                evals.push(DictEval {
                    hook: module.hook.to_string(),
                    d_sae: module.d_sae(),
                    alive: module.n_alive(),
                    metrics: evaluate_dictionary(&model, module, &seqs, Ctx::pad_of(&vocab))?,
                });
            }
            ctx.write_json("eval.json", &evals)?;
            ctx.finish("eval-dict", json!({"sequences": seqs.len()}))
        }
        Command::BuildGraph { m, input, root } => {
            let (model, vocab, dicts) = ctx.load_model_and_dicts(m)?;
            let seq = select_input(&mut ctx, input, &vocab)?;
            let root = root.clone().or(ctx.cfg.attribution.root.clone()).unwrap_or_else(|| "answer".into());
            let (graph, cache) = build_for(&model, &dicts, &seq, &root)?;
            let report = verify_graph(&graph, &cache);
            ctx.write_json("graph.json", &graph_to_json(&graph))?;
            ctx.write("graph.dot", graph_to_dot(&graph, None))?;
            ctx.write_json("verify.json", &report)?;
            let params = json!({"root": root, "tokens": seq.tokens, "nodes": graph.len(), "edges": graph.edges.len()});
            if !report.passed {
                return Err(VerificationFailed(format!(
                    "{} nodes off by up to {:.3e}, root error {:.3e}",
                    report.failures.len(),
                    report.max_node_error,
                    report.root_error
                ))
                .into());
            }
            ctx.finish("build-graph", params)
        }
        Command::Attribute {
            graph,
            model,
            dicts,
            input,
            root,
            attr,
        } => {
            let (method, opts) = ctx.options(attr)?;
            let graph = match (graph, model, dicts) {
                (Some(g), None, None) => {
                    if root.is_some() {
                        return Err(usage("--root cannot be combined with --graph"));
                    }
                    read_graph(&mut ctx, g)?
                }
                (None, Some(model), Some(dicts)) => {
                    let (model, vocab, dicts) = ctx.load_model_and_dicts(&ModelArgs {
                        model: model.clone(),
                        dicts: dicts.clone(),
                    })?;
                    let seq = select_input(&mut ctx, input, &vocab)?;
                    let root = root.clone().or(ctx.cfg.attribution.root.clone()).unwrap_or_else(|| "answer".into());
                    build_for(&model, &dicts, &seq, &root)?.0
                }
                _ => return Err(usage("attribute needs either --graph or both --model and --dicts")),
            };
            let r = attribute(&graph, method, &opts);
            let dot = graph_to_dot(&graph, Some(&r.surviving));
            ctx.write_json("attribution.json", &attribution_file(&graph, r))?;
            ctx.write("attribution.dot", dot)?;
            ctx.finish("attribute", json!({"method": method, "options": opts}))
        }
        Command::QkAttribute {
            m,
            input,
            layer,
            head,
            query,
            key,
            qk_depth,
            top_k,
        } => {
            let (model, vocab, dicts) = ctx.load_model_and_dicts(m)?;
            let seq = select_input(&mut ctx, input, &vocab)?;
            seq.validate(model.config.vocab_size, model.config.max_seq_len)?;
            let (_, cache) = model.forward_with_cache(&seq.tokens)?;
            let query = query.unwrap_or(cache.seq_len() - 1);
            let depth = qk_depth.unwrap_or(ctx.cfg.attribution.qk_depth);
            let top_k = top_k.unwrap_or(ctx.cfg.attribution.qk_top_k);
            if *head >= model.config.n_heads {
                return Err(usage(format!("--head {head} out of range")));
            }
            let tree = qk_attribute_recursive(&model, &cache, &dicts, *layer, *head, query, *key, depth, top_k)?;
            ctx.write_json("qk.json", &tree)?;
            ctx.finish(
                "qk-attribute",
                json!({"layer": layer, "head": head, "query": query, "key": key, "qk_depth": depth, "top_k": top_k, "tokens": seq.tokens}),
            )
        }
        Command::Sweep {
            m,
            inputs,
            grid,
            samples,
            attr,
        } => {
            let (_, opts) = ctx.options(attr)?;
            let (model, vocab, dicts) = ctx.load_model_and_dicts(m)?;
            let samples = samples.unwrap_or(ctx.cfg.attribution.samples);
            let n_grid = grid.unwrap_or(ctx.cfg.attribution.grid);
            if samples == 0 || n_grid == 0 {
                return Err(usage("--samples and --grid must be positive"));
            }
            let seqs: Vec<TokenSequence> = match inputs.as_str() {
                "ioi" => heldout(&vocab, CorpusFamily::Ioi, samples, &ctx.cfg, seed)?,
                "induction" => heldout(&vocab, CorpusFamily::Induction, samples, &ctx.cfg, seed)?,
                "bracket" => heldout(&vocab, CorpusFamily::Bracket, samples, &ctx.cfg, seed)?,
                path => {
                    let p = PathBuf::from(path);
                    ctx.input(&p)?;
                    Corpus::load(&p)?.sequences.into_iter().take(samples).collect()
                }
            };
            for s in &seqs {
                s.validate(model.config.vocab_size, model.config.max_seq_len)
                    .with_context(|| format!("sweep input {:?}", vocab.render(&s.tokens)))?;
            }
            let a = &ctx.cfg.attribution;
            let g = default_grid(n_grid, a.grid_lo, a.grid_hi);
            // Graphs are built on demand; holding all of them at once does not
            // fit in memory for the full-size model.
            let sweep = sparsity_sweep_with(seqs.len(), &g, &opts, |i| {
                let s = &seqs[i];
                let (_, cache) = model.forward_with_cache(&s.tokens)?;
                let root = answer_root(s, &cache);
                Ok(Cow::Owned(build_graph(&model, &cache, &dicts, root)?))
            })?;
            ctx.write("sweep.csv", sweep.to_csv())?;
            ctx.write_json("sweep.json", &json!({"points": sweep.points, "comparisons": sweep.comparisons, "dominance": sweep.dominance()}))?;
            ctx.finish("sweep", json!({"inputs": inputs, "grid": n_grid, "samples": seqs.len(), "options": opts}))
        }
        Command::Export {
            graph,
            attribution,
            format,
        } => {
            let g = read_graph(&mut ctx, graph)?;
            let result = match attribution {
                Some(p) => {
                    ctx.input(p)?;
                    let text = std::fs::read_to_string(p).map_err(|e| lincirc::Error::io(p, e))?;
                    let f: AttributionFile = serde_json::from_str(&text).map_err(lincirc::Error::from)?;
                    if f.result.scores.len() != g.len() {
                        return Err(lincirc::Error::InvalidInput("attribution does not match the graph".into()).into());
                    }
                    Some(f.result)
                }
                None => None,
            };
            match format.as_str() {
                "dot" => {
                    let keep = result.as_ref().map(|r| r.surviving.as_slice());
                    ctx.write("export.dot", graph_to_dot(&g, keep))?;
                }
                _ => {
                    let e = match &result {
                        Some(r) => r.export(&g),
                        None => graph_to_json(&g),
                    };
                    ctx.write_json("export.json", &e)?;
                }
            }
            ctx.finish("export", json!({"format": format}))
        }
    }
}
