use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use suffixlab_core::diagnostics::Alteration;
use suffixlab_core::gradcheck::{gradcheck as run_gradcheck, GRADCHECK_TOL};
use suffixlab_core::toylab::{
    load_checkpoint, prompt_parts, refusal_rate, save_checkpoint, synthesize_dataset,
    train_toy_model, CharVocab, Split, ToyDataset, ToyDatasetConfig, DEFAULT_SUFFIX_LEN,
};
use suffixlab_core::{
    branch_effect_trace, branch_gradient_cosines, compute_guide, lila_objective, one_hot_gradient,
    projection_pcc, run_attack, run_universal, AttackConfig, AttackResult, Model, ModelConfig,
    PromptLayout, PromptParts, SurgeryConfig, SurgeryMode, TokenId,
};
use suffixlab_engine::Scalar;

use crate::config::TrainFile;
use crate::output::{
    create_dir, file_sha256, rel, unix_now, write_attack_run, write_json, RunManifest,
};
use crate::{
    usage, AlterArg, AttackArgs, AttackFlags, DiagnoseArgs, DiagnoseKind, GradcheckArgs, ModelArgs,
    Precision, QueryArgs, SplitArg, SweepArgs, SweepParam, TrainArgs, UniversalArgs,
};

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

struct Loaded {
    model: AnyModel,
    config: ModelConfig,
    dataset: ToyDataset,
    checkpoint_sha256: String,
    precision: Precision,
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    }
}

fn load(args: &ModelArgs) -> Result<Loaded> {
    let model = load_checkpoint(&args.model)
        .with_context(|| format!("loading checkpoint {}", args.model.display()))?;
    let config = model.config().clone();
    let dataset_path = match &args.dataset {
        Some(p) => p.clone(),
        None => sibling(&args.model, "dataset.jsonl"),
    };
    let dataset = read_dataset(&dataset_path)?;
    Ok(Loaded {
        model: match args.precision {
            Precision::F32 => AnyModel::F32(model),
            Precision::F64 => AnyModel::F64(model.cast()),
        },
        config,
        dataset,
        checkpoint_sha256: file_sha256(&args.model)?,
        precision: args.precision,
    })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn read_dataset(path: &Path) -> Result<ToyDataset> {
    let cfg_path = sibling(path, "dataset_config.json");
    let cfg: ToyDatasetConfig = serde_json::from_reader(BufReader::new(
        File::open(&cfg_path).with_context(|| format!("opening {}", cfg_path.display()))?,
    ))
    .with_context(|| format!("parsing {}", cfg_path.display()))?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ToyDataset::read_jsonl(cfg, BufReader::new(file))?)
}

struct Query {
    text: String,
    target: String,
    parts: PromptParts,
}

fn make_query(dataset: &ToyDataset, text: String, target: Option<String>) -> Result<Query> {
    let target = target.unwrap_or_else(|| dataset.config.compliance(&text));
    let parts = prompt_parts(&CharVocab::new(), &text, &target)?;
    Ok(Query {
        text,
        target,
        parts,
    })
}

fn flagged_queries(
    dataset: &ToyDataset,
    s: SplitArg,
    range: std::ops::Range<usize>,
) -> Result<Vec<String>> {
    let flagged = dataset.flagged(split(s));
    if range.end > flagged.len() {
        return usage(format!(
            "queries {}..{} requested but the {:?} split has {} flagged queries",
            range.start,
            range.end,
            s,
            flagged.len()
        ));
    }
    Ok(flagged[range].iter().map(|r| r.query.clone()).collect())
}

fn select_query(dataset: &ToyDataset, q: &QueryArgs) -> Result<Query> {
    let text = match &q.query_file {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let mut found = None;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    found = Some(line.trim().to_string());
                    break;
                }
            }
            match found {
                Some(t) => t,
                None => return usage(format!("{} holds no query", path.display())),
            }
        }
        None => flagged_queries(dataset, q.split, q.query_id..q.query_id + 1)?.remove(0),
    };
    make_query(dataset, text, q.target.clone())
}

fn init_token(c: char) -> Result<TokenId> {
    CharVocab::new().id(c).map_err(|_| {
        crate::UsageError(format!("initial character {c:?} is not in the vocabulary")).into()
    })
}

/// Resolve attack flags against the model; bad combinations are usage errors.
fn attack_config(flags: &AttackFlags, model: &ModelConfig) -> Result<AttackConfig> {
    let mode = flags.surgery;
    if flags.beta.is_some() && !mode.uses_beta() {
        return usage(format!("--beta applies to lila+ modes, not {mode}"));
    }
    if flags.layer.is_some() && !mode.needs_guide() {
        eprintln!("warning: --layer has no effect with --surgery {mode}");
    }
    if flags.gamma.is_some() && !mode.scales_residuals() {
        eprintln!("warning: --gamma has no effect with --surgery {mode}");
    }
    let mut surgery = SurgeryConfig::new(mode, model.n_layers);
    if let Some(g) = flags.gamma {
        surgery.gamma = g;
    }
    if let Some(l) = flags.layer {
        surgery.layer = l;
    }
    if let Some(b) = flags.beta {
        surgery.beta = b;
    }
    surgery.guide_refresh = flags.guide_refresh;
    let mut cfg = AttackConfig::new(surgery, init_token(flags.init_char)?);
    cfg.method = flags.method;
    cfg.top_k = flags.topk;
    cfg.batch = flags.batch;
    cfg.iterations = flags.iters;
    cfg.suffix_len = flags.suffix_len;
    cfg.seed = flags.seed;
    cfg.match_every = flags.match_every;
    cfg.early_exit = flags.early_exit;
    cfg.record_timing = flags.timing;
    cfg.record_candidates = flags.record_candidates;
    if let Err(e) = cfg.validate(model.n_layers, model.vocab_size) {
        return usage(e.to_string());
    }
    Ok(cfg)
}

fn attack_with(loaded: &Loaded, query: &Query, cfg: &AttackConfig) -> Result<AttackResult> {
    Ok(with_model!(&loaded.model, m => run_attack(m, &query.parts, cfg))?)
}

fn resolved_attack(loaded: &Loaded, cfg: &AttackConfig, query: &Query) -> Value {
    json!({
        "attack": cfg,
        "query": query.text,
        "target": query.target,
        "checkpoint_sha256": loaded.checkpoint_sha256,
        "precision": loaded.precision.name(),
    })
}

pub fn train(args: TrainArgs) -> Result<()> {
    let started = unix_now();
    let mut file =
        TrainFile::load(&args.config).map_err(|e| crate::UsageError(format!("{e:#}")))?;
    if let Some(seed) = args.seed {
        file.seed = seed;
    }
    let (model_cfg, data_cfg, train_cfg) = (file.model(), file.dataset(), file.train());
    let invalid = model_cfg
        .validate()
        .and_then(|_| data_cfg.validate())
        .and_then(|_| train_cfg.validate());
    if let Err(e) = invalid {
        return usage(format!("{}: {e}", args.config.display()));
    }
    if !(0.0..=1.0).contains(&file.refusal_gate) {
        return usage(format!("refusal_gate {} outside [0, 1]", file.refusal_gate));
    }
    let out = &args.out;
    create_dir(out)?;
    fs::write(out.join("config.resolved.toml"), toml::to_string(&file)?)?;

    let dataset = synthesize_dataset(&data_cfg)?;
    let mut w = BufWriter::new(File::create(out.join("dataset.jsonl"))?);
    dataset.write_jsonl(&mut w)?;
    drop(w);
    write_json(&out.join("dataset_config.json"), &dataset.config)?;

    let outcome = train_toy_model(&model_cfg, &dataset, &train_cfg, |step, loss| {
        if step == 1 || step % 50 == 0 || step == train_cfg.steps {
            eprintln!("step {step:>5}  loss {loss:.4}");
        }
    })?;
    let mut log = csv::Writer::from_path(out.join("train_log.csv"))?;
    log.write_record(["step", "loss"])?;
    for (i, l) in outcome.losses.iter().enumerate() {
        log.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    log.flush()?;

    let ckpt = out.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt)?;
    let train_rate = refusal_rate(&outcome.model, &dataset, Split::Train)?;
    let heldout_rate = refusal_rate(&outcome.model, &dataset, Split::Heldout)?;
    let passed = train_rate >= file.refusal_gate && heldout_rate >= file.refusal_gate;
    write_json(
        &out.join("gate.json"),
        &json!({
            "train_refusal_rate": train_rate,
            "heldout_refusal_rate": heldout_rate,
            "refusal_gate": file.refusal_gate,
            "passed": passed,
        }),
    )?;
    eprintln!("refusal rate: train {train_rate:.3}, held-out {heldout_rate:.3}");

    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&file)?,
        "f32",
        file.seed,
        started,
    );
    manifest.artifacts = [
        "config.resolved.toml",
        "dataset.jsonl",
        "dataset_config.json",
        "train_log.csv",
        "model.ckpt",
        "gate.json",
    ]
    .map(String::from)
    .to_vec();
    manifest.write(out)?;
    if !passed {
        return Err(anyhow!(
            "refusal gate failed: train {train_rate:.3}, held-out {heldout_rate:.3} < {}",
            file.refusal_gate
        ));
    }
    Ok(())
}

pub fn attack(args: AttackArgs) -> Result<()> {
    let started = unix_now();
    let loaded = load(&args.model)?;
    let cfg = attack_config(&args.attack, &loaded.config)?;
    let query = select_query(&loaded.dataset, &args.query)?;
    let result = attack_with(&loaded, &query, &cfg)?;
    let resolved = resolved_attack(&loaded, &cfg, &query);
    let mut manifest = RunManifest::new(
        "attack",
        resolved,
        loaded.precision.name(),
        cfg.seed,
        started,
    );
    manifest.artifacts = write_attack_run(
        &args.out,
        &result,
        &manifest.config_hash,
        &query.text,
        &query.target,
    )?;
    manifest.write(&args.out)?;
    eprintln!(
        "best loss {:.4} (from {:.4}), matched {}",
        result.best_loss, result.initial_loss, result.matched
    );
    Ok(())
}

pub fn attack_universal(args: UniversalArgs) -> Result<()> {
    let started = unix_now();
    let loaded = load(&args.model)?;
    let base = attack_config(&args.attack, &loaded.config)?;
    if args.train_queries == 0 || args.repeats == 0 {
        return usage("--train-queries and --repeats must be at least 1");
    }
    let n = args.train_queries + args.eval_queries;
    let texts = flagged_queries(&loaded.dataset, args.split, 0..n)?;
    let queries = texts
        .into_iter()
        .map(|t| make_query(&loaded.dataset, t, None))
        .collect::<Result<Vec<_>>>()?;
    let (train_q, eval_q) = queries.split_at(args.train_queries);
    let train_parts: Vec<PromptParts> = train_q.iter().map(|q| q.parts.clone()).collect();
    let eval_parts: Vec<PromptParts> = eval_q.iter().map(|q| q.parts.clone()).collect();

    let resolved = json!({
        "attack": base,
        "train_queries": train_q.iter().map(|q| &q.text).collect::<Vec<_>>(),
        "eval_queries": eval_q.iter().map(|q| &q.text).collect::<Vec<_>>(),
        "repeats": args.repeats,
        "checkpoint_sha256": loaded.checkpoint_sha256,
        "precision": loaded.precision.name(),
    });
    let mut manifest = RunManifest::new(
        "attack-universal",
        resolved,
        loaded.precision.name(),
        base.seed,
        started,
    );
    create_dir(&args.out)?;
    let mut runs = Vec::with_capacity(args.repeats);
    for r in 0..args.repeats {
        let mut cfg = base.clone();
        cfg.seed = base.seed + r as u64;
        let res =
            with_model!(&loaded.model, m => run_universal(m, &train_parts, &eval_parts, &cfg))?;
        let dir = args.out.join(format!("run_{r}"));
        let joined = train_q
            .iter()
            .map(|q| q.text.as_str())
            .collect::<Vec<_>>()
            .join(" | ");
        for name in write_attack_run(&dir, &res.attack, &cfg.hash(), &joined, "")? {
            manifest.artifacts.push(rel(&args.out, &dir.join(name)));
        }
        write_json(
            &dir.join("universal.json"),
            &json!({
                "seed": cfg.seed,
                "train_matches": res.train_matches,
                "heldout_matches": res.heldout_matches,
                "train_mr": res.train_mr,
                "heldout_mr": res.heldout_mr,
            }),
        )?;
        manifest
            .artifacts
            .push(rel(&args.out, &dir.join("universal.json")));
        eprintln!(
            "repeat {r}: train MR {:.3}, held-out MR {:.3}",
            res.train_mr, res.heldout_mr
        );
        runs.push(res);
    }
    let heldout: Vec<f64> = runs.iter().map(|r| r.heldout_mr).collect();
    let mean = heldout.iter().sum::<f64>() / heldout.len() as f64;
    let worst = heldout.iter().copied().fold(f64::INFINITY, f64::min);
    let best = heldout.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    write_json(
        &args.out.join("aggregate.json"),
        &json!({
            "repeats": args.repeats,
            "train_queries": args.train_queries,
            "eval_queries": args.eval_queries,
            "heldout_mr": heldout,
            "mean_mr": mean,
            "worst_mr": worst,
            "best_mr": best,
            "mean_train_mr": runs.iter().map(|r| r.train_mr).sum::<f64>() / runs.len() as f64,
        }),
    )?;
    manifest.artifacts.push("aggregate.json".into());
    manifest.write(&args.out)?;
    eprintln!("held-out MR: mean {mean:.3}, worst {worst:.3}, best {best:.3}");
    Ok(())
}

#[derive(Deserialize)]
struct RunResult {
    query: String,
    target: String,
    initial_suffix: Vec<TokenId>,
    suffix_history: Vec<Vec<TokenId>>,
}

/// The prompt to diagnose plus the initial-suffix prompt used as reference.
struct Subject {
    query: String,
    iteration: Option<usize>,
    layout: PromptLayout,
    reference: PromptLayout,
}

fn subject(loaded: &Loaded, args: &DiagnoseArgs) -> Result<Subject> {
    let vocab = CharVocab::new();
    match &args.run {
        Some(run) => {
            let path = run.join("result.json");
            let r: RunResult = serde_json::from_reader(BufReader::new(
                File::open(&path).with_context(|| format!("opening {}", path.display()))?,
            ))
            .with_context(|| format!("parsing {}", path.display()))?;
            let it = args.iteration.unwrap_or(r.suffix_history.len());
            let suffix = match it {
                0 => &r.initial_suffix,
                i if i <= r.suffix_history.len() => &r.suffix_history[i - 1],
                i => {
                    return usage(format!(
                        "iteration {i} beyond the run's {} iterations",
                        r.suffix_history.len()
                    ))
                }
            };
            let parts = prompt_parts(&vocab, &r.query, &r.target)?;
            Ok(Subject {
                query: r.query,
                iteration: Some(it),
                layout: parts.layout(suffix)?,
                reference: parts.layout(&r.initial_suffix)?,
            })
        }
        None => {
            if args.iteration.is_some() {
                return usage("--iteration needs --run");
            }
            let q = select_query(&loaded.dataset, &args.query)?;
            let suffix = vec![init_token(args.init_char)?; args.suffix_len];
            let layout = q.parts.layout(&suffix)?;
            Ok(Subject {
                query: q.text,
                iteration: None,
                reference: layout.clone(),
                layout,
            })
        }
    }
}

fn alteration(a: AlterArg) -> Alteration {
    match a {
        AlterArg::Suffix => Alteration::SuffixToken,
        AlterArg::Query => Alteration::QueryToken,
        AlterArg::Identity => Alteration::Identity,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn diagnose(kind: DiagnoseKind) -> Result<()> {
    let started = unix_now();
    let (name, args) = match &kind {
        DiagnoseKind::Cosine(a) => ("cosine", a),
        DiagnoseKind::Trace(a) => ("trace", a),
        DiagnoseKind::Pcc(a) => ("pcc", a),
    };
    let loaded = load(&args.model)?;
    let subj = subject(&loaded, args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let how = alteration(args.alter);
    create_dir(&args.out)?;
    let mut resolved = json!({
        "diagnostic": name,
        "query": subj.query,
        "suffix": subj.layout.suffix(),
        "iteration": subj.iteration,
        "seed": args.seed,
        "checkpoint_sha256": loaded.checkpoint_sha256,
        "precision": loaded.precision.name(),
    });
    let artifact = match kind {
        DiagnoseKind::Cosine(_) => {
            if args.num_queries == 0 {
                return usage("--num-queries must be at least 1");
            }
            let mut layouts = vec![subj.layout.clone()];
            if args.num_queries > 1 {
                if args.run.is_some() {
                    return usage("--num-queries > 1 cannot be combined with --run");
                }
                let texts =
                    flagged_queries(&loaded.dataset, args.query.split, 0..args.num_queries)?;
                layouts = texts
                    .into_iter()
                    .map(|t| {
                        make_query(&loaded.dataset, t, args.query.target.clone())?
                            .parts
                            .layout(subj.layout.suffix())
                            .map_err(Into::into)
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            resolved["num_queries"] = json!(layouts.len());
            let blocks = 2 * loaded.config.n_layers;
            let (mut sum, mut count) = (vec![0.0; blocks], vec![0usize; blocks]);
            for layout in &layouts {
                let report = with_model!(&loaded.model, m => branch_gradient_cosines(m, layout))?;
                for (b, c) in report.cosines.iter().enumerate() {
                    if let Some(c) = c {
                        sum[b] += c;
                        count[b] += 1;
                    }
                }
            }
            let mut w = csv::Writer::from_path(args.out.join("cosines.csv"))?;
            w.write_record(["block", "cosine", "n"])?;
            for b in 0..blocks {
                let mean = (count[b] > 0).then(|| sum[b] / count[b] as f64);
                w.write_record([(b + 1).to_string(), opt(mean), count[b].to_string()])?;
            }
            w.flush()?;
            "cosines.csv"
        }
        DiagnoseKind::Trace(_) => {
            let samples = args.samples.unwrap_or(16);
            resolved["samples"] = json!(samples);
            resolved["alteration"] = json!(how);
            let report = with_model!(&loaded.model, m => branch_effect_trace(m, &subj.layout, samples, how, &mut rng))?;
            let mut w = csv::Writer::from_path(args.out.join("effects.csv"))?;
            w.write_record(["block", "branch", "mean_effect", "n"])?;
            for e in &report.effects {
                let branch = serde_json::to_value(e.branch)?;
                w.write_record([
                    e.block.to_string(),
                    branch.as_str().unwrap_or_default().to_string(),
                    e.mean_effect.to_string(),
                    e.samples.to_string(),
                ])?;
            }
            w.flush()?;
            "effects.csv"
        }
        DiagnoseKind::Pcc(_) => {
            let samples = args.samples.unwrap_or(64);
            resolved["samples"] = json!(samples);
            resolved["alteration"] = json!(how);
            resolved["reference_suffix"] = json!(subj.reference.suffix());
            if subj.reference.tokens() == subj.layout.tokens() {
                eprintln!("warning: prompt equals its reference; every guide is zero");
            }
            let report = with_model!(&loaded.model, m => projection_pcc(m, &subj.layout, &subj.reference, samples, how, &mut rng))?;
            let mut w = csv::Writer::from_path(args.out.join("pcc.csv"))?;
            w.write_record(["layer", "position_label", "neg_pcc", "n"])?;
            for (layer, row) in report.neg_pcc.iter().enumerate() {
                for (label, v) in report.labels.iter().zip(row) {
                    w.write_record([
                        layer.to_string(),
                        label.clone(),
                        opt(*v),
                        report.samples.to_string(),
                    ])?;
                }
            }
            w.flush()?;
            "pcc.csv"
        }
    };
    let mut manifest = RunManifest::new(
        &format!("diagnose {name}"),
        resolved,
        loaded.precision.name(),
        args.seed,
        started,
    );
    manifest.artifacts.push(artifact.into());
    manifest.write(&args.out)
}

fn fmt_value(param: SweepParam, v: f64) -> String {
    match param {
        SweepParam::Gamma => v.to_string(),
        SweepParam::Layer => (v as usize).to_string(),
    }
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let started = unix_now();
    let loaded = load(&args.model)?;
    let mode = args.attack.surgery;
    match args.param {
        SweepParam::Gamma if !mode.scales_residuals() => {
            return usage(format!(
                "a gamma sweep needs --surgery lsgm or lsgm-lila+, not {mode}"
            ))
        }
        SweepParam::Layer if !mode.needs_guide() => {
            return usage(format!(
                "a layer sweep needs a guided --surgery mode, not {mode}"
            ))
        }
        _ => {}
    }
    if args.values.is_empty() || args.queries == 0 {
        return usage("--values and --queries must be non-empty");
    }
    if args.param == SweepParam::Layer && args.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return usage("layer values must be positive integers");
    }
    let texts = flagged_queries(&loaded.dataset, args.split, 0..args.queries)?;
    let queries = texts
        .into_iter()
        .map(|t| make_query(&loaded.dataset, t, None))
        .collect::<Result<Vec<_>>>()?;
    let mut flags = args.attack.clone();
    let mut configs = Vec::with_capacity(args.values.len());
    for &v in &args.values {
        match args.param {
            SweepParam::Gamma => flags.gamma = Some(v),
            SweepParam::Layer => flags.layer = Some(v as usize),
        }
        configs.push(attack_config(&flags, &loaded.config)?);
    }
    let pname = match args.param {
        SweepParam::Gamma => "gamma",
        SweepParam::Layer => "layer",
    };
    let resolved = json!({
        "param": pname,
        "values": args.values,
        "attacks": configs,
        "queries": queries.iter().map(|q| &q.text).collect::<Vec<_>>(),
        "checkpoint_sha256": loaded.checkpoint_sha256,
        "precision": loaded.precision.name(),
    });
    let mut manifest = RunManifest::new(
        "sweep",
        resolved,
        loaded.precision.name(),
        args.attack.seed,
        started,
    );
    create_dir(&args.out)?;
    let mut table = csv::Writer::from_path(args.out.join("sweep.csv"))?;
    table.write_record([pname, "mean_mr", "mean_best_loss"])?;
    for (&v, cfg) in args.values.iter().zip(&configs) {
        let label = fmt_value(args.param, v);
        let (mut matched, mut loss) = (0usize, 0.0);
        for (i, q) in queries.iter().enumerate() {
            let mut cfg = cfg.clone();
            cfg.seed = args.attack.seed + i as u64;
            let result = attack_with(&loaded, q, &cfg)?;
            let dir = args
                .out
                .join(format!("{pname}={label}"))
                .join(format!("q{i}"));
            for name in write_attack_run(&dir, &result, &cfg.hash(), &q.text, &q.target)? {
                manifest.artifacts.push(rel(&args.out, &dir.join(name)));
            }
            matched += result.matched as usize;
            loss += result.best_loss;
        }
        let n = queries.len() as f64;
        eprintln!(
            "{pname}={label}: MR {:.3}, mean best loss {:.4}",
            matched as f64 / n,
            loss / n
        );
        table.write_record([
            label,
            (matched as f64 / n).to_string(),
            (loss / n).to_string(),
        ])?;
    }
    table.flush()?;
    manifest.artifacts.push("sweep.csv".into());
    manifest.write(&args.out)
}

/// The 2-layer random model used when no checkpoint is given.
fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 32,
        max_seq_len: 32,
        seed,
    }
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.trials == 0 || args.entries == 0 {
        return usage("--trials and --entries must be at least 1");
    }
    if !(0.0..=1.0).contains(&args.gamma) {
        return usage(format!("gamma {} outside [0, 1]", args.gamma));
    }
    let (model, lens): (Model<f64>, [usize; 5]) = match &args.model {
        Some(path) => (
            load_checkpoint(path)?.cast(),
            [3, 6, DEFAULT_SUFFIX_LEN, 3, 8],
        ),
        None => (Model::init(tiny_config(args.seed))?, [1, 3, 5, 2, 4]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let checks = run_gradcheck(
        &model,
        args.trials,
        lens,
        args.entries,
        args.gamma,
        &mut rng,
    )?;
    for c in &checks {
        println!(
            "{:<6} entries {:>5}  max rel error {:.3e}  {}",
            c.mode.to_string(),
            c.entries,
            c.max_rel_error,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    let zero = zero_guide_check(&model, lens, &mut rng)?;
    println!(
        "lila zero-guide objective {zero:.3e} and gradient all zero  {}",
        if zero == 0.0 { "PASS" } else { "FAIL" }
    );
    let passed = checks.iter().all(|c| c.passed()) && zero == 0.0;
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({
                "tolerance": GRADCHECK_TOL,
                "checks": checks,
                "lila_zero_guide_objective": zero,
                "passed": passed,
            }),
        )?;
    }
    if !passed {
        return Err(anyhow!("gradient check failed"));
    }
    Ok(())
}

/// LILA at the reference itself: the guide is zero, so both the objective
/// and its gradient must vanish. Returns the objective, or NaN when any
/// gradient entry is non-zero.
fn zero_guide_check(model: &Model<f64>, lens: [usize; 5], rng: &mut ChaCha8Rng) -> Result<f64> {
    let vocab = model.config().vocab_size;
    let layout = suffixlab_core::gradcheck::random_layout(vocab, lens, rng)?;
    let layer = model.config().mid_layer();
    let n = layout.last_prompt_position();
    let (cache, _) = model.forward_cached(&layout)?;
    let guide = compute_guide(&cache, cache.h(layer, n), layer, n)?;
    let surgery = SurgeryConfig::new(SurgeryMode::Lila, model.config().n_layers);
    let grad = one_hot_gradient(model, &layout, &surgery, Some(&guide))?;
    if grad.grad.data().iter().any(|g| Scalar::to_f64(*g) != 0.0) {
        return Ok(f64::NAN);
    }
    Ok(lila_objective(&cache, &guide).abs())
}
