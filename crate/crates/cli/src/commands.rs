use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cogshift::corpus::{self, CommonsenseParameter, Corpus, MemeRecord};
use cogshift::csv_trainer::{self, load_csv, save_csv};
use cogshift::evaluation::{group_by_parameter, probe_cooccurrence_correlation, probe_within_between, EvaluationReport};
use cogshift::inference::{
    ablation_request, AblationConfig, AblationMode, CommonsenseMode, Conditioning, InferenceContext, InferenceRequest,
};
use cogshift::model::pretrain::pretrain;
use cogshift::model::{Model, ShiftVectorSet};
use cogshift::retrieval::{
    build_icl_sets, read_icl_dataset, write_icl_dataset, CandidatePool, EmbeddingIndex, InContextSet, RetrievalConfig,
    Retriever, Strategy, K_GRID,
};
use cogshift::tagger::{micro_f1, predict_parameters, train_tagger, TaggerModel};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::{
    BenchArgs, Cli, Command, EvaluateArgs, IclBuildArgs, IndexArgs, InferArgs, InferMode, IngestArgs, LmTrainArgs,
    ProbeArgs, RetrievalArgs, SplitArg, SynthArgs, TagArgs, TagTrainArgs, TrainCsvArgs, UsageError,
};

/// Demonstration counts timed by `bench`.
pub const BENCH_K: [usize; 5] = [0, 1, 2, 4, 8];

pub fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match &cli.command {
        Command::Synth(a) => synth(&config, a),
        Command::Ingest(a) => ingest(&config, a),
        Command::TagTrain(a) => tag_train(&config, a),
        Command::Tag(a) => tag(&config, a),
        Command::Index(a) => index(&config, a),
        Command::IclBuild(a) => icl_build(&config, a),
        Command::LmTrain(a) => lm_train(&config, a),
        Command::TrainCsv(a) => train_csv(&config, a),
        Command::Infer(a) => infer(&config, a),
        Command::Evaluate(a) => evaluate(&config, a),
        Command::Probe(a) => probe(&config, a),
        Command::Bench(a) => bench(&config, a),
    }
}

// ---------------------------------------------------------------------------
// Artifact helpers
// ---------------------------------------------------------------------------

/// The flag value, else the config path, else a usage error naming both.
fn path_arg(flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| UsageError::Argument(format!("missing --{name} (or paths.{name} in the config file)")).into())
}

/// An input path that must already exist.
fn input(path: PathBuf) -> Result<PathBuf> {
    if !path.exists() {
        return Err(UsageError::MissingArtifact {
            path,
            message: "no such file or directory".into(),
        }
        .into());
    }
    Ok(path)
}

fn input_arg(flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    input(path_arg(flag, configured, name)?)
}

/// Refuses to write over any of the command's inputs.
fn output(path: PathBuf, inputs: &[&Path]) -> Result<PathBuf> {
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    };
    if let Some(clash) = inputs.iter().find(|i| same(&path, i)) {
        return Err(UsageError::Argument(format!("output {} would overwrite an input", clash.display())).into());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    corpus::load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn read_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_csv(path: &Path) -> Result<ShiftVectorSet> {
    load_csv(path).with_context(|| format!("loading shift vectors {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

fn select(corpus: &Corpus, split: SplitArg) -> Vec<&MemeRecord> {
    match split {
        SplitArg::Train => corpus.train(),
        SplitArg::Test => corpus.test(),
        SplitArg::All => corpus.records().iter().collect(),
    }
}

fn non_empty<'a>(records: Vec<&'a MemeRecord>, what: &str) -> Result<Vec<&'a MemeRecord>> {
    if records.is_empty() {
        return Err(UsageError::Argument(format!("no {what} records in the corpus")).into());
    }
    Ok(records)
}

/// Training records that may serve as anchors or demonstrations.
fn harmful_train(corpus: &Corpus) -> Result<Vec<&MemeRecord>> {
    non_empty(corpus.train().into_iter().filter(|r| r.is_harmful()).collect(), "harmful training")
}

fn retrieval_config(config: &PipelineConfig, args: &RetrievalArgs) -> Result<RetrievalConfig> {
    let mut rc = config.retrieval;
    if let Some(s) = args.strategy {
        rc.strategy = s.into();
    }
    if let Some(k) = args.k {
        rc.k = k;
    }
    if let Some(c) = args.c {
        rc.c = c;
    }
    if !K_GRID.contains(&rc.k) && !args.any_k {
        return Err(UsageError::Argument(format!(
            "k={} is outside the grid {K_GRID:?}; pass --any-k to use it anyway",
            rc.k
        ))
        .into());
    }
    Ok(rc)
}

/// Retriever over the training split, reusing a saved index when given.
fn retriever<'a>(train: &[&'a MemeRecord], index: Option<&Path>, seed: u64) -> Result<Retriever<'a>> {
    let Some(dir) = index else {
        return Ok(Retriever::new(train.iter().copied(), seed)?);
    };
    let index = EmbeddingIndex::load(dir).with_context(|| format!("loading index {}", dir.display()))?;
    let expected: Vec<&str> = train.iter().map(|r| r.id.as_str()).collect();
    if index.ids().iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(UsageError::Argument(format!(
            "index {} was not built over this corpus's training split",
            dir.display()
        ))
        .into());
    }
    Ok(Retriever::with_index(CandidatePool::new(train.iter().copied()), index, seed))
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

fn synth(config: &PipelineConfig, a: &SynthArgs) -> Result<()> {
    let n = a.n.unwrap_or(config.synth.n);
    let d_img = a.d_img.unwrap_or(config.synth.d_img);
    let clusters = a.clusters.unwrap_or(config.synth.clusters);
    let seed = a.seed.unwrap_or(config.synth.seed);
    let synth = corpus::synth_generate(n, d_img, clusters, seed)?;
    let out = output(a.out.clone(), &[])?;
    corpus::write_corpus(&out, synth.corpus.records())?;
    summary(json!({ "status": "ok", "records": synth.corpus.len(), "d_img": d_img, "clusters": clusters, "out": out }));
    Ok(())
}

fn ingest(config: &PipelineConfig, a: &IngestArgs) -> Result<()> {
    let src = input(a.input.clone())?;
    let mut corpus = read_corpus(&src)?;
    if let Some(fraction) = a.train_fraction.or(config.split.train_fraction) {
        corpus = corpus::split_corpus(&corpus, fraction, a.seed.unwrap_or(config.split.seed))?;
    }
    let out = output(path_arg(&a.out, &config.paths.corpus, "out")?, &[&src])?;
    corpus::write_corpus(&out, corpus.records())?;
    if let Some(stats) = &a.stats {
        write_json(&output(stats.clone(), &[&src])?, corpus.stats())?;
    }
    summary(json!({
        "status": "ok",
        "records": corpus.len(),
        "train": corpus.train().len(),
        "test": corpus.test().len(),
        "d_img": corpus.d_img(),
        "out": out,
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// Tagging and retrieval
// ---------------------------------------------------------------------------

fn tag_train(config: &PipelineConfig, a: &TagTrainArgs) -> Result<()> {
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let corpus = read_corpus(&src)?;
    let mut tc = config.tagger.clone();
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.learning_rate = a.lr.unwrap_or(tc.learning_rate);
    tc.threshold = a.threshold.unwrap_or(tc.threshold);
    tc.d_text = a.d_text.unwrap_or(tc.d_text);
    tc.seed = a.seed.unwrap_or(tc.seed);
    let train = harmful_train(&corpus)?;
    let model = train_tagger(&train, &tc)?;
    let out = output(path_arg(&a.out, &config.paths.tagger, "out")?, &[&src])?;
    model.save(&out)?;
    let test: Vec<&MemeRecord> = corpus.test().into_iter().filter(|r| r.is_harmful()).collect();
    let test_f1 = if test.is_empty() { None } else { Some(micro_f1(&model, &test)?) };
    summary(json!({ "status": "ok", "train_micro_f1": micro_f1(&model, &train)?, "test_micro_f1": test_f1, "out": out }));
    Ok(())
}

#[derive(Serialize)]
struct TagRow<'a> {
    id: &'a str,
    scores: BTreeMap<CommonsenseParameter, f64>,
    selected: Vec<CommonsenseParameter>,
}

fn tag(config: &PipelineConfig, a: &TagArgs) -> Result<()> {
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let tagger_dir = input_arg(&a.tagger, &config.paths.tagger, "tagger")?;
    let corpus = read_corpus(&src)?;
    let tagger = TaggerModel::load(&tagger_dir).with_context(|| format!("loading tagger {}", tagger_dir.display()))?;
    let rows = select(&corpus, a.split)
        .into_iter()
        .map(|r| {
            let p = predict_parameters(&tagger, r)?;
            Ok(TagRow {
                id: &r.id,
                scores: CommonsenseParameter::ALL.into_iter().zip(p.scores).collect(),
                selected: p.selected.into_iter().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = output(a.out.clone(), &[&src, &tagger_dir])?;
    write_jsonl(&out, &rows)?;
    summary(json!({ "status": "ok", "records": rows.len(), "out": out }));
    Ok(())
}

fn index(config: &PipelineConfig, a: &IndexArgs) -> Result<()> {
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let corpus = read_corpus(&src)?;
    let train = non_empty(corpus.train(), "training")?;
    let index = EmbeddingIndex::build(train.iter().copied())?;
    let out = output(path_arg(&a.out, &config.paths.index, "out")?, &[&src])?;
    index.save(&out)?;
    summary(json!({ "status": "ok", "records": index.ids().len(), "out": out }));
    Ok(())
}

fn icl_build(config: &PipelineConfig, a: &IclBuildArgs) -> Result<()> {
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let index_dir = a.index.clone().or_else(|| config.paths.index.clone()).map(input).transpose()?;
    let corpus = read_corpus(&src)?;
    let rc = retrieval_config(config, &a.retrieval)?;
    let seed = a.seed.unwrap_or(0);
    let train = harmful_train(&corpus)?;
    let retriever = retriever(&train, index_dir.as_deref(), seed)?;
    let anchors = match a.anchors {
        SplitArg::Train => train.clone(),
        other => non_empty(select(&corpus, other).into_iter().filter(|r| r.is_harmful()).collect(), "anchor")?,
    };
    let sets = build_icl_sets(&retriever, &anchors, &rc, seed)?;
    let mut inputs = vec![src.as_path()];
    inputs.extend(index_dir.as_deref());
    let out = output(path_arg(&a.out, &config.paths.icl, "out")?, &inputs)?;
    write_icl_dataset(&out, &sets)?;
    summary(json!({ "status": "ok", "anchors": sets.len(), "strategy": rc.strategy, "k": rc.k, "out": out }));
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn lm_train(config: &PipelineConfig, a: &LmTrainArgs) -> Result<()> {
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let corpus = read_corpus(&src)?;
    let train = harmful_train(&corpus)?;
    let mut mc = config.model.clone();
    if mc.d_img != corpus.d_img() {
        log::info!("model d_img {} follows the corpus: {}", mc.d_img, corpus.d_img());
        mc.d_img = corpus.d_img();
    }
    let mut pc = config.pretrain.clone();
    pc.steps = a.steps.unwrap_or(pc.steps);
    pc.learning_rate = a.lr.unwrap_or(pc.learning_rate);
    if let Some(seed) = a.seed {
        mc.seed = seed;
        pc.seed = seed;
    }
    let (model, history) = pretrain(&train, &mc, &pc)?;
    let out = output(path_arg(&a.out, &config.paths.model, "out")?, &[&src])?;
    model.save(&out)?;
    if let Some(h) = &a.history {
        write_json(&output(h.clone(), &[&src])?, &history)?;
    }
    let tail = &history[history.len().saturating_sub(10)..];
    summary(json!({
        "status": "ok",
        "steps": history.len(),
        "vocab": model.vocab().len(),
        "final_loss": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        "out": out,
    }));
    Ok(())
}

fn train_csv(config: &PipelineConfig, a: &TrainCsvArgs) -> Result<()> {
    let model_dir = input_arg(&a.model, &config.paths.model, "model")?;
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let icl = a.icl.clone().or_else(|| config.paths.icl.clone()).map(input).transpose()?;
    let model = read_model(&model_dir)?;
    let corpus = read_corpus(&src)?;
    let mut tc = config.train.clone();
    tc.gamma = a.gamma.unwrap_or(tc.gamma);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch.unwrap_or(tc.batch_size);
    tc.learning_rate = a.lr.unwrap_or(tc.learning_rate);
    tc.seed = a.seed.unwrap_or(tc.seed);
    let sets: Vec<InContextSet> = match &icl {
        Some(path) => read_icl_dataset(path).with_context(|| format!("loading demonstrations {}", path.display()))?,
        None => {
            let rc = retrieval_config(config, &a.retrieval)?;
            let train = harmful_train(&corpus)?;
            let retriever = Retriever::new(train.iter().copied(), tc.seed)?;
            build_icl_sets(&retriever, &train, &rc, tc.seed)?
        }
    };
    if let Some(first) = sets.first() {
        tc.k = first.k;
    }
    let (shift, history) = csv_trainer::train(&model, &sets, &corpus, &tc)?;
    let mut inputs = vec![model_dir.as_path(), src.as_path()];
    inputs.extend(icl.as_deref());
    let out = output(path_arg(&a.out, &config.paths.csv, "out")?, &inputs)?;
    save_csv(&out, &shift, &tc)?;
    if let Some(h) = &a.history {
        write_json(&output(h.clone(), &inputs)?, &history)?;
    }
    let (first, last) = (history[0].total, history[history.len() - 1].total);
    summary(json!({
        "status": "ok",
        "anchors": sets.len(),
        "first_epoch_loss": first,
        "final_epoch_loss": last,
        "alpha": shift.coefficients,
        "out": out,
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    pub prompt_tokens: usize,
    /// Null unless timing was requested.
    pub wall_seconds: Option<f64>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}: malformed prediction", path.display(), i + 1))
        })
        .collect()
}

fn ablation_mode(mode: InferMode) -> Option<AblationMode> {
    match mode {
        InferMode::Full => Some(AblationMode::Full),
        InferMode::NoCs => Some(AblationMode::NoCommonsense),
        InferMode::RandomCs => Some(AblationMode::RandomCommonsense),
        InferMode::Alpha1 => Some(AblationMode::FixedAlpha1),
        InferMode::Kshot => None,
    }
}

fn infer(config: &PipelineConfig, a: &InferArgs) -> Result<()> {
    let model_dir = input_arg(&a.model, &config.paths.model, "model")?;
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let model = read_model(&model_dir)?;
    let corpus = read_corpus(&src)?;
    let records = non_empty(select(&corpus, a.split), "selected")?;
    let max_new_tokens = a.max_new_tokens.unwrap_or(config.inference.max_new_tokens);
    let seed = a.seed.unwrap_or(config.inference.seed);
    let mut inputs = vec![model_dir.clone(), src.clone()];

    let mut tagger = None;
    let mut requests: Vec<InferenceRequest<'_>> = Vec::with_capacity(records.len());
    match ablation_mode(a.mode) {
        Some(mode) => {
            let csv_dir = input_arg(&a.csv, &config.paths.csv, "csv")?;
            let csv = read_csv(&csv_dir)?;
            inputs.push(csv_dir);
            let tagger_dir = a.tagger.clone().or_else(|| config.paths.tagger.clone()).map(input).transpose()?;
            if let Some(dir) = tagger_dir {
                tagger = Some(TaggerModel::load(&dir).with_context(|| format!("loading tagger {}", dir.display()))?);
                inputs.push(dir);
            }
            let ac = AblationConfig {
                commonsense: if tagger.is_some() { CommonsenseMode::Tagger } else { CommonsenseMode::Provided },
                max_new_tokens,
                seed,
            };
            requests.extend(records.iter().enumerate().map(|(i, r)| ablation_request(&csv, r, i, mode, &ac)));
        }
        None => {
            let rc = retrieval_config(config, &a.retrieval)?;
            let index_dir = a.index.clone().or_else(|| config.paths.index.clone()).map(input).transpose()?;
            let train = harmful_train(&corpus)?;
            let retriever = retriever(&train, index_dir.as_deref(), seed)?;
            inputs.extend(index_dir);
            let sets = build_icl_sets(&retriever, &records, &rc, seed)?;
            requests.extend(records.iter().zip(sets).map(|(r, set)| InferenceRequest {
                record: r,
                commonsense_mode: CommonsenseMode::Provided,
                conditioning: Conditioning::Demonstrations(set),
                max_new_tokens,
                seed: 0,
            }));
        }
    }
    let ctx = InferenceContext {
        model: &model,
        tagger: tagger.as_ref(),
        corpus: Some(&corpus),
    };
    let rows = requests
        .iter()
        .map(|req| {
            let (text, profile) = ctx.generate_intervention(req)?;
            Ok(Prediction {
                id: req.record.id.clone(),
                prediction: text,
                prompt_tokens: profile.prompt_tokens,
                wall_seconds: a.timing.then_some(profile.wall_seconds),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let out = output(path_arg(&a.out, &config.paths.predictions, "out")?, &input_refs)?;
    write_jsonl(&out, &rows)?;
    let mean_tokens = rows.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / rows.len() as f64;
    summary(json!({ "status": "ok", "records": rows.len(), "mean_prompt_tokens": mean_tokens, "out": out }));
    Ok(())
}

fn report_for(predictions: &[Prediction], corpus: &Corpus, model: &Model) -> Result<EvaluationReport> {
    let triples = predictions
        .iter()
        .map(|p| {
            corpus
                .get(&p.id)
                .map(|r| (p.id.as_str(), p.prediction.as_str(), r.intervention.as_str()))
                .ok_or_else(|| UsageError::Argument(format!("prediction {} has no reference record", p.id)).into())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport::build(triples, model, model)?)
}

fn evaluate(config: &PipelineConfig, a: &EvaluateArgs) -> Result<()> {
    let pred = input_arg(&a.pred, &config.paths.predictions, "pred")?;
    let reference = input_arg(&a.reference, &config.paths.corpus, "ref")?;
    let model_dir = input_arg(&a.model, &config.paths.model, "model")?;
    let baseline = a.baseline.clone().map(input).transpose()?;
    let corpus = read_corpus(&reference)?;
    let model = read_model(&model_dir)?;
    let mut report = report_for(&read_predictions(&pred)?, &corpus, &model)?;
    if let Some(path) = &baseline {
        let base = report_for(&read_predictions(path)?, &corpus, &model)?;
        report.compare_with(&base)?;
    }
    let mut inputs = vec![pred.as_path(), reference.as_path(), model_dir.as_path()];
    inputs.extend(baseline.as_deref());
    let out = output(path_arg(&a.out, &config.paths.report, "out")?, &inputs)?;
    write_json(&out, &report)?;
    summary(json!({ "status": "ok", "n": report.n, "aggregates": report.aggregates, "significance": report.significance, "out": out }));
    Ok(())
}

// ---------------------------------------------------------------------------
// Probes and benchmarks
// ---------------------------------------------------------------------------

fn probe(config: &PipelineConfig, a: &ProbeArgs) -> Result<()> {
    let model_dir = input_arg(&a.model, &config.paths.model, "model")?;
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let csv_dir = a.csv.clone().or_else(|| config.paths.csv.clone()).map(input).transpose()?;
    let model = read_model(&model_dir)?;
    let corpus = read_corpus(&src)?;
    let csv = csv_dir.as_deref().map(read_csv).transpose()?;
    let layer = a.layer.or(config.probe.layer).unwrap_or(model.config().n_layers);
    let top_pairs = a.top_pairs.unwrap_or(config.probe.top_pairs);
    let seed = a.seed.unwrap_or(config.probe.seed);
    let skip_names = if a.skip.is_empty() { &config.probe.skip } else { &a.skip };
    let skip = skip_names
        .iter()
        .map(|s| s.parse::<CommonsenseParameter>())
        .collect::<cogshift::Result<Vec<_>>>()?;

    let records: Vec<&MemeRecord> = corpus.records().iter().collect();
    let groups = group_by_parameter(&records, &skip);
    let mut by_group = BTreeMap::new();
    for (name, members) in groups.iter().filter(|(_, m)| m.len() >= 2) {
        let wb = probe_within_between(&model, csv.as_ref(), &groups, name, layer, seed)?;
        by_group.insert(name.clone(), json!({ "size": members.len(), "within": wb.within, "between": wb.between }));
    }
    let co = probe_cooccurrence_correlation(&model, csv.as_ref(), &records, top_pairs, layer, seed)?;
    let closer = by_group
        .values()
        .filter(|v| v["within"].as_f64() < v["between"].as_f64())
        .count();
    let report = json!({ "layer": layer, "shifted": csv.is_some(), "groups": by_group, "cooccurrence": co });
    let mut inputs = vec![model_dir.as_path(), src.as_path()];
    inputs.extend(csv_dir.as_deref());
    let out = output(a.out.clone(), &inputs)?;
    write_json(&out, &report)?;
    summary(json!({ "status": "ok", "groups": by_group.len(), "within_below_between": closer, "rho": co.rho, "out": out }));
    Ok(())
}

/// One row of the runtime table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `kshot` or `csv`.
    pub mode: String,
    pub k: usize,
    pub prompt_tokens: f64,
    pub wall_seconds: f64,
    /// Wall-clock time relative to the shift-vector row, when present.
    pub relative: Option<f64>,
}

fn bench(config: &PipelineConfig, a: &BenchArgs) -> Result<()> {
    let model_dir = input_arg(&a.model, &config.paths.model, "model")?;
    let src = input_arg(&a.corpus, &config.paths.corpus, "corpus")?;
    let csv_dir = a.csv.clone().or_else(|| config.paths.csv.clone()).map(input).transpose()?;
    let index_dir = a.index.clone().or_else(|| config.paths.index.clone()).map(input).transpose()?;
    let model = read_model(&model_dir)?;
    let corpus = read_corpus(&src)?;
    let csv = csv_dir.as_deref().map(read_csv).transpose()?;
    let limit = a.limit.unwrap_or(config.bench.limit).max(1);
    let repeats = a.repeats.unwrap_or(config.bench.repeats).max(1);
    let max_new_tokens = a.max_new_tokens.unwrap_or(config.inference.max_new_tokens);
    let seed = a.seed.unwrap_or(config.inference.seed);
    let strategy: Strategy = a.strategy.map(Into::into).unwrap_or(config.retrieval.strategy);

    let mut records = corpus.test();
    if records.is_empty() {
        records = corpus.train();
    }
    records.truncate(limit);
    let train = harmful_train(&corpus)?;
    let retriever = retriever(&train, index_dir.as_deref(), seed)?;

    // (mode, k, conditioning per record)
    let mut configs: Vec<(&str, usize, Vec<Conditioning>)> = Vec::new();
    for k in BENCH_K {
        let conditioning = if k == 0 {
            vec![Conditioning::Plain; records.len()]
        } else {
            let rc = RetrievalConfig {
                strategy,
                k,
                c: config.retrieval.c,
            };
            build_icl_sets(&retriever, &records, &rc, seed)?
                .into_iter()
                .map(Conditioning::Demonstrations)
                .collect()
        };
        configs.push(("kshot", k, conditioning));
    }
    if let Some(shift) = &csv {
        configs.push(("csv", 0, vec![Conditioning::Shift(shift.clone()); records.len()]));
    }

    let ctx = InferenceContext {
        model: &model,
        tagger: None,
        corpus: Some(&corpus),
    };
    let mut best = vec![vec![f64::INFINITY; records.len()]; configs.len()];
    let mut tokens = vec![vec![0usize; records.len()]; configs.len()];
    // Interleaved so that slow drift in machine load affects every row alike.
    for _ in 0..repeats {
        for (ri, record) in records.iter().enumerate() {
            for (ci, (_, _, conditioning)) in configs.iter().enumerate() {
                let request = InferenceRequest {
                    record,
                    commonsense_mode: CommonsenseMode::Provided,
                    conditioning: conditioning[ri].clone(),
                    max_new_tokens,
                    seed: 0,
                };
                let (_, profile) = ctx.generate_intervention(&request)?;
                best[ci][ri] = best[ci][ri].min(profile.wall_seconds);
                tokens[ci][ri] = profile.prompt_tokens;
            }
        }
    }
    let n = records.len() as f64;
    let mut rows: Vec<BenchRow> = configs
        .iter()
        .enumerate()
        .map(|(ci, (mode, k, _))| BenchRow {
            mode: mode.to_string(),
            k: *k,
            prompt_tokens: tokens[ci].iter().sum::<usize>() as f64 / n,
            wall_seconds: best[ci].iter().sum::<f64>() / n,
            relative: None,
        })
        .collect();
    if let Some(reference) = rows.iter().find(|r| r.mode == "csv").map(|r| r.wall_seconds) {
        rows.iter_mut().for_each(|r| r.relative = Some(r.wall_seconds / reference));
    }

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "{:<6} {:>3} {:>14} {:>14} {:>9}", "mode", "k", "prompt_tokens", "wall_seconds", "vs_csv")?;
    for r in &rows {
        let rel = r.relative.map_or_else(|| "-".to_string(), |v| format!("{v:.2}x"));
        writeln!(w, "{:<6} {:>3} {:>14.1} {:>14.6} {:>9}", r.mode, r.k, r.prompt_tokens, r.wall_seconds, rel)?;
    }
    if let Some(path) = &a.out {
        let mut inputs = vec![model_dir.as_path(), src.as_path()];
        inputs.extend(csv_dir.as_deref());
        inputs.extend(index_dir.as_deref());
        write_json(&output(path.clone(), &inputs)?, &rows)?;
    }
    Ok(())
}
