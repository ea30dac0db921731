//! Acceptance run: one pass/fail line per criterion, nonzero exit if any fails.
//!
//! Criteria 4-6 and 9-11 run through the `cogshift` binary on a synthetic
//! corpus and read its artifacts back with the library.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use cogshift::corpus::{load_corpus, synth_generate, CommonsenseParameter, Corpus, MemeRecord, ParameterSet, Split};
use cogshift::csv_trainer::{
    init_csv, intervention_loss, kl_loss, load_csv, teacher_match_rate, total_loss, DistillExample, LossBreakdown,
    MatchProtocol, StudentPrompt,
};
use cogshift::evaluation::{bleu4, mann_whitney_u, readability, rouge_l, spearman_rho, EvaluationReport};
use cogshift::model::pretrain::build_vocab;
use cogshift::model::tokenizer::Vocab;
use cogshift::model::{Demo, Model, ModelConfig, NextTokenDistribution, ShiftVectorSet};
use cogshift::retrieval::{
    anchor_seed, build_icl_dataset, read_icl_dataset, retrieve_combined, retrieve_commonsense, retrieve_image,
    CandidatePool, EmbeddingIndex, LookupSet, RetrievalConfig, Source, Strategy, C_GRID, K_GRID,
};
use cogshift_cli::BenchRow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_cogshift");
/// Seed of the synthetic corpus and its split; every other stage uses seed 0.
const DATA_SEED: &str = "1";
const MAX_NEW_TOKENS: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

// ---------------------------------------------------------------------------
// CLI pipeline
// ---------------------------------------------------------------------------

fn cli(dir: &Path, args: &[&str]) -> Result<Duration> {
    let start = Instant::now();
    let out = Command::new(BIN).current_dir(dir).args(args).output()?;
    ensure!(
        out.status.success(),
        "cogshift {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(start.elapsed())
}

/// Artifacts compared byte for byte between two runs.
const DETERMINISTIC: [&str; 24] = [
    "raw.jsonl",
    "corpus.jsonl",
    "stats.json",
    "tagger/manifest.json",
    "tagger/weights.f32",
    "tags.jsonl",
    "index/manifest.json",
    "index/vectors.f32",
    "icl.jsonl",
    "held.jsonl",
    "model/manifest.json",
    "lm_history.json",
    "csv/manifest.json",
    "csv/csv.f32",
    "csv/alpha.f32",
    "csv_history.json",
    "pred_full.jsonl",
    "pred_no-cs.jsonl",
    "pred_random-cs.jsonl",
    "pred_alpha1.jsonl",
    "pred_kshot.jsonl",
    "report_full.json",
    "report_no-cs.json",
    "probe.json",
];

struct Pipeline {
    dir: PathBuf,
    distill_time: Duration,
}

fn run_pipeline(dir: &Path) -> Result<Pipeline> {
    fs::create_dir_all(dir)?;
    let c = |args: &[&str]| cli(dir, args);
    c(&["synth", "--n", "50", "--d-img", "16", "--clusters", "5", "--seed", DATA_SEED, "--out", "raw.jsonl"])?;
    c(&["ingest", "--input", "raw.jsonl", "--train-fraction", "0.8", "--seed", DATA_SEED, "--out", "corpus.jsonl", "--stats", "stats.json"])?;
    c(&["tag-train", "--corpus", "corpus.jsonl", "--out", "tagger", "--seed", "0"])?;
    c(&["tag", "--corpus", "corpus.jsonl", "--tagger", "tagger", "--out", "tags.jsonl"])?;
    c(&["index", "--corpus", "corpus.jsonl", "--out", "index"])?;
    let retrieval = ["--strategy", "image", "--k", "4", "--seed", "0"];
    c(&[&["icl-build", "--corpus", "corpus.jsonl", "--index", "index", "--out", "icl.jsonl"][..], &retrieval].concat())?;
    c(&[&["icl-build", "--corpus", "corpus.jsonl", "--index", "index", "--anchors", "test", "--out", "held.jsonl"][..], &retrieval].concat())?;
    let pretrain_time = c(&["lm-train", "--corpus", "corpus.jsonl", "--out", "model", "--seed", "0", "--history", "lm_history.json"])?;
    let csv_time = c(&[
        "train-csv", "--model", "model", "--corpus", "corpus.jsonl", "--icl", "icl.jsonl", "--gamma", "0.5", "--epochs", "10",
        "--batch", "2", "--seed", "0", "--out", "csv", "--history", "csv_history.json",
    ])?;
    for mode in ["full", "no-cs", "random-cs", "alpha1"] {
        let pred = format!("pred_{mode}.jsonl");
        c(&["infer", "--model", "model", "--corpus", "corpus.jsonl", "--csv", "csv", "--tagger", "tagger", "--mode", mode, "--seed", "0", "--out", &pred])?;
    }
    c(&["infer", "--model", "model", "--corpus", "corpus.jsonl", "--index", "index", "--mode", "kshot", "--k", "4", "--out", "pred_kshot.jsonl"])?;
    for mode in ["full", "no-cs", "random-cs", "alpha1", "kshot"] {
        let (pred, report) = (format!("pred_{mode}.jsonl"), format!("report_{mode}.json"));
        c(&["evaluate", "--pred", &pred, "--ref", "corpus.jsonl", "--model", "model", "--out", &report])?;
    }
    c(&["evaluate", "--pred", "pred_full.jsonl", "--ref", "corpus.jsonl", "--model", "model", "--baseline", "pred_kshot.jsonl", "--out", "report_full_vs_kshot.json"])?;
    c(&["probe", "--model", "model", "--corpus", "corpus.jsonl", "--csv", "csv", "--skip", "humor_appropriateness", "--seed", "0", "--out", "probe.json"])?;
    Ok(Pipeline {
        dir: dir.to_path_buf(),
        distill_time: pretrain_time + csv_time,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path).with_context(|| path.display().to_string())?)?)
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn random_record(rng: &mut ChaCha8Rng, id: usize, d_img: usize) -> MemeRecord {
    let commonsense: ParameterSet = (0..rng.random_range(1..=3))
        .map(|_| CommonsenseParameter::from_index(rng.random_range(0..15)).unwrap())
        .collect();
    MemeRecord {
        id: format!("p{id}"),
        image_features: (0..d_img).map(|_| rng.random_range(-2.0..2.0)).collect(),
        overlay_text: None,
        intervention: cogshift::corpus::template_intervention(&commonsense),
        commonsense,
        split: Split::Train,
    }
}

fn max_abs_diff(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let corpus = synth_generate(50, 16, 5, 3)?.corpus;
    let model = Model::new(ModelConfig::default(), build_vocab(&corpus.train()))?;
    let (layers, d) = (model.config().n_layers, model.config().d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let anchor = random_record(&mut rng, i, 16);
        let pool: Vec<MemeRecord> = (0..rng.random_range(0..=3)).map(|j| random_record(&mut rng, 1000 + j, 16)).collect();
        let demos: Vec<Demo> = pool.iter().map(Demo::from).collect();
        let with_params = rng.random_bool(0.5);
        let enc = model.encode_prompt(&anchor, with_params.then_some(&anchor.commonsense), &demos, None)?;
        let base = model.logits(&enc, None)?;
        let alphas: Vec<f64> = (0..layers).map(|_| rng.random_range(-3.0..3.0)).collect();
        let vectors: Vec<Vec<f64>> = (0..layers).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let zero_csv = ShiftVectorSet::new(vec![vec![0.0; d]; layers], alphas)?;
        let zero_alpha = ShiftVectorSet::new(vectors, vec![0.0; layers])?;
        for shift in [zero_csv, zero_alpha] {
            worst = worst.max(max_abs_diff(&model.logits(&enc, Some(&shift))?, &base));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("max |shifted - base| = {worst:.1e} over 100 prompts x 2 shifts in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Result<Outcome> {
    let start = Instant::now();
    let texts = [
        "this meme is rude so do not share it",
        "do not share this rude meme",
        "this meme is not rude",
        "so rude do not share",
    ];
    let params = [
        CommonsenseParameter::Vulgarity,
        CommonsenseParameter::Misogyny,
        CommonsenseParameter::Violence,
        CommonsenseParameter::HateSpeech,
    ];
    let records: Vec<MemeRecord> = (0..4)
        .map(|i| MemeRecord {
            id: format!("r{i}"),
            image_features: (0..4).map(|j| ((i * 5 + j * 3) % 7) as f64 / 7.0 - 0.4).collect(),
            overlay_text: None,
            commonsense: ParameterSet::from([params[i], CommonsenseParameter::HumorAppropriateness]),
            intervention: texts[i].to_string(),
            split: Split::Train,
        })
        .collect();
    let corpus = Corpus::new(records)?;
    let vocab = Vocab::build(texts);
    ensure!(vocab.len() == 32, "fixture vocabulary has {} entries", vocab.len());
    let config = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq: 96,
        d_img: 4,
        img_prefix_len: 2,
        seed: 11,
    };
    let model = Model::new(config, vocab)?;
    let sets = build_icl_dataset(&corpus.train(), &RetrievalConfig { strategy: Strategy::Image, k: 2, c: 1 }, 0)?;
    let mut shift = init_csv(model.config(), 4);
    for (l, v) in shift.vectors.iter_mut().enumerate() {
        for (i, x) in v.iter_mut().enumerate() {
            *x += 0.15 * (((l + 2 * i) % 5) as f64 - 2.0);
        }
    }
    shift.coefficients = vec![0.8, 1.3];
    let eps = 1e-3;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for set in &sets {
        let ex = DistillExample::new(&model, set, &corpus, StudentPrompt::Both)?;
        let (_, grad) = ex.loss_and_gradient(&model, &shift, 0.5)?;
        let loss = |s: &ShiftVectorSet| ex.loss(&model, s, 0.5).map(|b| b.total);
        for l in 0..2 {
            for idx in (0..16).map(Some).chain([None]) {
                let bump = |delta: f64| {
                    let mut s = shift.clone();
                    match idx {
                        Some(i) => s.vectors[l][i] += delta,
                        None => s.coefficients[l] += delta,
                    }
                    s
                };
                let numeric = (loss(&bump(eps))? - loss(&bump(-eps))?) / (2.0 * eps);
                let analytic = idx.map_or(grad.coefficients[l], |i| grad.vectors[l][i]);
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-3 && elapsed < Duration::from_secs(60),
        format!("worst relative error {worst:.1e} over {checked} entries in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = |rng: &mut ChaCha8Rng, v: usize| {
        let w: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        NextTokenDistribution {
            probabilities: w.iter().map(|x| x / s).collect(),
        }
    };
    let mut worst_oracle: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for _ in 0..200 {
        let (t, v) = (rng.random_range(1..6), rng.random_range(2..40));
        let p: Vec<_> = (0..t).map(|_| dist(&mut rng, v)).collect();
        let q: Vec<_> = (0..t).map(|_| dist(&mut rng, v)).collect();
        let brute = p
            .iter()
            .zip(&q)
            .map(|(a, b)| {
                a.probabilities
                    .iter()
                    .zip(&b.probabilities)
                    .map(|(x, y)| x * (x.ln() - y.ln()))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / t as f64;
        let kl = kl_loss(&p, &q)?;
        worst_oracle = worst_oracle.max((kl - brute).abs());
        worst_self = worst_self.max(kl_loss(&p, &p)?.abs());
        min_kl = min_kl.min(kl);
    }
    let uniform = vec![NextTokenDistribution { probabilities: vec![1.0 / 64.0; 64] }; 7];
    let ivt = intervention_loss(&uniform, &[0, 5, 63, 12, 12, 40, 1])?;
    let ivt_err = (ivt - 64f64.ln()).abs();
    let mut total_exact = true;
    for _ in 0..200 {
        let (od, iv) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
        let b: LossBreakdown = total_loss(od, iv, 0.5);
        total_exact &= b.total == od + 0.5 * iv;
    }
    outcome(
        worst_oracle <= 1e-8 && worst_self == 0.0 && min_kl >= 0.0 && ivt_err <= 1e-9 && total_exact,
        format!(
            "|kl - brute| <= {worst_oracle:.1e}, KL(P,P) <= {worst_self:.1e}, min KL {min_kl:.2e}, |ivt - ln 64| = {ivt_err:.1e}, total exact: {total_exact}"
        ),
    )
}

fn pipeline_match_rates(run: &Pipeline) -> Result<(f64, f64, f64)> {
    let dir = &run.dir;
    let corpus = load_corpus(&dir.join("corpus.jsonl"))?;
    let model = Model::load(&dir.join("model"))?;
    let shift = load_csv(&dir.join("csv"))?;
    let held = read_icl_dataset(&dir.join("held.jsonl"))?;
    let rate = |s: &ShiftVectorSet| {
        teacher_match_rate(&model, Some(s), &held, &corpus, MAX_NEW_TOKENS, MatchProtocol::FreeRunning).map(|m| m.rate)
    };
    Ok((
        rate(&shift)?,
        rate(&init_csv(model.config(), 0))?,
        rate(&shift.with_fixed_alpha(1.0))?,
    ))
}

fn criterion_4(run: &Pipeline, rates: (f64, f64, f64)) -> Result<Outcome> {
    let history: Vec<LossBreakdown> = read_json(&run.dir.join("csv_history.json"))?;
    ensure!(history.len() == 10, "expected 10 epochs, found {}", history.len());
    let (first, last) = (history[0].total, history[history.len() - 1].total);
    let (trained, untrained, _) = rates;
    let a = last <= 0.5 * first;
    let b = trained >= 0.8;
    let c = trained - untrained >= 0.2;
    let time_ok = run.distill_time < Duration::from_secs(600);
    outcome(
        a && b && c && time_ok,
        format!(
            "(a) loss {first:.4} -> {last:.4} ({:.2}x) {}; (b) match {trained:.3} {}; (c) untrained {untrained:.3} {}; {:.1}s",
            last / first,
            pass_word(a),
            pass_word(b),
            pass_word(c),
            run.distill_time.as_secs_f64()
        ),
    )
}

fn criterion_5(rates: (f64, f64, f64)) -> Result<Outcome> {
    let (trained, _, fixed) = rates;
    outcome(
        fixed <= trained + 0.02,
        format!("fixed alpha=1 match {fixed:.3}, trained alpha match {trained:.3}"),
    )
}

fn criterion_6(run: &Pipeline) -> Result<Outcome> {
    let sem = |mode: &str| -> Result<f64> {
        let report: EvaluationReport = read_json(&run.dir.join(format!("report_{mode}.json")))?;
        Ok(report.aggregates.semantic_similarity)
    };
    let (full, none, random) = (sem("full")?, sem("no-cs")?, sem("random-cs")?);
    outcome(
        full >= none && none >= random - 0.02,
        format!("semantic similarity full {full:.4} >= no-cs {none:.4} >= random-cs {random:.4} (2-point tolerance)"),
    )
}

fn retrieval_records(n: usize, d: usize, seed: u64) -> Vec<MemeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut r = random_record(&mut rng, i, d);
            r.id = format!("r{i:05}");
            r
        })
        .collect()
}

fn criterion_7() -> Result<Outcome> {
    // Image: exhaustive cosine top-k on 1000 records.
    let records = retrieval_records(1000, 16, 11);
    let pool = CandidatePool::new(records.iter());
    let index = EmbeddingIndex::build(records.iter())?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut image_checks = 0;
    for anchor in records.iter().step_by(25) {
        let qn = norm(&anchor.image_features);
        let mut scored: Vec<(f64, &str)> = records
            .iter()
            .filter(|r| r.id != anchor.id)
            .map(|r| {
                let dot: f64 = r.image_features.iter().zip(&anchor.image_features).map(|(a, b)| a * b).sum();
                (dot / (qn * norm(&r.image_features)), r.id.as_str())
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        for k in K_GRID {
            let expected: BTreeSet<&str> = scored.iter().take(k).map(|(_, id)| *id).collect();
            let set = retrieve_image(&index, &pool, anchor, k)?;
            let got: BTreeSet<&str> = set.ids().collect();
            if got != expected {
                return outcome(false, format!("image top-{k} differs for anchor {}", anchor.id));
            }
            image_checks += 1;
        }
    }
    // Commonsense coverage and combined composition.
    let records = retrieval_records(300, 8, 5);
    let pool = CandidatePool::new(records.iter());
    let index = EmbeddingIndex::build(records.iter())?;
    let lookup = LookupSet::build(records.iter(), 0);
    let mut coverage_checks = 0;
    let mut combined_checks = 0;
    for (i, anchor) in records.iter().enumerate().take(100) {
        for k in K_GRID.into_iter().filter(|&k| k >= anchor.commonsense.len()) {
            let Ok(set) = retrieve_commonsense(&lookup, &pool, anchor, k, anchor_seed(3, i)) else {
                continue;
            };
            for p in &anchor.commonsense {
                let available = lookup.list(*p).iter().any(|id| id != &anchor.id);
                if available && !set.demonstrations.iter().any(|d| d.commonsense.contains(p)) {
                    return outcome(false, format!("anchor {} k={k} misses {p}", anchor.id));
                }
            }
            coverage_checks += 1;
        }
        for c in C_GRID {
            for k in K_GRID.into_iter().filter(|&k| k > c) {
                let set = retrieve_combined(&lookup, &index, &pool, anchor, k, c, anchor_seed(1, i))?;
                if set.count_from(Source::Commonsense) != c || set.demonstrations.len() != k {
                    return outcome(false, format!("anchor {} k={k} c={c}: wrong composition", anchor.id));
                }
                combined_checks += 1;
            }
        }
    }
    outcome(
        coverage_checks > 0,
        format!("{image_checks} exact image top-k sets, {coverage_checks} coverage checks, {combined_checks} combined compositions"),
    )
}

fn criterion_8() -> Result<Outcome> {
    let bleu = bleu4("a b c d e", "a b c d f");
    let bleu_exact = (0.5f64 * (2.0 / 3.0) * 0.75 * 0.8).powf(0.25);
    let rouge = rouge_l("a c d", "a b c d");
    let flesch = readability("The cat sat.")?;
    let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?;
    let mw = mann_whitney_u(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3])?;
    let checks = [
        ("BLEU", (bleu - bleu_exact).abs() <= 1e-6 && (bleu - 0.6687).abs() < 5e-5),
        ("ROUGE-L", (rouge - 6.0 / 7.0).abs() <= 1e-6 && (rouge - 0.8571).abs() < 5e-5),
        ("Flesch", (flesch - 119.19).abs() <= 1e-6),
        ("Spearman", (rho - 0.8).abs() <= 1e-6),
        ("Mann-Whitney", (mw.u - 9.0).abs() <= 1e-6 && (mw.p_two_sided - 0.1).abs() <= 1e-4),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        format!(
            "BLEU {bleu:.4}, ROUGE-L {rouge:.4}, Flesch {flesch:.2}, rho {rho:.2}, U {:.0} p {:.3}{}",
            mw.u,
            mw.p_two_sided,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn criterion_9(run: &Pipeline) -> Result<Outcome> {
    cli(&run.dir, &[
        "bench", "--model", "model", "--corpus", "corpus.jsonl", "--csv", "csv", "--index", "index", "--strategy", "image",
        "--limit", "10", "--repeats", "3", "--out", "bench.json",
    ])?;
    let rows: Vec<BenchRow> = read_json(&run.dir.join("bench.json"))?;
    let kshot: BTreeMap<usize, &BenchRow> = rows.iter().filter(|r| r.mode == "kshot").map(|r| (r.k, r)).collect();
    let Some(csv) = rows.iter().find(|r| r.mode == "csv") else {
        bail!("bench produced no shift-vector row");
    };
    let tokens = |k: usize| kshot.get(&k).map(|r| r.prompt_tokens).unwrap_or(f64::NAN);
    let tokens_ok = tokens(8) > tokens(4) && tokens(4) > tokens(0) && tokens(0) == csv.prompt_tokens;
    let walls: Vec<f64> = kshot.values().map(|r| r.wall_seconds).collect();
    let monotone = walls.windows(2).all(|w| w[0] < w[1]);
    let ratios: Vec<String> = kshot
        .iter()
        .map(|(k, r)| format!("k={k} {:.0} tok {:.1}x", r.prompt_tokens, r.wall_seconds / csv.wall_seconds))
        .collect();
    outcome(
        tokens_ok && monotone,
        format!("{}; csv {:.0} tok", ratios.join(", "), csv.prompt_tokens),
    )
}

fn criterion_10(run: &Pipeline) -> Result<Outcome> {
    let probe: serde_json::Value = read_json(&run.dir.join("probe.json"))?;
    let groups = probe["groups"].as_object().context("probe groups")?;
    let mut closer = 0;
    for g in groups.values() {
        if g["within"].as_f64() < g["between"].as_f64() {
            closer += 1;
        }
    }
    let rho = probe["cooccurrence"]["rho"].as_f64().context("probe rho")?;
    outcome(
        !groups.is_empty() && closer == groups.len() && (-1.0..=1.0).contains(&rho) && rho < 0.0,
        format!("within < between in {closer}/{} categories at layer {}; rho = {rho:.3}", groups.len(), probe["layer"]),
    )
}

fn criterion_11(first: &Pipeline, second: &Pipeline) -> Result<Outcome> {
    let mut differing = Vec::new();
    let mut compared = 0;
    let mut files: Vec<String> = DETERMINISTIC.iter().map(|s| s.to_string()).collect();
    for entry in fs::read_dir(first.dir.join("model"))? {
        files.push(format!("model/{}", entry?.file_name().to_string_lossy()));
    }
    for mode in ["random-cs", "alpha1", "kshot", "full_vs_kshot"] {
        files.push(format!("report_{mode}.json"));
    }
    files.sort();
    files.dedup();
    for f in &files {
        let (a, b) = (fs::read(first.dir.join(f))?, fs::read(second.dir.join(f))?);
        if a != b {
            differing.push(f.clone());
        }
        compared += 1;
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{compared} artifacts byte-identical across two runs")
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn report(results: &mut Vec<(usize, Outcome)>, n: usize, result: Result<Outcome>) {
    let o = result.unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!("error: {e:#}"),
    });
    println!("criterion {n:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push((n, o));
}

fn main() -> ExitCode {
    // Only the plain `cargo test` invocation runs the suite; listing or filtering does not.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let work = tempfile::tempdir().expect("temporary directory");
    let mut results = Vec::new();
    report(&mut results, 1, criterion_1());
    report(&mut results, 2, criterion_2());
    report(&mut results, 3, criterion_3());

    let first = run_pipeline(&work.path().join("run1"));
    let second = run_pipeline(&work.path().join("run2"));
    match (&first, &second) {
        (Ok(first), Ok(second)) => {
            let rates = pipeline_match_rates(first);
            let rates_or = |f: &dyn Fn((f64, f64, f64)) -> Result<Outcome>| match &rates {
                Ok(r) => f(*r),
                Err(e) => Err(anyhow::anyhow!("match rates: {e:#}")),
            };
            report(&mut results, 4, rates_or(&|r| criterion_4(first, r)));
            report(&mut results, 5, rates_or(&criterion_5));
            report(&mut results, 6, criterion_6(first));
            report(&mut results, 7, criterion_7());
            report(&mut results, 8, criterion_8());
            report(&mut results, 9, criterion_9(first));
            report(&mut results, 10, criterion_10(first));
            report(&mut results, 11, criterion_11(first, second));
        }
        _ => {
            let e = first.as_ref().err().or(second.as_ref().err()).map(|e| format!("{e:#}")).unwrap_or_default();
            for n in [4, 5, 6] {
                report(&mut results, n, Err(anyhow::anyhow!("pipeline failed: {e}")));
            }
            report(&mut results, 7, criterion_7());
            report(&mut results, 8, criterion_8());
            for n in [9, 10, 11] {
                report(&mut results, n, Err(anyhow::anyhow!("pipeline failed: {e}")));
            }
        }
    }
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
