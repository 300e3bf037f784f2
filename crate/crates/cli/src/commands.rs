use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use steerlab::attribution::{amplify_hook, scan_token, AmplifyMode, NeuronRef};
use steerlab::corpus::{load_problems, save_problems, split, synth_corpus, synth_question, TemplateSet};
use steerlab::evaluation::{
    detect_language, evaluate_probes, run_preference_benchmark, timing_bench, BenchSettings, LanguageLabel,
};
use steerlab::model::{
    forward_with, generate, generate_with, train_toy, GenerationSettings, HookSet, ModelConfig, ModelParams,
    NoIntervention, SiteKind, TrainOptions,
};
use steerlab::seed::derive_seed;
use steerlab::steering::{
    alpha_sweep, diff_vectors, kmeans, layer_norm_profile, refine, steer_generate, DiffSet, KMeansOptions,
    KMeansResult, ProbeTrainOptions, PromptPair, Reduction, RefineConfig, Selection, SteeringModel, Steerer,
    SweepSettings,
};
use steerlab::tokenizer::{decode, encode_prompt, token_by_name, Token};
use steerlab::trace::{diffs_from_traces, read_trace, record_pair_traces, write_trace, Style};

use crate::args::*;
use crate::manifest::{sha256_file, Manifest, RunContext};
use crate::pipeline;
use crate::{dispatch_with, CliError, CliResult, EXIT_OK};

pub(crate) fn execute(cli: Cli, argv: Vec<String>, seed_override: Option<u64>) -> CliResult<()> {
    let name = cli.command.name();
    if let Command::Replay(a) = &cli.command {
        return replay(a, &cli.out, cli.threads, seed_override);
    }
    let mut ctx = RunContext::new(cli.out.clone(), seed_override)?;
    let config = match &cli.command {
        Command::Synth(a) => run_json(a, synth(&mut ctx, a))?,
        Command::TrainToy(a) => run_json(a, train(&mut ctx, a))?,
        Command::Scan(a) => run_json(a, scan(&mut ctx, a))?,
        Command::Perturb(a) => run_json(a, perturb(&mut ctx, a))?,
        Command::ExtractDiffs(a) => run_json(a, extract(&mut ctx, a))?,
        Command::Cluster(a) => run_json(a, cluster(&mut ctx, a))?,
        Command::TrainProbes(a) => run_json(a, train_probes(&mut ctx, a))?,
        Command::Refine(a) => run_json(a, refine_cmd(&mut ctx, a))?,
        Command::Steer(a) => run_json(a, steer(&mut ctx, a))?,
        Command::SweepAlpha(a) => run_json(a, sweep(&mut ctx, a))?,
        Command::BenchPref(a) => run_json(a, bench_pref(&mut ctx, a))?,
        Command::EvalProbes(a) => run_json(a, eval_probes(&mut ctx, a))?,
        Command::BenchTime(a) => run_json(a, bench_time(&mut ctx, a))?,
        Command::TraceDiffs(a) => run_json(a, trace_diffs(&mut ctx, a))?,
        Command::Pipeline(a) => pipeline::run(&mut ctx, a, cli.threads)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    ctx.finish(name, argv, cli.threads, config)?;
    Ok(())
}

fn run_json<A: Serialize>(args: &A, outcome: CliResult<()>) -> CliResult<serde_json::Value> {
    outcome?;
    Ok(serde_json::to_value(args)?)
}

fn replay(a: &ReplayArgs, out: &Path, threads: Option<usize>, env_seed: Option<u64>) -> CliResult<()> {
    let m = Manifest::load(&a.manifest)?;
    for (path, digest) in &m.inputs {
        let p = Path::new(path);
        if !p.exists() {
            return Err(CliError::Usage(format!("manifest input missing: {path}")));
        }
        if &sha256_file(p)? != digest {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "manifest input {path} has changed since the recorded run"
            )));
        }
    }
    let mut argv = vec!["steerlab".to_owned()];
    argv.extend(m.argv.iter().cloned());
    argv.extend(["--out".to_owned(), out.display().to_string()]);
    if let Some(t) = threads.or(m.threads) {
        argv.extend(["--threads".to_owned(), t.to_string()]);
    }
    match dispatch_with(argv, env_seed.or(m.seed_override)) {
        EXIT_OK => Ok(()),
        code => Err(CliError::Runtime(anyhow::anyhow!("replayed command exited with {code}"))),
    }
}

fn usage<T, E: std::fmt::Display>(r: Result<T, E>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

fn parse<T: FromStr>(s: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    usage(s.parse::<T>())
}

fn parse_token(name: &str) -> CliResult<Token> {
    token_by_name(name).ok_or_else(|| CliError::Usage(format!("unknown token {name:?}")))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CliError::Runtime(anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

fn jsonl<T: Serialize>(items: &[T]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn load_model(ctx: &mut RunContext, path: &Path) -> CliResult<ModelParams> {
    ctx.input_file(path)?;
    Ok(ModelParams::load(path)?)
}

fn load_steering(ctx: &mut RunContext, path: &Path) -> CliResult<SteeringModel> {
    ctx.input_file(path)?;
    Ok(SteeringModel::load(path)?)
}

fn load_pairs(ctx: &mut RunContext, path: &Path) -> CliResult<Vec<PromptPair>> {
    ctx.input_file(path)?;
    let pairs: Vec<PromptPair> = read_jsonl(path)?;
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}

fn all_layers(requested: &[usize], model: &SteeringModel) -> Vec<usize> {
    if requested.is_empty() {
        (0..model.layers).collect()
    } else {
        requested.to_vec()
    }
}

fn synth(ctx: &mut RunContext, a: &SynthArgs) -> CliResult<()> {
    let seed = ctx.seed("seed", a.seed);
    let split_seed = ctx.seed("split_seed", a.split_seed);
    let corpus = synth_corpus(a.problems, seed)?;
    let (train, test) = split(&corpus.pairs, a.split_ratio, split_seed)?;
    save_problems(&ctx.path("problems.jsonl"), &corpus.problems)?;
    ctx.record("problems.jsonl")?;
    ctx.write("sequences.jsonl", &jsonl(&corpus.sequences)?)?;
    ctx.write("pairs.jsonl", &jsonl(&corpus.pairs)?)?;
    ctx.write("train_pairs.jsonl", &jsonl(&train)?)?;
    ctx.write("test_pairs.jsonl", &jsonl(&test)?)?;
    println!(
        "synth: {} problems, {} sequences, {} train / {} test pairs",
        corpus.problems.len(),
        corpus.sequences.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn train(ctx: &mut RunContext, a: &TrainArgs) -> CliResult<()> {
    ctx.input_file(&a.sequences)?;
    let seed = ctx.seed("seed", a.seed);
    let model_seed = ctx.seed("model_seed", a.model_seed);
    let sequences: Vec<Vec<Token>> = read_jsonl(&a.sequences)?;
    let config = ModelConfig::toy(model_seed);
    let opts = TrainOptions {
        steps: a.steps,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        warmup_steps: a.warmup,
        clip_norm: a.clip,
        seed,
    };
    let report = train_toy(&config, &sequences, &opts)?;
    ctx.write("model.stlb", &report.params.to_bytes())?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    ctx.write("train_loss.csv", csv.as_bytes())?;
    if let Some(l) = report.final_loss() {
        println!("train-toy: {} steps, final loss {l:.4}", a.steps);
    }
    Ok(())
}

fn scan(ctx: &mut RunContext, a: &ScanArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    let token = parse_token(&a.token)?;
    let map = scan_token(&params, token, a.k)?;
    let mut buf = Vec::new();
    map.write_csv(&mut buf)?;
    ctx.write("activation_map.csv", &buf)?;
    for (rank, e) in map.entries.iter().take(5).enumerate() {
        println!(
            "#{} L{} N{} score {:.6}",
            rank + 1,
            e.neuron.layer,
            e.neuron.neuron,
            e.score
        );
    }
    Ok(())
}

fn perturb(ctx: &mut RunContext, a: &PerturbArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    ctx.input_file(&a.problems)?;
    let problems = load_problems(&a.problems)?;
    let mode: AmplifyMode = parse(&a.mode)?;
    let neuron = NeuronRef {
        layer: a.layer,
        neuron: a.neuron,
    };
    usage(neuron.validate(&params.config))?;
    let settings = BenchSettings {
        reps: a.reps,
        temperature: a.temperature,
        seed: ctx.seed("seed", a.seed),
    };
    let mut csv = String::from("amount");
    for l in LanguageLabel::ALL {
        csv.push_str(&format!(",{}", l.name()));
    }
    csv.push('\n');
    let mut reports = Vec::new();
    for &amount in &a.amounts {
        let hooks = amplify_hook(&params.config, neuron, mode, amount)?;
        let report = run_preference_benchmark(
            |p, req| {
                let prompt = encode_prompt(&synth_question(&p.description));
                let gs = GenerationSettings {
                    temperature: req.temperature,
                    max_new_tokens: a.max_new_tokens,
                    seed: req.seed,
                };
                Ok(decode(&generate(&params, &prompt, &gs, &hooks)?))
            },
            &problems,
            &settings,
        )?;
        csv.push_str(&amount.to_string());
        for l in LanguageLabel::ALL {
            csv.push_str(&format!(",{:.4}", report.aggregate[&l]));
        }
        csv.push('\n');
        println!("perturb: amount {amount}: cpp {:.1}%", report.aggregate[&LanguageLabel::Cpp]);
        reports.push(serde_json::json!({ "amount": amount, "report": report }));
    }
    ctx.write("perturb.csv", csv.as_bytes())?;
    ctx.write_json("perturb.json", &reports)?;
    Ok(())
}

fn extract(ctx: &mut RunContext, a: &ExtractArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    let pairs = load_pairs(ctx, &a.pairs)?;
    let site: SiteKind = parse(&a.site)?;
    let reduction: Reduction = parse(&a.reduction)?;
    let diffs = diff_vectors(&params, &pairs, site, reduction)?;
    write_diffs(ctx, &diffs)?;
    let mut buf = Vec::new();
    diffs.write_csv(&mut buf)?;
    ctx.write("diffs.csv", &buf)?;
    let mut csv = String::from("layer,mean_norm\n");
    for (l, n) in layer_norm_profile(&diffs)?.iter().enumerate() {
        csv.push_str(&format!("{l},{n}\n"));
    }
    ctx.write("norm_profile.csv", csv.as_bytes())?;
    println!("extract-diffs: {} pairs at {} ({})", diffs.len(), site.name(), reduction.name());
    Ok(())
}

fn write_diffs(ctx: &mut RunContext, diffs: &DiffSet) -> CliResult<()> {
    let mut buf = Vec::new();
    diffs.write(&mut buf)?;
    ctx.write("diffs.stdf", &buf)?;
    Ok(())
}

fn cluster(ctx: &mut RunContext, a: &ClusterArgs) -> CliResult<()> {
    ctx.input_file(&a.diffs)?;
    let diffs = DiffSet::load(&a.diffs)?;
    let opts = KMeansOptions {
        max_iter: a.max_iter,
        seed: ctx.seed("seed", a.seed),
        ..KMeansOptions::default()
    };
    let km = kmeans(&diffs.all_flattened(), a.classes, &opts)?;
    let sizes: Vec<usize> = (0..a.classes)
        .map(|k| km.labels.iter().filter(|&&l| l == k).count())
        .collect();
    ctx.write_json("clusters.json", &km)?;
    println!(
        "cluster: sizes {sizes:?}, sse {:.6}, {} iterations",
        km.sse, km.iterations
    );
    Ok(())
}

fn train_probes(ctx: &mut RunContext, a: &ProbeArgs) -> CliResult<()> {
    ctx.inputs([a.diffs.as_path(), a.clusters.as_path()])?;
    let diffs = DiffSet::load(&a.diffs)?;
    let km: KMeansResult = serde_json::from_slice(&fs::read(&a.clusters)?)?;
    let opts = ProbeTrainOptions {
        learning_rate: a.lr,
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let model = SteeringModel::from_clusters(&diffs, &km.centroids, &km.labels, a.alpha, &opts)?;
    ctx.write("steering.strm", &model.to_bytes()?)?;
    println!("train-probes: C={} L={} D={}", model.classes, model.layers, model.dim);
    Ok(())
}

fn refine_cmd(ctx: &mut RunContext, a: &RefineArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    let model = load_steering(ctx, &a.steering)?;
    let pairs = load_pairs(ctx, &a.pairs)?;
    let cfg = RefineConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        alpha: a.alpha,
    };
    let report = refine(&params, &model, &pairs, &cfg)?;
    ctx.write("refined.strm", &report.model.to_bytes()?)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    ctx.write("refine_loss.csv", csv.as_bytes())?;
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        println!("refine: loss {first:.5} -> {last:.5}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SteeredSample {
    id: String,
    rep: usize,
    seed: u64,
    tokens: Vec<Token>,
    text: String,
    language: LanguageLabel,
}

fn steer(ctx: &mut RunContext, a: &SteerArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    let mut model = load_steering(ctx, &a.steering)?;
    let pairs = load_pairs(ctx, &a.pairs)?;
    let selection: Selection = parse(&a.selection)?;
    let seed = ctx.seed("seed", a.seed);
    if let Some(alpha) = a.alpha {
        model = model.with_alpha(alpha);
    }
    let layers = all_layers(&a.layers, &model);
    let n = a.limit.unwrap_or(pairs.len()).min(pairs.len());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|p| (0..a.reps).map(move |r| (p, r))).collect();
    let samples = cells
        .par_iter()
        .map(|&(p, r)| {
            let s = derive_seed(seed, p as u64, r as u64);
            let gs = GenerationSettings {
                temperature: a.temperature,
                max_new_tokens: a.max_new_tokens,
                seed: s,
            };
            let prompt = encode_prompt(&pairs[p].question);
            let tokens = steer_generate(&params, &prompt, &model, &gs, &layers, selection)?;
            let text = decode(&tokens);
            Ok(SteeredSample {
                id: pairs[p].id.clone(),
                rep: r,
                seed: s,
                language: detect_language(&text),
                tokens,
                text,
            })
        })
        .collect::<steerlab::Result<Vec<_>>>()?;
    ctx.write("steered.jsonl", &jsonl(&samples)?)?;
    let cpp = samples.iter().filter(|s| s.language == LanguageLabel::Cpp).count();
    println!("steer: {} samples, cpp {cpp}", samples.len());
    Ok(())
}

fn sweep(ctx: &mut RunContext, a: &SweepArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    let model = load_steering(ctx, &a.steering)?;
    let pairs = load_pairs(ctx, &a.pairs)?;
    let settings = SweepSettings {
        reps: a.reps,
        temperature: a.temperature,
        max_new_tokens: a.max_new_tokens,
        seed: ctx.seed("seed", a.seed),
        target: parse_token(&a.target)?,
        layers: all_layers(&a.layers, &model),
        selection: parse(&a.selection)?,
    };
    let prompts: Vec<Vec<Token>> = pairs.iter().map(|p| encode_prompt(&p.question)).collect();
    let rows = alpha_sweep(&params, &model, &prompts, &a.alphas, &settings)?;
    let best = best_alpha(&rows.iter().map(|r| (r.alpha, r.rate)).collect::<Vec<_>>());
    let mut csv = String::from("alpha,hits,samples,rate\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.alpha, r.hits, r.samples, r.rate));
        println!("alpha {:>6}: {:.3}", r.alpha, r.rate);
    }
    ctx.write("alpha_sweep.csv", csv.as_bytes())?;
    ctx.write_json("alpha_sweep.json", &serde_json::json!({ "rows": rows, "best_alpha": best }))?;
    println!("sweep-alpha: best alpha {best}");
    Ok(())
}

/// Highest rate; ties go to the smallest strength.
pub(crate) fn best_alpha(rows: &[(f64, f64)]) -> f64 {
    let mut best = rows[0];
    for &r in &rows[1..] {
        if r.1 > best.1 || (r.1 == best.1 && r.0 < best.0) {
            best = r;
        }
    }
    best.0
}

fn bench_pref(ctx: &mut RunContext, a: &BenchPrefArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    ctx.input_file(&a.problems)?;
    let problems = load_problems(&a.problems)?;
    let steering = match &a.steering {
        Some(p) => {
            let m = load_steering(ctx, p)?;
            Some(match a.alpha {
                Some(alpha) => m.with_alpha(alpha),
                None => m,
            })
        }
        None => None,
    };
    let selection: Selection = parse(&a.selection)?;
    let settings = BenchSettings {
        reps: a.reps,
        temperature: a.temperature,
        seed: ctx.seed("seed", a.seed),
    };
    let empty = HookSet::new();
    let report = run_preference_benchmark(
        |p, req| {
            let prompt = encode_prompt(&synth_question(&p.description));
            let gs = GenerationSettings {
                temperature: req.temperature,
                max_new_tokens: a.max_new_tokens,
                seed: req.seed,
            };
            let out = match &steering {
                Some(m) => {
                    let layers: Vec<usize> = (0..m.layers).collect();
                    steer_generate(&params, &prompt, m, &gs, &layers, selection)?
                }
                None => generate(&params, &prompt, &gs, &empty)?,
            };
            Ok(decode(&out))
        },
        &problems,
        &settings,
    )?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    ctx.write("bench_pref.csv", &buf)?;
    ctx.write_json("bench_pref.json", &report)?;
    println!(
        "bench-pref: {} samples ({} per problem), cpp {:.1}%, python {:.1}%",
        report.total_samples,
        settings.reps,
        report.aggregate[&LanguageLabel::Cpp],
        report.aggregate[&LanguageLabel::Python]
    );
    Ok(())
}

fn eval_probes(ctx: &mut RunContext, a: &EvalProbesArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    let standard = load_steering(ctx, &a.standard)?;
    let refined = load_steering(ctx, &a.refined)?;
    let mut test = load_pairs(ctx, &a.pairs)?;
    let templates = match (&a.cpp_templates, &a.python_templates) {
        (Some(c), Some(p)) => {
            ctx.inputs([c.as_path(), p.as_path()])?;
            TemplateSet::load(c, p)?
        }
        _ => match a.templates.as_str() {
            "toy" => TemplateSet::toy(),
            "bundled" => TemplateSet::bundled(),
            other => return Err(CliError::Usage(format!("unknown template set {other:?}"))),
        },
    };
    for p in &mut test {
        p.question = p.question.trim_end().to_owned();
    }
    let report = evaluate_probes(&params, &standard, &refined, &test, &templates)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    ctx.write("probe_eval.csv", &buf)?;
    ctx.write_json("probe_eval.json", &report)?;
    println!(
        "eval-probes: mean accuracy standard {:.4}, refined {:.4}",
        report.mean_standard_accuracy, report.mean_refined_accuracy
    );
    Ok(())
}

/// Incremental decoding over a fixed token stream: one forward pass per
/// generated position.
fn decode_stream(
    params: &ModelParams,
    stream: &[Token],
    prompt_len: usize,
    intervention: &mut dyn steerlab::model::Intervention<f32>,
) -> steerlab::Result<()> {
    for end in prompt_len..stream.len() {
        forward_with(params, &stream[..end], &[], intervention)?;
    }
    Ok(())
}

fn bench_time(ctx: &mut RunContext, a: &BenchTimeArgs) -> CliResult<()> {
    let params = load_model(ctx, &a.model)?;
    let model = load_steering(ctx, &a.steering)?;
    let selection: Selection = parse(&a.selection)?;
    let prompt = encode_prompt(&a.prompt);
    let gs = GenerationSettings {
        temperature: 0.0,
        max_new_tokens: a.max_new_tokens,
        seed: 0,
    };
    let mut stream = prompt.clone();
    stream.extend(generate_with(&params, &prompt, &gs, &mut NoIntervention)?);
    let layers: Vec<usize> = (0..model.layers).collect();
    let vanilla = timing_bench("vanilla", a.runs, a.warmup, || {
        decode_stream(&params, &stream, prompt.len(), &mut NoIntervention)
    })?;
    let steered = timing_bench("steered", a.runs, a.warmup, || {
        let mut s = Steerer::new(&model, &layers, selection)?;
        decode_stream(&params, &stream, prompt.len(), &mut s)
    })?;
    let mut csv = String::from("label,mean_seconds,std_seconds,runs,warmup\n");
    for r in [&vanilla, &steered] {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.mean_seconds, r.std_seconds, r.runs, r.warmup
        ));
        println!(
            "{:>8}: {:.3} ms ± {:.3} ms",
            r.label,
            r.mean_seconds * 1e3,
            r.std_seconds * 1e3
        );
    }
    ctx.write("timing.csv", csv.as_bytes())?;
    ctx.write_json("timing.json", &[&vanilla, &steered])?;
    Ok(())
}

fn trace_diffs(ctx: &mut RunContext, a: &TraceDiffsArgs) -> CliResult<()> {
    let site: SiteKind = parse(&a.site)?;
    let reduction: Reduction = parse(&a.reduction)?;
    let dir: PathBuf = match (&a.model, &a.pairs) {
        (Some(model), Some(pairs)) => {
            let params = load_model(ctx, model)?;
            let pairs = load_pairs(ctx, pairs)?;
            for (i, pair) in pairs.iter().enumerate() {
                let (pos, neg) = record_pair_traces(&params, &a.model_id, pair, &[site])?;
                for (t, tag) in [(&pos, "pos"), (&neg, "neg")] {
                    let name = format!("traces/{i:05}.{tag}.atrc");
                    let path = ctx.path(&name);
                    fs::create_dir_all(path.parent().expect("nested path"))?;
                    write_trace(t, &path)?;
                    ctx.record(&name)?;
                }
            }
            ctx.path("traces")
        }
        _ => {
            let dir = a.traces.clone().expect("clap requires --traces without --model");
            ctx.inputs([dir.as_path()])?;
            dir
        }
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "atrc"));
    files.sort();
    if a.model.is_none() {
        ctx.inputs(files.iter().map(PathBuf::as_path))?;
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for f in &files {
        let t = read_trace(f)?;
        match t.header.style {
            Style::Positive => pos.push(t),
            Style::Negative => neg.push(t),
            Style::None => {}
        }
    }
    let diffs = diffs_from_traces(&pos, &neg, site, reduction)?;
    write_diffs(ctx, &diffs)?;
    println!("trace-diffs: {} pairs from {} traces", diffs.len(), files.len());
    Ok(())
}
