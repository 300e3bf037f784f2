use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerlab::corpus::{ProblemRecord, TemplateSet};
use steerlab::evaluation::*;
use steerlab::model::{init_params, ModelConfig, SiteKind};
use steerlab::steering::{diff_vectors, FitOptions, PromptPair, Reduction, SteeringModel};
use steerlab::Error;

/// Confusion-matrix reference implementation.
fn oracle(truth: &[usize], pred: &[usize], c: usize) -> (f64, f64) {
    let mut m = vec![vec![0u64; c]; c];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    let diag: u64 = (0..c).map(|k| m[k][k]).sum();
    let acc = diag as f64 / truth.len() as f64;
    let mut f1 = 0.0;
    for k in 0..c {
        let tp = m[k][k] as f64;
        let col: f64 = (0..c).map(|r| m[r][k] as f64).sum();
        let row: f64 = m[k].iter().map(|&x| x as f64).sum();
        if col > 0.0 && row > 0.0 && tp > 0.0 {
            let p = tp / col;
            let r = tp / row;
            f1 += 2.0 * p * r / (p + r);
        }
    }
    (acc, f1 / c as f64)
}

#[test]
fn metrics_match_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let c = rng.random_range(1..6);
        let n = rng.random_range(1..40);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n)
            .map(|i| if rng.random_bool(0.5) { truth[i] } else { rng.random_range(0..c) })
            .collect();
        let (a, f) = oracle(&truth, &pred, c);
        let acc = accuracy(&truth, &pred).unwrap();
        let f1 = macro_f1(&truth, &pred, c).unwrap();
        assert!((acc - a).abs() <= 1e-12);
        assert!((f1 - f).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
        let all_present = (0..c).all(|k| truth.contains(&k));
        assert_eq!(f1 == 1.0, truth == pred && all_present);
    }
}

#[test]
fn macro_f1_worked_example() {
    let f = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    assert!((f - 0.733333).abs() < 1e-6);
    assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
    assert!(matches!(macro_f1(&[0, 1], &[0], 2), Err(Error::InvalidArgument(_))));
}

fn problems(n: usize) -> Vec<ProblemRecord> {
    (0..n)
        .map(|i| ProblemRecord {
            name: format!("p{i}"),
            description: format!("d{i}"),
            tags: vec![],
        })
        .collect()
}

#[test]
fn constant_generator_is_all_cpp() {
    let s = BenchSettings { reps: 25, temperature: 1.0, seed: 3 };
    let r = run_preference_benchmark(|_, _| Ok("```cpp\nint x;".into()), &problems(4), &s).unwrap();
    assert_eq!(r.total_samples, 100);
    for p in &r.problems {
        assert_eq!(p.counts[&LanguageLabel::Cpp], 25);
        assert_eq!(p.percentages[&LanguageLabel::Cpp], 100.0);
    }
    assert_eq!(r.rate(LanguageLabel::Cpp), 1.0);
}

#[test]
fn benchmark_is_seeded_and_conserves_counts() {
    let generator = |p: &ProblemRecord, req: &SampleRequest| {
        if req.seed % 7 == 0 {
            return Err(Error::InvalidArgument("boom".into()));
        }
        Ok(match (req.seed ^ p.name.len() as u64) % 3 {
            0 => "```python\n".to_string(),
            1 => "#include <x>".to_string(),
            _ => "nothing".to_string(),
        })
    };
    let s = BenchSettings { reps: 13, temperature: 1.0, seed: 11 };
    let a = run_preference_benchmark(generator, &problems(9), &s).unwrap();
    let b = run_preference_benchmark(generator, &problems(9), &s).unwrap();
    assert_eq!(a, b);
    for p in &a.problems {
        assert_eq!(p.counts.values().sum::<usize>(), 13);
        let pct: f64 = p.percentages.values().sum();
        assert!((pct - 100.0).abs() < 0.1);
        assert!(p.counts[&LanguageLabel::Unknown] >= p.failures);
    }
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 11);
    let json = serde_json::to_string(&a).unwrap();
    assert!(json.contains("\"cpp\""));
}

#[test]
fn timing_harness_measures_sleep() {
    let r = timing_bench("sleep", 5, 1, || {
        std::thread::sleep(Duration::from_millis(10));
        Ok(())
    })
    .unwrap();
    assert!(r.mean_seconds >= 0.010 && r.mean_seconds <= 0.020, "{}", r.mean_seconds);
    assert_eq!((r.runs, r.warmup, r.samples.len()), (5, 1, 5));
    let mut calls = 0;
    let r = timing_bench("count", 25, 5, || {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 30);
    assert_eq!(r.samples.len(), 25);
    assert!(timing_bench("fail", 3, 0, || Err(Error::InvalidArgument("x".into()))).is_err());
}

fn eval_setup() -> (steerlab::model::ModelParams, SteeringModel, Vec<PromptPair>) {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 4,
        ffn_dim: 32,
        vocab_size: 262,
        max_seq_len: 64,
        seed: 5,
    };
    let p = init_params(&cfg).unwrap();
    let train: Vec<PromptPair> = (0..10)
        .map(|i| {
            let (a, b) = if i % 2 == 0 { ("```cpp\nint a;", "```python\nx=1") } else { ("```cpp\ndouble b();", "```python\nimport math") };
            PromptPair::new(format!("t{i}"), format!("job {i}\n"), a, b).unwrap()
        })
        .collect();
    let d = diff_vectors(&p, &train, SiteKind::AttnOutput, Reduction::MeanAnswerTokens).unwrap();
    let m = SteeringModel::fit(&d, &FitOptions { classes: 2, ..Default::default() }).unwrap();
    let test = (0..6)
        .map(|i| {
            let (a, b) = if i % 2 == 0 { ("```cpp\nint a;", "```python\nx=1") } else { ("```cpp\ndouble b();", "```python\nimport math") };
            PromptPair::new(format!("e{i}"), format!("work {i}"), a, b).unwrap()
        })
        .collect();
    (p, m, test)
}

#[test]
fn identical_probes_give_identical_columns() {
    let (p, m, test) = eval_setup();
    let r = evaluate_probes(&p, &m, &m, &test, &TemplateSet::toy()).unwrap();
    for l in &r.layers {
        assert_eq!(l.standard_accuracy, l.refined_accuracy);
        assert_eq!(l.standard_f1, l.refined_f1);
    }
    assert_eq!(r.layers.len(), 2);
    assert_eq!(r.templates, 10);
}

#[test]
fn single_template_equals_plain_difference() {
    let (p, m, test) = eval_setup();
    let one = TemplateSet::new(vec!["{description} ```cpp\n".into()], vec!["{description} ```python\n".into()]).unwrap();
    for item in &test {
        let avg = template_delta(&p, &m, item, &one).unwrap();
        let hp = steerlab::steering::answer_activations(&p, &format!("{} ```cpp\n", item.question), &item.positive, m.site, m.reduction).unwrap();
        let hn = steerlab::steering::answer_activations(&p, &format!("{} ```python\n", item.question), &item.negative, m.site, m.reduction).unwrap();
        let plain: Vec<f64> = hp.iter().zip(&hn).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) as f64)).collect();
        assert_eq!(avg, plain);
    }
}

#[test]
fn template_order_does_not_matter() {
    let (p, m, test) = eval_setup();
    let t = TemplateSet::toy();
    let mut cpp = t.cpp.clone();
    let mut py = t.python.clone();
    cpp.reverse();
    py.reverse();
    let rev = TemplateSet::new(cpp, py).unwrap();
    let a = evaluate_probes(&p, &m, &m, &test, &t).unwrap();
    let b = evaluate_probes(&p, &m, &m, &test, &rev).unwrap();
    assert_eq!(a, b);
    assert!(evaluate_probes(&p, &m, &m, &[], &t).is_err());
}
