use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerlab::linalg::Matrix;
use steerlab::model::{
    forward, generate, init_params, GenerationSettings, HookSet, ModelConfig, ModelParams,
    SiteKind, TapSite,
};
use steerlab::steering::*;
use steerlab::tokenizer::{encode_prompt, Fence};

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 4,
        ffn_dim: 32,
        vocab_size: 262,
        max_seq_len: 64,
        seed,
    }
}

fn pairs(n: usize) -> Vec<PromptPair> {
    (0..n)
        .map(|i| {
            let (pos, neg) = if i % 2 == 0 {
                ("```cpp\nint f();", "```python\ndef f(): pass")
            } else {
                ("```cpp\ndouble g(double x);", "```python\nimport numpy")
            };
            PromptPair::new(format!("p{i}"), format!("task {i}\n"), pos, neg).unwrap()
        })
        .collect()
}

fn params_hash(p: &ModelParams) -> Vec<u8> {
    p.to_bytes()
}

#[test]
fn identical_answers_give_identical_activations() {
    let p = init_params(&config(1)).unwrap();
    let pair = PromptPair::new("a", "q\n", "```cpp x", "```cpp x").unwrap();
    for site in SiteKind::ALL {
        let (hp, hn) = extract_pair_activations(&p, &pair, site, Reduction::MeanAnswerTokens).unwrap();
        assert_eq!(hp, hn);
        assert_eq!(hp.len(), 2);
        assert_eq!(hp[0].len(), site.dim(&p.config));
    }
    let d = diff_vectors(&p, &[pair], SiteKind::PostMlp, Reduction::FinalToken).unwrap();
    assert!(d.deltas[0].as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn single_token_answer_reductions_agree() {
    let p = init_params(&config(2)).unwrap();
    let pair = PromptPair::new("a", "question\n", "```cpp", "```python").unwrap();
    let a = extract_pair_activations(&p, &pair, SiteKind::AttnOutput, Reduction::FinalToken).unwrap();
    let b = extract_pair_activations(&p, &pair, SiteKind::AttnOutput, Reduction::MeanAnswerTokens).unwrap();
    assert_eq!(a, b);
}

#[test]
fn diffs_are_antisymmetric() {
    let p = init_params(&config(3)).unwrap();
    let ps = pairs(6);
    let swapped: Vec<PromptPair> = ps.iter().map(PromptPair::swapped).collect();
    for r in [Reduction::FinalToken, Reduction::MeanAnswerTokens] {
        let d = diff_vectors(&p, &ps, SiteKind::PostAttention, r).unwrap();
        let s = diff_vectors(&p, &swapped, SiteKind::PostAttention, r).unwrap();
        assert_eq!(s, d.negated());
    }
}

#[test]
fn layer_norm_profile_examples() {
    let zero = DiffSet::new(
        SiteKind::PostMlp,
        Reduction::FinalToken,
        vec!["a".into(), "b".into()],
        vec![Matrix::zeros(3, 4), Matrix::zeros(3, 4)],
    )
    .unwrap();
    assert_eq!(layer_norm_profile(&zero).unwrap(), vec![0.0; 3]);

    let m = Matrix::from_vec(2, 2, vec![3.0, 4.0, 1.0, 0.0]);
    let one = DiffSet::new(SiteKind::PostMlp, Reduction::FinalToken, vec!["a".into()], vec![m]).unwrap();
    assert_eq!(layer_norm_profile(&one).unwrap(), vec![5.0, 1.0]);

    let p = init_params(&config(4)).unwrap();
    let ps = pairs(5);
    let doubled: Vec<PromptPair> = ps.iter().chain(ps.iter()).cloned().collect();
    let a = layer_norm_profile(&diff_vectors(&p, &ps, SiteKind::PostMlp, Reduction::FinalToken).unwrap()).unwrap();
    let b = layer_norm_profile(&diff_vectors(&p, &doubled, SiteKind::PostMlp, Reduction::FinalToken).unwrap()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * x.abs());
    }
    assert!(layer_norm_profile(&DiffSet::new(SiteKind::PostMlp, Reduction::FinalToken, vec![], vec![]).unwrap()).is_err());
}

#[test]
fn diffset_round_trips() {
    let p = init_params(&config(5)).unwrap();
    let d = diff_vectors(&p, &pairs(4), SiteKind::MlpHidden, Reduction::MeanAnswerTokens).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.stdf");
    d.save(&path).unwrap();
    assert_eq!(DiffSet::load(&path).unwrap(), d);
    let mut csv = Vec::new();
    d.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 1 + 2 * 32);
}

#[test]
fn kmeans_symmetric_fixture() {
    let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
    for seed in 0..10 {
        let r = kmeans(&pts, 2, &KMeansOptions { seed, ..Default::default() }).unwrap();
        let mut cs = r.centroids.clone();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert_eq!(r.sse, 1.0);
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);
    }
}

#[test]
fn kmeans_lloyd_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100u64 {
        let n = rng.random_range(8..60);
        let dim = rng.random_range(1..6);
        let c = rng.random_range(1..6);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let r = kmeans(&pts, c, &KMeansOptions { max_iter: 500, tol: 0.0, seed: trial }).unwrap();
        for w in r.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "SSE rose: {:?}", r.sse_history);
        }
        assert!(r.converged);
        for (p, &l) in pts.iter().zip(&r.labels) {
            assert_eq!(nearest(&r.centroids, p).0, l);
        }
        for k in 0..c {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&r.labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..dim {
                let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                assert!((r.centroids[k][j] - mean).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn kmeans_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
    let o = KMeansOptions { seed: 9, ..Default::default() };
    assert_eq!(kmeans(&pts, 4, &o).unwrap(), kmeans(&pts, 4, &o).unwrap());
}

fn two_blob_diffs(n: usize, seed: u64) -> (DiffSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let k = i % 2;
        let cx = if k == 0 { -2.0 } else { 2.0 };
        let data: Vec<f32> = (0..2)
            .flat_map(|_| [cx + rng.random_range(-0.5f32..0.5), rng.random_range(-1.0f32..1.0)])
            .collect();
        deltas.push(Matrix::from_vec(2, 2, data));
        labels.push(k);
    }
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    (DiffSet::new(SiteKind::PostMlp, Reduction::FinalToken, ids, deltas).unwrap(), labels)
}

/// Exhaustive search over separating directions and offsets on a grid.
fn linearly_separable(xs: &[(f64, f64)], labels: &[usize]) -> bool {
    for a in 0..360 {
        let th = (a as f64).to_radians();
        let (c, s) = (th.cos(), th.sin());
        let proj: Vec<f64> = xs.iter().map(|(x, y)| c * x + s * y).collect();
        let max0 = proj.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(p, _)| *p).fold(f64::MIN, f64::max);
        let min1 = proj.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(p, _)| *p).fold(f64::MAX, f64::min);
        if max0 < min1 {
            return true;
        }
    }
    false
}

#[test]
fn separable_clusters_are_learned_exactly() {
    let (d, labels) = two_blob_diffs(40, 1);
    for l in 0..2 {
        let xs: Vec<(f64, f64)> = (0..d.len()).map(|i| (d.layer(i, l)[0] as f64, d.layer(i, l)[1] as f64)).collect();
        assert!(linearly_separable(&xs, &labels));
    }
    let probes = train_probes(&d, &labels, 2, &ProbeTrainOptions::default()).unwrap();
    for (l, probe) in probes.iter().enumerate() {
        for i in 0..d.len() {
            assert_eq!(probe.predict(d.layer(i, l)), labels[i]);
        }
    }
}

#[test]
fn single_class_probe_always_predicts_it() {
    let (d, _) = two_blob_diffs(10, 2);
    let probes = train_probes(&d, &vec![1; 10], 3, &ProbeTrainOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in &probes {
        for _ in 0..50 {
            let x = [rng.random_range(-10.0f32..10.0), rng.random_range(-10.0f32..10.0)];
            assert_eq!(p.predict(&x), 1);
        }
    }
    assert!(train_probes(&DiffSet::new(SiteKind::PostMlp, Reduction::FinalToken, vec![], vec![]).unwrap(), &[], 2, &ProbeTrainOptions::default()).is_err());
}

#[test]
fn duplicated_dataset_gives_identical_probes() {
    let (d, labels) = two_blob_diffs(12, 4);
    let mut dd = d.clone();
    dd.ids.extend(d.ids.iter().map(|s| format!("{s}b")));
    dd.deltas.extend(d.deltas.iter().cloned());
    let mut ll = labels.clone();
    ll.extend(&labels);
    let o = ProbeTrainOptions { max_iter: 2000, ..Default::default() };
    let a = train_probes(&d, &labels, 2, &o).unwrap();
    let b = train_probes(&dd, &ll, 2, &o).unwrap();
    for (pa, pb) in a.iter().zip(&b) {
        for (x, y) in pa.weight.iter().chain(&pa.bias).zip(pb.weight.iter().chain(&pb.bias)) {
            assert_eq!(x, y);
        }
    }
}

#[test]
fn probe_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _state in 0..3 {
        let (c, d) = (3, 5);
        let mut probe = ProbeState::from_probe(&Probe::zeros(c, d));
        probe.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        probe.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..c)).collect();
        let mut gw = vec![0.0; c * d];
        let mut gb = vec![0.0; c];
        for (x, &y) in xs.iter().zip(&labels) {
            probe_ce_gradient(&probe, x, y, 0.25, &mut gw, &mut gb);
        }
        for _ in 0..20 {
            let idx = rng.random_range(0..c * d + c);
            let eps = 1e-5;
            let mut plus = probe.clone();
            let mut minus = probe.clone();
            let analytic = if idx < c * d {
                plus.weight[idx] += eps;
                minus.weight[idx] -= eps;
                gw[idx]
            } else {
                plus.bias[idx - c * d] += eps;
                minus.bias[idx - c * d] -= eps;
                gb[idx - c * d]
            };
            let numeric = (probe_ce_loss(&plus, &xs, &labels) - probe_ce_loss(&minus, &xs, &labels)) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "coordinate {idx}: {analytic} vs {numeric}");
        }
    }
}

fn fitted(p: &ModelParams, site: SiteKind, classes: usize) -> (SteeringModel, Vec<PromptPair>) {
    let ps = pairs(8);
    let d = diff_vectors(p, &ps, site, Reduction::MeanAnswerTokens).unwrap();
    let m = SteeringModel::fit(&d, &FitOptions { classes, ..Default::default() }).unwrap();
    (m, ps)
}

#[test]
fn refine_leaves_base_model_untouched_and_is_reproducible() {
    let p = init_params(&config(6)).unwrap();
    let before = params_hash(&p);
    for site in [SiteKind::PostMlp, SiteKind::AttnOutput, SiteKind::PostAttention] {
        let (m, ps) = fitted(&p, site, 2);
        let cfg = RefineConfig { epochs: 5, learning_rate: 1e-2, alpha: 1.5 };
        let a = refine(&p, &m, &ps, &cfg).unwrap();
        let b = refine(&p, &m, &ps, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(params_hash(&p), before);
        assert_eq!(a.model.centroids, m.centroids);
        assert_eq!(a.epoch_losses.len(), 5);
    }
}

#[test]
fn zero_epochs_keep_probes() {
    let p = init_params(&config(7)).unwrap();
    let (m, ps) = fitted(&p, SiteKind::PostMlp, 2);
    let r = refine(&p, &m, &ps, &RefineConfig { epochs: 0, learning_rate: 1e-2, alpha: 1.0 }).unwrap();
    assert_eq!(r.model.probes, m.probes);
    assert!(r.epoch_losses.is_empty());
    assert!(refine(&p, &m, &ps[..3], &RefineConfig::default()).is_err());
}

#[test]
fn steering_model_round_trips() {
    let p = init_params(&config(8)).unwrap();
    let (m, _) = fitted(&p, SiteKind::AttnOutput, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.strm");
    m.save(&path).unwrap();
    let back = SteeringModel::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_bytes().unwrap(), m.to_bytes().unwrap());
}

#[test]
fn zero_alpha_or_no_layers_leaves_generation_unchanged() {
    let p = init_params(&config(9)).unwrap();
    let (m, _) = fitted(&p, SiteKind::PostMlp, 2);
    let prompt = encode_prompt("task 3\n");
    for seed in 0..5 {
        let s = GenerationSettings { temperature: 1.0, max_new_tokens: 10, seed };
        let base = generate(&p, &prompt, &s, &HookSet::new()).unwrap();
        let all = [0, 1];
        assert_eq!(steer_generate(&p, &prompt, &m.with_alpha(0.0), &s, &all, Selection::PerToken).unwrap(), base);
        assert_eq!(steer_generate(&p, &prompt, &m.with_alpha(3.0), &s, &[], Selection::PerToken).unwrap(), base);
        let acts = vec![vec![0.0; 16]; 2];
        let hooks = steer_hooks(&m.with_alpha(0.0), &acts, &all).unwrap();
        assert_eq!(hooks.len(), 2);
        assert_eq!(generate(&p, &prompt, &s, &hooks).unwrap(), base);
    }
}

#[test]
fn bias_only_probes_select_their_favourite() {
    let p = init_params(&config(10)).unwrap();
    let (mut m, _) = fitted(&p, SiteKind::PostMlp, 3);
    for probe in &mut m.probes {
        probe.weight.fill(0.0);
        probe.bias = vec![0.0, 0.0, 1.0];
    }
    m.alpha = 2.0;
    let acts = vec![vec![1.0; 16]; 2];
    let hooks = steer_hooks(&m, &acts, &[0, 1]).unwrap();
    for (i, (site, edit)) in hooks.edits().iter().enumerate() {
        assert_eq!(*site, TapSite::new(i, SiteKind::PostMlp));
        let want: Vec<f32> = m.centroid(2, i).iter().map(|c| 2.0 * c).collect();
        assert_eq!(*edit, steerlab::model::Edit::AddVector(want));
    }
}

#[test]
fn final_layer_injection_shifts_logits_by_head_product() {
    let p = init_params(&config(11)).unwrap();
    let (m, _) = fitted(&p, SiteKind::PostMlp, 2);
    let m = m.with_alpha(1.7);
    let tokens = encode_prompt("task 5\n");
    let (base, _) = forward(&p, &tokens, &[], &HookSet::new()).unwrap();
    let mut steerer = Steerer::new(&m, &[1], Selection::PerPrompt).unwrap();
    let (steered, _) = steerlab::model::forward_with(&p, &tokens, &[], &mut steerer).unwrap();
    let k = {
        let site = TapSite::new(1, SiteKind::PostMlp);
        let (_, tr) = forward(&p, &tokens, &[site], &HookSet::new()).unwrap();
        let h = tr.get(&site).unwrap();
        m.probes[1].predict(h.row(h.rows() - 1))
    };
    let v: Vec<f32> = m.centroid(k, 1).iter().map(|c| 1.7f32 * c).collect();
    let expected = p.lm_head.matvec_f64(&v);
    let last = tokens.len() - 1;
    for (j, e) in expected.iter().enumerate() {
        let delta = steered.row(last)[j] - base.row(last)[j];
        assert!((delta - e).abs() <= 1e-5 * e.abs().max(1e-3), "{delta} vs {e}");
    }
}

#[test]
fn alpha_sweep_contracts() {
    let p = init_params(&config(12)).unwrap();
    let (m, ps) = fitted(&p, SiteKind::PostMlp, 2);
    let prompts: Vec<_> = ps.iter().map(|q| encode_prompt(&q.question)).collect();
    let settings = SweepSettings {
        reps: 3,
        temperature: 1.0,
        max_new_tokens: 1,
        seed: 4,
        target: Fence::Cpp.token(),
        layers: vec![0, 1],
        selection: Selection::PerToken,
    };
    let rows = alpha_sweep(&p, &m, &prompts, &[0.0, 2.0, 2.0], &settings).unwrap();
    assert_eq!(rows[1], rows[2]);
    assert_eq!(rows[0].samples, 24);
    let mut hits = 0;
    for (i, prompt) in prompts.iter().enumerate() {
        for r in 0..3 {
            let s = GenerationSettings {
                temperature: 1.0,
                max_new_tokens: 1,
                seed: steerlab::seed::derive_seed(4, i as u64, r),
            };
            hits += usize::from(generate(&p, prompt, &s, &HookSet::new()).unwrap()[0] == Fence::Cpp.token());
        }
    }
    assert_eq!(rows[0].hits, hits);
    assert!(alpha_sweep(&p, &m, &prompts, &[], &settings).is_err());
}
