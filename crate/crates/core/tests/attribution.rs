use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerlab::attribution::{
    amplify_hook, decode_row, effective_weights, normalized_score, planted_fixture, scan_token,
    AmplifyMode, NeuronRef,
};
use steerlab::model::{
    forward, generate, init_params, next_token_distribution, GenerationSettings, HookSet,
    ModelConfig, SiteKind, TapSite,
};
use steerlab::tokenizer::{Fence, Token};

fn config(layers: usize, d: usize, f: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: d,
        num_heads: 4,
        ffn_dim: f,
        vocab_size: 262,
        max_seq_len: 32,
        seed,
    }
}

fn fixture() -> (steerlab::model::ModelParams, NeuronRef, Token) {
    let cfg = config(2, 32, 16, 11);
    let target = Fence::Cpp.token();
    let neuron = NeuronRef { layer: 1, neuron: 5 };
    (planted_fixture(&cfg, target, neuron).unwrap(), neuron, target)
}

fn random_prompt(rng: &mut ChaCha8Rng) -> Vec<Token> {
    let len = rng.random_range(1..=12);
    (0..len).map(|_| rng.random_range(0..256)).collect()
}

#[test]
fn effective_weights_gate_limits() {
    let mut p = init_params(&config(1, 16, 8, 1)).unwrap();
    p.layers[0].w_gate.as_mut_slice().fill(0.0);
    let eff = effective_weights(&p, 0).unwrap();
    for (e, u) in eff.as_slice().iter().zip(p.layers[0].w_up.as_slice()) {
        assert_eq!(*e, 0.5 * u);
    }
    p.layers[0].w_gate.as_mut_slice().fill(-1e6);
    let eff = effective_weights(&p, 0).unwrap();
    for (e, u) in eff.as_slice().iter().zip(p.layers[0].w_up.as_slice()) {
        assert!((*e as f64).abs() <= 1e-300 * (*u as f64).abs());
    }
    p.layers[0].w_up.as_mut_slice().fill(0.0);
    p.layers[0].w_gate.as_mut_slice().fill(3.0);
    assert!(effective_weights(&p, 0).unwrap().as_slice().iter().all(|&e| e == 0.0));
    assert!(effective_weights(&p, 1).is_err());
}

#[test]
fn effective_weights_within_one_ulp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = init_params(&config(2, 16, 8, 2)).unwrap();
    for lp in &mut p.layers {
        for x in lp.w_gate.as_mut_slice() {
            *x = rng.random_range(-8.0..8.0);
        }
    }
    for l in 0..2 {
        let eff = effective_weights(&p, l).unwrap();
        let lp = &p.layers[l];
        for ((e, &u), &g) in eff
            .as_slice()
            .iter()
            .zip(lp.w_up.as_slice())
            .zip(lp.w_gate.as_slice())
        {
            let exact = u as f64 / (1.0 + (-(g as f64)).exp());
            let ulp = (exact as f32).abs().max(f32::MIN_POSITIVE) * f32::EPSILON;
            assert!(((*e as f64) - exact).abs() <= ulp as f64, "{e} vs {exact}");
        }
    }
}

#[test]
fn decode_row_contracts() {
    let mut p = init_params(&config(1, 16, 8, 4)).unwrap();
    let uniform = decode_row(&p, &[0.0; 16]).unwrap();
    for x in &uniform {
        assert!((x - 1.0 / 262.0).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let w: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s: f64 = decode_row(&p, &w).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let w: Vec<f32> = (0..16).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    p.lm_head.as_mut_slice().fill(0.0);
    p.lm_head.set(7, 0, 200.0);
    let probs = decode_row(&p, &w).unwrap();
    assert!(probs[7] > 1.0 - 1e-12);
}

#[test]
fn score_bounds_hold_on_random_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let v = rng.random_range(2..40);
        let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let k = rng.random_range(1..=v);
        let t = rng.random_range(0..v);
        let a = normalized_score(&p, t as Token, k).unwrap();
        assert!(a >= 0.0);
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if p[t] >= sorted[k - 1] {
            assert!(a <= k as f64 + 1e-12);
        }
        if p.iter().enumerate().all(|(i, &x)| i == t || x < p[t]) {
            assert!(a >= 1.0 - 1e-12);
        }
    }
}

#[test]
fn identical_neurons_tie_and_fall_back_to_index_order() {
    let mut p = init_params(&config(2, 16, 8, 8)).unwrap();
    let (up, gate) = (p.layers[0].w_up.row(0).to_vec(), p.layers[0].w_gate.row(0).to_vec());
    for lp in &mut p.layers {
        for n in 0..8 {
            lp.w_up.row_mut(n).copy_from_slice(&up);
            lp.w_gate.row_mut(n).copy_from_slice(&gate);
        }
    }
    let map = scan_token(&p, 65, 100).unwrap();
    let first = map.entries[0].score;
    assert!(map.entries.iter().all(|e| e.score == first));
    let order: Vec<(usize, usize)> = map.entries.iter().map(|e| (e.neuron.layer, e.neuron.neuron)).collect();
    let expected: Vec<(usize, usize)> = (0..2).flat_map(|l| (0..8).map(move |n| (l, n))).collect();
    assert_eq!(order, expected);
}

fn naive_scores(p: &steerlab::model::ModelParams, token: usize, k: usize) -> Vec<(f64, usize, usize)> {
    let cfg = &p.config;
    let mut out = Vec::new();
    for l in 0..cfg.num_layers {
        let lp = &p.layers[l];
        for n in 0..cfg.ffn_dim {
            let row: Vec<f32> = (0..cfg.hidden_dim)
                .map(|j| {
                    let g = lp.w_gate.get(n, j) as f64;
                    (lp.w_up.get(n, j) as f64 / (1.0 + (-g).exp())) as f32
                })
                .collect();
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|v| {
                    let mut s = p.lm_bias[v] as f64;
                    for j in 0..cfg.hidden_dim {
                        s += p.lm_head.get(v, j) as f64 * row[j] as f64;
                    }
                    s
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let probs: Vec<f64> = e.iter().map(|x| x / z).collect();
            let mut sorted = probs.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mean = sorted[..k].iter().sum::<f64>() / k as f64;
            out.push((probs[token] / mean, l, n));
        }
    }
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    out
}

#[test]
fn scan_matches_brute_force_ordering() {
    for seed in 0..5 {
        let p = init_params(&config(2, 16, 8, seed)).unwrap();
        for &(token, k) in &[(Fence::Cpp.token(), 100usize), (b'a' as Token, 10), (0, 262)] {
            let map = scan_token(&p, token, k).unwrap();
            let naive = naive_scores(&p, token as usize, k);
            let got: Vec<(usize, usize)> = map.entries.iter().map(|e| (e.neuron.layer, e.neuron.neuron)).collect();
            let want: Vec<(usize, usize)> = naive.iter().map(|x| (x.1, x.2)).collect();
            assert_eq!(got, want);
            for (e, n) in map.entries.iter().zip(&naive) {
                assert!((e.score - n.0).abs() <= 1e-9 * n.0.abs().max(1.0));
                assert_eq!(e.top_tokens.len(), 10);
            }
        }
    }
}

#[test]
fn planted_neuron_ranks_first() {
    let (p, neuron, target) = fixture();
    let map = scan_token(&p, target, 100).unwrap();
    assert_eq!(map.entries[0].neuron, neuron);
    assert_eq!(map.entries[0].top_tokens[0], target);
    let naive = naive_scores(&p, target as usize, 100);
    assert_eq!((naive[0].1, naive[0].2), (neuron.layer, neuron.neuron));
}

#[test]
fn amplify_add_zero_is_a_no_op() {
    let (p, neuron, _) = fixture();
    let hooks = amplify_hook(&p.config, neuron, AmplifyMode::Add, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..10 {
        let prompt = random_prompt(&mut rng);
        let s = GenerationSettings { temperature: 1.0, max_new_tokens: 8, seed };
        assert_eq!(
            generate(&p, &prompt, &s, &hooks).unwrap(),
            generate(&p, &prompt, &s, &HookSet::new()).unwrap()
        );
    }
}

#[test]
fn amplify_set_pins_the_coordinate() {
    let (p, _, _) = fixture();
    let neuron = NeuronRef { layer: 0, neuron: 3 };
    let hooks = amplify_hook(&p.config, neuron, AmplifyMode::Set, 7.5).unwrap();
    let site = TapSite::new(0, SiteKind::MlpHidden);
    let (_, trace) = forward(&p, &[1, 2, 3, 4, 5], &[site], &hooks).unwrap();
    let m = trace.get(&site).unwrap();
    for t in 0..5 {
        assert_eq!(m.get(t, 3), 7.5);
    }
    assert!(amplify_hook(&p.config, NeuronRef { layer: 2, neuron: 0 }, AmplifyMode::Add, 1.0).is_err());
    assert!(amplify_hook(&p.config, NeuronRef { layer: 0, neuron: 16 }, AmplifyMode::Add, 1.0).is_err());
}

#[test]
fn amplified_planted_neuron_flips_greedy_token() {
    let (p, neuron, target) = fixture();
    let hooks = amplify_hook(&p.config, neuron, AmplifyMode::Add, 20.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for seed in 0..50 {
        let prompt = random_prompt(&mut rng);
        let s = GenerationSettings { temperature: 0.0, max_new_tokens: 1, seed };
        assert_ne!(generate(&p, &prompt, &s, &HookSet::new()).unwrap()[0], target);
        assert_eq!(generate(&p, &prompt, &s, &hooks).unwrap()[0], target);
    }
}

#[test]
fn target_probability_is_monotone_in_amount() {
    let (p, neuron, target) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        let prompt = random_prompt(&mut rng);
        let mut prev = -1.0;
        for step in 0..10 {
            let amount = step as f32 * 0.25;
            let hooks = amplify_hook(&p.config, neuron, AmplifyMode::Add, amount).unwrap();
            let (logits, _) = forward(&p, &prompt, &[], &hooks).unwrap();
            let prob = next_token_distribution(logits.last(), 1.0)[target as usize];
            assert!(prob >= prev, "amount {amount}: {prob} < {prev}");
            prev = prob;
        }
    }
}

#[test]
fn csv_export_is_canonically_sorted() {
    let p = init_params(&config(2, 16, 8, 3)).unwrap();
    let map = scan_token(&p, 66, 100).unwrap();
    let mut buf = Vec::new();
    map.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "layer,neuron,score,top_tokens");
    assert_eq!(lines.count(), 16);
}
