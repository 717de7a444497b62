//! Compression contract, brute-force attention oracle and composition of
//! the decoder stages.

use mat_core::model::ForwardMode;
use mat_core::model::Window;
use mat_core::numerics::{AttnMask, Graph, Tensor};
use mat_core::{MatModel, ModelConfig, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(long_len: usize, num_segments: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        long_len,
        short_len: 2,
        num_segments,
        long_queries: 3,
        future_queries: 2,
        future_seconds: 2.0,
        fps: 2,
        rounds: 1,
        num_classes: 2,
        lambda_s: vec![1.0; 2],
        ..ModelConfig::default()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn compress(
    model: &MatModel,
    store: &ParamStore<f64>,
    long: &Tensor<f64>,
    valid: &[bool],
) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(long.clone());
    let c = model
        .encoder
        .compress_long_memory(&mut g, &p, x, valid, 1e-5)
        .unwrap();
    (
        g.value(c.segment_summaries).clone(),
        g.value(c.tokens).clone(),
    )
}

#[test]
fn compressed_length_is_segment_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m_l, n_s) in [(8, 8), (32, 8), (128, 8), (9, 3)] {
        let cfg = config(m_l, n_s);
        let (model, store) = MatModel::new::<f64>(&cfg).unwrap();
        let long = random(&[m_l, 8], &mut rng);
        let (summaries, tokens) = compress(&model, &store, &long, &vec![true; m_l]);
        assert_eq!(summaries.shape(), &[n_s, 8]);
        assert_eq!(tokens.shape(), &[n_s, 8]);
    }
}

#[test]
fn indivisible_long_memory_is_rejected() {
    assert!(MatModel::new::<f64>(&config(10, 3)).is_err());
}

#[test]
fn segment_summaries_are_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (m_l, n_s) in [(9, 3), (32, 8)] {
        let cfg = config(m_l, n_s);
        let seg = m_l / n_s;
        let (model, store) = MatModel::new::<f64>(&cfg).unwrap();
        let long = random(&[m_l, 8], &mut rng);
        let valid = vec![true; m_l];
        let (reference, _) = compress(&model, &store, &long, &valid);
        for s in 0..n_s {
            let mut perturbed = long.clone();
            let frame = s * seg + rng.random_range(0..seg);
            perturbed.data_mut()[frame * 8 + 1] += 1.5;
            let (out, _) = compress(&model, &store, &perturbed, &valid);
            for other in 0..n_s {
                if other == s {
                    assert_ne!(out.row(other), reference.row(other));
                } else {
                    assert_eq!(
                        out.row(other),
                        reference.row(other),
                        "segment {other} moved"
                    );
                }
            }
        }
    }
}

/// Straightforward per-head scaled dot-product attention in `f64`.
fn brute_force_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    mask: &AttnMask,
) -> Tensor<f64> {
    let (tq, d) = (q.rows(), q.cols());
    let tk = k.rows();
    let dh = d / heads;
    let mut out = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let mut logits = Vec::new();
            for j in 0..tk {
                let s: f64 = (0..dh)
                    .map(|c| q.row(i)[h * dh + c] * k.row(j)[h * dh + c])
                    .sum();
                logits.push(if mask.get(i, j) {
                    Some(s / (dh as f64).sqrt())
                } else {
                    None
                });
            }
            let max = logits
                .iter()
                .flatten()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .map(|l| l.map_or(0.0, |x| (x - max).exp()))
                .collect();
            let z: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for c in 0..dh {
                    out[i * d + h * dh + c] += w / z * v.row(j)[h * dh + c];
                }
            }
        }
    }
    Tensor::new(vec![tq, d], out).unwrap()
}

#[test]
fn fused_attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (tq, tk, heads) in [(1, 1, 1), (4, 7, 2), (6, 6, 3), (5, 9, 4)] {
        let d = 12;
        let (q, k, v) = (
            random(&[tq, d], &mut rng),
            random(&[tk, d], &mut rng),
            random(&[tk, d], &mut rng),
        );
        let mut allowed: Vec<bool> = (0..tq * tk).map(|_| rng.random_bool(0.7)).collect();
        for i in 0..tq {
            allowed[i * tk] = true;
        }
        let mask = AttnMask::new(tq, tk, allowed).unwrap();
        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let out = g
            .attention(qv, kv, vv, heads, Some(&mask), None, "x")
            .unwrap();
        let oracle = brute_force_attention(&q, &k, &v, heads, &mask);
        for (a, b) in g.value(out).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn top_k_at_sequence_length_is_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (
        random(&[3, 4], &mut rng),
        random(&[5, 4], &mut rng),
        random(&[5, 4], &mut rng),
    );
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let dense = g.attention(qv, kv, vv, 2, None, None, "d").unwrap();
    let topk = g.attention(qv, kv, vv, 2, None, Some(5), "k").unwrap();
    let wide = g.attention(qv, kv, vv, 2, None, Some(50), "w").unwrap();
    assert_eq!(g.value(dense), g.value(topk));
    assert_eq!(g.value(dense), g.value(wide));
}

#[test]
fn zero_rounds_keeps_the_latent_path() {
    let cfg = ModelConfig {
        rounds: 0,
        lambda_s: vec![1.0],
        ..config(8, 2)
    };
    let (model, store) = MatModel::new::<f64>(&cfg).unwrap();
    assert!(store.id("q_future_renewed").is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Window::new(random(&[10, 8], &mut rng), vec![true; 10]).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let out = model.forward(&mut g, &p, &w, ForwardMode::Infer).unwrap();
    assert_eq!(out.final_short(), out.enhanced);
    assert_eq!(out.final_future(), out.decoder.future_initial);
    let pred = model.predict(&store, &w).unwrap();
    assert_eq!(
        pred.anticipation.shape(),
        &[cfg.future_steps(), cfg.num_outputs()]
    );
}

#[test]
fn every_round_output_has_the_right_shape() {
    for rounds in 1..=3 {
        let cfg = ModelConfig {
            rounds,
            lambda_s: vec![1.0; rounds + 1],
            ..config(8, 2)
        };
        let (model, store) = MatModel::new::<f64>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Window::new(random(&[10, 8], &mut rng), vec![true; 10]).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let out = model.forward(&mut g, &p, &w, ForwardMode::Infer).unwrap();
        assert_eq!(out.decoder.short_per_round.len(), rounds);
        assert_eq!(out.decoder.future_per_round.len(), rounds);
        for &s in &out.decoder.short_per_round {
            assert_eq!(g.shape(s), &[2, 8]);
        }
        // With renewal the rounds run on the step-aligned query bank.
        for &f in &out.decoder.future_per_round {
            assert_eq!(g.shape(f), &[cfg.future_steps(), 8]);
        }
        assert_eq!(g.shape(out.decoder.future_initial), &[2, 8]);
    }
}
