//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adaflow::attention::ProjectionWeights;
use adaflow::similarity::FeatureVolume;
use adaflow::tensor_store::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_features(
    n: usize,
    h: usize,
    w: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> FeatureVolume {
    FeatureVolume::from_tensor(random_tensor(vec![n, h, w, d], rng)).unwrap()
}

/// Token `p` of frame `f` from a raw `n × h × w × d` slice.
fn tok(data: &[f32], hw: usize, d: usize, f: usize, p: usize) -> &[f32] {
    let at = (f * hw + p) * d;
    &data[at..at + d]
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Double loop over tokens: `(max similarity, argmax, runner-up similarity)` per position.
/// Similarities within 1e-12 of the maximum tie and the lowest index wins.
pub fn brute_matches(f: &FeatureVolume, i: usize, j: usize) -> Vec<(f64, usize, f64)> {
    let (hw, d) = (f.h() * f.w(), f.d());
    let data = f.tensor().data();
    (0..hw)
        .map(|p| {
            let scores: Vec<f64> = (0..hw)
                .map(|q| cosine(tok(data, hw, d, i, p), tok(data, hw, d, j, q)))
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let arg = (0..hw).find(|&q| scores[q] >= max - 1e-12).unwrap();
            let second = (0..hw)
                .filter(|&q| q != arg)
                .map(|q| scores[q])
                .fold(f64::NEG_INFINITY, f64::max);
            (max, arg, second)
        })
        .collect()
}

/// Naive extended self-attention over the listed `(frame, pos)` KV tokens, f64 throughout.
pub fn brute_attention(
    z: &Tensor,
    w: &ProjectionWeights,
    query: usize,
    kv: &[(usize, usize)],
) -> Vec<f64> {
    let (tokens, dm) = (z.shape()[1], z.shape()[2]);
    let inner = w.inner();
    let (heads, dh) = (w.heads(), w.d_head());
    let proj = |m: &Tensor, x: &[f32]| -> Vec<f64> {
        (0..inner)
            .map(|o| {
                (0..dm)
                    .map(|k| f64::from(x[k]) * f64::from(m.data()[k * inner + o]))
                    .sum()
            })
            .collect()
    };
    let token = |f: usize, p: usize| &z.data()[(f * tokens + p) * dm..(f * tokens + p + 1) * dm];
    let keys: Vec<Vec<f64>> = kv.iter().map(|&(f, p)| proj(w.wk(), token(f, p))).collect();
    let vals: Vec<Vec<f64>> = kv.iter().map(|&(f, p)| proj(w.wv(), token(f, p))).collect();
    let mut out = Vec::with_capacity(tokens * inner);
    for p in 0..tokens {
        let q = proj(w.wq(), token(query, p));
        let mut row = vec![0.0; inner];
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| {
                    q[r.clone()]
                        .iter()
                        .zip(&k[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let total: f64 = exps.iter().sum();
            for (e, v) in exps.iter().zip(&vals) {
                for (o, x) in row[r.clone()].iter_mut().zip(&v[r.clone()]) {
                    *o += e / total * x;
                }
            }
        }
        out.extend(row);
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - y).abs())
        .fold(0.0, f64::max)
}
