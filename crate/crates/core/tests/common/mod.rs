#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use suffixlab_core::gradcheck::random_layout;
use suffixlab_core::{Model, ModelConfig, PromptLayout};

pub fn tiny_config(seed: u64) -> ModelConfig {
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

pub fn tiny_model(seed: u64) -> Model<f64> {
    Model::init(tiny_config(seed)).unwrap()
}

pub const LENS: [usize; 5] = [1, 3, 5, 2, 4];

pub fn layout(seed: u64) -> PromptLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_layout(32, LENS, &mut rng).unwrap()
}

/// Loop-based forward pass written independently of the tape.
pub fn naive_logits(model: &Model<f64>, tokens: &[usize]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let p: Vec<Vec<f64>> = model.params().iter().map(|t| t.data().to_vec()).collect();
    let (d, f, v, h) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let dh = d / h;
    let n = tokens.len();
    let mm = |x: &[Vec<f64>], w: &[f64], cols: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..cols)
                    .map(|j| {
                        row.iter()
                            .enumerate()
                            .map(|(i, &a)| a * w[i * cols + j])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    };
    let norm = |x: &[Vec<f64>], g: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let ms = row.iter().map(|a| a * a).sum::<f64>() / row.len() as f64;
                let inv = 1.0 / (ms + 1e-6).sqrt();
                row.iter().zip(g).map(|(a, gi)| a * inv * gi).collect()
            })
            .collect()
    };
    let mut z: Vec<Vec<f64>> = (0..n)
        .map(|o| {
            (0..d)
                .map(|j| p[0][tokens[o] * d + j] + p[1][o * d + j])
                .collect()
        })
        .collect();
    for layer in 0..cfg.n_layers {
        let w = &p[2 + 9 * layer..2 + 9 * (layer + 1)];
        let x = norm(&z, &w[0]);
        let (q, k, vv) = (mm(&x, &w[1], d), mm(&x, &w[2], d), mm(&x, &w[3], d));
        let mut cat = vec![vec![0.0; d]; n];
        for head in 0..h {
            let off = head * dh;
            for o in 0..n {
                let scores: Vec<f64> = (0..=o)
                    .map(|s| {
                        (0..dh).map(|j| q[o][off + j] * k[s][off + j]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for j in 0..dh {
                    cat[o][off + j] = (0..=o).map(|s| e[s] / tot * vv[s][off + j]).sum();
                }
            }
        }
        let attn = mm(&cat, &w[4], d);
        for o in 0..n {
            for j in 0..d {
                z[o][j] += attn[o][j];
            }
        }
        let x = norm(&z, &w[5]);
        let (gate, up) = (mm(&x, &w[6], f), mm(&x, &w[7], f));
        let act: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| {
                g.iter()
                    .zip(u)
                    .map(|(&a, &b)| a / (1.0 + (-a).exp()) * b)
                    .collect()
            })
            .collect();
        let mlp = mm(&act, &w[8], d);
        for o in 0..n {
            for j in 0..d {
                z[o][j] += mlp[o][j];
            }
        }
    }
    let last = p.len();
    mm(&norm(&z, &p[last - 2]), &p[last - 1], v)
}

pub fn naive_loss(model: &Model<f64>, layout: &PromptLayout) -> f64 {
    let logits = naive_logits(model, layout.tokens());
    let rows = layout.loss_targets();
    rows.iter()
        .map(|&(o, t)| {
            let row = &logits[o];
            let lse = row.iter().map(|a| a.exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum::<f64>()
        / rows.len() as f64
}
