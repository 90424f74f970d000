//! Straight-line f64 re-implementation of the ViT forward pass. Reads
//! parameters by name and uses plain nested vectors, sharing no code with
//! the tape-based model.

#![allow(dead_code)]

use revit::model::ReViTConfig;
use revit::numerics::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .to_vec()
}

pub fn matrix(store: &ParamStore<f64>, name: &str) -> Mat {
    let t = store.get(name).unwrap();
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// `row · W + b` with `W` as `[in][out]`.
pub fn affine(row: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, x) in row.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += x * w[i][j];
        }
    }
    out
}

pub fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .enumerate()
        .map(|(j, x)| (x - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ln_named(store: &ParamStore<f64>, prefix: &str, row: &[f64], eps: f64) -> Vec<f64> {
    layer_norm(
        row,
        &param(store, &format!("{prefix}.gamma")),
        &param(store, &format!("{prefix}.beta")),
        eps,
    )
}

fn lin(store: &ParamStore<f64>, prefix: &str, row: &[f64]) -> Vec<f64> {
    affine(
        row,
        &matrix(store, &format!("{prefix}.weight")),
        &param(store, &format!("{prefix}.bias")),
    )
}

/// Transformer blocks plus final norm for one sequence at length `len`.
pub fn encoder(store: &ParamStore<f64>, cfg: &ReViTConfig, seq: &Mat, len: usize) -> Mat {
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let eps = cfg.ln_eps;
    let mut x = seq.clone();
    let n = x.len();
    for blk in 0..cfg.depth {
        let h: Mat = x
            .iter()
            .map(|r| ln_named(store, &format!("blocks.{blk}.ln1.{len}"), r, eps))
            .collect();
        let qkv: Mat = h
            .iter()
            .map(|r| lin(store, &format!("blocks.{blk}.attn.qkv"), r))
            .collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for hh in 0..heads {
            for t in 0..n {
                let q = &qkv[t][hh * dh..(hh + 1) * dh];
                let scores: Vec<f64> = (0..n)
                    .map(|u| {
                        let k = &qkv[u][d + hh * dh..d + (hh + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let a = softmax(&scores);
                for u in 0..n {
                    for e in 0..dh {
                        ctx[t][hh * dh + e] += a[u] * qkv[u][2 * d + hh * dh + e];
                    }
                }
            }
        }
        for t in 0..n {
            let o = lin(store, &format!("blocks.{blk}.attn.proj"), &ctx[t]);
            for j in 0..d {
                x[t][j] += o[j];
            }
        }
        for t in 0..n {
            let h = ln_named(store, &format!("blocks.{blk}.ln2.{len}"), &x[t], eps);
            let h: Vec<f64> = lin(store, &format!("blocks.{blk}.mlp.fc1"), &h)
                .into_iter()
                .map(gelu)
                .collect();
            let h = lin(store, &format!("blocks.{blk}.mlp.fc2"), &h);
            for j in 0..d {
                x[t][j] += h[j];
            }
        }
    }
    x.iter()
        .map(|r| ln_named(store, &format!("final_ln.{len}"), r, eps))
        .collect()
}

/// Class logits (and distillation logits when `with_distill`) for one
/// `[c][h][w]` image.
pub fn forward(
    store: &ParamStore<f64>,
    cfg: &ReViTConfig,
    image: &[f64],
    len: usize,
    with_distill: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (rows, cols) = cfg.grids[len];
    let p = cfg.image_size / rows;
    let s = cfg.image_size;
    let c = cfg.channels;
    let mut seq: Mat = Vec::new();
    seq.push(param(store, "cls_token"));
    if with_distill {
        seq.push(param(store, "dist_token"));
    }
    let w = matrix(store, &format!("patch_embed.{len}.weight"));
    let b = param(store, &format!("patch_embed.{len}.bias"));
    for gy in 0..rows {
        for gx in 0..cols {
            let mut v = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        v.push(image[(ch * s + gy * p + py) * s + gx * p + px]);
                    }
                }
            }
            seq.push(affine(&v, &w, &b));
        }
    }
    let pos = matrix(store, &format!("pos_embed.{len}"));
    for (t, row) in seq.iter_mut().enumerate() {
        // Without a distillation token the patch rows skip slot 1.
        let slot = if t == 0 || with_distill { t } else { t + 1 };
        for (j, v) in row.iter_mut().enumerate() {
            *v += pos[slot][j];
        }
    }
    let enc = encoder(store, cfg, &seq, len);
    let cls = lin(store, "head", &enc[0]);
    let dist = with_distill.then(|| lin(store, "dist_head", &enc[1]));
    (cls, dist)
}
