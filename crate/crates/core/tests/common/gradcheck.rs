//! Finite-difference gradient suite shared by the numerics, model and
//! acceptance targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use revit::model::{ReViT, ReViTConfig};
use revit::numerics::{Conv2dGeometry, Graph, ParamStore, Scalar, Tensor, Var};
use revit::Result;

use super::*;

fn b_matmul<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.matmul(v[0], v[1])?;
    project(g, y)
}
fn b_bmm<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.batch_matmul(v[0], v[1], false)?;
    project(g, y)
}
fn b_bmm_t<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.batch_matmul(v[0], v[1], true)?;
    project(g, y)
}
fn b_layer_norm<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
    project(g, y)
}
fn b_softmax<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.softmax(v[0], 0.7)?;
    project(g, y)
}
fn b_gelu<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.gelu(v[0]);
    project(g, y)
}
fn b_ce<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let b = g.shape(v[0])[0];
    let c = g.shape(v[0])[1];
    let targets: Vec<usize> = (0..b).map(|i| (i * 7 + 1) % c).collect();
    g.cross_entropy(v[0], &targets)
}
fn b_ce_weighted<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let b = g.shape(v[0])[0];
    let c = g.shape(v[0])[1];
    let targets: Vec<usize> = (0..b).map(|i| (i * 5 + 2) % c).collect();
    let weights: Vec<f64> = (0..c).map(|i| 0.5 + i as f64 * 0.3).collect();
    g.cross_entropy_weighted(v[0], &targets, Some(&weights))
}
fn b_kl<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let p = g.softmax(v[0], 1.0)?;
    let q = g.softmax(v[1], 1.3)?;
    g.kl_divergence(p, q)
}
fn b_heads<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let q = g.split_heads(v[0], 0, 3, 2)?;
    let k = g.split_heads(v[0], 1, 3, 2)?;
    let vv = g.split_heads(v[0], 2, 3, 2)?;
    let s = g.batch_matmul(q, k, true)?;
    let a = g.softmax(s, 1.0)?;
    let o = g.batch_matmul(a, vv, false)?;
    let m = g.merge_heads(o)?;
    project(g, m)
}
fn b_tokens<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let x = g.prepend_tokens(v[0], &[v[1], v[2]])?;
    let x = g.add_broadcast(x, v[3])?;
    let c = g.select_token(x, 0)?;
    let d = g.select_token(x, 2)?;
    let s = g.add(c, d)?;
    let s = g.scale(s, 0.5);
    let t = project(g, s)?;
    let all = project(g, x)?;
    g.add(t, all)
}
fn b_gather<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.gather_rows(v[0], &[0, 2, 2, 1])?;
    project(g, y)
}
fn b_conv<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.conv2d(v[0], v[1], v[2], Conv2dGeometry { stride: 2, padding: 1 })?;
    let y = g.gelu(y);
    let p = g.spatial_mean(y)?;
    project(g, p)
}
fn b_mean_reshape<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let n = g.value(v[0]).len();
    let r = g.reshape(v[0], &[n])?;
    let sq = g.mul(r, r)?;
    Ok(g.mean(sq))
}

pub struct OpCase {
    pub name: &'static str,
    pub b32: Builder<f32>,
    pub b64: Builder<f64>,
    /// Input shapes, one set per seed.
    pub shapes: Vec<Vec<Vec<usize>>>,
}

/// Every differentiable op, each with three seeded shape sets.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            b32: b_matmul::<f32>,
            b64: b_matmul::<f64>,
            shapes: vec![
                vec![vec![3, 4], vec![4, 2]],
                vec![vec![2, 3, 5], vec![5, 3]],
                vec![vec![1, 6], vec![6, 6]],
            ],
        },
        OpCase {
            name: "batch_matmul",
            b32: b_bmm::<f32>,
            b64: b_bmm::<f64>,
            shapes: vec![
                vec![vec![2, 3, 4], vec![2, 4, 2]],
                vec![vec![1, 2, 2, 3], vec![1, 2, 3, 5]],
                vec![vec![3, 1, 4], vec![3, 4, 1]],
            ],
        },
        OpCase {
            name: "batch_matmul_transposed",
            b32: b_bmm_t::<f32>,
            b64: b_bmm_t::<f64>,
            shapes: vec![
                vec![vec![2, 3, 4], vec![2, 5, 4]],
                vec![vec![1, 2, 2, 3], vec![1, 2, 4, 3]],
                vec![vec![3, 1, 4], vec![3, 2, 4]],
            ],
        },
        OpCase {
            name: "layer_norm",
            b32: b_layer_norm::<f32>,
            b64: b_layer_norm::<f64>,
            shapes: vec![
                vec![vec![2, 6], vec![6], vec![6]],
                vec![vec![3, 2, 4], vec![4], vec![4]],
                vec![vec![1, 8], vec![8], vec![8]],
            ],
        },
        OpCase {
            name: "softmax",
            b32: b_softmax::<f32>,
            b64: b_softmax::<f64>,
            shapes: vec![vec![vec![2, 5]], vec![vec![3, 2, 4]], vec![vec![1, 9]]],
        },
        OpCase {
            name: "gelu",
            b32: b_gelu::<f32>,
            b64: b_gelu::<f64>,
            shapes: vec![vec![vec![2, 5]], vec![vec![7]], vec![vec![2, 2, 3]]],
        },
        OpCase {
            name: "cross_entropy",
            b32: b_ce::<f32>,
            b64: b_ce::<f64>,
            shapes: vec![vec![vec![4, 5]], vec![vec![1, 3]], vec![vec![6, 10]]],
        },
        OpCase {
            name: "cross_entropy_weighted",
            b32: b_ce_weighted::<f32>,
            b64: b_ce_weighted::<f64>,
            shapes: vec![vec![vec![4, 5]], vec![vec![2, 3]], vec![vec![6, 4]]],
        },
        OpCase {
            name: "kl_divergence",
            b32: b_kl::<f32>,
            b64: b_kl::<f64>,
            shapes: vec![
                vec![vec![2, 4], vec![2, 4]],
                vec![vec![1, 7], vec![1, 7]],
                vec![vec![3, 3], vec![3, 3]],
            ],
        },
        OpCase {
            name: "attention_heads",
            b32: b_heads::<f32>,
            b64: b_heads::<f64>,
            shapes: vec![vec![vec![1, 3, 12]], vec![vec![2, 4, 6]], vec![vec![2, 2, 24]]],
        },
        OpCase {
            name: "tokens_select_broadcast",
            b32: b_tokens::<f32>,
            b64: b_tokens::<f64>,
            shapes: vec![
                vec![vec![2, 3, 4], vec![4], vec![4], vec![5, 4]],
                vec![vec![1, 2, 3], vec![3], vec![3], vec![4, 3]],
                vec![vec![3, 1, 2], vec![2], vec![2], vec![3, 2]],
            ],
        },
        OpCase {
            name: "gather_rows",
            b32: b_gather::<f32>,
            b64: b_gather::<f64>,
            shapes: vec![vec![vec![3, 4]], vec![vec![4, 1]], vec![vec![5, 2]]],
        },
        OpCase {
            name: "conv_pool",
            b32: b_conv::<f32>,
            b64: b_conv::<f64>,
            shapes: vec![
                vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
                vec![vec![2, 1, 4, 6], vec![2, 1, 3, 3], vec![2]],
                vec![vec![1, 3, 6, 6], vec![2, 3, 3, 3], vec![2]],
            ],
        },
        OpCase {
            name: "mean_reshape",
            b32: b_mean_reshape::<f32>,
            b64: b_mean_reshape::<f64>,
            shapes: vec![vec![vec![2, 3]], vec![vec![4]], vec![vec![1, 2, 2]]],
        },
    ]
}

pub fn op_case(name: &str) -> OpCase {
    op_cases().into_iter().find(|c| c.name == name).expect("known op")
}

/// Worst `(f32, f64)` relative errors of one op over its shape sets.
pub fn check_op(case: &OpCase) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for (s, input_shapes) in case.shapes.iter().enumerate() {
        let seed = 100 + s as u64 * 17;
        let inputs64: Vec<Tensor<f64>> = input_shapes
            .iter()
            .enumerate()
            .map(|(i, sh)| randn(sh, seed + i as u64))
            .collect();
        let inputs32: Vec<Tensor<f32>> = inputs64.iter().map(Tensor::cast).collect();
        worst.0 = worst.0.max(fd_check(case.b32, &inputs32, FD_H_F32));
        worst.1 = worst.1.max(fd_check(case.b64, &inputs64, FD_H_F64));
    }
    worst
}

pub fn tiny_config() -> ReViTConfig {
    ReViTConfig {
        image_size: 8,
        channels: 2,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 2,
        grids: vec![(2, 2), (1, 1)],
        dropout: 0.0,
        ln_eps: 1e-6,
        shared_embed: false,
    }
}

fn no_rng() -> Option<&'static mut ChaCha8Rng> {
    None
}

/// Class plus distillation-token cross-entropy at length `i`.
pub fn model_loss<T: Scalar>(
    model: &ReViT,
    store: &ParamStore<T>,
    img: &Tensor<T>,
    targets: &[usize],
    i: usize,
) -> (Graph<T>, Var) {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, img, i, true, no_rng()).unwrap();
    let a = g.cross_entropy(out.class_logits, targets).unwrap();
    let b = g.cross_entropy(out.distill_logits.unwrap(), targets).unwrap();
    let loss = g.add(a, b).unwrap();
    (g, loss)
}

/// Relative error of 20 sampled parameter gradients of a model taking
/// `[2, 2, 8, 8]` images, drawn over the length-`i` bank and the shared trunk.
pub fn full_model_fd<T: Scalar>(cfg: &ReViTConfig, h: f64, seed: u64, i: usize) -> f64 {
    let model = ReViT::new(cfg.clone()).unwrap();
    let mut store = perturbed::<T>(&model, seed, 0.5);
    let img = randn::<T>(&[2, 2, 8, 8], seed + 1);
    let targets = [0, 1];
    let (g, loss) = model_loss(&model, &store, &img, &targets, i);
    g.backward(loss, &mut store).unwrap();

    let mut ids = model.bank_param_ids(i);
    ids.extend(model.shared_param_ids());
    let mut r = rng(seed + 2);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..20 {
        let id = ids[r.random_range(0..ids.len())];
        let j = r.random_range(0..store.tensor(id).len());
        analytic.push(store.tensor(id).grad().unwrap()[j].to_f64().unwrap());
        let x = store.tensor(id).data()[j];
        let mut eval = |v: f64| {
            store.tensor_mut(id).data_mut()[j] = T::from_f64_lossy(v);
            let (g, loss) = model_loss(&model, &store, &img, &targets, i);
            g.value(loss).data()[0].to_f64().unwrap()
        };
        let x64 = x.to_f64().unwrap();
        numeric.push((eval(x64 + h) - eval(x64 - h)) / (2.0 * h));
        store.tensor_mut(id).data_mut()[j] = x;
    }
    rel_err(&analytic, &numeric)
}
