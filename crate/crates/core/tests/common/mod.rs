#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revit::model::ReViT;
use revit::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use revit::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// `sum(out ⊙ R)` for a fixed pseudo-random `R`, so every output element
/// contributes a distinct weight to the scalar under test.
pub fn project<T: Scalar>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = g.constant(randn(&shape, 0xfeed));
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

pub type Builder<T> = fn(&mut Graph<T>, &[Var]) -> Result<Var>;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

fn eval<T: Scalar>(build: Builder<T>, inputs: &[Tensor<T>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("build");
    g.value(loss).data()[0].to_f64().unwrap()
}

/// Central finite differences against the tape's gradients. Returns the
/// worst per-input relative error.
pub fn fd_check<T: Scalar>(build: Builder<T>, inputs: &[Tensor<T>], h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("build");
    let grads = g.gradients(loss).expect("grads");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(gr) => gr.iter().map(|x| x.to_f64().unwrap()).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[i].data()[j].to_f64().unwrap();
            plus[i].data_mut()[j] = T::from_f64_lossy(x + h);
            minus[i].data_mut()[j] = T::from_f64_lossy(x - h);
            let hp = plus[i].data()[j].to_f64().unwrap() - x;
            let hm = x - minus[i].data()[j].to_f64().unwrap();
            numeric.push((eval(build, &plus) - eval(build, &minus)) / (hp + hm));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub const FD_H_F64: f64 = 1e-6;
pub const FD_H_F32: f64 = 1e-2;
pub const FD_TOL_F64: f64 = 1e-6;
pub const FD_TOL_F32: f64 = 1e-3;
/// Every parameter drawn from N(0, std²), with gains centred on one, so
/// biases and norms are exercised too.
pub fn perturbed<T: Scalar>(model: &ReViT, seed: u64, std: f64) -> ParamStore<T> {
    let mut store = model.init_params::<T>(seed);
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with(".gamma");
        for v in store.tensor_mut(id).data_mut() {
            let z: f64 = r.sample(rand_distr::StandardNormal);
            *v = T::from_f64_lossy(if gain { 1.0 + std * z } else { std * z });
        }
    }
    store
}

pub mod gradcheck;
pub mod oracle;
