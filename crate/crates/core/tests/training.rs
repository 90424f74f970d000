mod common;

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use revit::data::synth_dataset;
use revit::model::{ReViT, ReViTConfig};
use revit::numerics::{Graph, ParamStore, Scalar, Tensor};
use revit::training::{
    accumulate_gradients, distillation_loss, mixed_token_train_step, parallel_train_step, train, trainer_optimizer,
    DistillConfig, DistillHead, LrSchedule, Replicas, TrainPlan, TRAIN_LOG_HEADER,
};
use revit::Error;

fn config(dropout: f64) -> ReViTConfig {
    ReViTConfig {
        image_size: 8,
        channels: 3,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        grids: vec![(4, 4), (2, 2), (1, 1)],
        dropout,
        ln_eps: 1e-6,
        shared_embed: false,
    }
}

fn plan(distill: Option<DistillConfig>) -> TrainPlan {
    TrainPlan {
        epochs: 1,
        batch_size: 6,
        optimizer: Default::default(),
        lr_schedule: LrSchedule::Constant,
        seed: 11,
        parallel: false,
        distill,
    }
}

fn tlsd(head: DistillHead) -> Option<DistillConfig> {
    Some(DistillConfig {
        tau: 0.9,
        lambda: 0.5,
        head,
    })
}

fn batch<T: Scalar>(n: usize, seed: u64) -> (Tensor<T>, Vec<usize>) {
    let data = synth_dataset(seed, n, 3, 8).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    data.batch(&idx).unwrap()
}

fn grads_by_name<T: Scalar>(store: &ParamStore<T>) -> HashMap<String, Option<Vec<f64>>> {
    store
        .iter()
        .map(|(_, name, t)| {
            let g = t.grad().map(|g| g.iter().map(|x| x.to_f64().unwrap()).collect());
            (name.to_string(), g)
        })
        .collect()
}

fn no_rng() -> Option<&'static mut ChaCha8Rng> {
    None
}

// ------------------------------------------------------------ distillation_loss

#[test]
fn distill_lambda_zero_is_cross_entropy() {
    let mut g = Graph::<f64>::new();
    let class = g.leaf(common::randn(&[4, 5], 1));
    let dist = g.leaf(common::randn(&[4, 5], 2));
    let teacher = g.leaf(common::randn(&[4, 5], 3));
    let targets = [0, 4, 2, 1];
    let cfg = DistillConfig::new(0.5, 0.0).unwrap();
    let l = distillation_loss(&mut g, class, dist, teacher, &targets, &cfg).unwrap();
    let ce = g.cross_entropy(class, &targets).unwrap();
    let (a, b) = (g.value(l).data()[0], g.value(ce).data()[0]);
    assert!((a - b).abs() < 1e-7, "{a} vs {b}");
}

#[test]
fn distill_identical_logits_zero_kl() {
    for lambda in [0.25, 0.5, 1.0] {
        let mut g = Graph::<f64>::new();
        let class = g.leaf(common::randn(&[3, 4], 4));
        let dist = g.leaf(common::randn(&[3, 4], 5));
        let teacher = g.constant(g.value(dist).clone());
        let targets = [1, 0, 3];
        let cfg = DistillConfig::new(0.9, lambda).unwrap();
        let l = distillation_loss(&mut g, class, dist, teacher, &targets, &cfg).unwrap();
        let ce = g.cross_entropy(class, &targets).unwrap();
        let want = (1.0 - lambda) * g.value(ce).data()[0];
        assert!((g.value(l).data()[0] - want).abs() < 1e-9);
    }
}

#[test]
fn distill_two_class_closed_form() {
    // softmax([1,0]) against softmax([0,1]): KL = p0·1 + p1·(−1) = tanh(1/2)
    let mut g = Graph::<f64>::new();
    let class = g.leaf(Tensor::from_vec(&[1, 2], vec![0.3, -0.2]).unwrap());
    let dist = g.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap());
    let teacher = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
    let cfg = DistillConfig::new(1.0, 1.0).unwrap();
    let l = distillation_loss(&mut g, class, dist, teacher, &[0], &cfg).unwrap();
    let e = std::f64::consts::E;
    let p = [e / (1.0 + e), 1.0 / (1.0 + e)];
    let q = [1.0 / (1.0 + e), e / (1.0 + e)];
    let want: f64 = (0..2).map(|j| p[j] * (p[j] / q[j]).ln()).sum();
    assert!((want - 0.5f64.tanh()).abs() < 1e-15);
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
}

#[test]
fn distill_general_oracle() {
    let z_c = common::randn::<f64>(&[2, 3], 6);
    let z_d = common::randn::<f64>(&[2, 3], 7);
    let z_t = common::randn::<f64>(&[2, 3], 8);
    let targets = [2, 0];
    let (tau, lambda) = (0.5, 0.3);
    let mut g = Graph::<f64>::new();
    let c = g.leaf(z_c.clone());
    let d = g.leaf(z_d.clone());
    let t = g.leaf(z_t.clone());
    let cfg = DistillConfig::new(tau, lambda).unwrap();
    let l = distillation_loss(&mut g, c, d, t, &targets, &cfg).unwrap();

    let sm = |z: &[f64]| common::oracle::softmax(&z.iter().map(|v| v / tau).collect::<Vec<_>>());
    let mut ce = 0.0;
    let mut kl = 0.0;
    for r in 0..2 {
        let row = &z_c.data()[r * 3..r * 3 + 3];
        ce -= common::oracle::softmax(row)[targets[r]].ln();
        let p = sm(&z_t.data()[r * 3..r * 3 + 3]);
        let q = sm(&z_d.data()[r * 3..r * 3 + 3]);
        kl += (0..3).map(|j| p[j] * (p[j] / q[j]).ln()).sum::<f64>();
    }
    let want = (1.0 - lambda) * ce / 2.0 + lambda * tau * tau * kl / 2.0;
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
}

#[test]
fn distill_teacher_gets_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.leaf(common::randn(&[3, 4], 9));
    let d = g.leaf(common::randn(&[3, 4], 10));
    let t = g.leaf(common::randn(&[3, 4], 11));
    let cfg = DistillConfig::new(0.9, 0.7).unwrap();
    let l = distillation_loss(&mut g, c, d, t, &[0, 1, 2], &cfg).unwrap();
    let grads = g.gradients(l).unwrap();
    assert!(grads.get(t).is_none_or(|gr| gr.iter().all(|v| *v == 0.0)));
    assert!(grads.get(d).is_some() && grads.get(c).is_some());
}

#[test]
fn distill_gradients_match_finite_differences() {
    fn build(g: &mut Graph<f64>, v: &[revit::numerics::Var]) -> revit::Result<revit::numerics::Var> {
        let t = g.constant(common::randn(&[3, 4], 12));
        let cfg = DistillConfig::new(0.5, 0.4).unwrap();
        distillation_loss(g, v[0], v[1], t, &[3, 1, 0], &cfg)
    }
    let inputs = [common::randn(&[3, 4], 13), common::randn(&[3, 4], 14)];
    let e = common::fd_check(build, &inputs, common::FD_H_F64);
    assert!(e < common::FD_TOL_F64, "{e}");
}

#[test]
fn distill_rejects_bad_parameters() {
    for (tau, lambda) in [(0.0, 0.5), (-1.0, 0.5), (1.0, -0.1), (1.0, 1.5), (f64::NAN, 0.5)] {
        assert!(matches!(DistillConfig::new(tau, lambda), Err(Error::Parameter(_))));
        let mut g = Graph::<f64>::new();
        let c = g.leaf(common::randn(&[1, 2], 1));
        let cfg = DistillConfig {
            tau,
            lambda,
            head: DistillHead::Token,
        };
        assert!(matches!(
            distillation_loss(&mut g, c, c, c, &[0], &cfg),
            Err(Error::Parameter(_))
        ));
    }
}

// ----------------------------------------------------- mixed_token_train_step

/// One length's loss built by hand from public model pieces, backpropagated
/// into its own copy of the store.
fn single_length_grads(
    model: &ReViT,
    store: &ParamStore<f64>,
    images: &Tensor<f64>,
    targets: &[usize],
    i: usize,
    distill: Option<&DistillConfig>,
) -> ParamStore<f64> {
    let mut own = store.clone();
    own.zero_grad();
    let teacher = model.class_logits(store, images, 0).unwrap();
    let mut g = Graph::new();
    let token = i > 0 && distill.is_some_and(|d| d.head == DistillHead::Token);
    let out = model.forward(&mut g, store, images, i, token, no_rng()).unwrap();
    let loss = match distill {
        Some(cfg) if i > 0 => {
            let t = g.constant(teacher);
            let student = out.distill_logits.unwrap_or(out.class_logits);
            distillation_loss(&mut g, out.class_logits, student, t, targets, cfg).unwrap()
        }
        _ => g.cross_entropy(out.class_logits, targets).unwrap(),
    };
    g.backward(loss, &mut own).unwrap();
    own
}

fn check_accumulation(head: DistillHead) {
    let model = ReViT::new(config(0.0)).unwrap();
    let store = model.init_params::<f64>(3);
    let (images, targets) = batch::<f64>(6, 21);
    let plan = plan(tlsd(head));

    let mut acc = store.clone();
    acc.zero_grad();
    accumulate_gradients(&model, &mut acc, &images, &targets, &plan, 0).unwrap();

    let per_length: Vec<_> = (0..3)
        .map(|i| single_length_grads(&model, &store, &images, &targets, i, plan.distill.as_ref()))
        .collect();
    let got = grads_by_name(&acc);
    let mut kinds_seen = [false; 3];
    let mut worst: f64 = 0.0;
    for (id, name, t) in store.iter() {
        let mut sum = vec![0.0; t.len()];
        let mut any = false;
        for own in &per_length {
            if let Some(g) = own.tensor(id).grad() {
                any = true;
                sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
        }
        match &got[name] {
            Some(g) => {
                assert!(any, "{name} has a gradient no single pass produced");
                for (a, b) in g.iter().zip(&sum) {
                    worst = worst.max((a - b).abs());
                }
                let kind = if name.contains("head") {
                    1
                } else if name.contains(".ln")
                    || name.starts_with("final_ln")
                    || name.starts_with("pos_")
                    || name.starts_with("patch_")
                {
                    2
                } else {
                    0
                };
                kinds_seen[kind] = true;
            }
            None => assert!(!any, "{name} lost its gradient"),
        }
    }
    assert!(worst < 1e-6, "max abs diff {worst}");
    assert_eq!(kinds_seen, [true; 3], "trunk, heads and banks all covered");

    // each pass touches only its own bank
    for (i, own) in per_length.iter().enumerate() {
        for j in 0..3 {
            for id in model.bank_param_ids(j) {
                assert_eq!(own.tensor(id).grad().is_some(), i == j, "{}", store.name(id));
            }
        }
    }
}

#[test]
fn accumulation_equals_sum_of_single_length_passes() {
    check_accumulation(DistillHead::Token);
}

#[test]
fn accumulation_equals_sum_single_head_variant() {
    check_accumulation(DistillHead::Class);
}

#[test]
fn accumulation_f32_close_to_f64_sum() {
    let model = ReViT::new(config(0.0)).unwrap();
    let store = model.init_params::<f64>(4);
    let (images, targets) = batch::<f64>(6, 22);
    let plan = plan(tlsd(DistillHead::Token));
    let mut ref_store = store.clone();
    accumulate_gradients(&model, &mut ref_store, &images, &targets, &plan, 0).unwrap();
    let mut s32 = store.cast::<f32>();
    accumulate_gradients(&model, &mut s32, &images.cast(), &targets, &plan, 0).unwrap();
    let a = grads_by_name(&ref_store);
    let b = grads_by_name(&s32);
    let worst = a
        .iter()
        .filter_map(|(n, g)| g.as_ref().map(|g| (g, b[n].as_ref().unwrap())))
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn teacher_path_carries_no_gradient() {
    // Teacher computed inside the same graph versus supplied as a constant.
    let model = ReViT::new(config(0.0)).unwrap();
    let store = model.init_params::<f64>(5);
    let (images, targets) = batch::<f64>(4, 23);
    let cfg = tlsd(DistillHead::Token).unwrap();

    let mut joined = store.clone();
    let mut g = Graph::new();
    let t_out = model.forward(&mut g, &store, &images, 0, false, no_rng()).unwrap();
    let s_out = model.forward(&mut g, &store, &images, 2, true, no_rng()).unwrap();
    let l = distillation_loss(
        &mut g,
        s_out.class_logits,
        s_out.distill_logits.unwrap(),
        t_out.class_logits,
        &targets,
        &cfg,
    )
    .unwrap();
    g.backward(l, &mut joined).unwrap();

    let plain = single_length_grads(&model, &store, &images, &targets, 2, Some(&cfg));
    for id in model.bank_param_ids(0) {
        assert!(joined.tensor(id).grad().is_none(), "{}", store.name(id));
    }
    let a = grads_by_name(&joined);
    let b = grads_by_name(&plain);
    for (name, g) in &a {
        match (g, &b[name]) {
            (Some(x), Some(y)) => assert_eq!(x, y, "{name}"),
            (None, None) => {}
            _ => panic!("{name}: gradient presence differs"),
        }
    }
}

#[test]
fn mixed_step_rejects_empty_batch() {
    let model = ReViT::new(config(0.0)).unwrap();
    let mut store = model.init_params::<f32>(0);
    let p = plan(None);
    let mut opt = trainer_optimizer(&p, &store).unwrap();
    let images = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
    let err = mixed_token_train_step(&model, &mut store, &mut opt, &images, &[], &p, 0).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
}

#[test]
fn degenerate_single_length_schedule_rejected() {
    let mut cfg = config(0.0);
    cfg.grids = vec![(4, 4)];
    assert!(ReViT::new(cfg).is_err());
}

#[test]
fn plan_validation() {
    let mut p = plan(None);
    p.validate().unwrap();
    p.batch_size = 0;
    assert!(p.validate().is_err());
    let mut p = plan(None);
    p.epochs = 0;
    assert!(p.validate().is_err());
    let p = plan(Some(DistillConfig {
        tau: 0.0,
        lambda: 0.5,
        head: DistillHead::Token,
    }));
    assert!(p.validate().is_err());
    let json = r#"{"epochs":2,"batch_size":8,"distill":{"tau":0.5,"lambda":0.5},"bogus":true}"#;
    assert!(serde_json::from_str::<TrainPlan>(json).is_err());
    let json = r#"{"epochs":2,"batch_size":8,"distill":{"tau":0.5,"lambda":0.5,"head":"class"},
        "lr_schedule":{"kind":"cosine","warmup_steps":3}}"#;
    let p: TrainPlan = serde_json::from_str(json).unwrap();
    assert_eq!(p.distill.unwrap().head, DistillHead::Class);
    assert_eq!(p.lr_schedule, LrSchedule::Cosine { warmup_steps: 3 });
}

#[test]
fn lr_schedule_shape() {
    let s = LrSchedule::Cosine { warmup_steps: 4 };
    assert_eq!(s.factor(0, 20), 0.25);
    assert_eq!(s.factor(3, 20), 1.0);
    assert_eq!(s.factor(4, 20), 1.0);
    assert!((s.factor(12, 20) - 0.5).abs() < 1e-12);
    assert!(s.factor(19, 20) > 0.0);
    assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
}

// --------------------------------------------------------- parallel_train_step

fn run_steps<T: Scalar>(parallel: Option<usize>, dropout: f64, steps: u64) -> ParamStore<T> {
    let model = ReViT::new(config(dropout)).unwrap();
    let store = model.init_params::<T>(6);
    let p = plan(tlsd(DistillHead::Token));
    let mut opt = trainer_optimizer(&p, &store).unwrap();
    let data = synth_dataset(24, 60, 3, 8).unwrap();
    let mut seq = store.clone();
    let mut replicas = Replicas::new(store, 3).unwrap();
    for step in 0..steps {
        let idx: Vec<usize> = (0..6).map(|j| (step as usize * 6 + j) % 60).collect();
        let (images, targets) = data.batch::<T>(&idx).unwrap();
        match parallel {
            None => {
                mixed_token_train_step(&model, &mut seq, &mut opt, &images, &targets, &p, step).unwrap();
            }
            Some(w) => {
                parallel_train_step(&model, &mut replicas, &mut opt, &images, &targets, &p, step, w).unwrap();
                replicas.check_identical().unwrap();
            }
        }
    }
    match parallel {
        None => seq,
        Some(_) => replicas.into_main(),
    }
}

#[test]
fn parallel_matches_sequential_f64_exactly() {
    let seq = run_steps::<f64>(None, 0.0, 10);
    for workers in [3, 2, 1] {
        let par = run_steps::<f64>(Some(workers), 0.0, 10);
        assert!(par.values_bitwise_eq(&seq), "workers={workers}");
    }
}

#[test]
fn parallel_matches_sequential_f32() {
    let seq = run_steps::<f32>(None, 0.0, 10);
    let par = run_steps::<f32>(Some(3), 0.0, 10);
    assert!(par.max_abs_value_diff(&seq) < 1e-6);
}

#[test]
fn parallel_matches_sequential_with_dropout() {
    let seq = run_steps::<f32>(None, 0.1, 4);
    let par = run_steps::<f32>(Some(3), 0.1, 4);
    assert!(par.values_bitwise_eq(&seq));
}

#[test]
fn parallel_rejects_divergent_replicas() {
    let model = ReViT::new(config(0.0)).unwrap();
    let store = model.init_params::<f32>(7);
    let p = plan(None);
    let mut opt = trainer_optimizer(&p, &store).unwrap();
    let mut replicas = Replicas::new(store, 3).unwrap();
    replicas.get_mut(2).get_mut("cls_token").unwrap().data_mut()[0] += 1.0;
    let (images, targets) = batch::<f32>(3, 25);
    let err = parallel_train_step(&model, &mut replicas, &mut opt, &images, &targets, &p, 0, 3).unwrap_err();
    assert!(matches!(err, Error::Consistency(_)), "{err}");
}

// ----------------------------------------------------------------------- train

fn memorization_plan(parallel: bool) -> TrainPlan {
    TrainPlan {
        epochs: 50,
        batch_size: 64,
        optimizer: revit::numerics::AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        },
        lr_schedule: LrSchedule::Constant,
        seed: 3,
        parallel,
        distill: tlsd(DistillHead::Token),
    }
}

#[test]
fn train_memorization_loss_decreases() {
    let model = ReViT::new(config(0.0)).unwrap();
    let data = synth_dataset(26, 64, 3, 8).unwrap();
    let (_, log) = train(&model, model.init_params::<f32>(8), &data, &memorization_plan(false), 1).unwrap();
    assert_eq!(log.step_losses.len(), 50);
    let first = log.step_losses[0][0];
    let last = log.step_losses[49][0];
    assert!(last < first, "{first} -> {last}");
    assert_eq!(log.rows.len(), 50 * 3);
}

#[test]
fn train_is_deterministic() {
    let model = ReViT::new(config(0.1)).unwrap();
    let data = synth_dataset(27, 30, 3, 8).unwrap();
    let mut p = plan(tlsd(DistillHead::Token));
    p.epochs = 2;
    let run = |p: &TrainPlan| {
        let (s, mut log) = train(&model, model.init_params::<f32>(9), &data, p, 2).unwrap();
        log.rows.iter_mut().for_each(|r| r.wall_ms = 0);
        (s, log)
    };
    let (s1, l1) = run(&p);
    let (s2, l2) = run(&p);
    assert!(s1.values_bitwise_eq(&s2));
    assert_eq!(l1, l2);
    p.parallel = true;
    let (s3, l3) = run(&p);
    assert!(s1.values_bitwise_eq(&s3));
    assert_eq!(l1, l3);
}

#[test]
fn train_lambda_zero_identical_banks_logs_every_length() {
    let model = ReViT::new(config(0.0)).unwrap();
    let mut store = model.init_params::<f32>(10);
    // copy bank 0's norms into the other banks (patch/pos shapes differ per length)
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.contains("ln") && n.contains(".0.")) {
        let src = store.get(n).unwrap().data().to_vec();
        for j in 1..3 {
            let dst = n
                .replace(".0.gamma", &format!(".{j}.gamma"))
                .replace(".0.beta", &format!(".{j}.beta"));
            store.get_mut(&dst).unwrap().data_mut().copy_from_slice(&src);
        }
    }
    let data = synth_dataset(28, 24, 3, 8).unwrap();
    let mut p = plan(Some(DistillConfig::new(1.0, 0.0).unwrap()));
    p.epochs = 2;
    let (_, log) = train(&model, store, &data, &p, 1).unwrap();
    assert_eq!(log.rows.len(), 6);
    for r in &log.rows {
        assert!(r.loss.is_finite() && (0.0..=1.0).contains(&r.acc));
    }
    let csv = log.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], TRAIN_LOG_HEADER);
    assert_eq!(lines.len(), 7);
    assert!(csv.ends_with('\n') && !csv.contains('\r'));
}

#[test]
fn train_rejects_store_of_other_model() {
    let model = ReViT::new(config(0.0)).unwrap();
    let mut other_cfg = config(0.0);
    other_cfg.embed_dim = 4;
    let other = ReViT::new(other_cfg).unwrap();
    let data = synth_dataset(29, 6, 3, 8).unwrap();
    assert!(train(&model, other.init_params::<f32>(0), &data, &plan(None), 1).is_err());
}
