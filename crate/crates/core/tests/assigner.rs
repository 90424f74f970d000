mod common;

use rand::Rng;
use revit::assigner::{assign, train_tla, Tla, TlaConfig, TlaPlan};
use revit::data::{Dataset, Split};
use revit::labeling::{LabelEntry, LabelSet};
use revit::model::{count_flops, ReViTConfig};
use revit::numerics::{AdamWConfig, ParamStore, Tensor};
use revit::Error;

fn small_tla(k: usize) -> Tla {
    Tla::new(TlaConfig {
        image_size: 8,
        channels: 3,
        conv1_channels: 4,
        conv2_channels: 6,
        num_lengths: k,
    })
    .unwrap()
}

fn labelset(labels: &[usize], k: usize) -> LabelSet {
    let entries = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| LabelEntry {
            sample_id: i as u64,
            label: l,
            bitmap: (0..k).map(|j| j <= l).collect(),
        })
        .collect();
    LabelSet::new(k, entries).unwrap()
}

/// Images whose brightness band encodes the label.
fn banded(n: usize, k: usize, seed: u64) -> (Dataset, Vec<usize>) {
    let mut rng = common::rng(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut px = Vec::with_capacity(n * 3 * 64);
    for &l in &labels {
        let lo = l as f32 / k as f32;
        for _ in 0..3 * 64 {
            px.push(lo + rng.random::<f32>() / k as f32);
        }
    }
    let images = Tensor::from_vec(&[n, 3, 8, 8], px).unwrap();
    let ids = (0..n as u64).collect();
    let d = Dataset::new(images, vec![0; n], ids, 1, Split::Train).unwrap();
    (d, labels)
}

fn plan(epochs: usize, batch: usize) -> TlaPlan {
    TlaPlan {
        epochs,
        batch_size: batch,
        optimizer: AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        },
        seed: 3,
        class_weights: true,
    }
}

// ---------------------------------------------------------------- forward

#[test]
fn logits_shape_and_errors() {
    let tla = small_tla(3);
    let store = tla.init_params::<f32>(0);
    let x = common::randn::<f32>(&[5, 3, 8, 8], 1);
    assert_eq!(tla.logits(&store, &x).unwrap().shape(), &[5, 3]);
    let bad = common::randn::<f32>(&[5, 3, 8, 9], 1);
    assert!(matches!(tla.logits(&store, &bad), Err(Error::Dimension { .. })));
    let other = small_tla(4).init_params::<f32>(0);
    assert!(tla.check_store(&other).is_err());
    assert!(Tla::new(TlaConfig::new(8, 3, 1)).is_err());
}

#[test]
fn zero_image_zero_head_is_uniform() {
    let tla = small_tla(3);
    let mut store = tla.init_params::<f64>(4);
    store.get_mut("fc.weight").unwrap().data_mut().fill(0.0);
    let x = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
    let l = tla.logits(&store, &x).unwrap();
    assert!(l.data().iter().all(|&v| v == 0.0));
    // Uniform logits resolve to the largest length.
    assert_eq!(tla.assign_batch(&store, &x).unwrap(), vec![0, 0]);
}

type Img = Vec<Vec<Vec<f64>>>;

fn conv(x: &Img, w: &[f64], b: &[f64], cout: usize) -> Img {
    let (cin, h) = (x.len(), x[0].len());
    let ho = (h + 2 - 3) / 2 + 1;
    let mut out = vec![vec![vec![0.0; ho]; ho]; cout];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..ho {
                let mut s = b[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = (2 * oy + ky) as isize - 1;
                            let xx = (2 * ox + kx) as isize - 1;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= h as isize {
                                continue;
                            }
                            s += w[((o * cin + i) * 3 + ky) * 3 + kx] * x[i][y as usize][xx as usize];
                        }
                    }
                }
                out[o][oy][ox] = common::oracle::gelu(s);
            }
        }
    }
    out
}

fn oracle_logits(store: &ParamStore<f64>, image: &[f64], cfg: &TlaConfig) -> Vec<f64> {
    let s = cfg.image_size;
    let x: Img = (0..cfg.channels)
        .map(|c| {
            (0..s)
                .map(|y| image[(c * s + y) * s..(c * s + y + 1) * s].to_vec())
                .collect()
        })
        .collect();
    let p = |n| common::oracle::param(store, n);
    let h = conv(&x, &p("conv1.weight"), &p("conv1.bias"), cfg.conv1_channels);
    let h = conv(&h, &p("conv2.weight"), &p("conv2.bias"), cfg.conv2_channels);
    let pooled: Vec<f64> = h
        .iter()
        .map(|ch| ch.iter().flatten().sum::<f64>() / (ch.len() * ch.len()) as f64)
        .collect();
    common::oracle::affine(&pooled, &common::oracle::matrix(store, "fc.weight"), &p("fc.bias"))
}

#[test]
fn forward_matches_f64_oracle() {
    let tla = small_tla(3);
    let mut store = tla.init_params::<f64>(5);
    let mut rng = common::rng(6);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.tensor_mut(id).data_mut() {
            *v = rng.random_range(-0.7..0.7);
        }
    }
    let x = common::randn::<f64>(&[3, 3, 8, 8], 7);
    let got = tla.logits(&store, &x).unwrap();
    for b in 0..3 {
        let want = oracle_logits(&store, &x.data()[b * 192..(b + 1) * 192], tla.config());
        for j in 0..3 {
            let g = got.data()[b * 3 + j];
            assert!((g - want[j]).abs() < 1e-12, "row {b} col {j}: {g} vs {}", want[j]);
        }
    }
}

// ---------------------------------------------------------------- training

#[test]
fn separable_labels_reach_95_percent_in_200_steps() {
    let k = 3;
    let (data, labels) = banded(320, k, 8);
    let tla = small_tla(k);
    // 320 samples / batch 32 = 10 steps per epoch.
    let (_, report) = train_tla(
        &tla,
        tla.init_params::<f32>(9),
        &labelset(&labels, k),
        &data,
        &plan(20, 32),
    )
    .unwrap();
    assert_eq!(report.epoch_losses.len(), 20);
    assert!(report.accuracy() >= 0.95, "{}", report.to_text());
    let total: usize = report.confusion.iter().flatten().sum();
    assert_eq!(total, 320);
}

#[test]
fn single_class_labels_learn_constant() {
    let (data, _) = banded(64, 3, 10);
    let labels = vec![1; 64];
    let tla = small_tla(3);
    let (store, report) = train_tla(
        &tla,
        tla.init_params::<f32>(11),
        &labelset(&labels, 3),
        &data,
        &plan(5, 16),
    )
    .unwrap();
    assert_eq!(report.accuracy(), 1.0);
    assert_eq!(report.recall()[1], Some(1.0));
    assert_eq!(report.recall()[0], None);
    let idx: Vec<usize> = (0..64).collect();
    let (x, _) = data.batch::<f32>(&idx).unwrap();
    assert!(tla.assign_batch(&store, &x).unwrap().iter().all(|&a| a == 1));
}

#[test]
fn training_is_deterministic() {
    let (data, labels) = banded(96, 3, 12);
    let ls = labelset(&labels, 3);
    let tla = small_tla(3);
    let run = || train_tla(&tla, tla.init_params::<f32>(13), &ls, &data, &plan(3, 16)).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(a.values_bitwise_eq(&b));
    assert_eq!(ra, rb);
}

#[test]
fn empty_or_mismatched_labels_rejected() {
    let (data, labels) = banded(12, 3, 14);
    let tla = small_tla(3);
    let empty = LabelSet::new(3, vec![]).unwrap();
    let err = train_tla(&tla, tla.init_params::<f32>(0), &empty, &data, &plan(1, 4)).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    let short = labelset(&labels[..6], 3);
    assert!(train_tla(&tla, tla.init_params::<f32>(0), &short, &data, &plan(1, 4)).is_err());
}

// ---------------------------------------------------------------- assign

#[test]
fn assign_examples_and_ties() {
    assert_eq!(assign(&[2.0f32, 1.0, 0.0]), 0);
    assert_eq!(assign(&[1.0f32, 1.0, 0.0]), 0);
    assert_eq!(assign(&[0.0f32, 1.0, 1.0]), 1);
    assert_eq!(assign(&[0.0f32, 0.0, 3.0]), 2);
    assert_eq!(assign(&[5.0f64; 4]), 0);
}

#[test]
fn tie_break_never_exceeds_first_maximum() {
    let mut rng = common::rng(15);
    for _ in 0..500 {
        let k = rng.random_range(2..6);
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0..3) as f64).collect();
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let first = row.iter().position(|&v| v == max).unwrap();
        let a = assign(&row);
        assert!(a < k);
        assert_eq!(a, first, "{row:?}");
    }
}

#[test]
fn tla_flops_under_five_percent_of_largest_length() {
    let vit = ReViTConfig::desk_default(10);
    let tla = Tla::new(TlaConfig::new(vit.image_size, vit.channels, vit.grids.len())).unwrap();
    let largest = count_flops(&vit, 0, false).unwrap();
    let ratio = tla.flops() as f64 / largest as f64;
    assert!(ratio < 0.05, "TLA/ViT FLOPs ratio {ratio}");
    // Hand count for 32px, 3→8→16 channels, 3 lengths.
    let expect = 2 * 16 * 16 * 8 * 3 * 9 + 2 * 8 * 8 * 16 * 8 * 9 + 2 * 16 * 3;
    assert_eq!(tla.flops(), expect);
}
