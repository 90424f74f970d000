//! Token-Length Assigner: a two-layer strided convolutional classifier that
//! predicts, per image, which token length to run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labeling::LabelSet;
use crate::numerics::{argmax, AdamWConfig, Conv2dGeometry, Graph, OptimizerState, ParamStore, Scalar, Tensor, Var};

const GEOM: Conv2dGeometry = Conv2dGeometry { stride: 2, padding: 1 };
const KERNEL: usize = 3;
const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlaConfig {
    pub image_size: usize,
    pub channels: usize,
    #[serde(default = "default_conv1")]
    pub conv1_channels: usize,
    #[serde(default = "default_conv2")]
    pub conv2_channels: usize,
    /// Number of token lengths `k`.
    pub num_lengths: usize,
}

fn default_conv1() -> usize {
    8
}
fn default_conv2() -> usize {
    16
}

impl TlaConfig {
    pub fn new(image_size: usize, channels: usize, num_lengths: usize) -> Self {
        Self {
            image_size,
            channels,
            conv1_channels: default_conv1(),
            conv2_channels: default_conv2(),
            num_lengths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("conv1_channels", self.conv1_channels),
            ("conv2_channels", self.conv2_channels),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("TLA {name} must be >= 1")));
            }
        }
        if self.num_lengths < 2 {
            return Err(Error::Validation("TLA needs at least 2 lengths".into()));
        }
        Ok(())
    }
}

fn conv_out(size: usize) -> usize {
    (size + 2 * GEOM.padding - KERNEL) / GEOM.stride + 1
}

/// The assigner architecture; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Tla {
    config: TlaConfig,
}

impl Tla {
    pub fn new(config: TlaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &TlaConfig {
        &self.config
    }

    pub fn num_lengths(&self) -> usize {
        self.config.num_lengths
    }

    /// `(name, shape)` of every parameter, in store order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        vec![
            (
                "conv1.weight".into(),
                vec![c.conv1_channels, c.channels, KERNEL, KERNEL],
            ),
            ("conv1.bias".into(), vec![c.conv1_channels]),
            (
                "conv2.weight".into(),
                vec![c.conv2_channels, c.conv1_channels, KERNEL, KERNEL],
            ),
            ("conv2.bias".into(), vec![c.conv2_channels]),
            ("fc.weight".into(), vec![c.conv2_channels, c.num_lengths]),
            ("fc.bias".into(), vec![c.num_lengths]),
        ]
    }

    /// Gaussian weights (std 0.1), zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_layout() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            store.insert(name, t).expect("unique names");
        }
        store
    }

    pub fn check_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let layout = self.param_layout();
        if store.len() != layout.len() {
            return Err(Error::Validation(format!(
                "TLA store has {} tensors, expected {}",
                store.len(),
                layout.len()
            )));
        }
        for ((_, name, t), (want, shape)) in store.iter().zip(&layout) {
            if name != want || t.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "TLA parameter `{name}` {:?}, expected `{want}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// `[b, c, h, w]` images to `[b, k]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Var> {
        let c = &self.config;
        let s = images.shape();
        let want = [c.channels, c.image_size, c.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::dim("tla_forward", s, &want));
        }
        let x = g.constant(images.clone());
        let w1 = g.param_named(store, "conv1.weight")?;
        let b1 = g.param_named(store, "conv1.bias")?;
        let w2 = g.param_named(store, "conv2.weight")?;
        let b2 = g.param_named(store, "conv2.bias")?;
        let wf = g.param_named(store, "fc.weight")?;
        let bf = g.param_named(store, "fc.bias")?;
        let h = g.conv2d(x, w1, b1, GEOM)?;
        let h = g.gelu(h);
        let h = g.conv2d(h, w2, b2, GEOM)?;
        let h = g.gelu(h);
        let h = g.spatial_mean(h)?;
        let y = g.matmul(h, wf)?;
        g.add_broadcast(y, bf)
    }

    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, store, images)?;
        Ok(g.value(y).clone())
    }

    /// Length index per image.
    pub fn assign_batch<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(store, images)?;
        Ok(logits.data().chunks(self.num_lengths()).map(assign).collect())
    }

    /// Analytic FLOPs of one forward (2 per multiply-add).
    pub fn flops(&self) -> u64 {
        let c = &self.config;
        let h1 = conv_out(c.image_size) as u64;
        let h2 = conv_out(conv_out(c.image_size)) as u64;
        let k2 = (KERNEL * KERNEL) as u64;
        let conv1 = 2 * h1 * h1 * c.conv1_channels as u64 * c.channels as u64 * k2;
        let conv2 = 2 * h2 * h2 * c.conv2_channels as u64 * c.conv1_channels as u64 * k2;
        let fc = 2 * c.conv2_channels as u64 * c.num_lengths as u64;
        conv1 + conv2 + fc
    }
}

/// Argmax of one logit row; ties go to the smaller index (more tokens).
pub fn assign<T: Scalar>(logits: &[T]) -> usize {
    argmax(logits)
}

/// Assigner training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlaPlan {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
    /// Weight each class by `n / (k · count)`.
    #[serde(default)]
    pub class_weights: bool,
}

impl TlaPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("TLA epochs and batch_size must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Confusion matrix (`[true][predicted]`) with derived per-class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TlaReport {
    pub confusion: Vec<Vec<usize>>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TlaReport {
    pub fn accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let hit: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Per predicted class; `None` when the class was never predicted.
    pub fn precision(&self) -> Vec<Option<f64>> {
        let k = self.confusion.len();
        (0..k)
            .map(|j| {
                let col: usize = (0..k).map(|i| self.confusion[i][j]).sum();
                (col > 0).then(|| self.confusion[j][j] as f64 / col as f64)
            })
            .collect()
    }

    /// Per true class; `None` when the class never occurs.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let mut out = format!("accuracy {:.4}\nclass precision recall  confusion\n", self.accuracy());
        let (p, r) = (self.precision(), self.recall());
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{i:>5} {:>9} {:>6}  {}\n",
                fmt(&p[i]),
                fmt(&r[i]),
                cells.join(" ")
            ));
        }
        out
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Confusion matrix of the assigner against `labels` on `data`.
pub fn evaluate_tla<T: Scalar>(
    tla: &Tla,
    store: &ParamStore<T>,
    labels: &LabelSet,
    data: &Dataset,
) -> Result<Vec<Vec<usize>>> {
    labels.check_covers(data)?;
    let k = tla.num_lengths();
    let truth = labels.labels();
    let mut confusion = vec![vec![0; k]; k];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (images, _) = data.batch::<T>(chunk)?;
        for (&s, p) in chunk.iter().zip(tla.assign_batch(store, &images)?) {
            confusion[truth[s]][p] += 1;
        }
    }
    Ok(confusion)
}

/// Cross-entropy training on `(image, length label)` pairs. The report's
/// confusion matrix is measured on the training data.
pub fn train_tla<T: Scalar>(
    tla: &Tla,
    mut store: ParamStore<T>,
    labels: &LabelSet,
    data: &Dataset,
    plan: &TlaPlan,
) -> Result<(ParamStore<T>, TlaReport)> {
    if labels.is_empty() {
        return Err(Error::Usage("empty label set".into()));
    }
    plan.validate()?;
    tla.check_store(&store)?;
    labels.check_covers(data)?;
    if labels.num_lengths() != tla.num_lengths() {
        return Err(Error::Validation(format!(
            "labels have {} lengths, TLA predicts {}",
            labels.num_lengths(),
            tla.num_lengths()
        )));
    }
    let truth = labels.labels();
    let weights = plan.class_weights.then(|| {
        let hist = labels.histogram();
        let n = labels.len() as f64;
        let k = tla.num_lengths() as f64;
        hist.iter()
            .map(|&c| if c == 0 { 0.0 } else { n / (k * c as f64) })
            .collect::<Vec<f64>>()
    });
    let mut opt = OptimizerState::new(plan.optimizer.clone(), &store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(plan.epochs);
    for _ in 0..plan.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(plan.batch_size) {
            let (images, _) = data.batch::<T>(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| truth[i]).collect();
            let mut g = Graph::new();
            let logits = tla.forward(&mut g, &store, &images)?;
            let loss = g.cross_entropy_weighted(logits, &targets, weights.as_deref())?;
            store.zero_grad();
            g.backward(loss, &mut store)?;
            opt.step(&mut store)?;
            total += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let confusion = evaluate_tla(tla, &store, labels, data)?;
    Ok((
        store,
        TlaReport {
            confusion,
            epoch_losses,
        },
    ))
}
