//! Seeded class-conditional Gaussian-blob images.
//!
//! Each class owns a blob centre, width and colour; these prototypes are
//! fixed, so datasets drawn with different seeds share one distribution.
//! The seed only drives per-sample jitter, noise and ordering.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const CHANNELS: usize = 3;
const PROTOTYPE_SEED: u64 = 0x0b10_b5ee_d000_0001;

struct Prototype {
    cx: f64,
    cy: f64,
    sigma: f64,
    colour: [f64; CHANNELS],
}

fn prototypes(classes: usize, size: usize) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
    let s = size as f64;
    (0..classes)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / classes as f64;
            let radius = if k % 2 == 0 { 0.28 } else { 0.16 };
            let mut colour = [0.0; CHANNELS];
            for c in colour.iter_mut() {
                *c = rng.random_range(-1.0..1.0);
            }
            Prototype {
                cx: s * (0.5 + radius * angle.cos()),
                cy: s * (0.5 + radius * angle.sin()),
                sigma: s * (0.07 + 0.03 * (k % 3) as f64),
                colour,
            }
        })
        .collect()
}

/// `n` RGB images of `size`×`size` over `classes` balanced classes.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if classes == 0 || size == 0 || n < classes {
        return Err(Error::Validation(format!(
            "synthetic dataset needs n >= classes >= 1 and size >= 1 (n={n}, classes={classes}, size={size})"
        )));
    }
    let protos = prototypes(classes, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let jitter = Normal::new(0.0, 0.05 * size as f64).expect("valid std");
    let log_scale = Normal::new(0.0, 0.15).expect("valid std");
    let noise = Normal::new(0.0, 0.08).expect("valid std");
    let mut pixels = Vec::with_capacity(n * CHANNELS * size * size);
    for &label in &labels {
        let p = &protos[label];
        let cx = p.cx + jitter.sample(&mut rng);
        let cy = p.cy + jitter.sample(&mut rng);
        let scale: f64 = log_scale.sample(&mut rng);
        let sigma = p.sigma * scale.exp();
        let amp: f64 = rng.random_range(0.5..1.0);
        let background: f64 = rng.random_range(0.3..0.7);
        for colour in p.colour {
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let blob = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let v = background + 0.5 * amp * colour * blob + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let images = Tensor::from_vec(&[n, CHANNELS, size, size], pixels)?;
    let ids = (0..n as u64).collect();
    Dataset::new(images, labels, ids, classes, Split::Train)
}
