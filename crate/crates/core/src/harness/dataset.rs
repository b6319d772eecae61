//! Procedural oriented-grating images.
//!
//! Class `k` of `K` is a sinusoidal grating at angle `k·π/K`; everything
//! else about a sample is drawn at random, plus Gaussian pixel noise. The
//! random phase makes the class-conditional mean image nearly flat, so a
//! linear read-out of raw pixels does poorly while a small CNN that
//! measures local orientation energy separates the classes easily.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::kernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GratingSpec {
    pub size: usize,
    pub classes: usize,
    /// Spatial frequency range in cycles per pixel.
    pub freq: (f64, f64),
    pub contrast: (f64, f64),
    pub noise: f64,
    /// Standard deviation of a Gaussian window around a random centre, in
    /// pixels; `None` renders the grating over the whole image.
    pub envelope: Option<f64>,
}

impl Default for GratingSpec {
    fn default() -> Self {
        Self { size: 32, classes: 4, freq: (0.08, 0.3), contrast: (0.5, 1.0), noise: 0.5, envelope: Some(6.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Split { images: self.images.gather(&idx), labels: self.labels[..n].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
    pub seed: u64,
}

impl ToyDataset {
    /// Keeps the first `per_class` training images of every class. Classes
    /// are interleaved, so this is a prefix of the training split and the
    /// result is still balanced.
    pub fn with_train_per_class(&self, per_class: usize) -> ToyDataset {
        ToyDataset { train: self.train.head(per_class * self.classes), ..self.clone() }
    }
}

fn render(grating: &GratingSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = class as f64 * PI / grating.classes as f64;
    let f = rng.random_range(grating.freq.0..=grating.freq.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(grating.contrast.0..=grating.contrast.1);
    let noise = Normal::new(0.0, grating.noise).expect("finite noise level");
    let (c, s) = (theta.cos(), theta.sin());
    let margin = grating.size as f64 / 4.0;
    let cx = rng.random_range(margin..grating.size as f64 - margin);
    let cy = rng.random_range(margin..grating.size as f64 - margin);
    let mut img = Vec::with_capacity(grating.size * grating.size);
    for y in 0..grating.size {
        for x in 0..grating.size {
            let u = x as f64 * c + y as f64 * s;
            let window = grating.envelope.map_or(1.0, |sd| {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                (-d2 / (2.0 * sd * sd)).exp()
            });
            img.push(amp * window * (2.0 * PI * f * u + phase).sin() + noise.sample(rng));
        }
    }
    img
}

fn split(grating: &GratingSpec, per_class: usize, rng: &mut ChaCha8Rng) -> Split {
    let n = per_class * grating.classes;
    let mut data = Vec::with_capacity(n * grating.size * grating.size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % grating.classes;
        data.extend(render(grating, class, rng));
        labels.push(class);
    }
    Split { images: Tensor::from_vec([n, 1, grating.size, grating.size], data).expect("image dims"), labels }
}

/// Balanced train and test splits of `n_per_class` images per class each,
/// drawn from independent random streams.
pub fn make_toy_dataset(seed: u64, n_per_class: usize) -> ToyDataset {
    make_toy_dataset_with(seed, n_per_class, n_per_class, &GratingSpec::default())
}

pub fn make_toy_dataset_with(seed: u64, train_per_class: usize, test_per_class: usize, grating: &GratingSpec) -> ToyDataset {
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    ToyDataset {
        train: split(grating, train_per_class, &mut train_rng),
        test: split(grating, test_per_class, &mut test_rng),
        classes: grating.classes,
        seed,
    }
}
