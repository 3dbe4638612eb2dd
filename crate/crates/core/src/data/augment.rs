use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ImageShape;
use crate::rng::DtsRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub input: Vec<f64>,
    pub mode: AugmentMode,
    pub source_index: usize,
}

/// Jitter scales are multiples of the per-feature standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_jitter: f64,
    pub strong_jitter: f64,
    pub mask_fraction: f64,
    /// Largest pixel shift for image-shaped inputs under strong augmentation.
    pub max_translate: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_jitter: 0.05,
            strong_jitter: 0.2,
            mask_fraction: 0.25,
            max_translate: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Augmenter {
    config: AugmentConfig,
    feature_std: Vec<f64>,
    image_shape: Option<ImageShape>,
}

impl Augmenter {
    pub fn new(config: AugmentConfig, feature_std: Vec<f64>, image_shape: Option<ImageShape>) -> Self {
        Augmenter {
            config,
            feature_std,
            image_shape,
        }
    }

    /// Estimates per-feature standard deviations from `inputs`.
    pub fn fit<R: AsRef<[f64]>>(
        config: AugmentConfig,
        inputs: &[R],
        image_shape: Option<ImageShape>,
    ) -> Self {
        let dim = inputs.first().map_or(0, |r| r.as_ref().len());
        let n = inputs.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in inputs {
            for (m, x) in mean.iter_mut().zip(row.as_ref()) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in inputs {
            for ((v, x), m) in var.iter_mut().zip(row.as_ref()).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let feature_std = var.into_iter().map(f64::sqrt).collect();
        Augmenter::new(config, feature_std, image_shape)
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    pub fn feature_std(&self) -> &[f64] {
        &self.feature_std
    }

    /// Number of coordinates zeroed by strong masking for a `dim`-vector.
    pub fn mask_count(&self, dim: usize) -> usize {
        (self.config.mask_fraction * dim as f64).round() as usize
    }

    pub fn augment(
        &self,
        input: &[f64],
        mode: AugmentMode,
        source_index: usize,
        rng: &mut DtsRng,
    ) -> AugmentedView {
        let mut x = input.to_vec();
        if let Some(shape) = self.image_shape {
            if rng.random_bool(0.5) {
                flip_horizontal(&mut x, shape);
            }
            if mode == AugmentMode::Strong {
                self.rand_augment(&mut x, shape, rng);
            }
        }
        let scale = match mode {
            AugmentMode::Weak => self.config.weak_jitter,
            AugmentMode::Strong => self.config.strong_jitter,
        };
        if scale > 0.0 {
            for (j, v) in x.iter_mut().enumerate() {
                let std = self.feature_std.get(j).copied().unwrap_or(1.0);
                *v += scale * std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if mode == AugmentMode::Strong {
            let count = self.mask_count(x.len());
            for j in index::sample(rng, x.len(), count) {
                x[j] = 0.0;
            }
        }
        AugmentedView {
            input: x,
            mode,
            source_index,
        }
    }

    pub fn augment_batch<R: AsRef<[f64]>>(
        &self,
        inputs: &[R],
        mode: AugmentMode,
        rng: &mut DtsRng,
    ) -> Vec<AugmentedView> {
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| self.augment(x.as_ref(), mode, i, rng))
            .collect()
    }

    /// Two randomly chosen photometric/geometric ops, RandAugment style.
    fn rand_augment(&self, x: &mut [f64], shape: ImageShape, rng: &mut DtsRng) {
        for _ in 0..2 {
            match rng.random_range(0..4) {
                0 => {
                    let shift = rng.random_range(-0.2..0.2);
                    x.iter_mut().for_each(|v| *v += shift);
                }
                1 => {
                    let factor = rng.random_range(0.7..1.3);
                    let mean = x.iter().sum::<f64>() / x.len() as f64;
                    x.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
                }
                2 => {
                    let t = self.config.max_translate as i64;
                    let dx = rng.random_range(-t..=t);
                    translate(x, shape, dx, 0);
                }
                _ => {
                    let t = self.config.max_translate as i64;
                    let dy = rng.random_range(-t..=t);
                    translate(x, shape, 0, dy);
                }
            }
        }
    }
}

fn flip_horizontal(x: &mut [f64], shape: ImageShape) {
    for c in 0..shape.channels {
        for r in 0..shape.height {
            let start = (c * shape.height + r) * shape.width;
            x[start..start + shape.width].reverse();
        }
    }
}

/// Shifts the image by `(dx, dy)` pixels, filling vacated pixels with zero.
fn translate(x: &mut [f64], shape: ImageShape, dx: i64, dy: i64) {
    if dx == 0 && dy == 0 {
        return;
    }
    let src = x.to_vec();
    let (h, w) = (shape.height as i64, shape.width as i64);
    for c in 0..shape.channels as i64 {
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = (r - dy, col - dx);
                let dst = ((c * h + r) * w + col) as usize;
                x[dst] = if (0..h).contains(&sr) && (0..w).contains(&sc) {
                    src[((c * h + sr) * w + sc) as usize]
                } else {
                    0.0
                };
            }
        }
    }
}
