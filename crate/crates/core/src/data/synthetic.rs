use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{DtsError, Result};
use crate::rng::{self, streams, DtsRng};

/// Isotropic Gaussian clusters, one per class. Classes `1..=k_seen` come
/// first, followed by the `k_unseen` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub k_seen: usize,
    pub k_unseen: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

const CENTER_RETRIES: usize = 500;
const SCALE_RESTARTS: usize = 30;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.k_seen < 2 {
        return Err(DtsError::validation("k_seen must be at least 2"));
    }
    if spec.dim < 2 {
        return Err(DtsError::validation("dim must be at least 2"));
    }
    if !(spec.separation > 0.0 && spec.noise > 0.0) {
        return Err(DtsError::validation(
            "separation and noise must be positive",
        ));
    }
    let mut rng = rng::stream(spec.seed, streams::SYNTHETIC);
    let classes = spec.k_seen + spec.k_unseen;
    let centers = place_centers(classes, spec.dim, spec.separation, &mut rng)?;

    let mut examples = Vec::with_capacity(classes * spec.per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let input = center
                .iter()
                .map(|mu| mu + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(Example {
                input,
                label: c + 1,
            });
        }
    }
    Dataset::new("synthetic", classes, examples, None)
}

/// Rejection-samples Gaussian centers until all pairs are at least
/// `separation` apart. Each restart widens the proposal scale by 20%.
fn place_centers(
    count: usize,
    dim: usize,
    separation: f64,
    rng: &mut DtsRng,
) -> Result<Vec<Vec<f64>>> {
    // Two draws at this scale sit about 1.25 * separation apart on average.
    let mut scale = 1.25 * separation / (2.0 * dim as f64).sqrt();
    for _ in 0..SCALE_RESTARTS {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
        'place: while centers.len() < count {
            for _ in 0..CENTER_RETRIES {
                let candidate: Vec<f64> = (0..dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if centers
                    .iter()
                    .all(|c| distance(c, &candidate) >= separation)
                {
                    centers.push(candidate);
                    continue 'place;
                }
            }
            break;
        }
        if centers.len() == count {
            return Ok(centers);
        }
        scale *= 1.2;
    }
    Err(DtsError::Generation(format!(
        "could not place {} centers {} apart in {} dimensions",
        count, separation, dim
    )))
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
