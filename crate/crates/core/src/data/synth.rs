use super::{DataError, Dataset, Result};
use crate::rng::Rng;

const PLACEMENT_TRIES: usize = 10_000;

/// Isotropic unit-variance Gaussian classes around seeded centroids that are
/// pairwise at least `sep` apart. Samples are class-major, `per_class` each.
pub fn synth_gaussian(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(sep > 0.0) || dim == 0 || num_classes == 0 {
        return Err(DataError::InvalidSpec(
            "synthetic source needs sep > 0, dim > 0 and at least one class".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    // Centroid spread chosen so the typical pairwise distance is 1.5·sep.
    let spread = 1.5 * sep / (2.0 * dim as f64).sqrt();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let c: Vec<f64> = (0..dim).map(|_| rng.normal() * spread).collect();
            let ok = centroids.iter().all(|o| {
                o.iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    >= sep
            });
            if ok {
                centroids.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::InfeasibleSeparation {
                classes: num_classes,
                dim,
                sep,
            });
        }
    }
    let mut inputs = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (label, c) in centroids.iter().enumerate() {
        for _ in 0..per_class {
            inputs.extend(c.iter().map(|m| m + rng.normal()));
            labels.push(label);
        }
    }
    Ok(Dataset {
        sample_shape: vec![dim],
        inputs,
        labels,
        num_classes,
    })
}
