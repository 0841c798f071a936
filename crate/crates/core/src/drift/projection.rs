use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DriftError;

/// Seeded Gaussian random projection from `input_dim` to `output_dim`
/// dimensions. Entries are i.i.d. Normal(0, 1/k); the matrix is generated
/// once and shared by reference and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjection {
    input_dim: usize,
    output_dim: usize,
    seed: u64,
    // input_dim × output_dim, row-major
    matrix: Vec<f64>,
}

impl RandomProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self, DriftError> {
        if output_dim == 0 || output_dim > input_dim {
            return Err(DriftError::DimensionMismatch {
                expected: input_dim,
                got: output_dim,
            });
        }
        let normal = Normal::new(0.0, (1.0 / output_dim as f64).sqrt()).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..input_dim * output_dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            input_dim,
            output_dim,
            seed,
            matrix,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, DriftError> {
        if x.len() != self.input_dim {
            return Err(DriftError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.output_dim];
        for (xi, row) in x.iter().zip(self.matrix.chunks(self.output_dim)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(out)
    }

    pub fn project_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DriftError> {
        xs.iter().map(|x| self.project(x)).collect()
    }
}

/// Convenience wrapper: project `vectors` to `k` dimensions with a fresh
/// matrix drawn from `seed`.
pub fn project_random(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>, DriftError> {
    let d = vectors.first().map_or(k, Vec::len);
    RandomProjection::new(d, k, seed)?.project_all(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::mmd::squared_distance;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_maps_to_zero() {
        let p = RandomProjection::new(5, 3, 9).unwrap();
        assert_eq!(p.project(&[0.0; 5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn seeded_and_repeatable() {
        let xs = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]];
        assert_eq!(project_random(&xs, 3, 4).unwrap(), project_random(&xs, 3, 4).unwrap());
        assert_ne!(project_random(&xs, 3, 4).unwrap(), project_random(&xs, 3, 5).unwrap());
    }

    #[test]
    fn dimension_errors() {
        assert!(RandomProjection::new(3, 4, 0).is_err());
        assert!(RandomProjection::new(3, 0, 0).is_err());
        let p = RandomProjection::new(3, 2, 0).unwrap();
        assert!(matches!(p.project(&[1.0]), Err(DriftError::DimensionMismatch { .. })));
    }

    #[test]
    fn distances_roughly_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let v: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let projected = project_random(&points, 20, 99).unwrap();
        let (mut ok, mut total) = (0, 0);
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let before = squared_distance(&points[i], &points[j]).sqrt();
                let after = squared_distance(&projected[i], &projected[j]).sqrt();
                let ratio = after / before;
                total += 1;
                if (0.5..=2.0).contains(&ratio) {
                    ok += 1;
                }
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
    }
}
