//! Fréchet distance between Gaussian fits of video embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;

/// Maps a clip to a fixed-length vector.
pub trait VideoEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, video: &[Image]) -> Result<Vec<f64>>;
}

/// Downsamples every frame to `grid x grid` and concatenates the temporal
/// mean with the mean absolute frame-to-frame change.
#[derive(Clone, Copy, Debug)]
pub struct ToyEmbedder {
    pub grid: usize,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl VideoEmbedder for ToyEmbedder {
    fn name(&self) -> &str {
        "toy"
    }

    fn embed(&self, video: &[Image]) -> Result<Vec<f64>> {
        if video.is_empty() {
            return Err(Error::validation("cannot embed an empty video"));
        }
        let g = self.grid;
        let small: Vec<Vec<f32>> = video.iter().map(|f| f.resize(g, g).data().to_vec()).collect();
        let d = small[0].len();
        let mut mean = vec![0.0; d];
        let mut change = vec![0.0; d];
        for (t, f) in small.iter().enumerate() {
            for k in 0..d {
                mean[k] += f[k] as f64 / small.len() as f64;
                if t > 0 {
                    change[k] += (f[k] - small[t - 1][k]).abs() as f64 / (small.len() - 1) as f64;
                }
            }
        }
        mean.extend(change);
        Ok(mean)
    }
}

/// Mean and unbiased covariance of row vectors.
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Protocol(format!(
            "Fréchet distance needs at least 2 samples per set, got {n}"
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Protocol("embeddings have inconsistent lengths".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let r = psd_sqrt(a);
    let inner = &r * b * &r;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of the product root is computed as the trace of the root of
/// the symmetric matrix `S1^(1/2) S2 S1^(1/2)`, which has the same
/// eigenvalues.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Protocol("Gaussian fits have different dimensions".into()));
    }
    // Both orderings agree in exact arithmetic; averaging them makes the
    // result symmetric in floating point too.
    let tr_root = 0.5 * (trace_sqrt_product(s1, s2) + trace_sqrt_product(s2, s1));
    let diff = mu1 - mu2;
    Ok(diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_root)
}

pub fn frechet_distance_of_embeddings(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(a)?;
    let (m2, s2) = gaussian_fit(b)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

pub fn frechet_video_distance(set_a: &[Vec<Image>], set_b: &[Vec<Image>], embedder: &dyn VideoEmbedder) -> Result<f64> {
    let embed = |set: &[Vec<Image>]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|v| {
                embedder.embed(v).map_err(|e| {
                    Error::Protocol(format!("embedder `{}` failed: {e}", embedder.name()))
                })
            })
            .collect()
    };
    frechet_distance_of_embeddings(&embed(set_a)?, &embed(set_b)?)
}
