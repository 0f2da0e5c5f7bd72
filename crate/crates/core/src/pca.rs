//! Spectral band reduction by principal component analysis.
//!
//! The covariance of mean-centred pixel spectra is diagonalised with a
//! cyclic Jacobi eigensolver; the top-`b` eigenvectors become the
//! projection.

use crate::data::HsiCube;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// Per-band mean, length `l`.
    pub mean: Vec<f64>,
    /// `b x l`, row-major; rows are orthonormal eigenvectors.
    pub components: Vec<f64>,
    /// Non-increasing, length `b`.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn input_bands(&self) -> usize {
        self.mean.len()
    }

    pub fn output_bands(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let l = self.input_bands();
        &self.components[k * l..(k + 1) * l]
    }

    /// Rounds every stored value through `f32`, matching what a checkpoint
    /// preserves.
    pub fn round_to_f32(&self) -> Self {
        let r = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
        Self {
            mean: r(&self.mean),
            components: r(&self.components),
            eigenvalues: r(&self.eigenvalues),
        }
    }

    /// Projects one spectrum onto the components.
    pub fn project(&self, spectrum: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = spectrum
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| x - m)
            .collect();
        (0..self.output_bands())
            .map(|k| {
                self.component(k)
                    .iter()
                    .zip(&centred)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Maps projected coordinates back to band space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, &c) in coords.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.component(k)) {
                *o += c * v;
            }
        }
        out
    }
}

/// Eigen-decomposition of a symmetric `n x n` matrix (row-major) by cyclic
/// Jacobi rotations. Returns eigenvalues sorted descending and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::shape(
            "symmetric_eigen",
            format!("{} values for {n}x{n}", matrix.len()),
        ));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let tol = 1e-14 * norm;
    const MAX_SWEEPS: usize = 100;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q].abs())
            .fold(0.0, f64::max);
        if off < tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < tol * 1e-3 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Data(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &i in &order {
        let mut col: Vec<f64> = (0..n).map(|k| v[k * n + i]).collect();
        // canonical sign: the largest-magnitude entry is positive
        let big = col
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.extend(col);
    }
    Ok((values, vectors))
}

/// Fits a `b`-component PCA over every pixel of `cube`, labeled or not.
pub fn pca_fit(cube: &HsiCube, b: usize) -> Result<PcaModel> {
    let l = cube.bands();
    if b == 0 || b > l {
        return Err(Error::Config(format!(
            "cannot keep {b} components of {l} bands"
        )));
    }
    let n = cube.pixels();
    if n < 2 || n < b + 1 {
        return Err(Error::Data(format!(
            "PCA with {b} components needs at least {} pixels, cube has {n}",
            (b + 1).max(2)
        )));
    }
    let centred: Vec<Vec<f64>> = (0..l)
        .map(|k| {
            let band = cube.band(k);
            let mean = band.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            band.iter().map(|&v| v as f64 - mean).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..l)
        .map(|k| cube.band(k).iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect();
    let denom = (n - 1) as f64;
    let mut cov = vec![0.0; l * l];
    for i in 0..l {
        for j in i..l {
            let c = centred[i]
                .iter()
                .zip(&centred[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom;
            cov[i * l + j] = c;
            cov[j * l + i] = c;
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, l)?;
    Ok(PcaModel {
        mean,
        components: vectors[..b * l].to_vec(),
        eigenvalues: values[..b].to_vec(),
    })
}

/// Projects every pixel spectrum of `cube` onto the model's components.
pub fn pca_transform(cube: &HsiCube, model: &PcaModel) -> Result<HsiCube> {
    let l = cube.bands();
    if l != model.input_bands() {
        return Err(Error::Data(format!(
            "cube has {l} bands but the PCA model expects {}",
            model.input_bands()
        )));
    }
    let n = cube.pixels();
    let b = model.output_bands();
    let mut out = vec![0.0f64; b * n];
    for k in 0..l {
        let band = cube.band(k);
        let mk = model.mean[k];
        for c in 0..b {
            let w = model.components[c * l + k];
            let dst = &mut out[c * n..(c + 1) * n];
            dst.iter_mut()
                .zip(band)
                .for_each(|(o, &x)| *o += w * (x as f64 - mk));
        }
    }
    HsiCube::new(
        cube.width(),
        cube.height(),
        b,
        out.into_iter().map(|v| v as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_from_pixels(pixels: &[Vec<f64>]) -> HsiCube {
        let l = pixels[0].len();
        let n = pixels.len();
        let mut values = vec![0.0f32; n * l];
        for (p, px) in pixels.iter().enumerate() {
            for (b, &v) in px.iter().enumerate() {
                values[b * n + p] = v as f32;
            }
        }
        HsiCube::new(n, 1, l, values).unwrap()
    }

    #[test]
    fn axis_aligned_variances() {
        // variances along e1, e2, e3 proportional to 4 : 1 : 0
        let mut px = Vec::new();
        for s1 in [-2.0, 2.0] {
            for s2 in [-1.0, 1.0] {
                px.push(vec![s1, s2, 5.0]);
            }
        }
        let model = pca_fit(&cube_from_pixels(&px), 2).unwrap();
        let c0 = model.component(0);
        assert!((c0[0].abs() - 1.0).abs() < 1e-9 && c0[1].abs() < 1e-9 && c0[2].abs() < 1e-9);
        assert!((model.eigenvalues[0] / model.eigenvalues[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn two_band_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let px: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let t: f64 = rng.random_range(-1.0..1.0);
                let e: f64 = rng.random_range(-0.2..0.2);
                vec![t, 0.6 * t + e]
            })
            .collect();
        let cube = cube_from_pixels(&px);
        let model = pca_fit(&cube, 1).unwrap();
        // independent closed form of the 2x2 covariance from the same f32 data
        let xs: Vec<(f64, f64)> = (0..100)
            .map(|i| (cube.get(0, i, 0) as f64, cube.get(0, i, 1) as f64))
            .collect();
        let (mx, my) = (
            xs.iter().map(|p| p.0).sum::<f64>() / 100.0,
            xs.iter().map(|p| p.1).sum::<f64>() / 100.0,
        );
        let a = xs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / 99.0;
        let c = xs.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / 99.0;
        let b = xs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / 99.0;
        let lambda = (a + c) / 2.0 + (((a - c) / 2.0).powi(2) + b * b).sqrt();
        let (vx, vy) = (b, lambda - a);
        let norm = (vx * vx + vy * vy).sqrt();
        let (vx, vy) = (vx / norm, vy / norm);
        let comp = model.component(0);
        let dot = comp[0] * vx + comp[1] * vy;
        assert!((dot.abs() - 1.0).abs() < 1e-6);
        assert!((model.eigenvalues[0] - lambda).abs() < 1e-9);
    }

    #[test]
    fn mean_spectrum_projects_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let model = pca_fit(&cube_from_pixels(&px), 3).unwrap();
        assert!(model.project(&model.mean).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn errors() {
        let cube = cube_from_pixels(&[vec![1.0, 2.0], vec![2.0, 3.0], vec![0.0, 1.0]]);
        assert!(pca_fit(&cube, 3).is_err());
        assert!(pca_fit(&cube, 0).is_err());
        let single = cube_from_pixels(&[vec![1.0, 2.0]]);
        assert!(pca_fit(&single, 1).is_err());
        let model = pca_fit(&cube, 1).unwrap();
        let other = cube_from_pixels(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]);
        assert!(pca_transform(&other, &model).is_err());
    }

    #[test]
    fn jacobi_on_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        let (vals, vecs) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[0] - h).abs() < 1e-12 && (vecs[1] - h).abs() < 1e-12);
    }
}
