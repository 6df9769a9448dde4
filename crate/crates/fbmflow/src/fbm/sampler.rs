//! Exact fBm samplers.
//!
//! Both samplers draw component-major: for a fixed path index, component 0
//! consumes the first `N` standard normals of the substream, component 1 the
//! next `N`, and so on. That ordering is part of the determinism contract.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use std::sync::Arc;

use super::{FbmPath, HurstParam, SeedSpec, TimeGrid};
use crate::error::{Error, Result};

/// Autocovariance of unit-spacing fractional Gaussian noise at lag `k`.
fn fgn_autocov(k: usize, h: f64) -> f64 {
    let k = k as f64;
    0.5 * ((k + 1.0).powf(2.0 * h) + (k - 1.0).abs().powf(2.0 * h) - 2.0 * k.powf(2.0 * h))
}

/// Default sampler: Cholesky factor of the increment covariance, computed
/// once per `(grid, H)` and shared across paths. The increment covariance is
/// far better conditioned than the path covariance, so this is robust up to
/// large `N` and `H` close to 1.
#[derive(Debug, Clone)]
pub struct CholeskySampler {
    grid: TimeGrid,
    hurst: HurstParam,
    components: usize,
    lower: DMatrix<f64>,
}

impl CholeskySampler {
    pub fn new(grid: TimeGrid, hurst: HurstParam, components: usize) -> Result<Self> {
        if components == 0 {
            return Err(Error::Domain("need at least one component".into()));
        }
        let n = grid.steps();
        let scale = grid.dt().powf(2.0 * hurst.value());
        let cov = DMatrix::from_fn(n, n, |i, j| {
            scale * fgn_autocov(i.abs_diff(j), hurst.value())
        });
        let chol = nalgebra::Cholesky::new(cov).ok_or_else(|| {
            Error::CovarianceNotPd(format!("N = {n}, H = {}", hurst.value()))
        })?;
        Ok(CholeskySampler {
            grid,
            hurst,
            components,
            lower: chol.l(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn sample(&self, seed: SeedSpec, path_index: u64) -> Result<FbmPath> {
        let n = self.grid.steps();
        let mut rng = seed.rng_for_path(path_index);
        let mut values = Vec::with_capacity(self.components);
        let mut z = vec![0.0f64; n];
        for _ in 0..self.components {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let mut comp = vec![0.0f64; n + 1];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += self.lower[(i, j)] * z[j];
                }
                comp[i + 1] = comp[i] + acc;
            }
            values.push(comp);
        }
        FbmPath::from_values(self.grid, values)
    }
}

/// Davies-Harte circulant-embedding sampler (optional fast path). Must match
/// the Cholesky sampler in distribution; see the KS test below.
pub struct DaviesHarteSampler {
    grid: TimeGrid,
    components: usize,
    sqrt_eig: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl DaviesHarteSampler {
    pub fn new(grid: TimeGrid, hurst: HurstParam, components: usize) -> Result<Self> {
        if components == 0 {
            return Err(Error::Domain("need at least one component".into()));
        }
        let n = grid.steps();
        let m = 2 * n;
        // first row of the circulant embedding of the fGn covariance
        let mut row: Vec<Complex<f64>> = Vec::with_capacity(m);
        for k in 0..=n {
            row.push(Complex::new(fgn_autocov(k, hurst.value()), 0.0));
        }
        for k in (1..n).rev() {
            row.push(Complex::new(fgn_autocov(k, hurst.value()), 0.0));
        }

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        let mut spectrum = row;
        fft.process(&mut spectrum);

        let mut sqrt_eig = Vec::with_capacity(m);
        for ev in &spectrum {
            let re = ev.re;
            if re < -1e-9 {
                return Err(Error::CirculantNotPd(re));
            }
            sqrt_eig.push(re.max(0.0).sqrt());
        }

        Ok(DaviesHarteSampler {
            grid,
            components,
            sqrt_eig,
            fft,
            scale: grid.dt().powf(hurst.value()),
        })
    }

    pub fn sample(&self, seed: SeedSpec, path_index: u64) -> Result<FbmPath> {
        let n = self.grid.steps();
        let m = 2 * n;
        let mut rng = seed.rng_for_path(path_index);
        let mut values = Vec::with_capacity(self.components);
        let norm = 1.0 / (m as f64).sqrt();
        for _ in 0..self.components {
            let mut w = vec![Complex::new(0.0, 0.0); m];
            let z0: f64 = StandardNormal.sample(&mut rng);
            w[0] = Complex::new(self.sqrt_eig[0] * z0, 0.0);
            let zn: f64 = StandardNormal.sample(&mut rng);
            w[n] = Complex::new(self.sqrt_eig[n] * zn, 0.0);
            for j in 1..n {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let c = self.sqrt_eig[j] * std::f64::consts::FRAC_1_SQRT_2;
                w[j] = Complex::new(c * a, c * b);
                w[m - j] = Complex::new(c * a, -c * b);
            }
            self.fft.process(&mut w);
            let mut comp = vec![0.0f64; n + 1];
            for i in 0..n {
                comp[i + 1] = comp[i] + self.scale * norm * w[i].re;
            }
            values.push(comp);
        }
        FbmPath::from_values(self.grid, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::fbm_covariance;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn determinism_same_seed_same_path() {
        let s = CholeskySampler::new(grid(64), HurstParam::new(0.75).unwrap(), 2).unwrap();
        let seed = SeedSpec::new(7);
        let a = s.sample(seed, 3).unwrap();
        let b = s.sample(seed, 3).unwrap();
        assert_eq!(a, b);
        let c = s.sample(seed, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_variance_matches_covariance() {
        // 1e4 paths, H = 0.75: Var(B_1) within 3 stderr of R(1,1) = 1.
        let h = HurstParam::new(0.75).unwrap();
        let s = CholeskySampler::new(grid(32), h, 1).unwrap();
        let seed = SeedSpec::new(42);
        let paths = 10_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for i in 0..paths {
            let p = s.sample(seed, i).unwrap();
            let v = p.value(0, 32);
            sum += v * v;
            sumsq += v.powi(4);
        }
        let nf = paths as f64;
        let mean = sum / nf;
        let stderr = ((sumsq / nf - mean * mean) / nf).sqrt();
        assert!(
            (mean - 1.0).abs() <= 3.0 * stderr,
            "Var(B_1) = {mean} +- {stderr}"
        );
    }

    #[test]
    fn brownian_mode_has_uncorrelated_increments() {
        // H = 1/2 oracle mode: lag-1 increment autocorrelation within 3 stderr of 0.
        let s = CholeskySampler::new(grid(16), HurstParam::brownian(), 1).unwrap();
        let seed = SeedSpec::new(11);
        let paths = 10_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for i in 0..paths {
            let p = s.sample(seed, i).unwrap();
            let d1 = p.value(0, 1) - p.value(0, 0);
            let d2 = p.value(0, 2) - p.value(0, 1);
            let prod = d1 * d2;
            sum += prod;
            sumsq += prod * prod;
        }
        let nf = paths as f64;
        let mean = sum / nf;
        let stderr = ((sumsq / nf - mean * mean) / nf).sqrt();
        assert!(mean.abs() <= 3.0 * stderr, "lag-1 cov = {mean} +- {stderr}");
    }

    #[test]
    fn components_are_uncorrelated_in_aggregate() {
        let h = HurstParam::new(0.8).unwrap();
        let s = CholeskySampler::new(grid(16), h, 2).unwrap();
        let seed = SeedSpec::new(5);
        let paths = 8_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for i in 0..paths {
            let p = s.sample(seed, i).unwrap();
            let prod = p.value(0, 16) * p.value(1, 16);
            sum += prod;
            sumsq += prod * prod;
        }
        let nf = paths as f64;
        let mean = sum / nf;
        let stderr = ((sumsq / nf - mean * mean) / nf).sqrt();
        assert!(mean.abs() <= 3.0 * stderr);
    }

    #[test]
    fn empirical_cross_covariance_on_subgrid() {
        let h = HurstParam::new(0.6).unwrap();
        let s = CholeskySampler::new(grid(16), h, 1).unwrap();
        let seed = SeedSpec::new(9);
        let paths = 10_000;
        let (i, j) = (4usize, 12usize);
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for p in 0..paths {
            let path = s.sample(seed, p).unwrap();
            let prod = path.value(0, i) * path.value(0, j);
            sum += prod;
            sumsq += prod * prod;
        }
        let nf = paths as f64;
        let mean = sum / nf;
        let stderr = ((sumsq / nf - mean * mean) / nf).sqrt();
        let want = fbm_covariance(i as f64 / 16.0, j as f64 / 16.0, h).unwrap();
        assert!((mean - want).abs() <= 3.0 * stderr);
    }

    #[test]
    fn davies_harte_matches_cholesky_distribution() {
        // Two-sample Kolmogorov-Smirnov on the terminal marginal.
        let h = HurstParam::new(0.75).unwrap();
        let g = grid(64);
        let chol = CholeskySampler::new(g, h, 1).unwrap();
        let dh = DaviesHarteSampler::new(g, h, 1).unwrap();
        let paths = 4_000;
        let mut a: Vec<f64> = (0..paths)
            .map(|i| chol.sample(SeedSpec::new(100), i).unwrap().value(0, 64))
            .collect();
        let mut b: Vec<f64> = (0..paths)
            .map(|i| dh.sample(SeedSpec::new(200), i).unwrap().value(0, 64))
            .collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut d: f64 = 0.0;
        let (mut ia, mut ib) = (0usize, 0usize);
        while ia < a.len() && ib < b.len() {
            if a[ia] <= b[ib] {
                ia += 1;
            } else {
                ib += 1;
            }
            let fa = ia as f64 / a.len() as f64;
            let fb = ib as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        // 1% critical value for the two-sample KS statistic
        let crit = 1.63 * ((2.0 / paths as f64) as f64).sqrt();
        assert!(d <= crit, "KS = {d:.4} > {crit:.4}");

        // and the DH marginal variance is right
        let var_b: f64 = b.iter().map(|x| x * x).sum::<f64>() / paths as f64;
        assert_relative_eq!(var_b, 1.0, max_relative = 0.1);
    }

    #[test]
    fn davies_harte_is_deterministic() {
        let h = HurstParam::new(0.9).unwrap();
        let dh = DaviesHarteSampler::new(grid(32), h, 2).unwrap();
        let x = dh.sample(SeedSpec::new(1), 5).unwrap();
        let y = dh.sample(SeedSpec::new(1), 5).unwrap();
        assert_eq!(x, y);
    }
}
