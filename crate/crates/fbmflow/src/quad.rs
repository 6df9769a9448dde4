//! Quadrature rules used by the Volterra-kernel machinery and its oracles.
//!
//! Two rules live here: a Gauss-Jacobi rule for integrands with an algebraic
//! endpoint singularity `(1+x)^b`, built by Golub-Welsch from the Jacobi
//! recurrence, and a tanh-sinh (double-exponential) rule that tolerates
//! integrable singularities at both endpoints without knowing their exponents.

use nalgebra::DMatrix;

/// Gauss-Jacobi rule on `[-1, 1]` for the weight `(1 + x)^b` (Jacobi `a = 0`),
/// `b > -1`. Nodes and weights come from the eigendecomposition of the Jacobi
/// tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct GaussJacobi {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub exponent: f64,
}

impl GaussJacobi {
    pub fn new(n: usize, b: f64) -> Self {
        assert!(n >= 1, "need at least one node");
        assert!(b > -1.0, "Jacobi exponent must exceed -1");

        // Monic three-term recurrence for weight (1+x)^b on [-1,1]:
        //   alpha_k = b^2 / ((2k+b)(2k+b+2)),  beta_0 = 2^{b+1}/(b+1),
        //   beta_k  = 4 k^2 (k+b)^2 / ((2k+b)^2 (2k+b+1)(2k+b-1)),  k >= 1.
        let mu0 = 2f64.powf(b + 1.0) / (b + 1.0);
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n.saturating_sub(1)];
        for k in 0..n {
            let kf = k as f64;
            let denom = (2.0 * kf + b) * (2.0 * kf + b + 2.0);
            diag[k] = if denom == 0.0 { 0.0 } else { b * b / denom };
        }
        for k in 1..n {
            let kf = k as f64;
            let num = 4.0 * kf * kf * (kf + b) * (kf + b);
            let den = (2.0 * kf + b).powi(2) * (2.0 * kf + b + 1.0) * (2.0 * kf + b - 1.0);
            off[k - 1] = (num / den).sqrt();
        }

        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            jac[(k, k)] = diag[k];
        }
        for k in 0..n - 1 {
            jac[(k, k + 1)] = off[k];
            jac[(k + 1, k)] = off[k];
        }
        let eig = jac.symmetric_eigen();

        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let node = eig.eigenvalues[i];
                let first = eig.eigenvectors[(0, i)];
                (node, mu0 * first * first)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        GaussJacobi {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
            exponent: b,
        }
    }

    /// Integrate `w^b * f(w)` over `[0, upper]`; the `w^b` factor is the
    /// quadrature weight and must not be included in `f`.
    pub fn integrate_weighted<F: Fn(f64) -> f64>(&self, upper: f64, f: F) -> f64 {
        // w = upper (1+x)/2 maps the weight (1+x)^b to (2w/upper)^b.
        let half = 0.5 * upper;
        let scale = half.powf(self.exponent + 1.0);
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(half * (x + 1.0));
        }
        scale * acc
    }
}

/// Tanh-sinh quadrature of `f` over `(a, b)`. Converges exponentially for
/// analytic integrands and copes with integrable endpoint singularities, which
/// is exactly what the kernel-isometry integrals have at both ends.
pub fn tanh_sinh<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    assert!(b > a);
    let half = 0.5 * (b - a);
    // Distance to the nearer endpoint is computed from 1 - |tanh| directly;
    // forming x as midpoint + offset would cancel catastrophically right where
    // singular integrands need x - a (or b - x) most accurately.
    let eval = |t: f64| -> f64 {
        let y = std::f64::consts::FRAC_PI_2 * t.sinh();
        let em = (-2.0 * y.abs()).exp();
        let dist = half * 2.0 * em / (1.0 + em);
        if dist <= 0.0 {
            return 0.0;
        }
        let x = if t >= 0.0 { b - dist } else { a + dist };
        if x <= a || x >= b {
            return 0.0;
        }
        let cosh_y = y.cosh();
        let dx = std::f64::consts::FRAC_PI_2 * t.cosh() / (cosh_y * cosh_y);
        let v = f(x);
        if v.is_finite() {
            v * dx
        } else {
            0.0
        }
    };

    let t_max = 6.0;
    let mut h = 1.0;
    let mut sum = eval(0.0);
    let mut k = 1;
    while (k as f64) * h <= t_max {
        let t = k as f64 * h;
        sum += eval(t) + eval(-t);
        k += 1;
    }
    let mut prev = sum * h * half;

    for _level in 0..12 {
        h *= 0.5;
        // add the new midpoints (odd multiples of the new h)
        let mut j = 1;
        while (j as f64) * h <= t_max {
            let t = j as f64 * h;
            sum += eval(t) + eval(-t);
            j += 2;
        }
        let cur = sum * h * half;
        if (cur - prev).abs() <= rel_tol * cur.abs().max(1e-300) && _level >= 2 {
            return cur;
        }
        prev = cur;
    }
    prev
}
