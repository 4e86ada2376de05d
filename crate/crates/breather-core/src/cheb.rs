//! Tensor Chebyshev interpolation on a square box, used to tabulate the
//! per-step slice residuals of the normal form chain. Values and first
//! derivatives are read from one shared coefficient tensor, so consumers that
//! pair a function with its exact gradient (the generating-function updates)
//! stay consistent to machine precision with each other.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Chebyshev-Gauss nodes of the first kind on [-1, 1], descending.
pub fn cheb_nodes(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (std::f64::consts::PI * (2 * i + 1) as f64 / (2 * n) as f64).cos())
        .collect()
}

/// A vector-valued function of two variables on [-b, b]^2, stored as one
/// Chebyshev coefficient tensor per component.
#[derive(Debug, Clone)]
pub struct ChebTable2 {
    pub n: usize,
    pub half_width: f64,
    pub n_components: usize,
    /// coeff[c][p][q] flattened; the p=0 / q=0 halving of the cosine
    /// transform is folded in, so evaluation is a plain double sum.
    coeff: Vec<f64>,
}

impl ChebTable2 {
    /// Samples `f` on the tensor node grid (in parallel) and transforms to
    /// coefficient space. `f(x, y)` must return `n_components` values.
    pub fn build<F>(n: usize, half_width: f64, n_components: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> Result<Vec<f64>> + Sync,
    {
        if n < 2 || n_components == 0 || !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidMode {
                mode: n,
                reason: format!("table needs n >= 2 components >= 1, box width {half_width}"),
            });
        }
        let nodes = cheb_nodes(n);
        let values: Vec<Vec<f64>> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                f(half_width * nodes[i], half_width * nodes[j])
            })
            .collect::<Result<_>>()?;
        Self::from_samples(n, half_width, n_components, values)
    }

    /// Builds the table from precomputed node samples, laid out as
    /// values[i * n + j] = f(b x_i, b x_j) with x from [`cheb_nodes`].
    pub fn from_samples(
        n: usize,
        half_width: f64,
        n_components: usize,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if n < 2 || n_components == 0 || !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidMode {
                mode: n,
                reason: format!("table needs n >= 2 components >= 1, box width {half_width}"),
            });
        }
        if values.len() != n * n
            || values
                .iter()
                .any(|v| v.len() != n_components || v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Overflow {
                context: "table samples (wrong shape or non-finite)".into(),
                value: f64::NAN,
            });
        }
        let nodes = cheb_nodes(n);

        // T_p at the nodes; t[p][i] = T_p(x_i).
        let mut t = vec![vec![0.0; n]; n];
        for (i, &x) in nodes.iter().enumerate() {
            t[0][i] = 1.0;
            if n > 1 {
                t[1][i] = x;
            }
            for p in 2..n {
                t[p][i] = 2.0 * x * t[p - 1][i] - t[p - 2][i];
            }
        }

        let mut coeff = vec![0.0; n_components * n * n];
        let norm = 4.0 / (n * n) as f64;
        for c in 0..n_components {
            // Contract rows first: partial[p][j] = sum_i T_p(x_i) F(i, j).
            let mut partial = vec![0.0; n * n];
            for p in 0..n {
                for i in 0..n {
                    let tpi = t[p][i];
                    for j in 0..n {
                        partial[p * n + j] += tpi * values[i * n + j][c];
                    }
                }
            }
            for p in 0..n {
                for q in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += partial[p * n + j] * t[q][j];
                    }
                    let mut w = norm;
                    if p == 0 {
                        w *= 0.5;
                    }
                    if q == 0 {
                        w *= 0.5;
                    }
                    coeff[(c * n + p) * n + q] = s * w;
                }
            }
        }
        Ok(ChebTable2 {
            n,
            half_width,
            n_components,
            coeff,
        })
    }

    fn check_domain<S: Scalar>(&self, x: S, y: S) -> Result<()> {
        let b = self.half_width * (1.0 + 1e-9);
        for (v, name) in [(x.re(), "x"), (y.re(), "y")] {
            if !(v.is_finite() && v.abs() <= b) {
                return Err(Error::DomainExceeded {
                    context: format!("table axis {name}"),
                    value: v,
                    bound: self.half_width,
                });
            }
        }
        Ok(())
    }

    /// Values, d/dx, and d/dy of every component at one point. Generic over
    /// the scalar so dual numbers ride through for higher derivatives.
    pub fn eval_grad<S: Scalar>(&self, x: S, y: S) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
        self.check_domain(x, y)?;
        let n = self.n;
        let u = x.scale(1.0 / self.half_width);
        let v = y.scale(1.0 / self.half_width);
        // T_p and the derivative weights T_p' = p U_{p-1} along each axis.
        let mut tu = vec![S::zero(); n];
        let mut du = vec![S::zero(); n];
        let mut tv = vec![S::zero(); n];
        let mut dv = vec![S::zero(); n];
        fill_cheb(&mut tu, &mut du, u);
        fill_cheb(&mut tv, &mut dv, v);
        let inv_b = 1.0 / self.half_width;

        let mut vals = vec![S::zero(); self.n_components];
        let mut dxs = vec![S::zero(); self.n_components];
        let mut dys = vec![S::zero(); self.n_components];
        for c in 0..self.n_components {
            let block = &self.coeff[c * n * n..(c + 1) * n * n];
            let mut val = S::zero();
            let mut dx = S::zero();
            let mut dy = S::zero();
            for p in 0..n {
                let mut row_v = S::zero();
                let mut row_d = S::zero();
                for q in 0..n {
                    let cpq = block[p * n + q];
                    row_v = row_v + tv[q].scale(cpq);
                    row_d = row_d + dv[q].scale(cpq);
                }
                val = val + tu[p] * row_v;
                dx = dx + du[p] * row_v;
                dy = dy + tu[p] * row_d;
            }
            vals[c] = val;
            dxs[c] = dx.scale(inv_b);
            dys[c] = dy.scale(inv_b);
        }
        Ok((vals, dxs, dys))
    }

    /// Values only (same tensor, cheaper loop).
    pub fn eval<S: Scalar>(&self, x: S, y: S) -> Result<Vec<S>> {
        self.check_domain(x, y)?;
        let n = self.n;
        let u = x.scale(1.0 / self.half_width);
        let v = y.scale(1.0 / self.half_width);
        let mut tu = vec![S::zero(); n];
        let mut tv = vec![S::zero(); n];
        let mut scratch = vec![S::zero(); n];
        fill_cheb(&mut tu, &mut scratch, u);
        fill_cheb(&mut tv, &mut scratch, v);
        let mut vals = vec![S::zero(); self.n_components];
        for c in 0..self.n_components {
            let block = &self.coeff[c * n * n..(c + 1) * n * n];
            let mut val = S::zero();
            for p in 0..n {
                let mut row_v = S::zero();
                for q in 0..n {
                    row_v = row_v + tv[q].scale(block[p * n + q]);
                }
                val = val + tu[p] * row_v;
            }
            vals[c] = val;
        }
        Ok(vals)
    }

    /// Largest absolute interpolation defect of component values against `f`
    /// at quasi-random off-grid points; the build-time sanity probe.
    pub fn sample_defect<F>(&self, f: F, samples: usize) -> Result<f64>
    where
        F: Fn(f64, f64) -> Result<Vec<f64>>,
    {
        let mut worst = 0.0f64;
        // Low-discrepancy points via the fractional golden ratio walk.
        let phi = 0.618_033_988_749_894_9;
        let (mut a, mut b) = (0.137, 0.718);
        for _ in 0..samples {
            a = (a + phi) % 1.0;
            b = (b + phi * phi) % 1.0;
            let x = self.half_width * (2.0 * a - 1.0);
            let y = self.half_width * (2.0 * b - 1.0);
            let exact = f(x, y)?;
            let got = self.eval::<f64>(x, y)?;
            for (e, g) in exact.iter().zip(&got) {
                worst = worst.max((e - g).abs());
            }
        }
        Ok(worst)
    }
}

fn fill_cheb<S: Scalar>(t: &mut [S], d: &mut [S], u: S) {
    let n = t.len();
    t[0] = S::one();
    d[0] = S::zero();
    if n == 1 {
        return;
    }
    t[1] = u;
    d[1] = S::one();
    // U_{p-1} recurrence rides along: d[p] = p * U_{p-1}(u).
    let mut u_prev = S::one(); // U_0
    let mut u_cur = u.scale(2.0); // U_1
    for p in 2..n {
        t[p] = u.scale(2.0) * t[p - 1] - t[p - 2];
        d[p] = u_cur.scale(p as f64);
        let u_next = u.scale(2.0) * u_cur - u_prev;
        u_prev = u_cur;
        u_cur = u_next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Dual;

    fn poly(x: f64, y: f64) -> Result<Vec<f64>> {
        Ok(vec![x * x * x * y - 2.0 * y * y + 0.5, x - y * x * y])
    }

    #[test]
    fn reproduces_polynomials_exactly() {
        let t = ChebTable2::build(8, 2.5, 2, poly).unwrap();
        assert!(t.sample_defect(poly, 50).unwrap() < 1e-12);
    }

    #[test]
    fn gradients_match_hand_derivatives() {
        let t = ChebTable2::build(8, 2.5, 2, poly).unwrap();
        let (v, dx, dy) = t.eval_grad::<f64>(1.3, -0.7).unwrap();
        let x = 1.3;
        let y = -0.7;
        assert!((v[0] - (x * x * x * y - 2.0 * y * y + 0.5)).abs() < 1e-12);
        assert!((dx[0] - 3.0 * x * x * y).abs() < 1e-11);
        assert!((dy[0] - (x * x * x - 4.0 * y)).abs() < 1e-11);
        assert!((dx[1] - (1.0 - y * y)).abs() < 1e-11);
        assert!((dy[1] - (-2.0 * x * y)).abs() < 1e-11);
    }

    #[test]
    fn dual_evaluation_carries_the_same_derivative() {
        let t = ChebTable2::build(10, 1.5, 2, poly).unwrap();
        let x = Dual::active(0.4);
        let y = Dual::constant(-1.1);
        let (v, dx, _dy) = t.eval_grad::<Dual<f64>>(x, y).unwrap();
        // Dual derivative of the value equals the tensor's dx output.
        assert!((v[0].d - dx[0].v).abs() < 1e-12);
        assert!((v[1].d - dx[1].v).abs() < 1e-12);
    }

    #[test]
    fn rejects_points_outside_the_box() {
        let t = ChebTable2::build(6, 1.0, 2, poly).unwrap();
        assert!(t.eval::<f64>(1.2, 0.0).is_err());
        assert!(t.eval_grad::<f64>(0.0, -1.4).is_err());
    }
}
