//! Generic scalar arithmetic and forward-mode dual numbers.
//!
//! Everything downstream (vector fields, change-of-variables chains, flows)
//! is written against [`Scalar`] so that the same code path evaluates values,
//! first derivatives (`Dual<f64>`) and second derivatives
//! (`Dual<Dual<f64>>`). Directional derivatives of the deeply nested maps in
//! this crate are far too ill-conditioned for finite differences; duals give
//! them to machine precision.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::{Error, Result};

/// Field-like scalar. `re` extracts the underlying value component,
/// `scale` multiplies by an exact `f64` constant.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    fn from_f64(x: f64) -> Self;
    /// Value component, stripped of all derivative information.
    fn re(self) -> f64;
    fn scale(self, c: f64) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// Forward-mode dual number over any scalar; nests for higher derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<S> {
    pub v: S,
    pub d: S,
}

impl<S: Scalar> Dual<S> {
    /// Lift a constant: derivative part zero.
    #[inline]
    pub fn constant(v: S) -> Self {
        Dual { v, d: S::zero() }
    }
    /// Mark a value as the differentiation variable: derivative part one.
    #[inline]
    pub fn active(v: S) -> Self {
        Dual { v, d: S::one() }
    }
    /// Value and derivative with respect to the active variable.
    #[inline]
    pub fn parts(self) -> (S, S) {
        (self.v, self.d)
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Dual {
            v: self.v + rhs.v,
            d: self.d + rhs.d,
        }
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Dual {
            v: self.v - rhs.v,
            d: self.d - rhs.d,
        }
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Dual {
            v: self.v * rhs.v,
            d: self.v * rhs.d + self.d * rhs.v,
        }
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let v = self.v / rhs.v;
        Dual {
            v,
            d: (self.d - v * rhs.d) / rhs.v,
        }
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual {
            v: -self.v,
            d: -self.d,
        }
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual {
            v: S::from_f64(x),
            d: S::zero(),
        }
    }
    #[inline]
    fn re(self) -> f64 {
        self.v.re()
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual {
            v: self.v.scale(c),
            d: self.d.scale(c),
        }
    }
}

/// Derivative of a scalar function of one variable at `x`.
pub fn derivative<S: Scalar>(x: S, f: impl Fn(Dual<S>) -> Dual<S>) -> (S, S) {
    f(Dual::active(x)).parts()
}

/// Scalar Newton iteration with the derivative taken by dual numbers.
///
/// Convergence is judged on the value component; after it passes `tol` two
/// more iterations run so that any derivative payload carried inside `S`
/// settles as well (piggyback differentiation of the implicit function).
pub fn newton_scalar<S: Scalar>(
    context: &str,
    x0: S,
    tol: f64,
    max_iter: usize,
    f: impl Fn(Dual<S>) -> Dual<S>,
) -> Result<(S, usize)> {
    let mut x = x0;
    let mut settle = 0usize;
    let mut last_res = f64::INFINITY;
    for it in 0..max_iter {
        let (fv, fd) = f(Dual::active(x)).parts();
        let res = fv.re().abs();
        if !res.is_finite() {
            return Err(Error::NewtonDiverged {
                context: context.to_string(),
                residual: res,
                iters: it,
            });
        }
        if res < tol {
            settle += 1;
            if settle >= 3 {
                return Ok((x, it));
            }
        } else {
            settle = 0;
            if res > 1e4 * (last_res + 1.0) {
                return Err(Error::NewtonDiverged {
                    context: context.to_string(),
                    residual: res,
                    iters: it,
                });
            }
            last_res = res;
        }
        if fd.re().abs() < 1e-300 {
            return Err(Error::NewtonDiverged {
                context: context.to_string(),
                residual: res,
                iters: it,
            });
        }
        x = x - fv / fd;
    }
    let res = f(Dual::active(x)).parts().0.re().abs();
    if res < tol {
        Ok((x, max_iter))
    } else {
        Err(Error::NewtonDiverged {
            context: context.to_string(),
            residual: res,
            iters: max_iter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D = Dual<f64>;
    type DD = Dual<Dual<f64>>;

    #[test]
    fn dual_product_rule() {
        // d/dx [x^2 * (x+3)] = 3x^2 + 6x at x = 2 -> 24
        let x = D::active(2.0);
        let y = x * x * (x + D::from_f64(3.0));
        assert_eq!(y.v, 20.0);
        assert_eq!(y.d, 24.0);
    }

    #[test]
    fn dual_quotient_rule() {
        // d/dx [1/x] = -1/x^2 at x = 4
        let x = D::active(4.0);
        let y = D::from_f64(1.0) / x;
        assert!((y.v - 0.25).abs() < 1e-15);
        assert!((y.d + 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn nested_duals_give_second_derivative() {
        // f(x) = x^3: f''(2) = 12
        let x = DD::active(Dual::active(2.0));
        let y = x * x * x;
        assert!((y.v.v - 8.0).abs() < 1e-15);
        assert!((y.v.d - 12.0).abs() < 1e-15);
        assert!((y.d.v - 12.0).abs() < 1e-15);
        assert!((y.d.d - 12.0).abs() < 1e-15);
    }

    #[test]
    fn newton_finds_root_and_inner_derivative() {
        // Solve x^2 = a at a = 2; drive a with a dual and check dx/da = 1/(2 sqrt(a)).
        let a = D::active(2.0);
        let (x, iters) = newton_scalar("sqrt", D::from_f64(1.0), 1e-14, 50, |x| {
            x * x - Dual::constant(a)
        })
        .unwrap();
        assert!(iters < 20);
        assert!((x.v - 2f64.sqrt()).abs() < 1e-14);
        assert!((x.d - 0.5 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn newton_reports_divergence() {
        // x^2 + 1 = 0 has no real root.
        let r = newton_scalar("no-root", 3.0f64, 1e-14, 40, |x| {
            x * x + Dual::from_f64(1.0)
        });
        assert!(r.is_err());
    }
}
