//! Finite-dimensional `ℓ^p` geometry: norms, the dual pairing, the power
//! functional `φ_p = ‖·‖^p / p`, generalized duality maps and the Xu gap.
//!
//! Densities live in `X = ℓ^p(M)` and potentials in `X* = ℓ^{p*}(M)`. All
//! operations here are pure and allocation-light; they are called in the inner
//! loops of every other module.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use gauss_quad::GaussLegendre;
use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("space dimension must be positive")]
    EmptySpace,
    #[error("exponent p = {0} is outside [2, inf)")]
    InvalidExponent(f64),
}

/// Dimension and exponent of the density space `X = ℓ^p(M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    dim: usize,
    p: f64,
}

impl SpaceSpec {
    pub fn new(dim: usize, p: f64) -> Result<Self, GeometryError> {
        if dim == 0 {
            return Err(GeometryError::EmptySpace);
        }
        if !(p.is_finite() && p >= 2.0) {
            return Err(GeometryError::InvalidExponent(p));
        }
        Ok(Self { dim, p })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Hölder conjugate exponent of `p`.
    pub fn p_star(&self) -> f64 {
        conjugate_exponent(self.p)
    }

    /// Weight of `φ_{p*}` on the potential side of a pMY regularization with
    /// primal penalty `ε⁻¹ φ_p`: `(ε⁻¹ φ_p)^∧ = −ε^{p*−1} φ_{p*}`.
    pub fn dual_weight(&self, eps: f64) -> f64 {
        eps.powf(self.p_star() - 1.0)
    }

    pub fn norm(&self, x: &Quasidensity) -> f64 {
        norm_p(x.as_slice(), self.p)
    }

    pub fn dual_norm(&self, xs: &Potential) -> f64 {
        norm_p(xs.as_slice(), self.p_star())
    }

    pub fn check_density(&self, x: &Quasidensity) -> Result<(), GeometryError> {
        check_len(self.dim, x.len())
    }

    pub fn check_potential(&self, xs: &Potential) -> Result<(), GeometryError> {
        check_len(self.dim, xs.len())
    }
}

pub fn conjugate_exponent(p: f64) -> f64 {
    p / (p - 1.0)
}

fn check_len(expected: usize, actual: usize) -> Result<(), GeometryError> {
    if expected == actual {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch { expected, actual })
    }
}

macro_rules! lattice_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub DVector<f64>);

        impl $name {
            pub fn zeros(dim: usize) -> Self {
                Self(DVector::zeros(dim))
            }

            pub fn from_vec(entries: Vec<f64>) -> Self {
                Self(DVector::from_vec(entries))
            }

            pub fn from_slice(entries: &[f64]) -> Self {
                Self(DVector::from_column_slice(entries))
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice()
            }

            pub fn to_vec(&self) -> Vec<f64> {
                self.0.as_slice().to_vec()
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                (&self.0 - &other.0).amax()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }

        impl Add for &$name {
            type Output = $name;
            fn add(self, rhs: Self) -> $name {
                $name(&self.0 + &rhs.0)
            }
        }

        impl Sub for &$name {
            type Output = $name;
            fn sub(self, rhs: Self) -> $name {
                $name(&self.0 - &rhs.0)
            }
        }

        impl Mul<f64> for &$name {
            type Output = $name;
            fn mul(self, rhs: f64) -> $name {
                $name(&self.0 * rhs)
            }
        }

        impl Neg for &$name {
            type Output = $name;
            fn neg(self) -> $name {
                $name(-&self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "(")?;
                for (k, v) in self.0.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, ")")
            }
        }
    };
}

lattice_vector!(
    /// Element of `X`: site occupations, possibly shifted off the physical set.
    Quasidensity
);
lattice_vector!(
    /// Element of `X*`: a one-body potential on the lattice sites.
    Potential
);

/// `⟨x*, x⟩ = Σ_k x*_k x_k`.
pub fn pairing(xs: &Potential, x: &Quasidensity) -> Result<f64, GeometryError> {
    check_len(xs.len(), x.len())?;
    Ok(xs.0.dot(&x.0))
}

/// Plain `ℓ^q` norm of a slice.
pub fn norm_p(x: &[f64], q: f64) -> f64 {
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    if q == 2.0 {
        let s: f64 = x.iter().map(|v| (v / scale).powi(2)).sum();
        return scale * s.sqrt();
    }
    let s: f64 = x.iter().map(|v| (v.abs() / scale).powf(q)).sum();
    scale * s.powf(1.0 / q)
}

/// `φ_q(x) = ‖x‖_q^q / q`.
pub fn phi_p(x: &[f64], q: f64) -> f64 {
    let s: f64 = if q == 2.0 {
        x.iter().map(|v| v * v).sum()
    } else {
        x.iter().map(|v| v.abs().powf(q)).sum()
    };
    s / q
}

/// Componentwise `|x_k|^{q−2} x_k`, the gradient of `φ_q` in `ℓ^q`.
pub fn power_map(x: &DVector<f64>, q: f64) -> DVector<f64> {
    if q == 2.0 {
        return x.clone();
    }
    x.map(|v| if v == 0.0 { 0.0 } else { v.abs().powf(q - 2.0) * v })
}

/// Generalized duality map `J_p : X → X*`.
pub fn duality_map(x: &Quasidensity, p: f64) -> Potential {
    Potential(power_map(&x.0, p))
}

/// `J_p^{-1} = J_{p*} : X* → X`.
pub fn inverse_duality_map(xs: &Potential, p: f64) -> Quasidensity {
    Quasidensity(power_map(&xs.0, conjugate_exponent(p)))
}

/// `‖x+y‖^p − ‖x‖^p − p⟨J_p(x), y⟩`, bracketed by `ξ‖y‖^p` and `ξ′‖y‖^p`.
pub fn xu_gap(x: &Quasidensity, y: &Quasidensity, p: f64) -> Result<f64, GeometryError> {
    xu_gap_with(x, y, p, duality_map)
}

/// [`xu_gap`] with an injectable duality map (used by negative controls).
///
/// Evaluated as `p Σ_k D(x_k + y_k, x_k) + p⟨J_p(x) − j(x), y⟩` with the
/// stable [`bregman_power`], so the gap keeps its digits when `‖y‖ ≪ ‖x‖`.
pub fn xu_gap_with(
    x: &Quasidensity,
    y: &Quasidensity,
    p: f64,
    duality: fn(&Quasidensity, f64) -> Potential,
) -> Result<f64, GeometryError> {
    check_len(x.len(), y.len())?;
    let exact = duality_map(x, p);
    let jx = duality(x, p);
    Ok(x.0
        .iter()
        .zip(y.0.iter())
        .zip(exact.0.iter().zip(jx.0.iter()))
        .map(|((&a, &b), (&je, &j))| p * bregman_power(a, b, p) + p * (je - j) * b)
        .sum())
}

/// `‖x+y‖^p − ‖x‖^p − p⟨J_p(x), y⟩` by direct subtraction, grouped per
/// coordinate. Loses digits to cancellation when `‖y‖ ≪ ‖x‖`.
pub fn xu_gap_direct(x: &Quasidensity, y: &Quasidensity, p: f64) -> Result<f64, GeometryError> {
    check_len(x.len(), y.len())?;
    let jx = duality_map(x, p);
    Ok(x.0
        .iter()
        .zip(y.0.iter())
        .zip(jx.0.iter())
        .map(|((a, b), j)| (a + b).abs().powf(p) - a.abs().powf(p) - p * j * b)
        .sum())
}

/// Bregman divergence `φ(s + d) − φ(s) − φ′(s) d` of the scalar
/// `φ = |·|^p/p`, for `p ≥ 2`. The step `d` is passed separately so that it
/// is not lost to rounding in `s + d` when `|d| ≪ |s|`.
///
/// Equal to `∫_0^d (d − v) φ″(s + v) dv`. When `|d|` is small relative to the
/// distance of `s` and `s + d` from 0 the integral is taken by Gauss–Legendre
/// (the integrand is analytic there); otherwise the closed form has no harmful
/// cancellation.
pub fn bregman_power(s: f64, d: f64, p: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    let t = s + d;
    if s.abs().min(t.abs()) > 2.0 * d.abs() {
        let rule = GaussLegendre::new(8.try_into().expect("nonzero degree"));
        let (lo, hi) = if d > 0.0 { (0.0, d) } else { (d, 0.0) };
        let integral = rule.integrate(lo, hi, |v| (d - v) * (p - 1.0) * (s + v).abs().powf(p - 2.0));
        if d > 0.0 {
            integral
        } else {
            -integral
        }
    } else {
        let phi = |u: f64| u.abs().powf(p) / p;
        phi(t) - phi(s) - s.abs().powf(p - 2.0) * s * d
    }
}

/// Empirical bounds on `xu_gap(x, y) / ‖y‖^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XuEstimate {
    pub xi: f64,
    pub xi_prime: f64,
    pub samples: usize,
    /// Smallest gap seen (negative values break convexity of `φ_p`).
    pub min_gap: f64,
}

/// Default half-width, in decades, of the sampled ratio `‖y‖/‖x‖`. Wide enough
/// to cover damping steps down to the residual tolerances used in practice.
pub const XU_SCALE_DECADES: f64 = 12.0;

const POLISH_SWEEPS: usize = 2000;

/// Estimates `ξ` (infimum) and `ξ′` (supremum) of the normalized Xu gap.
///
/// Pairs are drawn with random directions and a log-uniform norm ratio over
/// `10^{±decades}`. The infimum is then polished by a pattern search
/// from the best samples. For `p > 2` the supremum is unbounded as `‖y‖/‖x‖ → 0`,
/// so `ξ′` only covers the sampled ratio range.
pub fn estimate_xu_constants<R: Rng>(
    dim: usize,
    p: f64,
    samples: usize,
    decades: f64,
    rng: &mut R,
) -> XuEstimate {
    estimate_xu_constants_with(dim, p, samples, decades, rng, duality_map)
}

pub fn estimate_xu_constants_with<R: Rng>(
    dim: usize,
    p: f64,
    samples: usize,
    decades: f64,
    rng: &mut R,
    duality: fn(&Quasidensity, f64) -> Potential,
) -> XuEstimate {
    let ratio = |x: &Quasidensity, y: &Quasidensity| -> f64 {
        let ny = norm_p(y.as_slice(), p).powf(p);
        xu_gap_with(x, y, p, duality).expect("equal lengths") / ny
    };
    let mut xi = f64::INFINITY;
    let mut xi_prime = f64::NEG_INFINITY;
    let mut min_gap = f64::INFINITY;
    let mut best: Vec<(f64, Quasidensity, Quasidensity)> = Vec::new();
    for _ in 0..samples {
        let x = random_direction(dim, rng);
        let mut y = random_direction(dim, rng);
        let scale = 10f64.powf(rng.random_range(-decades..=decades));
        y = &y * scale;
        let gap = xu_gap_with(&x, &y, p, duality).expect("equal lengths");
        min_gap = min_gap.min(gap);
        let r = gap / norm_p(y.as_slice(), p).powf(p);
        xi_prime = xi_prime.max(r);
        if r < xi {
            xi = r;
        }
        best.push((r, x, y));
        if best.len() > 64 {
            best.sort_by(|a, b| a.0.total_cmp(&b.0));
            best.truncate(8);
        }
    }
    best.sort_by(|a, b| a.0.total_cmp(&b.0));
    best.truncate(8);
    for (_, x0, y) in best {
        // the ratio is 0-homogeneous in (x, y): fix y, search over x
        let mut x = x0;
        let mut val = ratio(&x, &y);
        let mut step = 0.25 * norm_p(x.as_slice(), p).max(norm_p(y.as_slice(), p));
        // capped: with a broken duality map the ratio is unbounded below
        let mut sweeps = 0;
        while step > 1e-10 * (1.0 + norm_p(x.as_slice(), p)) && sweeps < POLISH_SWEEPS {
            sweeps += 1;
            let mut improved = false;
            for k in 0..dim {
                for sign in [1.0, -1.0] {
                    let mut trial = x.clone();
                    trial.0[k] += sign * step;
                    let tv = ratio(&trial, &y);
                    if tv < val - 1e-14 * val.abs() {
                        x = trial;
                        val = tv;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        xi = xi.min(val);
    }
    XuEstimate {
        xi,
        xi_prime,
        samples,
        min_gap,
    }
}

/// Uniform random point of the unit cube, kept away from the origin.
pub fn random_direction<R: Rng>(dim: usize, rng: &mut R) -> Quasidensity {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|c| c.abs() > 1e-3) {
            return Quasidensity::from_vec(v);
        }
    }
}
