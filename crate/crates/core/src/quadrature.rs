//! Hemisphere and half-ball quadrature about a center on the thin plane.
//!
//! Angles use Gauss-Legendre rules; the 3D hemisphere is parametrized by a
//! polar angle about a tangential axis and an azimuth in `[0, pi]`, so that the
//! singular line of a blowup aligned with that axis sits at the poles.
//! Radial integration is composite Simpson over spherical shells.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{pairwise_sum, Real};

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to `[a, b]`.
fn mapped_rule(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    (x.iter().map(|&t| a + half * (t + 1.0)).collect(), w.iter().map(|&v| v * half).collect())
}

/// Resolution of the angular and radial rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuadratureRule {
    /// Polar nodes (3D) or arc nodes (2D).
    pub polar_points: usize,
    /// Azimuthal nodes (3D only).
    pub azimuth_points: usize,
    /// Composite Simpson intervals in the radius (even).
    pub radial_intervals: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self { polar_points: 64, azimuth_points: 128, radial_intervals: 64 }
    }
}

impl QuadratureRule {
    pub fn validate(&self) -> Result<()> {
        if self.polar_points < 2 || self.azimuth_points < 2 || self.radial_intervals < 2 || self.radial_intervals % 2 == 1 {
            return Err(Error::InvalidParameter(format!("bad quadrature resolution {self:?}")));
        }
        Ok(())
    }

    /// Unit hemisphere rule in `dim` dimensions. In 3D `axis` is the tangential
    /// polar axis (defaults to `e_1`).
    pub fn hemisphere<T: Real>(&self, dim: usize, axis: Option<&[T]>) -> Result<Hemisphere<T>> {
        self.validate()?;
        let mut dirs = Vec::new();
        let mut weights = Vec::new();
        match dim {
            2 => {
                let (t, w) = mapped_rule(self.polar_points, 0.0, std::f64::consts::PI);
                for (th, wt) in t.into_iter().zip(w) {
                    dirs.extend([T::lit(th.cos()), T::lit(th.sin())]);
                    weights.push(T::lit(wt));
                }
            }
            3 => {
                let tau: [f64; 2] = match axis {
                    Some(a) => {
                        let (a0, a1) = (a[0].to_f64_lossy(), a[1].to_f64_lossy());
                        let l = a0.hypot(a1);
                        if !(l > 0.0) || a.len() > 2 && a[2] != T::zero() {
                            return Err(Error::InvalidParameter("polar axis must be a nonzero tangential vector".into()));
                        }
                        [a0 / l, a1 / l]
                    }
                    None => [1.0, 0.0],
                };
                let perp = [-tau[1], tau[0]];
                let (th, wth) = mapped_rule(self.polar_points, 0.0, std::f64::consts::PI);
                let (ph, wph) = mapped_rule(self.azimuth_points, 0.0, std::f64::consts::PI);
                for (t, wt) in th.iter().zip(&wth) {
                    let (ct, st) = (t.cos(), t.sin());
                    for (p, wp) in ph.iter().zip(&wph) {
                        let (cp, sp) = (p.cos(), p.sin());
                        let d = [ct * tau[0] + st * cp * perp[0], ct * tau[1] + st * cp * perp[1], st * sp];
                        dirs.extend(d.map(T::lit));
                        weights.push(T::lit(wt * wp * st));
                    }
                }
            }
            _ => return Err(Error::InvalidParameter(format!("quadrature dimension {dim} not in {{2, 3}}"))),
        }
        Ok(Hemisphere { dim, dirs, weights, radial_intervals: self.radial_intervals })
    }
}

/// Nodes and weights of a unit hemisphere rule with its radial resolution.
#[derive(Clone, Debug)]
pub struct Hemisphere<T> {
    dim: usize,
    dirs: Vec<T>,
    weights: Vec<T>,
    radial_intervals: usize,
}

impl<T: Real> Hemisphere<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn direction(&self, k: usize) -> &[T] {
        &self.dirs[k * self.dim..(k + 1) * self.dim]
    }

    /// Surface measure of the unit hemisphere as integrated by the rule.
    pub fn measure(&self) -> T {
        pairwise_sum(&self.weights)
    }

    /// `∫_{∂B_r^+(x0)} f dσ`.
    pub fn sphere_integral<F>(&self, x0: &[T], r: T, f: F) -> Result<T>
    where
        F: Fn(&[T]) -> Result<T> + Sync,
    {
        let terms = self.shell_terms(x0, r, &f)?;
        Ok(pairwise_sum(&terms) * r.powi(self.dim as i32 - 1))
    }

    fn shell_terms<F>(&self, x0: &[T], r: T, f: &F) -> Result<Vec<T>>
    where
        F: Fn(&[T]) -> Result<T> + Sync,
    {
        (0..self.len())
            .into_par_iter()
            .map(|k| {
                let p: Vec<T> = x0.iter().zip(self.direction(k)).map(|(&c, &d)| c + r * d).collect();
                Ok(self.weights[k] * f(&p)?)
            })
            .collect()
    }

    /// `∫_{B_r^+(x0)} f dx` by composite Simpson over shells.
    pub fn ball_integral<F>(&self, x0: &[T], r: T, f: F) -> Result<T>
    where
        F: Fn(&[T]) -> Result<T> + Sync,
    {
        let m = self.radial_intervals;
        let h = r / T::from_count(m);
        let shells: Vec<T> = (1..=m)
            .into_par_iter()
            .map(|j| {
                let s = h * T::from_count(j);
                let coeff = if j == m { T::one() } else if j % 2 == 1 { T::lit(4.0) } else { T::lit(2.0) };
                Ok(coeff * self.sphere_integral(x0, s, &f)?)
            })
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&shells) * h / T::lit(3.0))
    }
}
