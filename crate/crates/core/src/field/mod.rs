//! Uniform half-box grids, scalar fields on them, multilinear interpolation
//! and finite-difference derivative stencils.

mod grid;
pub mod io;

use std::sync::Arc;

pub use grid::{build_grid, Grid, GridSpec, NodeKind, MIN_NODES, MIN_NORMAL_NODES};

use crate::error::{Error, Result};
use crate::real::Real;

/// Anything that can be evaluated pointwise with first and second derivatives.
///
/// Analytic profiles implement it in closed form; [`ScalarField`] implements it
/// through interpolation and difference stencils.
pub trait SpatialField<T: Real>: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[T]) -> Result<T>;
    fn gradient(&self, x: &[T]) -> Result<Vec<T>>;
    fn hessian(&self, x: &[T]) -> Result<Vec<Vec<T>>>;
    /// Largest admissible ball radius around `x0`, if the field has a finite domain.
    fn radius_cap(&self, _x0: &[T]) -> Option<T> {
        None
    }
}

impl<T: Real, F: SpatialField<T> + ?Sized> SpatialField<T> for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &[T]) -> Result<T> {
        (**self).value(x)
    }
    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        (**self).hessian(x)
    }
    fn radius_cap(&self, x0: &[T]) -> Option<T> {
        (**self).radius_cap(x0)
    }
}

type ValueFn<T> = dyn Fn(&[T]) -> T + Send + Sync;
type GradFn<T> = dyn Fn(&[T]) -> Vec<T> + Send + Sync;
type HessFn<T> = dyn Fn(&[T]) -> Vec<Vec<T>> + Send + Sync;

/// Closed-form field assembled from closures.
#[derive(Clone)]
pub struct AnalyticField<T> {
    dim: usize,
    value: Arc<ValueFn<T>>,
    gradient: Arc<GradFn<T>>,
    hessian: Arc<HessFn<T>>,
}

impl<T: Real> AnalyticField<T> {
    pub fn new(
        dim: usize,
        value: impl Fn(&[T]) -> T + Send + Sync + 'static,
        gradient: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
        hessian: impl Fn(&[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, value: Arc::new(value), gradient: Arc::new(gradient), hessian: Arc::new(hessian) }
    }

    /// Affine field `c + a.x`.
    pub fn affine(c: T, a: Vec<T>) -> Self {
        let dim = a.len();
        let a2 = a.clone();
        Self::new(
            dim,
            move |x| c + x.iter().zip(&a).fold(T::zero(), |s, (&xi, &ai)| s + xi * ai),
            move |_| a2.clone(),
            move |_| vec![vec![T::zero(); dim]; dim],
        )
    }

    /// Sum `self + weight * other`.
    pub fn plus(self, weight: T, other: AnalyticField<T>) -> Self {
        let (a, b) = (self.clone(), other.clone());
        let (ga, gb) = (self.clone(), other.clone());
        let (ha, hb) = (self, other);
        let dim = ha.dim;
        Self::new(
            dim,
            move |x| (a.value)(x) + weight * (b.value)(x),
            move |x| (ga.gradient)(x).into_iter().zip((gb.gradient)(x)).map(|(p, q)| p + weight * q).collect(),
            move |x| {
                let (p, q) = ((ha.hessian)(x), (hb.hessian)(x));
                p.into_iter()
                    .zip(q)
                    .map(|(rp, rq)| rp.into_iter().zip(rq).map(|(s, t)| s + weight * t).collect())
                    .collect()
            },
        )
    }
}

impl<T: Real> SpatialField<T> for AnalyticField<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[T]) -> Result<T> {
        Ok((self.value)(x))
    }
    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        Ok((self.gradient)(x))
    }
    fn hessian(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        Ok((self.hessian)(x))
    }
}

/// Nodal values on a [`Grid`], row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    grid: Grid<T>,
    values: Vec<T>,
}

#[derive(Clone, Copy)]
enum Stencil {
    Central,
    Forward,
}

impl<T: Real> ScalarField<T> {
    pub fn new(grid: Grid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!("{} values for {} nodes", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateField(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid<T>) -> Self {
        let values = vec![T::zero(); grid.len()];
        Self { grid, values }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid<T>, f: impl Fn(&[T]) -> T) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.point_of(i))).collect();
        Self::new(grid, values)
    }

    /// Samples a [`SpatialField`] at every node.
    pub fn sample<F: SpatialField<T> + ?Sized>(grid: Grid<T>, f: &F) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f.value(&grid.point_of(i))).collect::<Result<Vec<_>>>()?;
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.values[self.grid.flat_index(idx)]
    }

    /// Multilinear interpolation of the nodal values at a physical point.
    pub fn interpolate(&self, x: &[T]) -> Result<T> {
        let g = &self.grid;
        let d = g.dim();
        if x.len() != d || !g.contains(x) {
            return Err(Error::OutsideDomain(format!("{:?}", x)));
        }
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for k in 0..d {
            let s = (x[k] - g.lo()[k]) / g.spacing()[k];
            let n = g.nodes()[k];
            let i = s.floor().to_usize().unwrap_or(0).min(n - 2);
            base[k] = i;
            frac[k] = (s - T::from_count(i)).max(T::zero()).min(T::one());
        }
        let strides = g.strides();
        let origin: usize = (0..d).map(|k| base[k] * strides[k]).sum();
        let mut acc = T::zero();
        for corner in 0..(1usize << d) {
            let mut w = T::one();
            let mut off = origin;
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w = w * frac[k];
                    off += strides[k];
                } else {
                    w = w * (T::one() - frac[k]);
                }
            }
            if w != T::zero() {
                acc = acc + w * self.values[off];
            }
        }
        Ok(acc)
    }

    fn stencil_for(&self, x: &[T], axis: usize, reach: usize) -> Result<Stencil> {
        let g = &self.grid;
        let h = g.spacing()[axis];
        let r = T::from_count(reach) * h;
        let (lo, hi) = (g.lo()[axis] - g.slack(axis), g.hi()[axis] + g.slack(axis));
        if x[axis] - r >= lo && x[axis] + r <= hi {
            return Ok(Stencil::Central);
        }
        let last = g.dim() - 1;
        if axis == last && x[axis] >= lo && x[axis] + T::from_count(reach + 2) * h <= hi {
            return Ok(Stencil::Forward);
        }
        Err(Error::TooCloseToBoundary(format!("{:?} on axis {axis}", x)))
    }

    fn shifted(&self, x: &[T], shifts: &[(usize, T)]) -> Result<T> {
        let mut p = x.to_vec();
        for &(axis, s) in shifts {
            p[axis] = p[axis] + s * self.grid.spacing()[axis];
        }
        self.interpolate(&p)
    }

    fn first_difference(&self, x: &[T], axis: usize, stencil: Stencil, inner: &[(usize, T)]) -> Result<T> {
        let h = self.grid.spacing()[axis];
        let at = |s: f64| -> Result<T> {
            let mut shifts = inner.to_vec();
            shifts.push((axis, T::lit(s)));
            self.shifted(x, &shifts)
        };
        Ok(match stencil {
            Stencil::Central => (at(1.0)? - at(-1.0)?) / (T::lit(2.0) * h),
            Stencil::Forward => (T::lit(-3.0) * at(0.0)? + T::lit(4.0) * at(1.0)? - at(2.0)?) / (T::lit(2.0) * h),
        })
    }

    /// Difference-stencil gradient of the interpolant, step equal to the grid spacing.
    /// The normal derivative switches to the second-order one-sided stencil next to the thin plane.
    pub fn gradient_at(&self, x: &[T]) -> Result<Vec<T>> {
        if !self.grid.contains(x) {
            return Err(Error::OutsideDomain(format!("{:?}", x)));
        }
        (0..self.grid.dim())
            .map(|k| {
                let st = self.stencil_for(x, k, 1)?;
                self.first_difference(x, k, st, &[])
            })
            .collect()
    }

    /// Difference-stencil Hessian of the interpolant.
    pub fn hessian_at(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        if !self.grid.contains(x) {
            return Err(Error::OutsideDomain(format!("{:?}", x)));
        }
        let d = self.grid.dim();
        let mut hess = vec![vec![T::zero(); d]; d];
        let stencils = (0..d).map(|k| self.stencil_for(x, k, 1)).collect::<Result<Vec<_>>>()?;
        for k in 0..d {
            let h = self.grid.spacing()[k];
            let at = |s: f64| self.shifted(x, &[(k, T::lit(s))]);
            hess[k][k] = match stencils[k] {
                Stencil::Central => (at(1.0)? - T::lit(2.0) * at(0.0)? + at(-1.0)?) / (h * h),
                Stencil::Forward => {
                    (T::lit(2.0) * at(0.0)? - T::lit(5.0) * at(1.0)? + T::lit(4.0) * at(2.0)? - at(3.0)?) / (h * h)
                }
            };
        }
        for k in 0..d {
            for l in k + 1..d {
                // Outer difference along `l` (possibly one-sided), inner central along `k`.
                let hk = self.grid.spacing()[k];
                let inner = |sl: f64| -> Result<T> {
                    let up = self.shifted(x, &[(l, T::lit(sl)), (k, T::one())])?;
                    let dn = self.shifted(x, &[(l, T::lit(sl)), (k, -T::one())])?;
                    Ok((up - dn) / (T::lit(2.0) * hk))
                };
                let hl = self.grid.spacing()[l];
                let v = match (stencils[k], stencils[l]) {
                    (Stencil::Central, Stencil::Central) => (inner(1.0)? - inner(-1.0)?) / (T::lit(2.0) * hl),
                    (Stencil::Central, Stencil::Forward) => {
                        (T::lit(-3.0) * inner(0.0)? + T::lit(4.0) * inner(1.0)? - inner(2.0)?) / (T::lit(2.0) * hl)
                    }
                    _ => return Err(Error::TooCloseToBoundary(format!("{:?}", x))),
                };
                hess[k][l] = v;
                hess[l][k] = v;
            }
        }
        Ok(hess)
    }

    /// One-sided second-order normal derivative at a thin-plane node.
    pub fn normal_derivative_at_node(&self, idx: &[usize]) -> T {
        let g = &self.grid;
        let last = g.dim() - 1;
        let mut j = idx.to_vec();
        let f0 = self.at(&j);
        j[last] += 1;
        let f1 = self.at(&j);
        j[last] += 1;
        let f2 = self.at(&j);
        (T::lit(-3.0) * f0 + T::lit(4.0) * f1 - f2) / (T::lit(2.0) * g.spacing()[last])
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest nodal difference to `other` sampled on the same grid.
    pub fn max_abs_diff(&self, other: &ScalarField<T>) -> Result<T> {
        if self.grid != other.grid {
            return Err(Error::InvalidGrid("fields live on different grids".into()));
        }
        Ok(self.values.iter().zip(&other.values).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    /// Returns a copy with each value perturbed by `f(index, value)`.
    pub fn map_indexed(&self, f: impl Fn(usize, T) -> T) -> Result<Self> {
        let values = self.values.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        Self::new(self.grid.clone(), values)
    }

    /// Interpolates this field onto another grid whose extent is contained in ours.
    pub fn resample(&self, grid: Grid<T>) -> Result<Self> {
        let values = (0..grid.len()).map(|i| self.interpolate(&grid.point_of(i))).collect::<Result<Vec<_>>>()?;
        Self::new(grid, values)
    }
}

impl<T: Real> SpatialField<T> for ScalarField<T> {
    fn dim(&self) -> usize {
        self.grid.dim()
    }
    fn value(&self, x: &[T]) -> Result<T> {
        self.interpolate(x)
    }
    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        self.gradient_at(x)
    }
    fn hessian(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        self.hessian_at(x)
    }
    fn radius_cap(&self, x0: &[T]) -> Option<T> {
        Some(self.grid.radius_cap(x0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid3(n: usize) -> Grid<f64> {
        Grid::half_box(3, n).unwrap()
    }

    #[test]
    fn constant_field_interpolates_to_constant() {
        let f = ScalarField::from_fn(grid3(9), |_| 1.0).unwrap();
        assert_eq!(f.interpolate(&[0.123, -0.77, 0.31]).unwrap(), 1.0);
        let g = f.gradient_at(&[0.1, 0.2, 0.3]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn linear_field_exact_at_cell_midpoint() {
        let f = ScalarField::from_fn(grid3(9), |x| x[0]).unwrap();
        let h = 0.25;
        let x = [-1.0 + 2.5 * h, 0.1, 0.3];
        assert!((f.interpolate(&x).unwrap() - x[0]).abs() < 1e-15);
    }

    #[test]
    fn bilinear_product_exact_at_cell_center() {
        let g = grid3(9);
        let f = ScalarField::from_fn(g, |x| x[0] * x[1]).unwrap();
        let x = [0.125, -0.375, 0.1875];
        let exact = 0.125 * -0.375;
        assert!((f.interpolate(&x).unwrap() - exact).abs() < 1e-15);
    }

    #[test]
    fn outside_point_rejected() {
        let f = ScalarField::from_fn(grid3(9), |_| 0.0).unwrap();
        assert!(matches!(f.interpolate(&[0.0, 0.0, -0.1]), Err(Error::OutsideDomain(_))));
        assert!(matches!(f.interpolate(&[1.5, 0.0, 0.1]), Err(Error::OutsideDomain(_))));
    }

    #[test]
    fn gradient_of_normal_coordinate_is_unit_vector() {
        let f = ScalarField::from_fn(grid3(17), |x| x[2]).unwrap();
        for x in [[0.0, 0.0, 0.0], [0.3, -0.2, 0.01], [0.1, 0.1, 0.5]] {
            let g = f.gradient_at(&x).unwrap();
            assert!((g[0]).abs() < 1e-12 && (g[1]).abs() < 1e-12 && (g[2] - 1.0).abs() < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn gradient_too_close_to_outer_boundary() {
        let f = ScalarField::from_fn(grid3(9), |x| x[0]).unwrap();
        assert!(matches!(f.gradient_at(&[0.99, 0.0, 0.5]), Err(Error::TooCloseToBoundary(_))));
    }

    #[test]
    fn affine_fields_exact_at_random_points() {
        let g = grid3(17);
        let a = [0.3, -1.2, 2.5];
        let f = ScalarField::from_fn(g.clone(), |x| 0.7 + a[0] * x[0] + a[1] * x[1] + a[2] * x[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = g.spacing()[0];
        for _ in 0..100 {
            let x = [
                rng.random_range(-1.0 + h..1.0 - h),
                rng.random_range(-1.0 + h..1.0 - h),
                rng.random_range(0.0..1.0 - 3.0 * h),
            ];
            let v = f.interpolate(&x).unwrap();
            assert!((v - (0.7 + a[0] * x[0] + a[1] * x[1] + a[2] * x[2])).abs() < 1e-12);
            let grad = f.gradient_at(&x).unwrap();
            for k in 0..3 {
                assert!((grad[k] - a[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hessian_exact_on_quadratics_away_from_boundary() {
        let f = ScalarField::from_fn(grid3(17), |x| x[0] * x[0] + 3.0 * x[1] * x[2] - x[2] * x[2]).unwrap();
        for x in [[0.0, 0.0, 0.5], [0.25, -0.5, 0.25], [0.1, 0.2, 0.0]] {
            let h = f.hessian_at(&x).unwrap();
            let exact = [[2.0, 0.0, 0.0], [0.0, 0.0, 3.0], [0.0, 3.0, -2.0]];
            for i in 0..3 {
                for j in 0..3 {
                    assert!((h[i][j] - exact[i][j]).abs() < 1e-10, "{x:?} {i}{j} {}", h[i][j]);
                }
            }
        }
    }

    #[test]
    fn non_finite_values_rejected() {
        let g = grid3(9);
        let mut v = vec![0.0; g.len()];
        v[3] = f64::NAN;
        assert!(matches!(ScalarField::new(g, v), Err(Error::DegenerateField(_))));
    }
}
