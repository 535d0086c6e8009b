//! Closed-form profiles: the 3/2-homogeneous blowup, general homogeneous
//! harmonics `Re(z^k)` of the in-plane complex variable, the Legendre
//! transform of the blowup, and the boundary-Hopf barrier.
//!
//! The complex variable is `z = x'.nu' + i x_n` with argument in `(-pi, pi]`;
//! the coincidence set of the blowup is the ray `arg z = pi`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::SpatialField;
use crate::real::{norm, Real};

fn check_unit<T: Real>(nu: &[T]) -> Result<()> {
    let n = norm(nu);
    if !((n - T::one()).abs() <= T::lit(1e-12)) {
        return Err(Error::InvalidParameter(format!("nu' must be a unit vector, |nu'| = {n}")));
    }
    Ok(())
}

/// `C Re(x'.nu' + i x_n)^kappa` on `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HomogeneousProfile<T> {
    pub kappa: T,
    pub coeff: T,
    pub nu_prime: Vec<T>,
}

/// Polar form of the in-plane variable.
#[derive(Clone, Copy, Debug)]
pub struct PlanePolar<T> {
    pub r: T,
    pub theta: T,
}

impl<T: Real> HomogeneousProfile<T> {
    pub fn new(kappa: T, coeff: T, nu_prime: Vec<T>) -> Result<Self> {
        check_unit(&nu_prime)?;
        Ok(Self { kappa, coeff, nu_prime })
    }

    /// `Re(x_{n-1} + i x_n)^kappa`.
    pub fn standard(dim: usize, kappa: T) -> Self {
        let mut nu = vec![T::zero(); dim - 1];
        nu[dim - 2] = T::one();
        Self { kappa, coeff: T::one(), nu_prime: nu }
    }

    pub fn dim(&self) -> usize {
        self.nu_prime.len() + 1
    }

    pub fn polar(&self, x: &[T]) -> PlanePolar<T> {
        let n = self.dim();
        let s = x[..n - 1].iter().zip(&self.nu_prime).fold(T::zero(), |a, (&xi, &ni)| a + xi * ni);
        let t = x[n - 1];
        let r = s.hypot(t);
        let theta = if t == T::zero() && s < T::zero() { T::PI() } else { t.atan2(s) };
        PlanePolar { r, theta }
    }

    pub fn eval(&self, x: &[T]) -> T {
        let p = self.polar(x);
        if p.r == T::zero() {
            return T::zero();
        }
        self.coeff * p.r.powf(self.kappa) * (self.kappa * p.theta).cos()
    }

    /// Derivatives with respect to the in-plane pair `(s, x_n)`.
    fn plane_gradient(&self, p: PlanePolar<T>) -> Result<(T, T)> {
        let k = self.kappa;
        if p.r == T::zero() {
            return if k > T::one() { Ok((T::zero(), T::zero())) } else { Err(Error::SingularLine) };
        }
        let m = self.coeff * k * p.r.powf(k - T::one());
        let a = (k - T::one()) * p.theta;
        Ok((m * a.cos(), -m * a.sin()))
    }

    fn plane_hessian(&self, p: PlanePolar<T>) -> Result<(T, T, T)> {
        let k = self.kappa;
        if p.r == T::zero() && k != T::lit(2.0) {
            return if k > T::lit(2.0) { Ok((T::zero(), T::zero(), T::zero())) } else { Err(Error::SingularLine) };
        }
        let m = self.coeff * k * (k - T::one()) * p.r.powf(k - T::lit(2.0));
        let a = (k - T::lit(2.0)) * p.theta;
        let (c, s) = (m * a.cos(), m * a.sin());
        Ok((c, -s, -c))
    }

    pub fn grad(&self, x: &[T]) -> Result<Vec<T>> {
        let (gs, gt) = self.plane_gradient(self.polar(x))?;
        let mut g: Vec<T> = self.nu_prime.iter().map(|&ni| ni * gs).collect();
        g.push(gt);
        Ok(g)
    }

    pub fn hess(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        let (hss, hst, htt) = self.plane_hessian(self.polar(x))?;
        let n = self.dim();
        let mut h = vec![vec![T::zero(); n]; n];
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                h[i][j] = self.nu_prime[i] * self.nu_prime[j] * hss;
            }
            h[i][n - 1] = self.nu_prime[i] * hst;
            h[n - 1][i] = h[i][n - 1];
        }
        h[n - 1][n - 1] = htt;
        Ok(h)
    }
}

impl<T: Real> SpatialField<T> for HomogeneousProfile<T> {
    fn dim(&self) -> usize {
        HomogeneousProfile::dim(self)
    }
    fn value(&self, x: &[T]) -> Result<T> {
        Ok(self.eval(x))
    }
    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        self.grad(x)
    }
    fn hessian(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        self.hess(x)
    }
}

/// Blowup `u0 = C0 Re(x'.nu' + i x_n)^{3/2}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlowupProfile<T> {
    pub c0: T,
    pub nu_prime: Vec<T>,
}

impl<T: Real> BlowupProfile<T> {
    pub fn new(c0: T, nu_prime: Vec<T>) -> Result<Self> {
        if !(c0 > T::zero()) {
            return Err(Error::InvalidParameter(format!("C0 must be positive, got {c0}")));
        }
        if nu_prime.is_empty() {
            return Err(Error::InvalidParameter("nu' must have n - 1 >= 1 components".into()));
        }
        check_unit(&nu_prime)?;
        Ok(Self { c0, nu_prime })
    }

    /// `nu' = e_{n-1}`.
    pub fn standard(dim: usize, c0: T) -> Self {
        let mut nu = vec![T::zero(); dim - 1];
        nu[dim - 2] = T::one();
        Self { c0, nu_prime: nu }
    }

    /// In-plane normal rotated by `angle` from `e_{n-1}` toward `-e_1` (3D only):
    /// `nu' = (-sin angle, cos angle)`, free boundary `x_2 = tan(angle) x_1`.
    pub fn rotated(c0: T, angle: T) -> Self {
        Self { c0, nu_prime: vec![-angle.sin(), angle.cos()] }
    }

    pub fn dim(&self) -> usize {
        self.nu_prime.len() + 1
    }

    fn homogeneous(&self) -> HomogeneousProfile<T> {
        HomogeneousProfile { kappa: T::lit(1.5), coeff: self.c0, nu_prime: self.nu_prime.clone() }
    }

    pub fn eval_u0(&self, x: &[T]) -> T {
        self.homogeneous().eval(x)
    }

    pub fn grad_u0(&self, x: &[T]) -> Result<Vec<T>> {
        self.homogeneous().grad(x)
    }

    /// Closed-form Hessian; undefined on the line `x'.nu' = x_n = 0`.
    pub fn hess_u0(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        self.homogeneous().hess(x)
    }

    pub fn polar(&self, x: &[T]) -> PlanePolar<T> {
        self.homogeneous().polar(x)
    }
}

impl<T: Real> SpatialField<T> for BlowupProfile<T> {
    fn dim(&self) -> usize {
        BlowupProfile::dim(self)
    }
    fn value(&self, x: &[T]) -> Result<T> {
        Ok(self.eval_u0(x))
    }
    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        self.grad_u0(x)
    }
    fn hessian(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        self.hess_u0(x)
    }
}

/// Exact non-homogeneous Signorini solution `u0 + eps C0 Re(z)^{5/2}` with a flat
/// free boundary; admissible while `eps |x| < 3/5`.
pub fn blowup_with_correction<T: Real>(profile: &BlowupProfile<T>, eps: T) -> crate::field::AnalyticField<T> {
    let base = profile.clone();
    let corr = HomogeneousProfile { kappa: T::lit(2.5), coeff: profile.c0 * eps, nu_prime: profile.nu_prime.clone() };
    let (b1, b2, b3) = (base.clone(), base.clone(), base);
    let (c1, c2, c3) = (corr.clone(), corr.clone(), corr);
    let dim = b1.dim();
    crate::field::AnalyticField::new(
        dim,
        move |x| b1.eval_u0(x) + c1.eval(x),
        move |x| match (b2.grad_u0(x), c2.grad(x)) {
            (Ok(a), Ok(b)) => a.into_iter().zip(b).map(|(p, q)| p + q).collect(),
            _ => vec![T::nan(); x.len()],
        },
        move |x| match (b3.hess_u0(x), c3.hess(x)) {
            (Ok(a), Ok(b)) => a.into_iter().zip(b).map(|(r, s)| r.into_iter().zip(s).map(|(p, q)| p + q).collect()).collect(),
            _ => vec![vec![T::nan(); x.len()]; x.len()],
        },
    )
}

/// Legendre transform of the blowup:
/// `v(y) = -(4/(27 C^2)) (Y^3 - 3 Y y_n^2) + (nu''.y'') Y` with `Y = y_{n-1}/nu_{n-1}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LegendreBlowup<T> {
    pub c0: T,
    pub nu_prime: Vec<T>,
}

impl<T: Real> LegendreBlowup<T> {
    pub fn new(profile: &BlowupProfile<T>) -> Result<Self> {
        let nu_last = *profile.nu_prime.last().unwrap();
        if !(nu_last > T::zero()) {
            return Err(Error::InvalidParameter(format!("nu_(n-1) must be positive, got {nu_last}")));
        }
        Ok(Self { c0: profile.c0, nu_prime: profile.nu_prime.clone() })
    }

    pub fn dim(&self) -> usize {
        self.nu_prime.len() + 1
    }

    fn k(&self) -> T {
        T::lit(-4.0) / (T::lit(27.0) * self.c0 * self.c0)
    }

    fn inv_nu(&self) -> T {
        T::one() / *self.nu_prime.last().unwrap()
    }

    fn tangential_dot(&self, y: &[T]) -> T {
        let m = self.dim() - 2;
        (0..m).fold(T::zero(), |a, i| a + self.nu_prime[i] * y[i])
    }

    pub fn eval(&self, y: &[T]) -> T {
        let n = self.dim();
        let yy = y[n - 2] * self.inv_nu();
        let yn = y[n - 1];
        self.k() * (yy * yy * yy - T::lit(3.0) * yy * yn * yn) + self.tangential_dot(y) * yy
    }

    pub fn grad(&self, y: &[T]) -> Vec<T> {
        let n = self.dim();
        let c = self.inv_nu();
        let (a, b) = (y[n - 2], y[n - 1]);
        let k = self.k();
        let mut g: Vec<T> = (0..n - 2).map(|i| c * self.nu_prime[i] * a).collect();
        g.push(k * (T::lit(3.0) * c * c * c * a * a - T::lit(3.0) * c * b * b) + c * self.tangential_dot(y));
        g.push(T::lit(-6.0) * k * c * a * b);
        g
    }

    pub fn hess(&self, y: &[T]) -> Vec<Vec<T>> {
        let n = self.dim();
        let c = self.inv_nu();
        let (a, b) = (y[n - 2], y[n - 1]);
        let k6 = T::lit(6.0) * self.k();
        let mut h = vec![vec![T::zero(); n]; n];
        for i in 0..n - 2 {
            h[i][n - 2] = c * self.nu_prime[i];
            h[n - 2][i] = h[i][n - 2];
        }
        h[n - 2][n - 2] = k6 * c * c * c * a;
        h[n - 2][n - 1] = -k6 * c * b;
        h[n - 1][n - 2] = h[n - 2][n - 1];
        h[n - 1][n - 1] = -k6 * c * a;
        h
    }

    /// The constant third derivatives
    /// `(d_{n-1,n-1,n-1}, d_{n-1,n,n}, d_{n-1,n-1,n}, d_{n,n,n})`.
    pub fn third_derivatives(&self) -> [T; 4] {
        let c = self.inv_nu();
        let k6 = T::lit(6.0) * self.k();
        [k6 * c * c * c, -k6 * c, T::zero(), T::zero()]
    }
}

/// Parameters of the boundary-Hopf barrier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BarrierParams<T> {
    pub alpha: T,
    pub dim: usize,
}

/// Barrier value with its building blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BarrierValue<T> {
    pub h: T,
    /// `U(x) = Re(x_{n-1} + i x_n)^{1/2}`
    pub u: T,
    /// `g(U(x))`
    pub g_of_u: T,
    /// `f(|x|^{1/2})`
    pub f_of_root: T,
}

impl<T: Real> BarrierParams<T> {
    pub fn new(alpha: T, dim: usize) -> Result<Self> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if dim < 3 {
            return Err(Error::InvalidParameter(format!("barrier needs n >= 3, got {dim}")));
        }
        Ok(Self { alpha, dim })
    }

    /// `f(r) = r^{1+alpha}`.
    pub fn f_hat(&self, r: T) -> T {
        r.powf(T::one() + self.alpha)
    }

    /// `2 + 2(2n - 3)/alpha`.
    pub fn g_coefficient(&self) -> T {
        T::lit(2.0) + T::lit(2.0) * T::from_count(2 * self.dim - 3) / self.alpha
    }

    /// `g(r) = (2 + 2(2n-3)/alpha) r^{1+alpha}`.
    pub fn g_hat(&self, r: T) -> T {
        self.g_coefficient() * self.f_hat(r)
    }

    pub fn u_of(&self, x: &[T]) -> T {
        HomogeneousProfile::standard(self.dim, T::lit(0.5)).eval(x)
    }

    pub fn eval(&self, x: &[T]) -> BarrierValue<T> {
        let u = self.u_of(x);
        let g_of_u = self.g_hat(u);
        let f_of_root = self.f_hat(norm(x).sqrt());
        BarrierValue { h: u + g_of_u - T::lit(2.0) * f_of_root, u, g_of_u, f_of_root }
    }

    /// Whether the thin-plane point lies in `{x_{n-1} <= |x''|^{1+alpha}}`.
    pub fn in_lambda_hat(&self, x: &[T]) -> bool {
        let n = self.dim;
        x[n - 1] == T::zero() && x[n - 2] <= self.f_hat(norm(&x[..n - 2]))
    }

    /// Distance from `x` to the closed set `{x_n = 0, x_{n-1} <= |x''|^{1+alpha}}`,
    /// bounded above by the vertical offset plus the in-plane excess.
    pub fn distance_to_lambda_hat_lower(&self, x: &[T]) -> T {
        let n = self.dim;
        let excess = (x[n - 2] - self.f_hat(norm(&x[..n - 2]))).max(T::zero());
        // The graph x_{n-1} = |x''|^{1+alpha} has slope at most (1+alpha)|x''|^alpha <= 2 on B_1,
        // so the in-plane distance is at least excess / sqrt(1 + 4).
        let planar = excess / T::lit(5.0).sqrt();
        planar.hypot(x[n - 1])
    }
}

pub fn eval_barrier<T: Real>(b: &BarrierParams<T>, x: &[T]) -> BarrierValue<T> {
    b.eval(x)
}

/// Outcome of the barrier property sweep.
#[derive(Clone, Debug, Serialize)]
pub struct BarrierReport {
    pub rho: f64,
    /// Max of the barrier over sampled `B'_rho ∩ Λ̂` (should be `<= 0`).
    pub sign_max: f64,
    /// Max over sampled `∂B_rho` points lying within `rho^4` of `Λ̂`.
    pub boundary_sign_max: f64,
    /// Min of `Δh + tol` over the sampled subharmonicity set (should be `>= 0`).
    pub laplacian_min_margin: f64,
    pub laplacian_min: f64,
    pub laplacian_samples: usize,
    /// `h(0,t,0)/t^{1/2}` at the probe `t`.
    pub ratio_probe_t: f64,
    pub ratio_at_probe: f64,
    /// Largest tested `rho` for which the sign condition on `B'_rho ∩ Λ̂` holds.
    pub largest_passing_rho: f64,
    pub sign_pass: bool,
    pub subharmonic_pass: bool,
    pub ratio_pass: bool,
    pub pass: bool,
}

/// Tolerances of the barrier sweep.
#[derive(Clone, Copy, Debug)]
pub struct BarrierCheckConfig {
    pub rho: f64,
    pub resolution: usize,
    /// Finite-difference step of the Laplacian probe.
    pub fd_step: f64,
    pub ratio_t: f64,
    pub ratio_tol: f64,
    pub sign_tol: f64,
}

impl Default for BarrierCheckConfig {
    fn default() -> Self {
        Self { rho: 0.05, resolution: 33, fd_step: 1e-3, ratio_t: 1e-8, ratio_tol: 1e-2, sign_tol: 1e-14 }
    }
}

fn lattice(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> + Clone {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

fn sign_max_on_plane(b: &BarrierParams<f64>, rho: f64, res: usize) -> f64 {
    let n = b.dim;
    let mut worst = f64::NEG_INFINITY;
    let mut x = vec![0.0; n];
    // Sample x'' along the first tangential axis and x_{n-1} densely near the graph.
    for a in lattice(-rho, rho, res) {
        for t in lattice(-rho, rho, 4 * res) {
            x.iter_mut().for_each(|v| *v = 0.0);
            x[0] = a;
            let graph = b.f_hat(norm(&x[..n - 2]));
            for xn1 in [t, graph.min(rho)] {
                x[n - 2] = xn1;
                if norm(&x) <= rho && b.in_lambda_hat(&x) {
                    worst = worst.max(b.eval(&x).h);
                }
            }
        }
    }
    worst
}

/// Samples the barrier conditions for the given `(n, alpha)`.
///
/// The sign condition is tested on `B'_rho ∩ Λ̂`, the boundary condition on points
/// of `∂B_rho` directly above `Λ̂` at height below `rho^4`, and subharmonicity
/// at lattice points of `B_1 ∩ D̂` that keep `10 * fd_step` away from `Λ̂`; the
/// Laplacian tolerance is `h^2/12` times the estimated fourth-derivative sum.
pub fn check_barrier_properties(b: &BarrierParams<f64>, cfg: &BarrierCheckConfig) -> Result<BarrierReport> {
    if cfg.resolution < 17 {
        return Err(Error::InvalidParameter(format!("resolution {} < 17", cfg.resolution)));
    }
    let n = b.dim;
    let rho = cfg.rho;
    let sign_max = sign_max_on_plane(b, rho, cfg.resolution);

    let mut boundary_sign_max = f64::NEG_INFINITY;
    let height = 0.5 * rho.powi(4);
    for a in lattice(-rho, rho, 4 * cfg.resolution) {
        for sgn in [-1.0, 1.0] {
            let rem = rho * rho - a * a - height * height;
            if rem < 0.0 {
                continue;
            }
            let mut x = vec![0.0; n];
            x[0] = a;
            x[n - 2] = sgn * rem.sqrt();
            x[n - 1] = height;
            let mut foot = x.clone();
            foot[n - 1] = 0.0;
            if b.in_lambda_hat(&foot) {
                boundary_sign_max = boundary_sign_max.max(b.eval(&x).h);
            }
        }
    }

    let h = cfg.fd_step;
    let keep_away = 10.0 * h;
    let mut lap_min = f64::INFINITY;
    let mut margin_min = f64::INFINITY;
    let mut samples = 0;
    let res = cfg.resolution;
    let mut visit = |x: &[f64]| {
        if norm(x) >= 1.0 - 2.0 * h || b.distance_to_lambda_hat_lower(x) < keep_away {
            return;
        }
        let f0 = b.eval(x).h;
        let mut lap = 0.0;
        let mut fourth = 0.0;
        for k in 0..n {
            let at = |s: f64| {
                let mut p = x.to_vec();
                p[k] += s * h;
                b.eval(&p).h
            };
            lap += (at(1.0) - 2.0 * f0 + at(-1.0)) / (h * h);
            fourth += ((at(2.0) - 4.0 * at(1.0) + 6.0 * f0 - 4.0 * at(-1.0) + at(-2.0)) / h.powi(4)).abs();
        }
        let tol = 2.0 * h * h / 12.0 * fourth + 1e-9 * f0.abs().max(1.0) / (h * h) * f64::EPSILON.sqrt();
        lap_min = lap_min.min(lap);
        margin_min = margin_min.min(lap + tol);
        samples += 1;
    };
    let axis = |i: usize, lo: f64| lo + (1.0 - lo) * i as f64 / (res - 1) as f64;
    if n == 3 {
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    visit(&[axis(i, -1.0), axis(j, -1.0), axis(k, 0.0)]);
                }
            }
        }
    } else {
        let mut idx = vec![0usize; n];
        loop {
            let x: Vec<f64> = (0..n).map(|k| axis(idx[k], if k == n - 1 { 0.0 } else { -1.0 })).collect();
            visit(&x);
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < res {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }

    let t = cfg.ratio_t;
    let mut probe = vec![0.0; n];
    probe[n - 2] = t;
    let ratio = b.eval(&probe).h / t.sqrt();

    let mut largest = 0.0;
    let mut r = 1.0;
    while r > 1e-6 {
        if sign_max_on_plane(b, r, cfg.resolution) <= cfg.sign_tol {
            largest = r;
            break;
        }
        r *= 0.8;
    }

    let sign_pass = sign_max <= cfg.sign_tol && boundary_sign_max <= cfg.sign_tol;
    let subharmonic_pass = samples > 0 && margin_min >= 0.0;
    let ratio_pass = (ratio - 1.0).abs() <= cfg.ratio_tol;
    Ok(BarrierReport {
        rho,
        sign_max,
        boundary_sign_max,
        laplacian_min_margin: margin_min,
        laplacian_min: lap_min,
        laplacian_samples: samples,
        ratio_probe_t: t,
        ratio_at_probe: ratio,
        largest_passing_rho: largest,
        sign_pass,
        subharmonic_pass,
        ratio_pass,
        pass: sign_pass && subharmonic_pass && ratio_pass,
    })
}

/// Degree-1 and degree-2 homogeneous harmonics used as reference inputs.
pub mod harmonics {
    use crate::field::AnalyticField;
    use crate::real::Real;

    /// `x_n`.
    pub fn normal_coordinate<T: Real>(dim: usize) -> AnalyticField<T> {
        let mut a = vec![T::zero(); dim];
        a[dim - 1] = T::one();
        AnalyticField::affine(T::zero(), a)
    }

    /// `x_{n-1} x_n`.
    pub fn product_last_two<T: Real>(dim: usize) -> AnalyticField<T> {
        AnalyticField::new(
            dim,
            move |x| x[dim - 2] * x[dim - 1],
            move |x| {
                let mut g = vec![T::zero(); dim];
                g[dim - 2] = x[dim - 1];
                g[dim - 1] = x[dim - 2];
                g
            },
            move |_| {
                let mut h = vec![vec![T::zero(); dim]; dim];
                h[dim - 2][dim - 1] = T::one();
                h[dim - 1][dim - 2] = T::one();
                h
            },
        )
    }

    /// `x_{n-1}^2 - x_n^2 = Re(x_{n-1} + i x_n)^2`.
    pub fn quadratic_re_z2<T: Real>(dim: usize) -> AnalyticField<T> {
        AnalyticField::new(
            dim,
            move |x| x[dim - 2] * x[dim - 2] - x[dim - 1] * x[dim - 1],
            move |x| {
                let mut g = vec![T::zero(); dim];
                g[dim - 2] = T::lit(2.0) * x[dim - 2];
                g[dim - 1] = T::lit(-2.0) * x[dim - 1];
                g
            },
            move |_| {
                let mut h = vec![vec![T::zero(); dim]; dim];
                h[dim - 2][dim - 2] = T::lit(2.0);
                h[dim - 1][dim - 1] = T::lit(-2.0);
                h
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQRT2_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn u0_reference_values() {
        let p = BlowupProfile::standard(3, 1.0_f64);
        assert!((p.eval_u0(&[0.0, 1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((p.eval_u0(&[0.0, 0.0, 1.0]) + SQRT2_2).abs() < 1e-15);
        assert!(p.eval_u0(&[0.3, -0.7, 0.0]).abs() < 1e-15);
        assert!(p.eval_u0(&[0.0, -0.7, -0.0]).abs() < 1e-15);
    }

    #[test]
    fn u0_gradient_and_hessian_2d_at_unit_point() {
        let p = BlowupProfile::standard(2, 1.0_f64);
        let g = p.grad_u0(&[1.0, 0.0]).unwrap();
        assert!((g[0] - 1.5).abs() < 1e-15 && g[1].abs() < 1e-15);
        let h = p.hess_u0(&[1.0, 0.0]).unwrap();
        assert!((h[0][0] - 0.75).abs() < 1e-15 && h[0][1].abs() < 1e-15 && (h[1][1] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn hessian_on_singular_line_is_error() {
        let p = BlowupProfile::standard(3, 1.0_f64);
        assert!(matches!(p.hess_u0(&[0.4, 0.0, 0.0]), Err(Error::SingularLine)));
    }

    #[test]
    fn scaled_hessian_determinant_is_constant() {
        let p = BlowupProfile::standard(2, 1.0_f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0)];
            let h = p.hess_u0(&x).unwrap();
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            assert!((det * r + 9.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn u0_is_three_halves_homogeneous() {
        let nu = vec![0.6, 0.8];
        let p = BlowupProfile::new(2.5_f64, nu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)];
            let v = p.eval_u0(&x);
            for lam in [0.5, 2.0, 10.0] {
                let xl: Vec<f64> = x.iter().map(|c| lam * c).collect();
                let vl = p.eval_u0(&xl);
                assert!((vl - lam.powf(1.5) * v).abs() <= 1e-12 * vl.abs().max(1e-300) + 1e-14);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences_at_second_order() {
        let p = BlowupProfile::new(1.3_f64, vec![0.6, 0.8]).unwrap();
        let x = [0.2, 0.3, 0.4];
        let g = p.grad_u0(&x).unwrap();
        let err = |h: f64| {
            (0..3)
                .map(|k| {
                    let mut a = x;
                    let mut b = x;
                    a[k] += h;
                    b[k] -= h;
                    ((p.eval_u0(&a) - p.eval_u0(&b)) / (2.0 * h) - g[k]).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn hessian_matches_differences_of_gradient() {
        let p = BlowupProfile::new(0.7_f64, vec![-0.28, 0.96]).unwrap();
        let x = [0.1, -0.3, 0.25];
        let h = p.hess_u0(&x).unwrap();
        let d = 1e-6;
        for k in 0..3 {
            let mut a = x;
            let mut b = x;
            a[k] += d;
            b[k] -= d;
            let (ga, gb) = (p.grad_u0(&a).unwrap(), p.grad_u0(&b).unwrap());
            for i in 0..3 {
                assert!(((ga[i] - gb[i]) / (2.0 * d) - h[i][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn legendre_blowup_reference_values() {
        let v = LegendreBlowup::new(&BlowupProfile::standard(3, 1.0_f64)).unwrap();
        assert!((v.eval(&[0.0, 1.0, 0.0]) + 4.0 / 27.0).abs() < 1e-15);
        assert_eq!(v.eval(&[0.3, 0.0, 0.8]), 0.0);
        assert!((v.third_derivatives()[0] + 8.0 / 9.0).abs() < 1e-15);
        let c2 = LegendreBlowup::new(&BlowupProfile::standard(3, 2.0_f64)).unwrap();
        assert!((c2.third_derivatives()[0] + 8.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn legendre_blowup_rejects_nonpositive_normal() {
        let p = BlowupProfile::new(1.0, vec![1.0, 0.0]).unwrap();
        assert!(LegendreBlowup::new(&p).is_err());
    }

    #[test]
    fn legendre_blowup_satisfies_the_nonlinear_equation() {
        for p in [BlowupProfile::standard(3, 1.0_f64), BlowupProfile::rotated(1.7_f64, 0.3)] {
            let v = LegendreBlowup::new(&p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..50 {
                let y = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let h = v.hess(&y);
                let det3 = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1]) - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
                    + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
                assert!((h[1][1] + h[2][2] - det3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn legendre_blowup_matches_transform_of_u0() {
        let p = BlowupProfile::standard(3, 1.0_f64);
        let x = [0.0, 1.0, 0.0];
        let g = p.grad_u0(&x).unwrap();
        let y = [x[0], g[1], g[2]];
        let v = p.eval_u0(&x) - x[1] * y[1] - x[2] * y[2];
        assert!((v + 0.5).abs() < 1e-15);
        let vb = LegendreBlowup::new(&p).unwrap();
        assert!((vb.eval(&y) - v).abs() < 1e-14);
    }

    #[test]
    fn barrier_reference_values() {
        let b = BarrierParams::new(0.5_f64, 3).unwrap();
        assert_eq!(b.eval(&[0.0, 0.0, 0.0]).h, 0.0);
        assert!((b.g_hat(1.0) - 14.0).abs() < 1e-15);
        assert!(b.eval(&[0.0, -0.04, 0.0]).h <= 0.0);
        assert!(BarrierParams::new(1.0_f64, 3).is_err());
    }

    #[test]
    fn barrier_ratio_remainder_is_twelve_t_to_quarter() {
        // h(0,t,0)/t^{1/2} = 1 + (g_coeff - 2) t^{alpha/2}; at t = 1e-8 that is 1.12.
        let b = BarrierParams::new(0.5_f64, 3).unwrap();
        let t = 1e-8;
        let ratio = b.eval(&[0.0, t, 0.0]).h / t.sqrt();
        assert!((ratio - 1.12).abs() < 1e-12, "{ratio}");
        let t = 1e-16;
        let ratio = b.eval(&[0.0, t, 0.0]).h / t.sqrt();
        assert!((ratio - 1.0012).abs() < 1e-10);
    }

    #[test]
    fn barrier_u_squared_identity() {
        let b = BarrierParams::new(0.5_f64, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)];
            let u = b.u_of(&x);
            let rhs = ((x[1] * x[1] + x[2] * x[2]).sqrt() + x[1]) / 2.0;
            assert!((u * u - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn barrier_is_subharmonic_deep_in_complement() {
        let b = BarrierParams::new(0.5_f64, 3).unwrap();
        let x = [0.0, 0.5, 0.5];
        let h = 1e-3;
        let f0 = b.eval(&x).h;
        let mut lap = 0.0;
        for k in 0..3 {
            let mut a = x;
            let mut c = x;
            a[k] += h;
            c[k] -= h;
            lap += (b.eval(&a).h - 2.0 * f0 + b.eval(&c).h) / (h * h);
        }
        assert!(lap >= 0.0, "{lap}");
    }

    #[test]
    fn barrier_sweep_reports_sign_failure_at_rho_005() {
        // With g coefficient 14 the plane value near the graph is positive for |x''| ~ 0.05.
        let b = BarrierParams::new(0.5_f64, 3).unwrap();
        let x = [0.05, 0.05f64.powf(1.5), 0.0];
        assert!(b.eval(&x).h > 0.3);
        let report = check_barrier_properties(&b, &BarrierCheckConfig { resolution: 17, ..Default::default() }).unwrap();
        assert!(report.subharmonic_pass, "{report:?}");
        assert!(!report.sign_pass);
        assert!(report.largest_passing_rho > 0.0 && report.largest_passing_rho < 0.05);
        let small = check_barrier_properties(
            &b,
            &BarrierCheckConfig { rho: report.largest_passing_rho, resolution: 17, ..Default::default() },
        )
        .unwrap();
        assert!(small.sign_max <= 1e-14);
    }

    #[test]
    fn correction_solution_is_harmonic() {
        let p = BlowupProfile::standard(3, 1.0_f64);
        let u = blowup_with_correction(&p, 0.3);
        let x = [0.2, 0.3, 0.4];
        let h = u.hessian(&x).unwrap();
        assert!((h[0][0] + h[1][1] + h[2][2]).abs() < 1e-12);
    }
}
