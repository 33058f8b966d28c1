//! Riemannian tools on low-dimensional coordinate spaces: Christoffel symbols
//! from finite differences, geodesic integration, path length, shooting for
//! geodesic distance, and empirical convergence rates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetry tolerance for metric evaluations.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Field of symmetric positive-definite matrices over `ℝ^d`.
///
/// Implementations must be pure; they are evaluated many times per step.
pub trait MetricField {
    fn dim(&self) -> usize;
    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>>;
}

impl<M: MetricField + ?Sized> MetricField for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        (**self).metric(x)
    }
}

/// Flat metric `g = I`.
#[derive(Clone, Copy, Debug)]
pub struct Euclidean {
    pub dim: usize,
}

impl MetricField for Euclidean {
    fn dim(&self) -> usize {
        self.dim
    }

    fn metric(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.dim, self.dim))
    }
}

/// Euclidean plane in polar coordinates `(r, φ)`: `g = diag(1, r²)`.
#[derive(Clone, Copy, Debug)]
pub struct Polar;

impl MetricField for Polar {
    fn dim(&self) -> usize {
        2
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0,
            x[0] * x[0],
        ])))
    }
}

/// Poincaré half-plane `y > 0`: `g = diag(1/y², 1/y²)`.
#[derive(Clone, Copy, Debug)]
pub struct HalfPlane;

impl MetricField for HalfPlane {
    fn dim(&self) -> usize {
        2
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if !(x[1] > 0.0) {
            return Err(Error::SingularMetric { point: x.to_vec() });
        }
        let s = 1.0 / (x[1] * x[1]);
        Ok(DMatrix::from_diagonal(&DVector::from_vec(vec![s, s])))
    }
}

/// Metric given by a closure.
pub struct FnMetric<F> {
    dim: usize,
    f: F,
}

impl<F> FnMetric<F>
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> MetricField for FnMetric<F>
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok((self.f)(x))
    }
}

/// Evaluates `g` at `x` and checks symmetry and positive-definiteness.
pub fn checked_metric<G: MetricField + ?Sized>(g: &G, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = g.dim();
    if x.len() != d {
        return Err(Error::ShapeMismatch {
            left: vec![d],
            right: vec![x.len()],
        });
    }
    let m = g.metric(x)?;
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::ShapeMismatch {
            left: vec![d, d],
            right: vec![m.nrows(), m.ncols()],
        });
    }
    let finite = m.iter().all(|v| v.is_finite());
    let symmetric =
        (0..d).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= SYMMETRY_TOLERANCE));
    if !finite || !symmetric || m.clone().cholesky().is_none() {
        return Err(Error::SingularMetric { point: x.to_vec() });
    }
    Ok(m)
}

/// `Γ^λ_{μν}` at one point, stored `[λ][μ][ν]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel {
    dim: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, upper: usize, a: usize, b: usize) -> f64 {
        self.data[(upper * self.dim + a) * self.dim + b]
    }

    /// Geodesic acceleration `−Γ^λ_{μν} v^μ v^ν`.
    pub fn acceleration(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|l| {
                let mut acc = 0.0;
                for m in 0..d {
                    for n in 0..d {
                        acc += self.get(l, m, n) * v[m] * v[n];
                    }
                }
                -acc
            })
            .collect()
    }
}

/// Christoffel symbols of the second kind by central differences of `g`:
///
/// `Γ^λ_{μν} = ½ g^{λσ} (∂_ν g_{μσ} + ∂_μ g_{νσ} − ∂_σ g_{μν})`.
pub fn christoffel<G: MetricField + ?Sized>(g: &G, x: &[f64], fd_step: f64) -> Result<Christoffel> {
    if !(fd_step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {fd_step}"
        )));
    }
    let d = g.dim();
    let g0 = checked_metric(g, x)?;
    let inv = g0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMetric { point: x.to_vec() })?
        .inverse();

    let mut dg = Vec::with_capacity(d);
    let mut probe = x.to_vec();
    for s in 0..d {
        probe[s] = x[s] + fd_step;
        let plus = checked_metric(g, &probe)?;
        probe[s] = x[s] - fd_step;
        let minus = checked_metric(g, &probe)?;
        probe[s] = x[s];
        let diff = (plus - minus) / (2.0 * fd_step);
        dg.push((&diff + diff.transpose()) * 0.5);
    }

    let mut data = vec![0.0; d * d * d];
    for l in 0..d {
        for m in 0..d {
            for n in m..d {
                let mut sum = 0.0;
                for s in 0..d {
                    let first_kind = dg[n][(m, s)] + dg[m][(n, s)] - dg[s][(m, n)];
                    sum += inv[(l, s)] * first_kind;
                }
                data[(l * d + m) * d + n] = 0.5 * sum;
                data[(l * d + n) * d + m] = 0.5 * sum;
            }
        }
    }
    Ok(Christoffel { dim: d, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Sampled solution of the geodesic equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicPath {
    pub points: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub step: f64,
}

impl GeodesicPath {
    pub fn endpoint(&self) -> &[f64] {
        self.points.last().expect("path has at least one point")
    }
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect()
}

/// One explicit Euler step of the first-order geodesic system:
/// `x' = x + h v`, `v' = v − h Γ(x) v v`.
pub fn geodesic_step_euler<G: MetricField + ?Sized>(
    x: &[f64],
    v: &[f64],
    g: &G,
    h: f64,
    fd_step: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    let acc = christoffel(g, x, fd_step)?.acceleration(v);
    Ok((axpy(h, v, x), axpy(h, &acc, v)))
}

/// One classical fourth-order Runge-Kutta step of the same system.
pub fn geodesic_step_rk4<G: MetricField + ?Sized>(
    x: &[f64],
    v: &[f64],
    g: &G,
    h: f64,
    fd_step: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    let accel = |x: &[f64], v: &[f64]| -> Result<Vec<f64>> {
        Ok(christoffel(g, x, fd_step)?.acceleration(v))
    };
    let k1x = v.to_vec();
    let k1v = accel(x, v)?;
    let x2 = axpy(h / 2.0, &k1x, x);
    let v2 = axpy(h / 2.0, &k1v, v);
    let k2x = v2.clone();
    let k2v = accel(&x2, &v2)?;
    let x3 = axpy(h / 2.0, &k2x, x);
    let v3 = axpy(h / 2.0, &k2v, v);
    let k3x = v3.clone();
    let k3v = accel(&x3, &v3)?;
    let x4 = axpy(h, &k3x, x);
    let v4 = axpy(h, &k3v, v);
    let k4x = v4.clone();
    let k4v = accel(&x4, &v4)?;
    let combine = |base: &[f64], k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64]| -> Vec<f64> {
        (0..base.len())
            .map(|i| base[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    };
    Ok((
        combine(x, &k1x, &k2x, &k3x, &k4x),
        combine(v, &k1v, &k2v, &k3v, &k4v),
    ))
}

/// Integrates the geodesic from `(x0, v0)` for `steps` steps of size `h`.
pub fn integrate_geodesic<G: MetricField + ?Sized>(
    x0: &[f64],
    v0: &[f64],
    g: &G,
    h: f64,
    steps: usize,
    method: Integrator,
    fd_step: f64,
) -> Result<GeodesicPath> {
    if steps == 0 {
        return Err(Error::invalid(
            "geodesic integration needs at least one step",
        ));
    }
    if x0.len() != g.dim() || v0.len() != g.dim() {
        return Err(Error::ShapeMismatch {
            left: vec![g.dim()],
            right: vec![x0.len(), v0.len()],
        });
    }
    let mut points = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    points.push(x0.to_vec());
    velocities.push(v0.to_vec());
    for k in 0..steps {
        let (x, v) = (&points[k], &velocities[k]);
        let next = match method {
            Integrator::Euler => geodesic_step_euler(x, v, g, h, fd_step),
            Integrator::Rk4 => geodesic_step_rk4(x, v, g, h, fd_step),
        }
        .map_err(|e| Error::Integration {
            step: k,
            source: Box::new(e),
        })?;
        if next.0.iter().chain(&next.1).any(|c| !c.is_finite()) {
            return Err(Error::Integration {
                step: k,
                source: Box::new(Error::invalid("state became non-finite")),
            });
        }
        points.push(next.0);
        velocities.push(next.1);
    }
    Ok(GeodesicPath {
        points,
        velocities,
        step: h,
    })
}

fn quadratic_form(g: &DMatrix<f64>, v: &[f64]) -> f64 {
    let v = DVector::from_column_slice(v);
    (v.transpose() * g * &v)[(0, 0)]
}

/// Squared speed `g_ij v^i v^j` at `x`.
pub fn speed_squared<G: MetricField + ?Sized>(g: &G, x: &[f64], v: &[f64]) -> Result<f64> {
    Ok(quadratic_form(&checked_metric(g, x)?, v))
}

/// Riemannian length of a polyline, midpoint rule on every segment:
/// `Σ_k √(Δxᵀ g(mid) Δx)`.
pub fn path_length<G: MetricField + ?Sized>(points: &[Vec<f64>], g: &G) -> Result<f64> {
    let mut total = 0.0;
    for pair in points.windows(2) {
        let delta: Vec<f64> = pair[1].iter().zip(&pair[0]).map(|(b, a)| b - a).collect();
        let mid: Vec<f64> = pair[1]
            .iter()
            .zip(&pair[0])
            .map(|(b, a)| 0.5 * (a + b))
            .collect();
        total += quadratic_form(&checked_metric(g, &mid)?, &delta)
            .max(0.0)
            .sqrt();
    }
    Ok(total)
}

/// Boundary-value settings for [`geodesic_distance`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingConfig {
    /// Integration steps over unit time; the step size is `1 / steps`.
    pub steps: usize,
    pub method: Integrator,
    pub fd_step: f64,
    /// Endpoint residual (Euclidean, in coordinates) accepted as a hit.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            method: Integrator::Rk4,
            fd_step: DEFAULT_FD_STEP,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicSolution {
    pub distance: f64,
    pub initial_velocity: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub path: GeodesicPath,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Geodesic distance between `a` and `b` by shooting: damped Newton on the
/// initial velocity until the unit-time endpoint hits `b`, then the length of
/// the resulting path.
pub fn geodesic_distance<G: MetricField + ?Sized>(
    a: &[f64],
    b: &[f64],
    g: &G,
    cfg: &ShootingConfig,
) -> Result<GeodesicSolution> {
    let d = g.dim();
    if a.len() != d || b.len() != d {
        return Err(Error::ShapeMismatch {
            left: vec![d],
            right: vec![a.len(), b.len()],
        });
    }
    let h = 1.0 / cfg.steps.max(1) as f64;
    let shoot = |v: &[f64]| -> Result<(GeodesicPath, Vec<f64>)> {
        let path = integrate_geodesic(a, v, g, h, cfg.steps, cfg.method, cfg.fd_step)?;
        let res = path.endpoint().iter().zip(b).map(|(e, t)| e - t).collect();
        Ok((path, res))
    };

    let mut v: Vec<f64> = b.iter().zip(a).map(|(bi, ai)| bi - ai).collect();
    if norm(&v) == 0.0 {
        checked_metric(g, a)?;
        return Ok(GeodesicSolution {
            distance: 0.0,
            initial_velocity: v,
            residual: 0.0,
            iterations: 0,
            path: GeodesicPath {
                points: vec![a.to_vec(), a.to_vec()],
                velocities: vec![vec![0.0; d]; 2],
                step: h,
            },
        });
    }
    let (mut path, mut res) = shoot(&v)?;
    let mut res_norm = norm(&res);
    let mut iterations = 0;
    while res_norm > cfg.tol {
        if iterations >= cfg.max_iter {
            return Err(Error::ShootingFailed {
                iterations,
                residual: res_norm,
            });
        }
        iterations += 1;

        let delta = 1e-6 * norm(&v).max(1.0);
        let mut jac = DMatrix::zeros(d, d);
        for k in 0..d {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[k] += delta;
            vm[k] -= delta;
            let (_, rp) = shoot(&vp)?;
            let (_, rm) = shoot(&vm)?;
            for i in 0..d {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * delta);
            }
        }
        let rhs = -DVector::from_column_slice(&res);
        let step = match jac.clone().lu().solve(&rhs) {
            Some(s) => s,
            None => jac
                .svd(true, true)
                .solve(&rhs, 1e-14)
                .map_err(|_| Error::ShootingFailed {
                    iterations,
                    residual: res_norm,
                })?,
        };

        let mut damping = 1.0;
        let mut accepted = false;
        while damping >= 1.0 / 1024.0 {
            let trial: Vec<f64> = v
                .iter()
                .zip(step.iter())
                .map(|(vi, si)| vi + damping * si)
                .collect();
            if let Ok((p, r)) = shoot(&trial) {
                let rn = norm(&r);
                if rn < res_norm {
                    v = trial;
                    path = p;
                    res = r;
                    res_norm = rn;
                    accepted = true;
                    break;
                }
            }
            damping *= 0.5;
        }
        if !accepted {
            return Err(Error::ShootingFailed {
                iterations,
                residual: res_norm,
            });
        }
    }
    let distance = path_length(&path.points, g)?;
    Ok(GeodesicSolution {
        distance,
        initial_velocity: v,
        residual: res_norm,
        iterations,
        path,
    })
}

/// Error sequence `ε_n` and its empirical contraction rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub errors: Vec<f64>,
    pub estimated_rate: f64,
}

/// Largest successive ratio `ε_{n+1}/ε_n` over the final two thirds of the
/// sequence. The sequence is cut at its first zero.
pub fn estimate_rate(errors: &[f64]) -> Result<ConvergenceTrace> {
    if let Some(e) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::invalid(format!(
            "error sequence entry {e} is not a non-negative number"
        )));
    }
    let cut = errors
        .iter()
        .position(|&e| e == 0.0)
        .unwrap_or(errors.len());
    let errors = &errors[..cut];
    if errors.len() < 3 {
        return Err(Error::invalid(format!(
            "rate estimation needs at least 3 positive errors, got {}",
            errors.len()
        )));
    }
    let start = errors.len() / 3;
    let estimated_rate = errors[start..]
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ConvergenceTrace {
        errors: errors.to_vec(),
        estimated_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_metric_has_no_connection() {
        let gamma = christoffel(&Euclidean { dim: 3 }, &[0.3, -1.0, 2.0], DEFAULT_FD_STEP).unwrap();
        assert!(gamma.data.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn polar_christoffel_closed_form() {
        let r = 2.0;
        let gamma = christoffel(&Polar, &[r, 0.7], DEFAULT_FD_STEP).unwrap();
        assert!((gamma.get(0, 1, 1) + r).abs() < 1e-5);
        assert!((gamma.get(1, 0, 1) - 1.0 / r).abs() < 1e-5);
        assert!((gamma.get(1, 1, 0) - 1.0 / r).abs() < 1e-5);
        for (l, m, n) in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)] {
            assert!(gamma.get(l, m, n).abs() < 1e-5, "({l},{m},{n})");
        }
    }

    #[test]
    fn singular_metric_is_reported() {
        let degenerate = FnMetric::new(2, |_x: &[f64]| {
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])
        });
        assert!(matches!(
            christoffel(&degenerate, &[0.0, 0.0], 1e-4),
            Err(Error::SingularMetric { .. })
        ));
        let asym = FnMetric::new(2, |_x: &[f64]| {
            DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.0, 2.0])
        });
        assert!(checked_metric(&asym, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn euler_step_examples() {
        let (x, v) =
            geodesic_step_euler(&[0.0, 0.0], &[1.0, 0.0], &Euclidean { dim: 2 }, 0.1, 1e-4)
                .unwrap();
        assert_eq!(x, vec![0.1, 0.0]);
        assert_eq!(v, vec![1.0, 0.0]);

        let (x, v) = geodesic_step_euler(&[0.5, 1.5], &[0.0, 0.0], &HalfPlane, 0.1, 1e-4).unwrap();
        assert_eq!(x, vec![0.5, 1.5]);
        assert_eq!(v, vec![0.0, 0.0]);

        // Γ^r_φφ = −r at r = 1 accelerates outward
        let h = 0.01;
        let (_, v) = geodesic_step_euler(&[1.0, 0.0], &[0.0, 1.0], &Polar, h, 1e-4).unwrap();
        assert!((v[0] - h).abs() < 1e-9);
        assert!((v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flat_integration_is_a_line() {
        let path = integrate_geodesic(
            &[1.0, 2.0],
            &[0.5, -1.0],
            &Euclidean { dim: 2 },
            0.25,
            8,
            Integrator::Rk4,
            1e-4,
        )
        .unwrap();
        assert_eq!(path.points.len(), 9);
        for (k, p) in path.points.iter().enumerate() {
            assert!((p[0] - (1.0 + 0.125 * k as f64)).abs() < 1e-15);
            assert!((p[1] - (2.0 - 0.25 * k as f64)).abs() < 1e-15);
        }
        assert!(integrate_geodesic(
            &[0.0],
            &[1.0],
            &Euclidean { dim: 1 },
            0.1,
            0,
            Integrator::Euler,
            1e-4
        )
        .is_err());
    }

    #[test]
    fn integration_failure_carries_step() {
        // heading straight down leaves the half-plane
        let err = integrate_geodesic(
            &[0.0, 0.05],
            &[0.0, -1.0],
            &HalfPlane,
            0.1,
            10,
            Integrator::Euler,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integration { .. }), "{err}");
    }

    #[test]
    fn path_length_examples() {
        let line: Vec<Vec<f64>> = (0..=10)
            .map(|k| vec![0.3 * k as f64, 0.4 * k as f64])
            .collect();
        assert!((path_length(&line, &Euclidean { dim: 2 }).unwrap() - 5.0).abs() < 1e-9);

        let e = std::f64::consts::E;
        let n = 2000;
        let vertical: Vec<Vec<f64>> = (0..=n)
            .map(|k| vec![0.0, 1.0 + (e - 1.0) * k as f64 / n as f64])
            .collect();
        assert!((path_length(&vertical, &HalfPlane).unwrap() - 1.0).abs() < 1e-3);
        assert_eq!(path_length(&[vec![1.0, 1.0]], &HalfPlane).unwrap(), 0.0);
    }

    #[test]
    fn distance_flat_and_coincident() {
        let cfg = ShootingConfig {
            steps: 20,
            ..ShootingConfig::default()
        };
        let sol = geodesic_distance(&[0.0, 0.0], &[3.0, 4.0], &Euclidean { dim: 2 }, &cfg).unwrap();
        assert!((sol.distance - 5.0).abs() < 1e-6);
        let sol = geodesic_distance(&[0.2, 1.0], &[0.2, 1.0], &HalfPlane, &cfg).unwrap();
        assert_eq!(sol.distance, 0.0);
    }

    #[test]
    fn rate_examples() {
        let halves: Vec<f64> = (0..12).map(|n| 0.5f64.powi(n)).collect();
        assert_eq!(estimate_rate(&halves).unwrap().estimated_rate, 0.5);

        let growing: Vec<f64> = (0..6).map(|n| 1.1f64.powi(n)).collect();
        assert!(estimate_rate(&growing).unwrap().estimated_rate > 1.0);

        let trace = estimate_rate(&[1.0, 0.5, 0.25, 0.0, 0.1]).unwrap();
        assert_eq!(trace.errors, vec![1.0, 0.5, 0.25]);
        assert!(estimate_rate(&[1.0, 0.0, 0.5]).is_err());
        assert!(estimate_rate(&[1.0, -0.5, 0.25]).is_err());
    }
}
