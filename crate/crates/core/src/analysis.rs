//! Convergence constants, tracking bounds, and a reference saddle-point
//! solver used to measure how far a run is from the moving optimum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;
use num_traits::Float;

use crate::aggregation::disaggregate;
use crate::controller::{constraint_gradient, dual_step, ControllerParams, DualState, MeasurementFrame, Targets, UnitKind, UnitSpec};
use crate::error::{Error, Result};
use crate::regions::{project, OperatingRegion, Setpoint};
use crate::sensitivity::SensitivityModel;

/// `c(α) = [1 − 2α min(r_p, r_d) + α²(L + r_p + 5G)² + 5α²(G + r_d)²]^½`.
pub fn contraction(alpha: f64, r_p: f64, r_d: f64, l: f64, g: f64) -> Result<f64> {
    if [alpha, r_p, r_d, l, g].iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Parameter("contraction inputs must be finite and nonnegative".into()));
    }
    let radicand = 1.0 - 2.0 * alpha * r_p.min(r_d)
        + alpha * alpha * (l + r_p + 5.0 * g).powi(2)
        + 5.0 * alpha * alpha * (g + r_d).powi(2);
    if radicand < 0.0 {
        return Err(Error::Parameter(format!("negative radicand {radicand:e} in the contraction factor")));
    }
    Ok(Float::sqrt(radicand))
}

/// Largest step size for which `c(α) < 1` is guaranteed.
pub fn max_stepsize(r_p: f64, r_d: f64, l: f64, g: f64) -> f64 {
    r_p.min(r_d) / ((l + r_p + 5.0 * g).powi(2) + 5.0 * (g + r_d).powi(2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceConstants {
    pub l: f64,
    pub g: f64,
    pub r_p: f64,
    pub r_d: f64,
    pub alpha: f64,
    pub c: f64,
}

impl ConvergenceConstants {
    pub fn new(alpha: f64, r_p: f64, r_d: f64, l: f64, g: f64) -> Result<ConvergenceConstants> {
        Ok(ConvergenceConstants { l, g, r_p, r_d, alpha, c: contraction(alpha, r_p, r_d, l, g)? })
    }

    pub fn contracts(&self) -> bool {
        self.c < 1.0
    }
}

/// Error terms of a single step.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct StepErrors {
    pub e_x: f64,
    pub e_0: f64,
    pub e_v: f64,
    pub e_l: f64,
    pub sigma: f64,
}

impl StepErrors {
    /// `‖[(L + r_p)e_x, e_v, e_v, e_0, e_0, e_L]‖₂`.
    pub fn combined(&self, l: f64, r_p: f64) -> f64 {
        combine(self.e_x, self.e_0, self.e_v, self.e_l, l, r_p)
    }
}

fn combine(e_x: f64, e_0: f64, e_v: f64, e_l: f64, l: f64, r_p: f64) -> f64 {
    Float::sqrt(((l + r_p) * e_x).powi(2) + 2.0 * e_v * e_v + 2.0 * e_0 * e_0 + e_l * e_l)
}

/// Uniform error bounds over a run.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ErrorBudget {
    pub e_x: f64,
    pub e_0: f64,
    pub e_v: f64,
    pub e_l: f64,
    pub e: f64,
    pub sigma: f64,
    pub delta: f64,
}

impl ErrorBudget {
    pub fn new(e_x: f64, e_0: f64, e_v: f64, e_l: f64, sigma: f64, k: &ConvergenceConstants) -> ErrorBudget {
        let e = combine(e_x, e_0, e_v, e_l, k.l, k.r_p);
        ErrorBudget { e_x, e_0, e_v, e_l, e, sigma, delta: e_x + k.alpha * e + sigma }
    }

    /// Sup of each term over the given steps.
    pub fn from_steps(steps: &[StepErrors], k: &ConvergenceConstants) -> ErrorBudget {
        let sup = |f: fn(&StepErrors) -> f64| steps.iter().map(f).fold(0.0, f64::max);
        ErrorBudget::new(sup(|s| s.e_x), sup(|s| s.e_0), sup(|s| s.e_v), sup(|s| s.e_l), sup(|s| s.sigma), k)
    }

    /// `Δ / (1 − c)`.
    pub fn asymptotic_bound(&self, c: f64) -> Result<f64> {
        asymptotic_bound(c, self.delta)
    }
}

pub fn asymptotic_bound(c: f64, delta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::Parameter(format!("asymptotic bound needs c in [0, 1), got {c}")));
    }
    Ok(delta / (1.0 - c))
}

/// Bound on `‖z^(k) − z^(k,⋆)‖` for `k = 0..=n` given `n` per-step terms
/// `(e_x, ‖e‖, σ)`.
pub fn trajectory_bound(c: f64, alpha: f64, z0_gap: f64, per_step: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(per_step.len() + 1);
    let mut b = z0_gap;
    out.push(b);
    // b_{k+1} = c·b_k + Δ^(k) unrolls to the geometric sum
    for &(e_x, e, sigma) in per_step {
        b = c * b + (e_x + alpha * e + sigma);
        out.push(b);
    }
    out
}

/// Everything needed to evaluate the error terms of one step of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub z: DVector<f64>,
    pub z_star: DVector<f64>,
    /// Continuous commands `x^(k)` per unit.
    pub commanded: Vec<Setpoint>,
    /// Outputs used to seed the gradients.
    pub measured: Vec<Setpoint>,
    pub predicted_v: DVector<f64>,
    pub predicted_i: DVector<f64>,
    pub predicted_p0: DVector<f64>,
    pub measured_v: DVector<f64>,
    pub measured_i: DVector<f64>,
    pub measured_p0: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMeasurement {
    pub steps: Vec<StepErrors>,
    pub budget: ErrorBudget,
    pub gaps: Vec<f64>,
    pub bounds: Vec<f64>,
    pub within: Vec<bool>,
}

impl RunMeasurement {
    pub fn all_within(&self) -> bool {
        self.within.iter().all(|&b| b)
    }

    /// Mean gap over the last `frac` of the run.
    pub fn tail_mean(&self, frac: f64) -> f64 {
        let n = self.gaps.len();
        let start = n - ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.gaps[start..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn dist<'a>(a: impl Iterator<Item = &'a Setpoint>, b: impl Iterator<Item = &'a Setpoint>) -> f64 {
    Float::sqrt(a.zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>())
}

/// Per-step errors, realized gaps, and the tracking bound of a run.
pub fn measure_run(records: &[StepRecord], k: &ConvergenceConstants) -> Result<RunMeasurement> {
    if records.is_empty() {
        return Err(Error::Dimension("empty run".into()));
    }
    let mut steps = Vec::with_capacity(records.len());
    for (n, r) in records.iter().enumerate() {
        if r.commanded.len() != r.measured.len()
            || r.predicted_v.len() != r.measured_v.len()
            || r.predicted_i.len() != r.measured_i.len()
            || r.predicted_p0.len() != r.measured_p0.len()
            || r.z.len() != r.z_star.len()
        {
            return Err(Error::Dimension(format!("record {n} has mismatched fields")));
        }
        let sigma = records.get(n + 1).map(|next| (&next.z_star - &r.z_star).norm()).unwrap_or(0.0);
        steps.push(StepErrors {
            e_x: dist(r.commanded.iter(), r.measured.iter()),
            e_0: (&r.predicted_p0 - &r.measured_p0).norm(),
            e_v: (&r.predicted_v - &r.measured_v).norm(),
            e_l: (&r.predicted_i - &r.measured_i).norm(),
            sigma,
        });
    }
    let gaps: Vec<f64> = records.iter().map(|r| (&r.z - &r.z_star).norm()).collect();
    let terms: Vec<(f64, f64, f64)> = steps[..steps.len() - 1].iter().map(|s| (s.e_x, s.combined(k.l, k.r_p), s.sigma)).collect();
    let bounds = trajectory_bound(k.c, k.alpha, gaps[0], &terms);
    let within = gaps.iter().zip(&bounds).map(|(g, b)| *g <= *b * (1.0 + 1e-9) + 1e-12).collect();
    // the last step's σ is unknown; the budget uses the measured ones
    let budget = ErrorBudget::from_steps(&steps, k);
    Ok(RunMeasurement { steps, budget, gaps, bounds, within })
}

/// Gradient Lipschitz constant of the unit costs: twice the largest
/// quadratic weight, raised by a finite-difference fit of the aggregate
/// gradient `−ξ` over each folded region.
pub fn lipschitz_estimate(units: &[UnitSpec], grid: usize) -> Result<f64> {
    let mut l: f64 = 0.0;
    for u in units {
        match &u.kind {
            UnitKind::Device { cost, .. } => l = l.max(cost.lipschitz()),
            UnitKind::Aggregation { members, region } => {
                for m in members {
                    l = l.max(m.cost.lipschitz());
                }
                l = l.max(aggregate_lipschitz_fit(members, region, grid)?);
            }
        }
    }
    Ok(l)
}

fn aggregate_lipschitz_fit(members: &[crate::aggregation::Member], region: &OperatingRegion, grid: usize) -> Result<f64> {
    if grid < 2 {
        return Ok(0.0);
    }
    let (p0, p1, q0, q1) = region.bounds();
    let center = region.center();
    let mut pts = Vec::new();
    for a in 0..grid {
        for b in 0..grid {
            let y = Setpoint::new(
                p0 + (p1 - p0) * a as f64 / (grid - 1) as f64,
                q0 + (q1 - q0) * b as f64 / (grid - 1) as f64,
            );
            if region.contains(&y, 0.0) {
                // the dual is unbounded on the boundary; stay strictly inside
                pts.push(center + (y - center) * 0.95);
            }
        }
    }
    let mut grads = Vec::with_capacity(pts.len());
    let mut warm = Setpoint::zeros();
    for x in &pts {
        let r = disaggregate(members, x, &warm, &Default::default())?;
        warm = r.xi;
        grads.push(-r.xi);
    }
    let mut fit: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = (pts[i] - pts[j]).norm();
            if d > 1e-9 {
                fit = fit.max((grads[i] - grads[j]).norm() / d);
            }
        }
    }
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceOptions {
    /// Target distance to the saddle point in the stacked `z` norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions { tol: 1e-10, max_iter: 200_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaddlePoint {
    pub x: Vec<Setpoint>,
    pub xi: Vec<Setpoint>,
    pub duals: DualState,
    /// [`kkt_residual`] at the returned point.
    pub residual: f64,
    pub iterations: usize,
}

impl SaddlePoint {
    /// Same layout as [`ControllerState::z`](crate::controller::ControllerState::z).
    pub fn z(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.x.iter().flat_map(|x| [x.x, x.y]).collect();
        v.extend(self.duals.stacked());
        DVector::from_vec(v)
    }
}

/// Problem data that defines one saddle point.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub units: &'a [UnitSpec],
    pub model: &'a SensitivityModel,
    pub params: &'a ControllerParams,
    pub targets: &'a Targets,
}

impl Problem<'_> {
    fn check(&self) -> Result<()> {
        if self.model.units.len() != self.units.len() {
            return Err(Error::Dimension("model and unit list differ in length".into()));
        }
        Ok(())
    }

    /// Spectral norm of the constraint Jacobian `[−A; A; B; sM; −sM]`.
    fn constraint_gain(&self) -> f64 {
        let n = self.units.len();
        let (nv, ni) = (self.model.n_voltage(), self.model.n_current());
        let s = if self.targets.s { 1.0 } else { 0.0 };
        let mut j = nalgebra::DMatrix::zeros(nv + ni + 3, 2 * n);
        for (k, u) in self.model.units.iter().enumerate() {
            j.view_mut((0, 2 * k), (nv, 2)).copy_from(&(&u.a * Float::sqrt(2.0)));
            j.view_mut((nv, 2 * k), (ni, 2)).copy_from(&u.b);
            j.view_mut((nv + ni, 2 * k), (3, 2)).copy_from(&(&u.m * Float::sqrt(2.0 * s)));
        }
        crate::sensitivity::spectral_norm(&j)
    }
}

/// Duals maximizing the regularized Lagrangian at fixed setpoints:
/// `[g(x)]₊ / r_d` with `g` the constraint residuals under the affine model.
pub fn optimal_duals(p: &Problem, x: &[Setpoint]) -> Result<DualState> {
    let pred = p.model.predict(x)?;
    let (pr, t) = (p.params, p.targets);
    let inv = 1.0 / pr.r_d;
    let pos = |v: f64| v.max(0.0) * inv;
    let s = if t.s { 1.0 } else { 0.0 };
    Ok(DualState {
        mu: pred.v.map(|v| pos(pr.v_min - v)),
        gamma: pred.v.map(|v| pos(v - pr.v_max)),
        zeta: DVector::from_iterator(pred.i.len(), pred.i.iter().zip(pr.i_max.iter()).map(|(i, m)| pos(i - m))),
        lambda: DVector::from_fn(3, |k, _| pos(s * (pred.p0[k] - t.p0_set[k] - t.e))),
        nu: DVector::from_fn(3, |k, _| pos(s * (t.p0_set[k] - pred.p0[k] - t.e))),
    })
}

/// Gradient of the dual-eliminated primal objective, and the aggregation
/// duals found on the way.
fn reduced_gradient(p: &Problem, x: &[Setpoint], xi_warm: &[Setpoint]) -> Result<(Vec<Setpoint>, Vec<Setpoint>)> {
    let d = optimal_duals(p, x)?;
    let mut grad = Vec::with_capacity(x.len());
    let mut xi = Vec::with_capacity(x.len());
    for (j, u) in p.units.iter().enumerate() {
        let (gf, xj) = match &u.kind {
            UnitKind::Device { cost, .. } => (cost.gradient(&x[j]), Setpoint::zeros()),
            UnitKind::Aggregation { members, .. } => {
                let r = disaggregate(members, &x[j], &xi_warm[j], &p.params.disaggregation)?;
                (-r.xi, r.xi)
            }
        };
        grad.push(gf + constraint_gradient(&p.model.units[j], &d, p.targets.s) + x[j] * p.params.r_p);
        xi.push(xj);
    }
    Ok((grad, xi))
}

/// Saddle point of the regularized Lagrangian for one time instant under
/// the affine model.
///
/// The duals are eliminated in closed form, leaving a smooth problem over
/// the setpoints that is `r_p`-strongly convex; it is solved by accelerated
/// projected gradient with adaptive restart. `l` bounds the Lipschitz
/// constant of the cost gradients.
pub fn reference_saddle(p: &Problem, l: f64, warm: Option<&SaddlePoint>, opts: &ReferenceOptions) -> Result<SaddlePoint> {
    p.check()?;
    let n = p.units.len();
    let regions: Vec<OperatingRegion> = p.units.iter().map(|u| u.relaxed_region()).collect();
    let proj = |y: &[Setpoint]| -> Vec<Setpoint> { regions.iter().zip(y).map(|(r, y)| project(r, y)).collect() };
    let (r_p, r_d) = (p.params.r_p, p.params.r_d);
    let jn = p.constraint_gain();
    let lf = l + r_p + jn * jn / r_d;
    let step = 1.0 / lf;
    // ‖z − z*‖ ≤ (1 + ‖J‖/r_d)‖x − x*‖ ≤ (1 + ‖J‖/r_d)(2/r_p)‖G‖
    let scale = (1.0 + jn / r_d) * 2.0 / r_p;

    let (mut x, mut xi) = match warm {
        Some(w) if w.x.len() == n => (proj(&w.x), w.xi.clone()),
        _ => (proj(&vec![Setpoint::zeros(); n]), vec![Setpoint::zeros(); n]),
    };
    let mut y = x.clone();
    let mut t = 1.0;
    for it in 1..=opts.max_iter {
        let (grad, xi_y) = reduced_gradient(p, &y, &xi)?;
        xi = xi_y;
        let stepped: Vec<Setpoint> = y.iter().zip(&grad).map(|(y, g)| y - g * step).collect();
        let x_new = proj(&stepped);
        let gmap = dist(y.iter(), x_new.iter()) / step;
        if gmap * scale <= opts.tol {
            let (_, xi_fin) = reduced_gradient(p, &x_new, &xi)?;
            let duals = optimal_duals(p, &x_new)?;
            let residual = kkt_residual(p, &x_new, &duals, step)?;
            return Ok(SaddlePoint { x: x_new, xi: xi_fin, duals, residual, iterations: it });
        }
        // restart the momentum when it points against the gradient step
        let uphill: f64 = y.iter().zip(&x_new).zip(&x).map(|((y, xn), xo)| (y - xn).dot(&(xn - xo))).sum();
        if uphill > 0.0 {
            t = 1.0;
            y = x_new.clone();
        } else {
            let t_next = 0.5 * (1.0 + Float::sqrt(1.0 + 4.0 * t * t));
            let beta = (t - 1.0) / t_next;
            y = x_new.iter().zip(&x).map(|(xn, xo)| xn + (xn - xo) * beta).collect();
            t = t_next;
        }
        x = x_new;
    }
    Err(Error::NotConverged { gap: f64::NAN })
}

/// One synchronous projected-gradient sweep of the regularized Lagrangian
/// with the affine model in place of the plant.
fn jacobi_sweep(p: &Problem, x: &[Setpoint], d: &DualState, step: f64) -> Result<(Vec<Setpoint>, DualState)> {
    let pred = p.model.predict(x)?;
    let frame = MeasurementFrame { t: 0.0, v_mag: pred.v, i_mag: pred.i, p0: pred.p0, outputs: x.to_vec() };
    let mut sweep_params = p.params.clone();
    sweep_params.alpha = step;
    let d_next = dual_step(d, &frame, &sweep_params, p.targets)?;
    let mut x_next = Vec::with_capacity(x.len());
    for (j, u) in p.units.iter().enumerate() {
        let m = &p.model.units[j];
        let (region, grad) = match &u.kind {
            UnitKind::Device { region, cost } => (region.relaxed(), cost.gradient(&x[j])),
            UnitKind::Aggregation { members, region } => {
                let r = disaggregate(members, &x[j], &Setpoint::zeros(), &p.params.disaggregation)?;
                (region.clone(), -r.xi)
            }
        };
        let g = grad + constraint_gradient(m, d, p.targets.s) + x[j] * p.params.r_p;
        x_next.push(project(&region, &(x[j] - g * step)));
    }
    Ok((x_next, d_next))
}

fn stacked_diff(x: &[Setpoint], y: &[Setpoint], a: &DualState, b: &DualState) -> f64 {
    let dx = dist(x.iter(), y.iter());
    let dd = a.stacked().iter().zip(&b.stacked()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    Float::sqrt(dx * dx + dd)
}

/// Fixed-point residual `‖T(z) − z‖ / step` of one synchronous
/// primal-dual sweep; zero exactly at the saddle point.
pub fn kkt_residual(p: &Problem, x: &[Setpoint], duals: &DualState, step: f64) -> Result<f64> {
    p.check()?;
    let (xn, dn) = jacobi_sweep(p, x, duals, step)?;
    Ok(stacked_diff(&xn, x, &dn, duals) / step)
}
