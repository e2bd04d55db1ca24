//! Online regularized primal-dual controller.
//!
//! One call to [`controller_step`] consumes a measurement frame and returns
//! new setpoints. Duals move first using the fresh measurements, then every
//! device and aggregation takes a projected-gradient step using the updated
//! duals, and finally discrete devices round their setpoints by error
//! diffusion.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::aggregation::{disaggregate, DisaggregationOptions, DisaggregationResult, Member, MemberCost};
use crate::analysis;
use crate::error::{Error, Result};
use crate::regions::{error_diffusion_step, project, ErrorAccumulator, OperatingRegion, Setpoint};
use crate::sensitivity::{SensitivityModel, UnitSensitivity};

/// Relative distance by which aggregate setpoints are kept off the boundary
/// of their region before disaggregation.
pub const INTERIOR_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerParams {
    pub alpha: f64,
    pub r_p: f64,
    pub r_d: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Ampacity per monitored current channel.
    pub i_max: DVector<f64>,
    /// Sampling interval in seconds.
    pub h: f64,
    pub disaggregation: DisaggregationOptions,
}

impl ControllerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.r_p > 0.0 && self.r_d > 0.0) {
            return Err(Error::Parameter("alpha, r_p and r_d must be positive".into()));
        }
        if !(self.v_min < self.v_max) {
            return Err(Error::Parameter(format!("v_min {} must be below v_max {}", self.v_min, self.v_max)));
        }
        if !(self.h > 0.0) {
            return Err(Error::Parameter("sampling interval must be positive".into()));
        }
        Ok(())
    }

    /// Warns when `alpha` is at or above the step size that guarantees a
    /// contraction; returns whether it is below.
    pub fn check_stepsize(&self, l: f64, g: f64) -> bool {
        let bound = analysis::max_stepsize(self.r_p, self.r_d, l, g);
        let ok = self.alpha < bound;
        if !ok {
            log::warn!("step size {} is not below the contraction bound {bound:e} (L={l}, G={g})", self.alpha);
        }
        ok
    }
}

/// Head-power tracking request for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Targets {
    pub p0_set: [f64; 3],
    /// Tracking band half-width.
    pub e: f64,
    /// Whether tracking is requested this step.
    pub s: bool,
}

impl Default for Targets {
    fn default() -> Self {
        Targets { p0_set: [0.0; 3], e: 0.0, s: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub mu: DVector<f64>,
    pub gamma: DVector<f64>,
    pub zeta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
}

impl DualState {
    pub fn zeros(n_voltage: usize, n_current: usize) -> DualState {
        DualState {
            mu: DVector::zeros(n_voltage),
            gamma: DVector::zeros(n_voltage),
            zeta: DVector::zeros(n_current),
            lambda: DVector::zeros(3),
            nu: DVector::zeros(3),
        }
    }

    /// `[γ, ν, λ, μ, ζ]`.
    pub fn stacked(&self) -> Vec<f64> {
        [&self.gamma, &self.nu, &self.lambda, &self.mu, &self.zeta].iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.stacked().iter().all(|&x| x >= 0.0)
    }
}

/// Measurements available at one sampling instant.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFrame {
    pub t: f64,
    pub v_mag: DVector<f64>,
    pub i_mag: DVector<f64>,
    pub p0: DVector<f64>,
    /// Measured output per unit (aggregations report their net output).
    pub outputs: Vec<Setpoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UnitKind {
    /// A `Discrete` region makes the device discrete: it is updated on the
    /// convex hull and rounded by error diffusion.
    Device { region: OperatingRegion, cost: MemberCost },
    Aggregation { members: Vec<Member>, region: OperatingRegion },
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitSpec {
    pub id: String,
    pub kind: UnitKind,
}

impl UnitSpec {
    pub fn device(id: impl Into<String>, region: OperatingRegion, cost: MemberCost) -> UnitSpec {
        UnitSpec { id: id.into(), kind: UnitKind::Device { region, cost } }
    }

    pub fn aggregation(id: impl Into<String>, members: Vec<Member>, region: OperatingRegion) -> UnitSpec {
        UnitSpec { id: id.into(), kind: UnitKind::Aggregation { members, region } }
    }

    /// Region of the continuous setpoint.
    pub fn relaxed_region(&self) -> OperatingRegion {
        match &self.kind {
            UnitKind::Device { region, .. } => region.relaxed(),
            UnitKind::Aggregation { region, .. } => region.clone(),
        }
    }

    fn members(&self) -> &[Member] {
        match &self.kind {
            UnitKind::Device { .. } => &[],
            UnitKind::Aggregation { members, .. } => members,
        }
    }
}

/// Per-step inputs besides the measurements.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub params: &'a ControllerParams,
    pub targets: &'a Targets,
    pub units: &'a [UnitSpec],
    pub model: &'a SensitivityModel,
}

impl StepContext<'_> {
    fn check(&self) -> Result<()> {
        if self.units.len() != self.model.units.len() {
            return Err(Error::Dimension(format!(
                "{} units but the model has {}",
                self.units.len(),
                self.model.units.len()
            )));
        }
        for (u, m) in self.units.iter().zip(&self.model.units) {
            if u.id != m.id {
                return Err(Error::UnknownUnit(u.id.clone()));
            }
        }
        if self.params.i_max.len() != self.model.n_current() {
            return Err(Error::Dimension("i_max does not match the current channels".into()));
        }
        Ok(())
    }
}

/// Setpoints sent to one unit.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitCommand {
    /// Continuous setpoint `x_j` or `x̄_j`.
    pub setpoint: Setpoint,
    /// Continuous member setpoints (aggregations only).
    pub members: Vec<Setpoint>,
    /// Implementable setpoints: one for a device, one per member otherwise.
    pub implemented: Vec<Setpoint>,
}

impl UnitCommand {
    pub fn net_implemented(&self) -> Setpoint {
        self.implemented.iter().fold(Setpoint::zeros(), |a, x| a + x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub duals: DualState,
    /// Continuous setpoint per unit.
    pub x: Vec<Setpoint>,
    /// Disaggregation dual per unit (zero for devices).
    pub xi: Vec<Setpoint>,
    pub commands: Vec<UnitCommand>,
    /// Error-diffusion state per device, or per member of an aggregation.
    pub acc: Vec<Vec<ErrorAccumulator>>,
    /// Last disaggregation gap per unit (zero for devices).
    pub gaps: Vec<f64>,
    pub k: usize,
}

impl ControllerState {
    /// Zero setpoints projected into the regions, zero duals and `ξ`.
    pub fn new(ctx: &StepContext) -> Result<ControllerState> {
        ctx.check()?;
        let mut x = Vec::with_capacity(ctx.units.len());
        let mut commands = Vec::with_capacity(ctx.units.len());
        let mut acc = Vec::with_capacity(ctx.units.len());
        let mut gaps = Vec::with_capacity(ctx.units.len());
        for u in ctx.units {
            let x0 = project(&u.relaxed_region(), &Setpoint::zeros());
            let (cmd, a, gap) = match &u.kind {
                UnitKind::Device { region, .. } => {
                    let (c, a) = implement(region, x0, &ErrorAccumulator::default());
                    (UnitCommand { setpoint: x0, members: vec![], implemented: vec![c] }, vec![a], 0.0)
                }
                UnitKind::Aggregation { members, .. } => {
                    let x0 = pull_inside(&u.relaxed_region(), x0);
                    let res = disaggregate(members, &x0, &Setpoint::zeros(), &ctx.params.disaggregation)?;
                    let (implemented, a) = implement_members(members, &res.member_setpoints, &vec![ErrorAccumulator::default(); members.len()]);
                    (UnitCommand { setpoint: x0, members: res.member_setpoints, implemented }, a, res.gap)
                }
            };
            x.push(cmd.setpoint);
            commands.push(cmd);
            acc.push(a);
            gaps.push(gap);
        }
        Ok(ControllerState {
            duals: DualState::zeros(ctx.model.n_voltage(), ctx.model.n_current()),
            xi: vec![Setpoint::zeros(); x.len()],
            x,
            commands,
            acc,
            gaps,
            k: 0,
        })
    }

    /// `z = [x_1, …, x_n, γ, ν, λ, μ, ζ]` with units in their given order.
    pub fn z(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.x.iter().flat_map(|x| [x.x, x.y]).collect();
        v.extend(self.duals.stacked());
        DVector::from_vec(v)
    }
}

fn project_nonnegative(v: DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// Dual ascent on the voltage, current and head-power constraints.
pub fn dual_step(duals: &DualState, frame: &MeasurementFrame, params: &ControllerParams, targets: &Targets) -> Result<DualState> {
    if frame.v_mag.len() != duals.mu.len() || frame.i_mag.len() != duals.zeta.len() || frame.p0.len() != 3 {
        return Err(Error::Dimension("measurement frame does not match the dual dimensions".into()));
    }
    if params.i_max.len() != duals.zeta.len() {
        return Err(Error::Dimension("i_max does not match the current channels".into()));
    }
    let (a, rd) = (params.alpha, params.r_d);
    let nv = frame.v_mag.len();
    let mu = project_nonnegative(&duals.mu + (DVector::from_element(nv, params.v_min) - &frame.v_mag - &duals.mu * rd) * a);
    let gamma =
        project_nonnegative(&duals.gamma + (&frame.v_mag - DVector::from_element(nv, params.v_max) - &duals.gamma * rd) * a);
    let zeta = project_nonnegative(&duals.zeta + (&frame.i_mag - &params.i_max - &duals.zeta * rd) * a);
    let s = if targets.s { 1.0 } else { 0.0 };
    let set = DVector::from_column_slice(&targets.p0_set);
    let band = DVector::from_element(3, targets.e);
    let lambda = project_nonnegative(&duals.lambda + ((&frame.p0 - &set) * s - &band * s - &duals.lambda * rd) * a);
    let nu = project_nonnegative(&duals.nu + ((&set - &frame.p0) * s - &band * s - &duals.nu * rd) * a);
    Ok(DualState { mu, gamma, zeta, lambda, nu })
}

/// `s Mᵀ(λ − ν) + Aᵀ(γ − μ) + Bᵀζ`.
pub fn constraint_gradient(u: &UnitSensitivity, d: &DualState, s: bool) -> Setpoint {
    let mut g = u.a.tr_mul(&(&d.gamma - &d.mu)) + u.b.tr_mul(&d.zeta);
    if s {
        g += u.m.tr_mul(&(&d.lambda - &d.nu));
    }
    Setpoint::new(g[0], g[1])
}

/// Projected-gradient step of one device from its measured output.
pub fn device_step(
    x_hat: &Setpoint,
    region: &OperatingRegion,
    cost: &MemberCost,
    model: &UnitSensitivity,
    duals: &DualState,
    params: &ControllerParams,
    s: bool,
) -> Setpoint {
    let g = cost.gradient(x_hat) + constraint_gradient(model, duals, s) + x_hat * params.r_p;
    project(&region.relaxed(), &(x_hat - g * params.alpha))
}

/// Projected-gradient step of an aggregate setpoint using `−ξ` from the
/// previous disaggregation as the cost gradient, followed by the new
/// disaggregation warm-started at that `ξ`.
#[allow(clippy::too_many_arguments)]
pub fn aggregation_step(
    x_hat: &Setpoint,
    xi_prev: &Setpoint,
    members: &[Member],
    region: &OperatingRegion,
    model: &UnitSensitivity,
    duals: &DualState,
    params: &ControllerParams,
    s: bool,
) -> Result<(Setpoint, DisaggregationResult)> {
    let g = -xi_prev + constraint_gradient(model, duals, s) + x_hat * params.r_p;
    let xbar = pull_inside(region, project(region, &(x_hat - g * params.alpha)));
    let res = disaggregate(members, &xbar, xi_prev, &params.disaggregation)?;
    if !res.converged {
        log::warn!("disaggregation stopped at gap {:e} after {} iterations", res.gap, res.iterations);
    }
    Ok((xbar, res))
}

/// Moves `x` toward the region's center by `INTERIOR_MARGIN · diameter`
/// when it sits within that distance of the boundary.
pub fn pull_inside(region: &OperatingRegion, x: Setpoint) -> Setpoint {
    let delta = INTERIOR_MARGIN * region.diameter();
    if delta == 0.0 {
        return x;
    }
    let flat = matches!(region, OperatingRegion::Interval(_));
    let probes: &[(f64, f64)] = if flat { &[(1.0, 0.0), (-1.0, 0.0)] } else { &[(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] };
    let near = probes.iter().any(|&(dp, dq)| !region.contains(&(x + Setpoint::new(dp, dq) * delta), 0.0));
    if !near {
        return x;
    }
    let to_center = region.center() - x;
    let dist = to_center.norm();
    if dist <= delta {
        return region.center();
    }
    log::debug!("aggregate setpoint pulled off the region boundary");
    x + to_center * (delta / dist)
}

fn implement(region: &OperatingRegion, x: Setpoint, acc: &ErrorAccumulator) -> (Setpoint, ErrorAccumulator) {
    match region {
        OperatingRegion::Discrete(pts) => error_diffusion_step(pts, &x, acc),
        _ => (x, *acc),
    }
}

fn implement_members(members: &[Member], xs: &[Setpoint], acc: &[ErrorAccumulator]) -> (Vec<Setpoint>, Vec<ErrorAccumulator>) {
    members.iter().zip(xs).zip(acc).map(|((m, x), a)| implement(&m.region, *x, a)).unzip()
}

/// Output used to seed the gradient: the measurement, except that discrete
/// devices (and discrete members) contribute their continuous command, so
/// the rounding dither does not enter the continuous update.
pub fn gradient_seed(u: &UnitSpec, measured: &Setpoint, prev: &UnitCommand) -> Setpoint {
    match &u.kind {
        UnitKind::Device { region: OperatingRegion::Discrete(_), .. } => prev.setpoint,
        UnitKind::Device { .. } => *measured,
        UnitKind::Aggregation { members, .. } => {
            let mut x = *measured;
            for ((m, cont), imp) in members.iter().zip(&prev.members).zip(&prev.implemented) {
                if matches!(m.region, OperatingRegion::Discrete(_)) {
                    x += cont - imp;
                }
            }
            x
        }
    }
}

/// One full controller iteration. Returns the advanced state; on error the
/// input state is untouched.
pub fn controller_step(state: &ControllerState, frame: &MeasurementFrame, ctx: &StepContext) -> Result<ControllerState> {
    ctx.check()?;
    if frame.outputs.len() != ctx.units.len() || state.x.len() != ctx.units.len() {
        return Err(Error::Dimension(format!(
            "{} outputs and {} state entries for {} units",
            frame.outputs.len(),
            state.x.len(),
            ctx.units.len()
        )));
    }
    let params = ctx.params;
    let s = ctx.targets.s;
    let duals = dual_step(&state.duals, frame, params, ctx.targets)?;

    let mut next = ControllerState {
        duals,
        x: Vec::with_capacity(ctx.units.len()),
        xi: Vec::with_capacity(ctx.units.len()),
        commands: Vec::with_capacity(ctx.units.len()),
        acc: Vec::with_capacity(ctx.units.len()),
        gaps: Vec::with_capacity(ctx.units.len()),
        k: state.k + 1,
    };
    for (j, u) in ctx.units.iter().enumerate() {
        let seed = gradient_seed(u, &frame.outputs[j], &state.commands[j]);
        let model = &ctx.model.units[j];
        match &u.kind {
            UnitKind::Device { region, cost } => {
                let x = device_step(&seed, region, cost, model, &next.duals, params, s);
                let prev_acc = state.acc[j].first().copied().unwrap_or_default();
                let (imp, a) = implement(region, x, &prev_acc);
                next.x.push(x);
                next.xi.push(Setpoint::zeros());
                next.commands.push(UnitCommand { setpoint: x, members: vec![], implemented: vec![imp] });
                next.acc.push(vec![a]);
                next.gaps.push(0.0);
            }
            UnitKind::Aggregation { members, region } => {
                let (xbar, res) = aggregation_step(&seed, &state.xi[j], members, region, model, &next.duals, params, s)?;
                let prev_acc = if state.acc[j].len() == members.len() {
                    state.acc[j].clone()
                } else {
                    vec![ErrorAccumulator::default(); members.len()]
                };
                let (implemented, a) = implement_members(u.members(), &res.member_setpoints, &prev_acc);
                next.x.push(xbar);
                next.xi.push(res.xi);
                next.gaps.push(res.gap);
                next.commands.push(UnitCommand { setpoint: xbar, members: res.member_setpoints, implemented });
                next.acc.push(a);
            }
        }
    }
    Ok(next)
}
