//! Disaggregation of an aggregate setpoint across member DERs.
//!
//! Solves `max_ξ min_{x_i ∈ X_i} Σ f_i(x_i) + ξᵀ(Σ x_i − x̄)` by dual ascent.
//! For quadratic costs the inner minimization is a weighted projection per
//! member, and `−ξ` at the optimum is the gradient of the aggregate cost.

use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::regions::{project, weighted_project, OperatingRegion, Setpoint};

/// `c_P (P − P_ref)² + c_Q (Q − Q_ref)²`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemberCost {
    pub c_p: f64,
    pub c_q: f64,
    pub p_ref: f64,
    pub q_ref: f64,
}

impl MemberCost {
    pub fn new(c_p: f64, c_q: f64, p_ref: f64, q_ref: f64) -> Result<MemberCost> {
        if !(c_p >= 0.0 && c_q >= 0.0) {
            return Err(Error::Parameter(format!("cost weights must be nonnegative, got ({c_p}, {c_q})")));
        }
        Ok(MemberCost { c_p, c_q, p_ref, q_ref })
    }

    pub fn reference(&self) -> Setpoint {
        Setpoint::new(self.p_ref, self.q_ref)
    }

    pub fn value(&self, x: &Setpoint) -> f64 {
        self.c_p * Float::powi(x.x - self.p_ref, 2) + self.c_q * Float::powi(x.y - self.q_ref, 2)
    }

    pub fn gradient(&self, x: &Setpoint) -> Setpoint {
        Setpoint::new(2.0 * self.c_p * (x.x - self.p_ref), 2.0 * self.c_q * (x.y - self.q_ref))
    }

    /// Lipschitz constant of the gradient.
    pub fn lipschitz(&self) -> f64 {
        2.0 * self.c_p.max(self.c_q)
    }

    pub fn is_zero(&self) -> bool {
        self.c_p == 0.0 && self.c_q == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub region: OperatingRegion,
    pub cost: MemberCost,
}

impl Member {
    pub fn new(region: OperatingRegion, cost: MemberCost) -> Member {
        Member { region, cost }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisaggregationOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DisaggregationOptions {
    fn default() -> Self {
        DisaggregationOptions { tol: 1e-8, max_iter: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisaggregationResult {
    /// One setpoint per member, in member order.
    pub member_setpoints: Vec<Setpoint>,
    pub xi: Setpoint,
    /// `‖Σ x_i − x̄‖`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `Σ f_i(x_i)`.
    pub cost: f64,
}

/// `−ξ`, the gradient of the aggregate cost at `x̄`.
pub fn aggregate_gradient(result: &DisaggregationResult) -> Result<Setpoint> {
    if !result.converged {
        return Err(Error::NotConverged { gap: result.gap });
    }
    Ok(-result.xi)
}

struct Free<'a> {
    region: OperatingRegion,
    cost: &'a MemberCost,
    w: Setpoint,
}

impl Free<'_> {
    fn respond(&self, xi: &Setpoint) -> Result<Setpoint> {
        let y = self.cost.reference() - xi.component_div(&(self.w * 2.0));
        weighted_project(&self.region, &y, &self.w)
    }
}

pub fn disaggregate(
    members: &[Member],
    xbar: &Setpoint,
    xi_warm: &Setpoint,
    opts: &DisaggregationOptions,
) -> Result<DisaggregationResult> {
    if members.is_empty() {
        return Err(Error::InvalidRegion("aggregation has no members".into()));
    }
    let relaxed: Vec<OperatingRegion> = members.iter().map(|m| m.region.relaxed()).collect();
    let mut target = *xbar;
    let mut free_idx = Vec::new();
    for (k, r) in relaxed.iter().enumerate() {
        match r {
            OperatingRegion::Singleton(x) => target -= x,
            _ => free_idx.push(k),
        }
    }
    let mut out: Vec<Setpoint> = relaxed
        .iter()
        .map(|r| match r {
            OperatingRegion::Singleton(x) => *x,
            _ => Setpoint::zeros(),
        })
        .collect();
    let finish = |out: Vec<Setpoint>, xi: Setpoint, iterations: usize| {
        let sum = out.iter().fold(Setpoint::zeros(), |a, x| a + x);
        let gap = (sum - xbar).norm();
        let cost = out.iter().zip(members).map(|(x, m)| m.cost.value(x)).sum();
        DisaggregationResult { member_setpoints: out, xi, gap, iterations, converged: gap <= opts.tol, cost }
    };

    let slack = opts.tol.max(1e-12);
    let (mut p0, mut p1, mut q0, mut q1) = (0.0, 0.0, 0.0, 0.0);
    for &k in &free_idx {
        let (a, b, c, d) = relaxed[k].bounds();
        p0 += a;
        p1 += b;
        q0 += c;
        q1 += d;
    }
    if target.x < p0 - slack || target.x > p1 + slack || target.y < q0 - slack || target.y > q1 + slack {
        return Err(Error::Infeasible(format!(
            "aggregate setpoint ({}, {}) is outside the members' reach",
            xbar.x, xbar.y
        )));
    }

    match free_idx.len() {
        0 => return Ok(finish(out, Setpoint::zeros(), 0)),
        1 => {
            let k = free_idx[0];
            let x = project(&relaxed[k], &target);
            out[k] = x;
            return Ok(finish(out, -members[k].cost.gradient(&x), 0));
        }
        _ => {}
    }

    let all_zero = free_idx.iter().all(|&k| members[k].cost.is_zero());
    let unit = MemberCost { c_p: 1.0, c_q: 1.0, p_ref: 0.0, q_ref: 0.0 };
    let maxc = free_idx
        .iter()
        .map(|&k| members[k].cost.c_p.max(members[k].cost.c_q))
        .fold(0.0, f64::max);
    let floor = 1e-6 * maxc;
    let free: Vec<Free> = free_idx
        .iter()
        .map(|&k| {
            let cost = if all_zero { &unit } else { &members[k].cost };
            let w = Setpoint::new(cost.c_p.max(floor), cost.c_q.max(floor));
            Free { region: relaxed[k].clone(), cost, w }
        })
        .collect();
    let l_dual: f64 = free.iter().map(|f| 1.0 / (2.0 * f.w.x.min(f.w.y))).sum();

    // dual value, its gradient and the member responses at ξ
    let eval = |xi: &Setpoint| -> Result<(f64, Setpoint, Vec<Setpoint>)> {
        let xs = free.iter().map(|f| f.respond(xi)).collect::<Result<Vec<_>>>()?;
        let sum = xs.iter().fold(Setpoint::zeros(), |a, x| a + x);
        let g = sum - target;
        let fx: f64 = free
            .iter()
            .zip(&xs)
            .map(|(f, x)| f.w.x * Float::powi(x.x - f.cost.p_ref, 2) + f.w.y * Float::powi(x.y - f.cost.q_ref, 2))
            .sum();
        Ok((fx + xi.dot(&g), g, xs))
    };

    let mut xi = if all_zero { Setpoint::zeros() } else { *xi_warm };
    let (mut d, mut g, mut xs) = eval(&xi)?;
    let mut step = 1.0 / l_dual;
    let mut iterations = 0;
    while g.norm() > opts.tol && iterations < opts.max_iter {
        let mut t = step.max(1.0 / l_dual);
        let (next_xi, next_d, next_g, next_xs) = loop {
            let cand = xi + g * t;
            let (cd, cg, cx) = eval(&cand)?;
            if cd >= d + 1e-4 * t * g.norm_squared() || t <= 1.0 / l_dual {
                break (cand, cd, cg, cx);
            }
            t = (0.5 * t).max(1.0 / l_dual);
        };
        // Barzilai–Borwein for the next trial step
        let s = next_xi - xi;
        let y = g - next_g;
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_squared() / sy } else { 1.0 / l_dual };
        xi = next_xi;
        d = next_d;
        g = next_g;
        xs = next_xs;
        iterations += 1;
    }
    for (f, &k) in xs.into_iter().zip(&free_idx) {
        out[k] = f;
    }
    let xi = if all_zero { Setpoint::zeros() } else { xi };
    Ok(finish(out, xi, iterations))
}

/// Bound on `‖ξ‖` from the members' gradients over their regions: with
/// `Hᵀ = [I, …, I]ᵀ` the optimality condition gives `ξ = −(Hᵀ)⁺ ∇F` when no
/// member is saturated, and `‖(Hᵀ)⁺‖ ‖∇F‖ ≤ max_i ‖∇f_i‖`.
pub fn dual_bound(members: &[Member]) -> f64 {
    members
        .iter()
        .map(|m| {
            let r = m.region.relaxed();
            let (p0, p1, q0, q1) = r.bounds();
            // the quadratic gradient norm is maximized at a bounding-box corner
            [(p0, q0), (p0, q1), (p1, q0), (p1, q1)]
                .iter()
                .map(|&(p, q)| m.cost.gradient(&Setpoint::new(p, q)).norm())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
