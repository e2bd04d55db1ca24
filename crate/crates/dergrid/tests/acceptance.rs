//! Acceptance report: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dergrid::runlog::{self, tracking_error};
use dergrid::scenario;
use dergrid_core::aggregation::*;
use dergrid_core::analysis::ReferenceOptions;
use dergrid_core::feeders;
use dergrid_core::nalgebra::DVector;
use dergrid_core::network::*;
use dergrid_core::powerflow::*;
use dergrid_core::regions::*;
use dergrid_core::sim;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, elapsed: Duration, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} [{n}] {detail} ({:.2} s)", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    }
}

fn sp(p: f64, q: f64) -> Setpoint {
    Setpoint::new(p, q)
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn tight() -> DisaggregationOptions {
    DisaggregationOptions { tol: 1e-13, max_iter: 200_000 }
}

fn disaggregation_hand_case() -> (bool, String) {
    let unit = || Member::new(OperatingRegion::interval(0.0, 1.0).unwrap(), MemberCost::new(1.0, 1.0, 0.0, 0.0).unwrap());
    let res = disaggregate(&[unit(), unit()], &sp(1.0, 0.0), &Setpoint::zeros(), &DisaggregationOptions::default()).unwrap();
    let xi_err = (res.xi - sp(-1.0, 0.0)).norm();
    let split_err = res.member_setpoints.iter().map(|x| (x - sp(0.5, 0.0)).norm()).fold(0.0, f64::max);
    (res.converged && xi_err <= 1e-8 && split_err <= 1e-8, format!("two unit quadratics: |xi - (-1,0)| = {xi_err:.1e}, split error {split_err:.1e}"))
}

fn random_members(rng: &mut ChaCha8Rng) -> Vec<Member> {
    let n = rng.random_range(2..=5);
    (0..n)
        .map(|k| {
            let region = if k == 0 || rng.random_bool(0.5) {
                let r = rng.random_range(0.3..1.0);
                OperatingRegion::disk(-rng.random_range(0.0..r), rng.random_range(0.0..r), r).unwrap()
            } else {
                let lo = rng.random_range(-0.5..0.0);
                OperatingRegion::interval(lo, lo + rng.random_range(0.1..0.6)).unwrap()
            };
            let cost = MemberCost::new(
                rng.random_range(0.2..2.0),
                rng.random_range(0.2..2.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            )
            .unwrap();
            Member::new(region, cost)
        })
        .collect()
}

fn f_bar(members: &[Member], x: &Setpoint) -> Option<f64> {
    let res = disaggregate(members, x, &Setpoint::zeros(), &tight()).ok()?;
    res.converged.then_some(res.cost)
}

fn gradient_finite_differences() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let (mut done, mut worst, mut bad) = (0, 0.0f64, 0);
    while done < 100 {
        let members = random_members(&mut rng);
        let regions: Vec<OperatingRegion> = members.iter().map(|m| m.region.clone()).collect();
        let Ok(folded) = fold_aggregate(&regions) else { continue };
        let (p0, p1, q0, q1) = folded.bounds();
        let x = loop {
            let y = sp(rng.random_range(p0..=p1), rng.random_range(q0..=q1));
            if folded.contains(&y, 0.0) {
                break folded.center() + 0.8 * (y - folded.center());
            }
        };
        done += 1;
        let res = disaggregate(&members, &x, &Setpoint::zeros(), &tight()).unwrap();
        let grad = aggregate_gradient(&res).unwrap();
        let fd = |d: Setpoint| Some((f_bar(&members, &(x + d))? - f_bar(&members, &(x - d))?) / (2.0 * h));
        let (Some(gp), Some(gq)) = (fd(sp(h, 0.0)), fd(sp(0.0, h))) else {
            bad += 1;
            continue;
        };
        let rel = (sp(gp, gq) - grad).norm() / grad.norm();
        worst = worst.max(rel);
        if rel.is_nan() || rel > 1e-3 {
            bad += 1;
        }
    }
    (bad == 0, format!("aggregate gradient vs finite differences on {done} instances: worst rel err {worst:.1e}, {bad} over 1e-3"))
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-13 {
        if f1 < f2 {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    f(lo).max(f(hi)).max(f1).max(f2)
}

/// Some split `P = p₁ + p₂` leaves `cap₁(p₁) + cap₂(p₂) ≥ |Q|`.
fn in_disk_sum(d1: &Disk, d2: &Disk, y: &Setpoint, tol: f64) -> bool {
    let lo = d1.p_lo.max(y.x - d2.p_hi);
    let hi = d1.p_hi.min(y.x - d2.p_lo);
    if lo > hi + tol {
        return false;
    }
    golden_max(|p1| d1.cap(p1) + d2.cap(y.x - p1), lo, hi.max(lo)) >= y.y.abs() - tol
}

fn random_disk(rng: &mut ChaCha8Rng) -> Disk {
    let r = rng.random_range(0.1..1.0);
    let lo = rng.random_range(-r..r);
    let hi = rng.random_range(lo..=r);
    Disk::new(lo, hi, r).unwrap()
}

fn sample_disk(rng: &mut ChaCha8Rng, d: &Disk) -> Setpoint {
    loop {
        let y = sp(rng.random_range(d.p_lo..=d.p_hi), rng.random_range(-d.r..=d.r));
        if y.norm() <= d.r {
            return y;
        }
    }
}

fn disk_sum_soundness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut pairs, mut skipped, mut inner_fail, mut outer_fail) = (0, 0, 0, 0);
    while pairs < 50 {
        let (d1, d2) = (random_disk(&mut rng), random_disk(&mut rng));
        let Ok(inner) = minkowski_disk_disk_inner(&d1, &d2) else {
            skipped += 1;
            continue;
        };
        pairs += 1;
        for _ in 0..10_000 {
            if !in_disk_sum(&d1, &d2, &sample_disk(&mut rng, &inner), 1e-9) {
                inner_fail += 1;
            }
        }
        let outer = OperatingRegion::Disk(minkowski_disk_disk_outer(&d1, &d2));
        for _ in 0..10_000 {
            if !outer.contains(&(sample_disk(&mut rng, &d1) + sample_disk(&mut rng, &d2)), 1e-12) {
                outer_fail += 1;
            }
        }
    }
    (
        inner_fail == 0 && outer_fail == 0,
        format!(
            "disk sums on {pairs} pairs ({skipped} with empty inner disk skipped): {inner_fail} inner points without a split, {outer_fail} sums outside the outer disk"
        ),
    )
}

/// Upper boundary of `disk ⊕ [a, b]` from translating the top arc along the
/// interval, highest point per `P` bin.
fn brute_envelope(d: &Disk, a: f64, b: f64, pitch: f64) -> Vec<Setpoint> {
    let (t0, t1) = ((d.p_hi / d.r).acos(), (d.p_lo / d.r).acos());
    let n = ((t1 - t0) * d.r / pitch).ceil().max(1.0) as usize;
    let arc: Vec<Setpoint> = (0..=n)
        .map(|k| {
            let t = t0 + (t1 - t0) * k as f64 / n as f64;
            sp(d.r * t.cos(), d.r * t.sin())
        })
        .collect();
    let m = ((b - a) / pitch).ceil().max(1.0) as usize;
    let p_lo = d.p_lo + a;
    let bins = (((d.p_hi + b) - p_lo) / pitch).ceil() as usize + 1;
    let mut best = vec![None::<Setpoint>; bins];
    for k in 0..=m {
        let shift = a + (b - a) * k as f64 / m as f64;
        for x in &arc {
            let y = sp(x.x + shift, x.y);
            let i = (((y.x - p_lo) / pitch) as usize).min(bins - 1);
            if best[i].is_none_or(|z| y.y > z.y) {
                best[i] = Some(y);
            }
        }
    }
    best.into_iter().flatten().collect()
}

fn distance_to_curve(y: &Setpoint, curve: &[Setpoint]) -> f64 {
    curve.iter().map(|c| (c - y).norm()).fold(f64::INFINITY, f64::min)
}

fn disk_interval_boundary() -> (bool, String) {
    let pitch = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let r = rng.random_range(0.2..0.6);
        let d = Disk::new(-rng.random_range(0.0..r), rng.random_range(0.0..r), r).unwrap();
        let a = rng.random_range(-0.3..0.3);
        let b = a + rng.random_range(0.0..0.3);
        let s = minkowski_disk_interval(&d, &Interval::new(a, b).unwrap()).unwrap();
        let brute = brute_envelope(&d, a, b, pitch / 4.0);
        let n = ((s.p_hi - s.p_lo) / (pitch / 8.0)).ceil() as usize;
        let exact: Vec<Setpoint> = (0..=n)
            .map(|k| {
                let p = s.p_lo + (s.p_hi - s.p_lo) * k as f64 / n as f64;
                sp(p, s.cap(p))
            })
            .collect();
        for y in &brute {
            worst = worst.max(distance_to_curve(y, &exact));
        }
        for y in exact.iter().step_by(8) {
            worst = worst.max(distance_to_curve(y, &brute));
        }
    }
    (worst <= pitch, format!("disk + interval boundary vs brute force on 20 instances: worst distance {worst:.1e} (pitch {pitch:.0e})"))
}

fn static_contraction() -> (bool, String) {
    let mut sc = scenario::load(&scenario_path("four_node_static.json")).unwrap();
    let mut one = sc.clone();
    one.sim.steps = 1;
    one.sim.reference = Some(ReferenceOptions { tol: 1e-12, ..Default::default() });
    let zs = DVector::from_vec(sim::run(&one).unwrap().records[0].z_star.clone().unwrap());
    sc.sim.reference = None;
    let log = sim::run(&sc).unwrap();
    let c = log.header.c;
    let gaps: Vec<f64> = log.records.iter().map(|r| (DVector::from_vec(r.z.clone()) - &zs).norm()).collect();
    let Some(end) = gaps.iter().position(|&g| g <= 1e-8) else {
        return (false, format!("static run: gap {:.1e} after {} steps, never reached 1e-8", gaps.last().unwrap(), gaps.len()));
    };
    let worst = (1..=end).map(|k| gaps[k] / gaps[k - 1]).fold(0.0, f64::max);
    (
        c < 1.0 && worst <= c + 1e-6 && end <= 100_000,
        format!("static run: gap {:.1e} at step {end}; worst ratio {worst:.8} vs c = {c:.8} (alpha {:.3e})", gaps[end], log.header.alpha),
    )
}

fn time_varying_bound() -> (bool, String) {
    let sc = scenario::load(&scenario_path("four_node_tracking.json")).unwrap();
    let log = sim::run(&sc).unwrap();
    if let Some(reason) = &log.aborted {
        return (false, format!("time-varying run aborted: {reason}"));
    }
    let cert = runlog::certify(&log).unwrap();
    let m = &cert.measurement;
    let inside = m.within.iter().filter(|&&b| b).count();
    (
        cert.passed() && m.within.len() == 600,
        format!(
            "time-varying run: gap within bound at {inside}/{} steps; tail mean {:.3e} vs asymptotic bound {:.3e} x {}",
            m.within.len(),
            cert.tail_mean,
            cert.asymptotic,
            runlog::TAIL_SLACK
        ),
    )
}

fn error_diffusion() -> (bool, String) {
    let p_bar = 0.8;
    let points = [sp(0.0, 0.0), sp(p_bar, 0.0)];
    let cont = sp(0.5 * p_bar, 0.0);
    let mut acc = ErrorAccumulator::default();
    let mut sum = Setpoint::zeros();
    let (mut avg_fail, mut inst_fail) = (0, 0);
    let steps = 100_000;
    for k in 1..=steps {
        let (x, next) = error_diffusion_step(&points, &cont, &acc);
        acc = next;
        sum += x;
        if (cont - sum / k as f64).norm() > acc.max_norm / k as f64 + 1e-12 {
            avg_fail += 1;
        }
        if (cont - x).norm() > 2.0 * acc.max_norm + 1e-12 {
            inst_fail += 1;
        }
    }
    let e = acc.max_norm;
    (
        e.is_finite() && avg_fail == 0 && inst_fail == 0,
        format!("error diffusion at half level over {steps} steps: E = {e:.3}, {avg_fail} average-gap and {inst_fail} instantaneous violations"),
    )
}

/// First steps after start or after a set-point jump count as transient.
fn post_transient(p0_set: &[[f64; 3]], band: f64) -> Vec<bool> {
    const SETTLE: usize = 120;
    const AFTER_STEP: usize = 60;
    let mut keep = vec![true; p0_set.len()];
    for k in 0..p0_set.len() {
        let jump = k > 0 && (0..3).any(|j| (p0_set[k][j] - p0_set[k - 1][j]).abs() > band / 3.0);
        let start = if k == 0 { Some(0) } else if jump { Some(k) } else { None };
        if let Some(s) = start {
            let len = if k == 0 { SETTLE } else { AFTER_STEP };
            keep.iter_mut().skip(s).take(len).for_each(|b| *b = false);
        }
    }
    keep
}

fn feeder_reproduction() -> (bool, String) {
    let sc = scenario::load(&scenario_path("thirteen_node.json")).unwrap();
    let log = sim::run(&sc).unwrap();
    let p0_set: Vec<[f64; 3]> = log.records.iter().map(|r| r.p0_set).collect();
    let band = sc.targets.band[0];
    let keep = post_transient(&p0_set, band);
    let post: Vec<f64> = log.records.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| tracking_error(r)).collect();
    let inside = post.iter().filter(|&&e| e <= band).count();
    let frac = inside as f64 / post.len() as f64;
    let mut excess: Vec<f64> = post.iter().map(|e| e - band).collect();
    excess.sort_by(f64::total_cmp);
    let p95 = excess[(0.95 * excess.len() as f64) as usize];
    let kva = 1000.0;

    let high = scenario::load(&scenario_path("thirteen_node_high_pv.json")).unwrap();
    let hlog = sim::run(&high).unwrap();
    const STEADY_FROM: usize = 300;
    let vmax = hlog.records[STEADY_FROM..].iter().flat_map(|r| r.true_v.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let pass = log.completed() && hlog.completed() && frac >= 0.95 && vmax <= 1.012;
    (
        pass,
        format!(
            "13-node feeder: head power in the band at {inside}/{} post-transient steps ({:.1}%, 95th-percentile excess {:.2} kW); \
             v_max 1.01 run: steady-state max |v| {vmax:.5}",
            post.len(),
            100.0 * frac,
            p95 * kva,
        ),
    )
}

fn two_bus_closed_form() -> f64 {
    let (r, x) = (0.02, 0.04);
    let pa = Phases::new(&[Phase::A]);
    let g = GridModel::new(
        vec![Node { id: 1, phases: pa }],
        vec![Line::uniform(1, 0, 1, pa, Complex64::new(1.0, 0.0) / Complex64::new(r, x))],
        balanced_voltage(1.0),
    );
    let solver = PowerFlowSolver::for_grid(&g, &[]).unwrap();
    let mut worst = 0.0f64;
    for s in [Complex64::new(-0.5, -0.2), Complex64::new(-1.2, 0.3), Complex64::new(0.8, -0.1), Complex64::new(0.0, 0.5)] {
        // v − |v|² = −s·conj(z) with v = a + jb
        let w = -s * Complex64::new(r, -x);
        let want = Complex64::new(0.5 * (1.0 + (1.0 - 4.0 * (w.im * w.im + w.re)).sqrt()), w.im);
        let mut inj = solver.injections();
        inj.wye[0] = s;
        worst = worst.max((solver.solve(&inj).unwrap().v[0] - want).norm());
    }
    worst
}

fn power_flow() -> (bool, String) {
    let closed = two_bus_closed_form();
    let g = feeders::thirteen_node_grid();
    let conns = vec![
        (4, PhaseConnection::Delta(DeltaPair::AB)),
        (6, PhaseConnection::Delta(DeltaPair::BC)),
        (8, PhaseConnection::Delta(DeltaPair::CA)),
        (12, PhaseConnection::Delta(DeltaPair::AB)),
    ];
    let solver = PowerFlowSolver::for_grid(&g, &conns).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut solved, mut residual, mut balance) = (0, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let mut inj = solver.injections();
        for k in 0..inj.len() {
            inj.wye[k] = Complex64::new(rng.random_range(-0.2..0.1), rng.random_range(-0.1..0.1));
        }
        for (n, conn) in &conns {
            let s = Complex64::new(rng.random_range(-0.2..0.05), rng.random_range(-0.1..0.1));
            inj.add(solver.index(), solver.incidence(), *n, *conn, s).unwrap();
        }
        let Ok(sol) = solver.solve(&inj) else { continue };
        solved += 1;
        residual = residual.max(sol.residual).max(solver.residual(&sol.v, &inj).unwrap());
        let losses = line_losses(&g, solver.index(), &sol.v).unwrap();
        let p = sol.p0.iter().sum::<f64>() + inj.total().re - losses.re;
        let q = sol.q0.iter().sum::<f64>() + inj.total().im - losses.im;
        balance = balance.max(p.abs()).max(q.abs());
    }
    (
        closed <= 1e-9 && residual <= 1e-9 && balance <= 1e-8 && solved > 0,
        format!("power flow: 2-bus error {closed:.1e}; {solved} random 13-node solves, max residual {residual:.1e}, max power imbalance {balance:.1e}"),
    )
}

type Criterion = (usize, Duration, fn() -> (bool, String));

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, Duration::from_secs(1), disaggregation_hand_case),
        (2, Duration::from_secs(30), gradient_finite_differences),
        (3, Duration::from_secs(60), disk_sum_soundness),
        (4, Duration::from_secs(30), disk_interval_boundary),
        (5, Duration::from_secs(120), static_contraction),
        (6, Duration::from_secs(600), time_varying_bound),
        (7, Duration::from_secs(10), error_diffusion),
        (8, Duration::from_secs(300), feeder_reproduction),
        (9, Duration::from_secs(5), power_flow),
    ];
    let mut report = Report { failed: 0 };
    for (n, budget, check) in criteria {
        let t = Instant::now();
        let (pass, detail) = check();
        let elapsed = t.elapsed();
        let detail = if elapsed > budget { format!("{detail}; over the {} s budget", budget.as_secs()) } else { detail };
        report.line(n, pass && elapsed <= budget, elapsed, detail);
    }
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
