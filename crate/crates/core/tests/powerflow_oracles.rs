//! Power flow and sensitivities against closed forms and hand-built
//! network equations.

use dergrid_core::feeders;
use dergrid_core::network::*;
use dergrid_core::powerflow::*;
use dergrid_core::sensitivity::{linearize, UnitAttachment, DEFAULT_STEP};
use dergrid_core::regions::Setpoint;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

const R: f64 = 0.02;
const X: f64 = 0.04;

fn two_bus(phases: Phases) -> GridModel {
    GridModel::new(
        vec![Node { id: 1, phases }],
        vec![Line::uniform(1, 0, 1, phases, c(1.0, 0.0) / c(R, X))],
        balanced_voltage(1.0),
    )
}

/// Receiving-end voltage of a source `v0 = 1` feeding injection `s`
/// through `R + jX`, from `v − |v|² = −s·conj(z)`.
fn closed_form(s: Complex64) -> Complex64 {
    let w = -s * c(R, -X);
    let b = w.im;
    let a = 0.5 * (1.0 + (1.0 - 4.0 * (b * b + w.re)).sqrt());
    c(a, b)
}

/// `∂|v|/∂P` and `∂|v|/∂Q` of the closed form.
fn closed_form_gradient(s: Complex64) -> (f64, f64) {
    let v = closed_form(s);
    let w = -s * c(R, -X);
    let root = (1.0 - 4.0 * (w.im * w.im + w.re)).sqrt();
    let (da_dp, db_dp) = (-(2.0 * v.im * X - R) / root, X);
    let (da_dq, db_dq) = ((2.0 * v.im * R + X) / root, -R);
    let m = v.norm();
    ((v.re * da_dp + v.im * db_dp) / m, (v.re * da_dq + v.im * db_dq) / m)
}

#[test]
fn single_phase_two_bus_matches_closed_form() {
    let g = two_bus(Phases::new(&[Phase::A]));
    let solver = PowerFlowSolver::for_grid(&g, &[]).unwrap();
    for s in [c(-0.5, -0.2), c(-1.2, 0.3), c(0.8, -0.1), c(0.0, 0.5)] {
        let mut inj = solver.injections();
        inj.wye[0] = s;
        let sol = solver.solve(&inj).unwrap();
        let want = closed_form(s);
        assert!((sol.v[0] - want).norm() < 1e-9, "{s}: {} vs {want}", sol.v[0]);
        // head power is the injection plus series loss, with the sign flipped
        let i = (c(1.0, 0.0) - want) / c(R, X);
        let p0 = (c(1.0, 0.0) * i.conj()).re;
        assert!((sol.p0[0] - p0).abs() < 1e-9);
    }
}

#[test]
fn balanced_three_phase_two_bus_is_rotated_closed_form() {
    let g = two_bus(Phases::ABC);
    let solver = PowerFlowSolver::for_grid(&g, &[]).unwrap();
    let s = c(-0.7, -0.25);
    let mut inj = solver.injections();
    for k in 0..3 {
        inj.wye[k] = s;
    }
    let sol = solver.solve(&inj).unwrap();
    for (v, v0) in sol.v.iter().zip(balanced_voltage(1.0)) {
        assert!((v - closed_form(s) * v0).norm() < 1e-9);
    }
}

#[test]
fn sensitivity_matches_analytic_derivative() {
    let g = two_bus(Phases::new(&[Phase::A]));
    let sets = MeasurementSets { voltages: vec![(1, Phase::A)], lines: vec![] };
    let plant = AcPlant::new(g, &[], sets).unwrap();
    let unit = UnitAttachment::new("u", 1, vec![PhaseConnection::Wye(Phase::A)]);
    let mut loads = plant.injections();
    loads.wye[0] = c(-0.6, -0.2);
    let base = Setpoint::new(0.1, 0.05);
    let model = linearize(&plant, std::slice::from_ref(&unit), &[base], &loads, DEFAULT_STEP).unwrap();
    let (dp, dq) = closed_form_gradient(c(-0.5, -0.15));
    let a = &model.units[0].a;
    assert!((a[(0, 0)] - dp).abs() < 1e-7, "{} vs {dp}", a[(0, 0)]);
    assert!((a[(0, 1)] - dq).abs() < 1e-7, "{} vs {dq}", a[(0, 1)]);

    // Richardson extrapolation of the closed form agrees with the analytic slope
    let f = |h: f64| (closed_form(c(-0.5 + h, -0.15)).norm() - closed_form(c(-0.5 - h, -0.15)).norm()) / (2.0 * h);
    let rich = (4.0 * f(1e-3) - f(2e-3)) / 3.0;
    assert!((rich - dp).abs() < 1e-10);
}

/// Node current injections summed line by line from the Π-models.
fn kcl_currents(g: &GridModel, index: &PhaseIndex, v0: &[Complex64; 3], v: &DVector<Complex64>) -> DVector<Complex64> {
    let volt = |node: usize, p: Phase| if node == SLACK { v0[p.index()] } else { v[index.position(node, p).unwrap()] };
    let mut out = DVector::from_element(index.len(), c(0.0, 0.0));
    for line in &g.lines {
        let ph: Vec<Phase> = line.phases.iter().collect();
        let vf = DVector::from_iterator(ph.len(), ph.iter().map(|&p| volt(line.from, p)));
        let vt = DVector::from_iterator(ph.len(), ph.iter().map(|&p| volt(line.to, p)));
        let half: DMatrix<Complex64> = &line.shunt * c(0.5, 0.0);
        let i_from = &line.series * (&vf - &vt) + &half * &vf;
        let i_to = &line.series * (&vt - &vf) + &half * &vt;
        for (k, &p) in ph.iter().enumerate() {
            if line.from != SLACK {
                out[index.position(line.from, p).unwrap()] += i_from[k];
            }
            if line.to != SLACK {
                out[index.position(line.to, p).unwrap()] += i_to[k];
            }
        }
    }
    out
}

#[test]
fn solution_satisfies_hand_built_kcl() {
    let mut g = feeders::thirteen_node_grid();
    for l in g.lines.iter_mut() {
        let k = l.phases.len();
        l.shunt = DMatrix::from_diagonal_element(k, k, c(0.0, 0.002));
    }
    let solver = PowerFlowSolver::for_grid(&g, &[]).unwrap();
    let mut inj = solver.injections();
    for k in 0..inj.len() {
        inj.wye[k] = c(-0.05 - 0.01 * k as f64, -0.02);
    }
    let sol = solver.solve(&inj).unwrap();
    let i = kcl_currents(&g, solver.index(), &g.slack_voltage, &sol.v);
    for k in 0..inj.len() {
        let s = sol.v[k] * i[k].conj();
        assert!((s - inj.wye[k]).norm() < 1e-9, "row {k}");
    }
}

fn delta_mix() -> (GridModel, Vec<(usize, PhaseConnection)>) {
    let g = feeders::thirteen_node_grid();
    let conns = vec![
        (4, PhaseConnection::Delta(DeltaPair::AB)),
        (6, PhaseConnection::Delta(DeltaPair::BC)),
        (8, PhaseConnection::Delta(DeltaPair::CA)),
        (12, PhaseConnection::Delta(DeltaPair::AB)),
    ];
    (g, conns)
}

#[test]
fn power_balance_with_delta_loads() {
    let (g, conns) = delta_mix();
    let solver = PowerFlowSolver::for_grid(&g, &conns).unwrap();
    let mut inj = solver.injections();
    for (n, conn) in &conns {
        inj.add(solver.index(), solver.incidence(), *n, *conn, c(-0.15, -0.05)).unwrap();
    }
    for k in 0..inj.len() {
        inj.wye[k] += c(-0.03, -0.01);
    }
    let sol = solver.solve(&inj).unwrap();
    let losses = line_losses(&g, solver.index(), &sol.v).unwrap();
    let head: f64 = sol.p0.iter().sum();
    assert!((head + inj.total().re - losses.re).abs() < 1e-8);
    let q0: f64 = sol.q0.iter().sum();
    assert!((q0 + inj.total().im - losses.im).abs() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_solves_have_small_residual(
        wye in proptest::collection::vec((-0.2f64..0.1, -0.1f64..0.1), 27),
        delta in proptest::collection::vec((-0.2f64..0.05, -0.1f64..0.1), 4),
    ) {
        let (g, conns) = delta_mix();
        let solver = PowerFlowSolver::for_grid(&g, &conns).unwrap();
        let mut inj = solver.injections();
        for (k, (p, q)) in wye.iter().enumerate().take(inj.len()) {
            inj.wye[k] = c(*p, *q);
        }
        for ((n, conn), (p, q)) in conns.iter().zip(&delta) {
            inj.add(solver.index(), solver.incidence(), *n, *conn, c(*p, *q)).unwrap();
        }
        if let Ok(sol) = solver.solve(&inj) {
            prop_assert!(sol.residual <= 1e-9);
            prop_assert!(solver.residual(&sol.v, &inj).unwrap() <= 1e-9);
            let losses = line_losses(&g, solver.index(), &sol.v).unwrap();
            prop_assert!((sol.p0.iter().sum::<f64>() + inj.total().re - losses.re).abs() < 1e-8);
        }
    }
}
