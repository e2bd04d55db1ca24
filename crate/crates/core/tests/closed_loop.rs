use dergrid_core::aggregation::DisaggregationOptions;
use dergrid_core::analysis::{self, ReferenceOptions};
use dergrid_core::controller::ControllerParams;
use dergrid_core::feeders;
use dergrid_core::network::{Complex64, Phase, PhaseConnection};
use dergrid_core::powerflow::MeasurementSets;
use dergrid_core::regions::OperatingRegion;
use dergrid_core::sim::*;
use nalgebra::DVector;

fn wye_a() -> Vec<PhaseConnection> {
    vec![PhaseConnection::Wye(Phase::A)]
}

fn device(id: &str, node: usize, region: RegionSpec, cost: CostSpec) -> DeviceConfig {
    DeviceConfig { id: id.into(), node, connections: wye_a(), region, cost, availability: None }
}

fn cost(c_p: f64, c_q: f64, p_ref: f64) -> CostSpec {
    CostSpec { c_p, c_q, p_ref, q_ref: 0.0, track_availability: false }
}

fn static_scenario(steps: usize) -> Scenario {
    let fixed = |r: OperatingRegion| RegionSpec::Fixed(r);
    let devices = vec![
        device("pv", 3, fixed(OperatingRegion::disk(0.0, 0.4, 0.5).unwrap()), cost(1.0, 0.2, 0.4)),
        device("bat", 2, fixed(OperatingRegion::disk(-0.3, 0.3, 0.4).unwrap()), cost(0.5, 0.5, 0.0)),
        device("h_pv", 1, fixed(OperatingRegion::disk(0.0, 0.2, 0.3).unwrap()), cost(0.8, 0.3, 0.2)),
        device("h_ev", 1, fixed(OperatingRegion::interval(-0.2, 0.0).unwrap()), cost(0.6, 0.0, -0.2)),
    ];
    let loads = vec![
        LoadConfig { node: 3, connection: PhaseConnection::Wye(Phase::A), demand: vec![Complex64::new(0.8, 0.2); steps] },
        LoadConfig { node: 2, connection: PhaseConnection::Wye(Phase::A), demand: vec![Complex64::new(0.5, 0.1); steps] },
    ];
    Scenario {
        grid: feeders::four_node_grid(),
        sets: MeasurementSets { voltages: vec![(1, Phase::A), (2, Phase::A), (3, Phase::A)], lines: vec![2] },
        devices,
        aggregations: vec![AggregationConfig { id: "house".into(), members: vec!["h_pv".into(), "h_ev".into()] }],
        loads,
        targets: TargetTrace { p0_set: vec![[0.6, 0.0, 0.0]; steps], enabled: vec![true; steps], band: vec![0.02; steps] },
        params: ControllerParams {
            alpha: 0.0,
            r_p: 1.0,
            r_d: 1.0,
            v_min: 0.985,
            v_max: 1.05,
            i_max: DVector::from_element(1, 1.2),
            h: 1.0,
            disaggregation: DisaggregationOptions { tol: 1e-13, max_iter: 100_000 },
        },
        sim: SimConfig {
            steps,
            plant: PlantKind::Linear,
            reference: Some(ReferenceOptions { tol: 1e-12, ..Default::default() }),
            ..SimConfig::default()
        },
    }
}

/// Step size at 90% of the contraction bound for the scenario's own `L`, `G`.
fn tuned(mut sc: Scenario) -> Scenario {
    let (l, g) = problem_constants(&sc).unwrap();
    sc.params.alpha = 0.9 * analysis::max_stepsize(sc.params.r_p, sc.params.r_d, l, g);
    sc
}

fn static_reference(sc: &Scenario) -> DVector<f64> {
    let mut one = sc.clone();
    one.sim.steps = 1;
    one.sim.reference = Some(ReferenceOptions { tol: 1e-12, ..Default::default() });
    DVector::from_vec(run(&one).unwrap().records[0].z_star.clone().unwrap())
}

#[test]
fn static_exact_model_contracts() {
    let mut sc = tuned(static_scenario(12_000));
    sc.sim.reference = None;
    let zs = static_reference(&sc);
    let log = run(&sc).unwrap();
    let c = log.header.c;
    assert!(c < 1.0);
    let gaps: Vec<f64> = log.records.iter().map(|r| (DVector::from_vec(r.z.clone()) - &zs).norm()).collect();
    let end = gaps.iter().position(|&g| g <= 1e-8).expect("gap reaches 1e-8");
    for k in 1..=end {
        assert!(gaps[k] <= (c + 1e-6) * gaps[k - 1], "k={k}: {} > c·{}", gaps[k], gaps[k - 1]);
    }
    // the head-power and voltage constraints are both active at the optimum
    let last = log.records[end].dual_norms;
    assert!(last[2] > 0.0 && last[3] > 0.0);
}

#[test]
fn static_run_reaches_kkt_point() {
    let mut sc = tuned(static_scenario(8_000));
    sc.sim.reference = None;
    let log = run(&sc).unwrap();
    let z = &log.records.last().unwrap().z;
    let mut one = sc.clone();
    one.sim.steps = 1;
    one.sim.reference = Some(ReferenceOptions::default());
    let zs = run(&one).unwrap().records[0].z_star.clone().unwrap();
    let d: f64 = z.iter().zip(&zs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(d < 1e-6, "{d}");
}

#[test]
fn exact_model_run_has_no_sensing_error() {
    let mut sc = tuned(static_scenario(50));
    sc.sim.reference = Some(ReferenceOptions::default());
    let log = run(&sc).unwrap();
    let k = log.constants().unwrap();
    let m = analysis::measure_run(&log.step_records().unwrap(), &k).unwrap();
    assert!(m.budget.e_v < 1e-12 && m.budget.e_0 < 1e-12 && m.budget.e_l < 1e-12, "{:?}", m.budget);
    assert!(m.budget.e_x < 1e-12 && m.budget.sigma < 1e-9);
}

fn varying_scenario(steps: usize) -> Scenario {
    let mut sc = static_scenario(steps);
    let wave = |k: usize, a: f64, w: f64| a * (k as f64 * w).sin();
    sc.loads[0].demand = (0..steps).map(|k| Complex64::new(0.8 + wave(k, 0.1, 0.02), 0.2)).collect();
    sc.loads[1].demand = (0..steps).map(|k| Complex64::new(0.5 + wave(k, 0.05, 0.05), 0.1)).collect();
    sc.devices[0].region = RegionSpec::Pv { rating: 0.5 };
    sc.devices[0].cost.track_availability = true;
    sc.devices[0].availability = Some((0..steps).map(|k| 0.35 + wave(k, 0.05, 0.03)).collect());
    sc.targets.p0_set = (0..steps).map(|k| [0.6 + wave(k, 0.05, 0.01), 0.0, 0.0]).collect();
    sc.sim.plant = PlantKind::Ac;
    sc.sim.tau = 0.25;
    sc.sim.noise = NoiseConfig { voltage: 1e-3, current: 1e-3, head_power: 2e-3, output: 1e-3, seed: 11 };
    sc.sim.reference = Some(ReferenceOptions { tol: 1e-10, ..Default::default() });
    sc
}

#[test]
fn tracking_bound_holds() {
    let sc = tuned(varying_scenario(150));
    let log = run(&sc).unwrap();
    assert!(log.completed(), "{:?}", log.aborted);
    let k = log.constants().unwrap();
    let m = analysis::measure_run(&log.step_records().unwrap(), &k).unwrap();
    assert!(m.all_within());
    assert!(m.budget.e_v > 0.0 && m.budget.sigma > 0.0);
}

#[test]
fn injected_noise_shows_up_in_measured_error() {
    let mut sc = tuned(static_scenario(300));
    let std_v = 2e-3;
    sc.sim.noise = NoiseConfig { voltage: std_v, current: 0.0, head_power: 0.0, output: 0.0, seed: 3 };
    sc.sim.reference = None;
    let log = run(&sc).unwrap();
    // e_v is the Euclidean norm over the voltage channels of the injected noise
    let injected = log
        .records
        .iter()
        .map(|r| r.meas_v.iter().zip(&r.true_v).map(|(m, t)| (m - t).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let measured = log
        .records
        .iter()
        .map(|r| r.meas_v.iter().zip(&r.pred_v).map(|(m, p)| (m - p).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    assert!((measured - injected).abs() <= 0.2 * injected, "{measured} vs {injected}");
    assert!(injected <= 4.0 * std_v * 3f64.sqrt() + 1e-12);
}
