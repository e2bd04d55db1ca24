//! Closed-loop engine: plant, actuation lags, noisy sensing and the
//! controller, advanced in lockstep at the sampling interval.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;
use num_complex::Complex64;
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::{Member, MemberCost};
use crate::analysis::{self, ConvergenceConstants, Problem, ReferenceOptions, SaddlePoint};
use crate::controller::{
    controller_step, gradient_seed, ControllerParams, ControllerState, DualState, MeasurementFrame, StepContext, Targets,
    UnitSpec,
};
use crate::error::{Error, Result};
use crate::network::{GridModel, PhaseConnection};
use crate::powerflow::{AcPlant, InjectionSpec, MeasurementSets};
use crate::regions::{fold_aggregate, OperatingRegion, Setpoint};
use crate::sensitivity::{apply_setpoint, linearize, SensitivityModel, UnitAttachment, DEFAULT_STEP};

/// Noise samples are clamped to this many standard deviations.
pub const NOISE_CLAMP: f64 = 4.0;

/// First-order response of a device output toward its command.
pub fn actuate(commanded: &Setpoint, current: &Setpoint, tau: f64, h: f64) -> Setpoint {
    if tau <= 0.0 {
        return *commanded;
    }
    commanded + (current - commanded) * Float::exp(-h / tau)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RegionSpec {
    Fixed(OperatingRegion),
    /// Inverter disk `[0, P_av] × rating`; `P_av` comes from the device's
    /// availability trace and defaults to the rating.
    Pv { rating: f64 },
    /// Disk whose real-power limits follow the stored energy (per-unit
    /// hours); charging is negative.
    Battery { rating: f64, p_max: f64, capacity: f64, soc0: f64 },
    /// Charging levels (positive numbers, drawn as negative `P`) restricted
    /// to those that still deliver `energy` by `deadline` seconds.
    Ev { rates: Vec<f64>, energy: f64, deadline: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostSpec {
    pub c_p: f64,
    pub c_q: f64,
    pub p_ref: f64,
    pub q_ref: f64,
    /// Replace `p_ref` by the availability each step (curtailment cost).
    #[cfg_attr(feature = "serde", serde(default))]
    pub track_availability: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceConfig {
    pub id: String,
    pub node: usize,
    pub connections: Vec<PhaseConnection>,
    pub region: RegionSpec,
    pub cost: CostSpec,
    /// Per-step available real power (PV).
    pub availability: Option<Vec<f64>>,
}

/// Devices behind one aggregator. Members must share node and connections.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig {
    pub id: String,
    pub members: Vec<String>,
}

/// Uncontrollable consumption, one complex value per step.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadConfig {
    pub node: usize,
    pub connection: PhaseConnection,
    pub demand: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetTrace {
    pub p0_set: Vec<[f64; 3]>,
    pub enabled: Vec<bool>,
    pub band: Vec<f64>,
}

impl TargetTrace {
    pub fn disabled(steps: usize) -> TargetTrace {
        TargetTrace { p0_set: vec![[0.0; 3]; steps], enabled: vec![false; steps], band: vec![0.0; steps] }
    }

    fn at(&self, k: usize) -> Targets {
        Targets { p0_set: self.p0_set[k], e: self.band[k], s: self.enabled[k] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseConfig {
    pub voltage: f64,
    pub current: f64,
    pub head_power: f64,
    pub output: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PlantKind {
    #[default]
    Ac,
    /// The affine model itself acts as the plant.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub steps: usize,
    /// Actuation time constant in seconds.
    pub tau: f64,
    /// Whole steps between issuing and applying a command.
    pub delay: usize,
    pub plant: PlantKind,
    pub noise: NoiseConfig,
    /// Re-anchor the affine model to the current loads every step.
    pub reanchor: bool,
    /// Solve for the saddle point of every step.
    pub reference: Option<ReferenceOptions>,
    /// Overrides the estimated gradient Lipschitz constant.
    pub lipschitz: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            steps: 0,
            tau: 0.0,
            delay: 0,
            plant: PlantKind::Ac,
            noise: NoiseConfig::default(),
            reanchor: true,
            reference: None,
            lipschitz: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub grid: GridModel,
    pub sets: MeasurementSets,
    pub devices: Vec<DeviceConfig>,
    pub aggregations: Vec<AggregationConfig>,
    pub loads: Vec<LoadConfig>,
    pub targets: TargetTrace,
    pub params: ControllerParams,
    pub sim: SimConfig,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunHeader {
    pub alpha: f64,
    pub r_p: f64,
    pub r_d: f64,
    pub l: f64,
    pub g: f64,
    pub c: f64,
    pub h: f64,
    pub units: Vec<String>,
    pub devices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogRecord {
    pub k: usize,
    pub t: f64,
    /// `z^(k)` before the step.
    pub z: Vec<f64>,
    pub z_star: Option<Vec<f64>>,
    /// Continuous unit commands `x^(k)`.
    pub commanded: Vec<[f64; 2]>,
    /// Gradient seeds derived from the measured outputs.
    pub measured: Vec<[f64; 2]>,
    /// True device outputs after actuation.
    pub outputs: Vec<[f64; 2]>,
    pub true_v: Vec<f64>,
    pub true_i: Vec<f64>,
    pub true_p0: [f64; 3],
    pub meas_v: Vec<f64>,
    pub meas_i: Vec<f64>,
    pub meas_p0: [f64; 3],
    /// Model prediction at `x^(k)`.
    pub pred_v: Vec<f64>,
    pub pred_i: Vec<f64>,
    pub pred_p0: [f64; 3],
    pub p0_set: [f64; 3],
    pub s: bool,
    pub band: f64,
    /// Commands issued by this step, per device.
    pub issued: Vec<[f64; 2]>,
    pub disaggregation_gaps: Vec<f64>,
    pub dual_norms: [f64; 5],
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunLog {
    pub header: RunHeader,
    pub records: Vec<LogRecord>,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }

    /// Inputs for [`analysis::measure_run`]; `None` if a record lacks the
    /// reference point.
    pub fn step_records(&self) -> Option<Vec<analysis::StepRecord>> {
        let sp = |v: &[[f64; 2]]| v.iter().map(|x| Setpoint::new(x[0], x[1])).collect::<Vec<_>>();
        let dv = |v: &[f64]| DVector::from_column_slice(v);
        self.records
            .iter()
            .map(|r| {
                Some(analysis::StepRecord {
                    z: dv(&r.z),
                    z_star: dv(r.z_star.as_ref()?),
                    commanded: sp(&r.commanded),
                    measured: sp(&r.measured),
                    predicted_v: dv(&r.pred_v),
                    predicted_i: dv(&r.pred_i),
                    predicted_p0: dv(&r.pred_p0),
                    measured_v: dv(&r.meas_v),
                    measured_i: dv(&r.meas_i),
                    measured_p0: dv(&r.meas_p0),
                })
            })
            .collect()
    }

    pub fn constants(&self) -> Result<ConvergenceConstants> {
        let h = &self.header;
        ConvergenceConstants::new(h.alpha, h.r_p, h.r_d, h.l, h.g)
    }
}

fn sp2(x: &Setpoint) -> [f64; 2] {
    [x.x, x.y]
}

fn arr3(v: &DVector<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

/// Mutable per-device state carried between steps.
#[derive(Clone, Debug)]
struct DeviceDynamics {
    /// Stored (battery) or still-required (EV) energy in per-unit hours.
    energy: f64,
}

struct Engine<'a> {
    sc: &'a Scenario,
    plant: AcPlant,
    attachments: Vec<UnitAttachment>,
    /// Device indices behind each unit.
    unit_devices: Vec<Vec<usize>>,
    base_setpoints: Vec<Setpoint>,
    model: SensitivityModel,
    dynamics: Vec<DeviceDynamics>,
    rng: ChaCha8Rng,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario) -> Result<Engine<'a>> {
        sc.params.validate()?;
        validate(sc)?;
        let mut in_agg = vec![false; sc.devices.len()];
        let index_of = |id: &str| {
            sc.devices.iter().position(|d| d.id == id).ok_or_else(|| Error::UnknownUnit(id.to_string()))
        };
        let mut unit_devices = Vec::new();
        let mut aggregated = Vec::new();
        for a in &sc.aggregations {
            if a.members.is_empty() {
                return Err(Error::Scenario(format!("aggregation `{}` has no members", a.id)));
            }
            let idx = a.members.iter().map(|m| index_of(m)).collect::<Result<Vec<_>>>()?;
            let first = &sc.devices[idx[0]];
            for &i in &idx {
                if in_agg[i] {
                    return Err(Error::Scenario(format!("device `{}` is in more than one aggregation", sc.devices[i].id)));
                }
                let d = &sc.devices[i];
                if d.node != first.node || d.connections != first.connections {
                    return Err(Error::Scenario(format!("members of `{}` must share node and connections", a.id)));
                }
                in_agg[i] = true;
            }
            aggregated.push((UnitAttachment::new(a.id.clone(), first.node, first.connections.clone()), idx));
        }
        let mut attachments = Vec::new();
        for (i, d) in sc.devices.iter().enumerate() {
            if !in_agg[i] {
                attachments.push(UnitAttachment::new(d.id.clone(), d.node, d.connections.clone()));
                unit_devices.push(vec![i]);
            }
        }
        for (att, idx) in aggregated {
            attachments.push(att);
            unit_devices.push(idx);
        }

        let mut conns: Vec<(usize, PhaseConnection)> = Vec::new();
        for a in &attachments {
            conns.extend(a.connections.iter().map(|&c| (a.node, c)));
        }
        conns.extend(sc.loads.iter().map(|l| (l.node, l.connection)));
        let plant = AcPlant::new(sc.grid.clone(), &conns, sc.sets.clone())?;
        if sc.params.i_max.len() != sc.sets.current_channels(&sc.grid)? {
            return Err(Error::Scenario("i_max length differs from the monitored current channels".into()));
        }
        let base_setpoints = vec![Setpoint::zeros(); attachments.len()];
        let loads0 = load_injection(&plant, sc, 0)?;
        let model = linearize(&plant, &attachments, &base_setpoints, &loads0, DEFAULT_STEP)?;
        let dynamics = sc
            .devices
            .iter()
            .map(|d| DeviceDynamics {
                energy: match &d.region {
                    RegionSpec::Battery { capacity, soc0, .. } => capacity * soc0,
                    RegionSpec::Ev { energy, .. } => *energy,
                    _ => 0.0,
                },
            })
            .collect();
        Ok(Engine {
            sc,
            plant,
            attachments,
            unit_devices,
            base_setpoints,
            model,
            dynamics,
            rng: ChaCha8Rng::seed_from_u64(sc.sim.noise.seed),
        })
    }

    fn initial_constants(&mut self) -> Result<(Vec<UnitSpec>, f64, f64)> {
        if self.sc.sim.reanchor {
            self.reanchor(0)?;
        }
        let units = self.unit_specs(0)?;
        let g = self.model.gain_bound();
        let l = match self.sc.sim.lipschitz {
            Some(l) => l,
            None => analysis::lipschitz_estimate(&units, 9)?,
        };
        Ok((units, l, g))
    }

    fn device_region(&self, i: usize, k: usize) -> Result<OperatingRegion> {
        let d = &self.sc.devices[i];
        let dt = self.sc.params.h / 3600.0;
        match &d.region {
            RegionSpec::Fixed(r) => Ok(r.clone()),
            RegionSpec::Pv { rating } => {
                let p_av = self.availability(i, k).unwrap_or(*rating).clamp(0.0, *rating);
                OperatingRegion::disk(0.0, p_av, *rating)
            }
            RegionSpec::Battery { rating, p_max, capacity, .. } => {
                let e = self.dynamics[i].energy;
                let hi = p_max.min(e / dt).max(0.0);
                let lo = -p_max.min((capacity - e) / dt).max(0.0);
                OperatingRegion::disk(lo, hi, *rating)
            }
            RegionSpec::Ev { rates, deadline, .. } => {
                let remaining = self.dynamics[i].energy;
                if remaining <= 0.0 {
                    return OperatingRegion::discrete(vec![Setpoint::zeros()]);
                }
                let hours_left = (deadline - k as f64 * self.sc.params.h) / 3600.0;
                let floor = if hours_left > 0.0 { remaining / hours_left } else { f64::INFINITY };
                let max_rate = rates.iter().copied().fold(0.0, f64::max);
                let mut levels: Vec<f64> = core::iter::once(0.0).chain(rates.iter().copied()).filter(|&r| r >= floor).collect();
                if levels.is_empty() {
                    levels.push(max_rate);
                }
                OperatingRegion::discrete(levels.iter().map(|&r| Setpoint::new(-r, 0.0)).collect())
            }
        }
    }

    fn availability(&self, i: usize, k: usize) -> Option<f64> {
        self.sc.devices[i].availability.as_ref().map(|t| t[k])
    }

    fn device_cost(&self, i: usize, k: usize) -> Result<MemberCost> {
        let c = &self.sc.devices[i].cost;
        let p_ref = if c.track_availability {
            match &self.sc.devices[i].region {
                RegionSpec::Pv { rating } => self.availability(i, k).unwrap_or(*rating).clamp(0.0, *rating),
                _ => self.availability(i, k).unwrap_or(c.p_ref),
            }
        } else {
            c.p_ref
        };
        MemberCost::new(c.c_p, c.c_q, p_ref, c.q_ref)
    }

    fn unit_specs(&self, k: usize) -> Result<Vec<UnitSpec>> {
        let n_single = self.sc.devices.len() - self.sc.aggregations.iter().map(|a| a.members.len()).sum::<usize>();
        let mut out = Vec::with_capacity(self.attachments.len());
        for (j, (att, devs)) in self.attachments.iter().zip(&self.unit_devices).enumerate() {
            if j < n_single {
                let i = devs[0];
                out.push(UnitSpec::device(att.id.clone(), self.device_region(i, k)?, self.device_cost(i, k)?));
            } else {
                let members = devs
                    .iter()
                    .map(|&i| Ok(Member::new(self.device_region(i, k)?, self.device_cost(i, k)?)))
                    .collect::<Result<Vec<_>>>()?;
                let relaxed: Vec<OperatingRegion> = members.iter().map(|m| m.region.relaxed()).collect();
                let folded = fold_aggregate(&relaxed)?;
                out.push(UnitSpec::aggregation(att.id.clone(), members, folded));
            }
        }
        Ok(out)
    }

    /// Sum of device outputs per unit.
    fn unit_outputs(&self, outputs: &[Setpoint]) -> Vec<Setpoint> {
        self.unit_devices.iter().map(|d| d.iter().fold(Setpoint::zeros(), |a, &i| a + outputs[i])).collect()
    }

    fn noise(&mut self, std: f64) -> f64 {
        if std <= 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        std * z.clamp(-NOISE_CLAMP, NOISE_CLAMP)
    }

    fn noisy(&mut self, v: &DVector<f64>, std: f64) -> DVector<f64> {
        v.map(|x| x + self.noise(std))
    }

    fn reanchor(&mut self, k: usize) -> Result<()> {
        let mut inj = load_injection(&self.plant, self.sc, k)?;
        for (a, x) in self.attachments.iter().zip(&self.base_setpoints) {
            apply_setpoint(&self.plant, &mut inj, a, x)?;
        }
        let obs = self.plant.observe(&inj)?;
        let p0 = DVector::from_column_slice(&obs.p0);
        let base = self.base_setpoints.clone();
        self.model.reanchor(&base, &obs.v_mag, &obs.i_mag, &p0)
    }

    /// True plant response to the unit outputs.
    fn plant_response(&self, k: usize, unit_out: &[Setpoint]) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        match self.sc.sim.plant {
            PlantKind::Ac => {
                let mut inj = load_injection(&self.plant, self.sc, k)?;
                for (a, x) in self.attachments.iter().zip(unit_out) {
                    apply_setpoint(&self.plant, &mut inj, a, x)?;
                }
                let obs = self.plant.observe(&inj)?;
                Ok((obs.v_mag, obs.i_mag, DVector::from_column_slice(&obs.p0)))
            }
            PlantKind::Linear => {
                let p = self.model.predict(unit_out)?;
                Ok((p.v, p.i, p.p0))
            }
        }
    }

    /// Limits battery outputs to what the stored energy allows this step.
    fn saturate(&self, outputs: &mut [Setpoint]) {
        let dt = self.sc.params.h / 3600.0;
        for (i, d) in self.sc.devices.iter().enumerate() {
            if let RegionSpec::Battery { capacity, .. } = &d.region {
                let e = self.dynamics[i].energy;
                outputs[i].x = outputs[i].x.clamp(-(capacity - e) / dt, e / dt);
            }
        }
    }

    fn advance_energy(&mut self, outputs: &[Setpoint]) {
        let dt = self.sc.params.h / 3600.0;
        for (i, d) in self.sc.devices.iter().enumerate() {
            match &d.region {
                RegionSpec::Battery { capacity, .. } => {
                    self.dynamics[i].energy = (self.dynamics[i].energy - outputs[i].x * dt).clamp(0.0, *capacity);
                }
                RegionSpec::Ev { .. } => {
                    self.dynamics[i].energy = (self.dynamics[i].energy + outputs[i].x * dt).max(0.0);
                }
                _ => {}
            }
        }
    }
}

/// Per-device implemented commands in device order.
fn device_commands(state: &ControllerState, unit_devices: &[Vec<usize>], n: usize) -> Vec<Setpoint> {
    let mut out = vec![Setpoint::zeros(); n];
    for (cmd, devs) in state.commands.iter().zip(unit_devices) {
        for (x, &i) in cmd.implemented.iter().zip(devs) {
            out[i] = *x;
        }
    }
    out
}

fn load_injection(plant: &AcPlant, sc: &Scenario, k: usize) -> Result<InjectionSpec> {
    let mut inj = plant.injections();
    for l in &sc.loads {
        plant.add_injection(&mut inj, l.node, l.connection, -l.demand[k])?;
    }
    Ok(inj)
}

fn validate(sc: &Scenario) -> Result<()> {
    let n = sc.sim.steps;
    let short = |what: &str, len: usize| {
        if len < n {
            Err(Error::Scenario(format!("{what} covers {len} of {n} steps")))
        } else {
            Ok(())
        }
    };
    short("p0_set trace", sc.targets.p0_set.len())?;
    short("tracking flag trace", sc.targets.enabled.len())?;
    short("band trace", sc.targets.band.len())?;
    for d in &sc.devices {
        if let Some(t) = &d.availability {
            short(&format!("availability of `{}`", d.id), t.len())?;
        }
    }
    for (i, l) in sc.loads.iter().enumerate() {
        short(&format!("load {i} at node {}", l.node), l.demand.len())?;
    }
    for (i, d) in sc.devices.iter().enumerate() {
        if sc.devices[..i].iter().any(|o| o.id == d.id) || sc.aggregations.iter().any(|a| a.id == d.id) {
            return Err(Error::Scenario(format!("duplicate id `{}`", d.id)));
        }
    }
    if sc.sim.tau < 0.0 {
        return Err(Error::Scenario("actuation time constant must be nonnegative".into()));
    }
    Ok(())
}

fn dual_norms(d: &DualState) -> [f64; 5] {
    [d.gamma.norm(), d.nu.norm(), d.lambda.norm(), d.mu.norm(), d.zeta.norm()]
}

/// Gradient Lipschitz constant `L` and model gain `G` at the first step,
/// as used by [`run`]; the step size in `sc.params` is not checked.
pub fn problem_constants(sc: &Scenario) -> Result<(f64, f64)> {
    let mut probe = sc.clone();
    probe.params.alpha = 1.0;
    let mut eng = Engine::new(&probe)?;
    let (_, l, g) = eng.initial_constants()?;
    Ok((l, g))
}

/// Affine model the controller starts from, anchored at the first step.
pub fn initial_model(sc: &Scenario) -> Result<SensitivityModel> {
    let mut probe = sc.clone();
    probe.params.alpha = 1.0;
    let mut eng = Engine::new(&probe)?;
    if probe.sim.reanchor {
        eng.reanchor(0)?;
    }
    Ok(eng.model)
}

/// Runs a scenario. Setup errors are returned; failures during the run
/// stop it and are reported in [`RunLog::aborted`] with the steps so far.
pub fn run(sc: &Scenario) -> Result<RunLog> {
    let mut eng = Engine::new(sc)?;
    let n_dev = sc.devices.len();
    let (units0, l, g) = eng.initial_constants()?;
    let p = &sc.params;
    let c = analysis::contraction(p.alpha, p.r_p, p.r_d, l, g)?;
    p.check_stepsize(l, g);
    let header = RunHeader {
        alpha: p.alpha,
        r_p: p.r_p,
        r_d: p.r_d,
        l,
        g,
        c,
        h: p.h,
        units: eng.attachments.iter().map(|a| a.id.clone()).collect(),
        devices: sc.devices.iter().map(|d| d.id.clone()).collect(),
    };
    let mut log = RunLog { header, records: Vec::with_capacity(sc.sim.steps), aborted: None };

    let targets0 = sc.targets.at(0);
    let mut state = ControllerState::new(&StepContext { params: p, targets: &targets0, units: &units0, model: &eng.model })?;
    let mut outputs = device_commands(&state, &eng.unit_devices, n_dev);
    let mut issued: VecDeque<Vec<Setpoint>> = VecDeque::from([outputs.clone()]);
    let mut reference: Option<SaddlePoint> = None;

    for k in 0..sc.sim.steps {
        match step(&mut eng, k, &mut state, &mut outputs, &mut issued, &mut reference, l) {
            Ok(rec) => log.records.push(rec),
            Err(e) => {
                log::error!("run aborted at step {k}: {e}");
                log.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn step(
    eng: &mut Engine,
    k: usize,
    state: &mut ControllerState,
    outputs: &mut Vec<Setpoint>,
    issued: &mut VecDeque<Vec<Setpoint>>,
    reference: &mut Option<SaddlePoint>,
    l: f64,
) -> Result<LogRecord> {
    let sc = eng.sc;
    let p = &sc.params;
    let t = k as f64 * p.h;
    if sc.sim.reanchor && k > 0 {
        eng.reanchor(k)?;
    }
    let units = eng.unit_specs(k)?;
    let targets = sc.targets.at(k);

    // commands older than the link delay reach the devices; the newest wins
    let applied = issued.front().cloned().unwrap_or_default();
    let mut new_outputs: Vec<Setpoint> = applied.iter().zip(outputs.iter()).map(|(c, o)| actuate(c, o, sc.sim.tau, p.h)).collect();
    eng.saturate(&mut new_outputs);
    let unit_out = eng.unit_outputs(&new_outputs);
    let (true_v, true_i, true_p0) = eng.plant_response(k, &unit_out)?;

    let noise = sc.sim.noise;
    let meas_v = eng.noisy(&true_v, noise.voltage);
    let meas_i = eng.noisy(&true_i, noise.current);
    let meas_p0 = eng.noisy(&true_p0, noise.head_power);
    let meas_out: Vec<Setpoint> = unit_out
        .iter()
        .map(|x| {
            let (a, b) = (eng.noise(noise.output), eng.noise(noise.output));
            x + Setpoint::new(a, b)
        })
        .collect();
    let frame = MeasurementFrame { t, v_mag: meas_v.clone(), i_mag: meas_i.clone(), p0: meas_p0.clone(), outputs: meas_out.clone() };
    let ctx = StepContext { params: p, targets: &targets, units: &units, model: &eng.model };

    let z_star = match &sc.sim.reference {
        Some(opts) => {
            let prob = Problem { units: &units, model: &eng.model, params: p, targets: &targets };
            let sp = analysis::reference_saddle(&prob, l, reference.as_ref(), opts)?;
            let z = sp.z();
            *reference = Some(sp);
            Some(z.iter().copied().collect())
        }
        None => None,
    };

    let seeds: Vec<Setpoint> = units.iter().zip(&meas_out).zip(&state.commands).map(|((u, m), c)| gradient_seed(u, m, c)).collect();
    let pred = eng.model.predict(&state.x)?;
    let next = controller_step(state, &frame, &ctx)?;
    let new_cmds = device_commands(&next, &eng.unit_devices, outputs.len());

    let rec = LogRecord {
        k,
        t,
        z: state.z().iter().copied().collect(),
        z_star,
        commanded: state.x.iter().map(sp2).collect(),
        measured: seeds.iter().map(sp2).collect(),
        outputs: new_outputs.iter().map(sp2).collect(),
        true_v: true_v.iter().copied().collect(),
        true_i: true_i.iter().copied().collect(),
        true_p0: arr3(&true_p0),
        meas_v: meas_v.iter().copied().collect(),
        meas_i: meas_i.iter().copied().collect(),
        meas_p0: arr3(&meas_p0),
        pred_v: pred.v.iter().copied().collect(),
        pred_i: pred.i.iter().copied().collect(),
        pred_p0: arr3(&pred.p0),
        p0_set: targets.p0_set,
        s: targets.s,
        band: targets.e,
        issued: new_cmds.iter().map(sp2).collect(),
        disaggregation_gaps: next.gaps.clone(),
        dual_norms: dual_norms(&next.duals),
    };

    eng.advance_energy(&new_outputs);
    *outputs = new_outputs;
    issued.push_back(new_cmds);
    while issued.len() > sc.sim.delay + 1 {
        issued.pop_front();
    }
    *state = next;
    Ok(rec)
}
