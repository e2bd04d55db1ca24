//! JSON scenario documents in engineering units, converted to the
//! per-unit [`Scenario`] the simulator runs.
//!
//! Bases: `voltage_kv` is line-to-neutral, `power_kva` is per phase. Powers
//! are kW / kvar / kVA per connection, energies kWh, currents A, line
//! admittances S, times s. Voltage limits, the slack magnitude and the
//! voltage noise are already per unit; cost weights apply to per-unit powers.

use std::path::{Path, PathBuf};

use dergrid_core::aggregation::DisaggregationOptions;
use dergrid_core::analysis::{self, ReferenceOptions};
use dergrid_core::controller::ControllerParams;
use dergrid_core::nalgebra::DVector;
use dergrid_core::network::{balanced_voltage, BaseValues, GridModel, Line, Node, Phase, PhaseConnection, PhaseIndex, Phases};
use dergrid_core::powerflow::MeasurementSets;
use dergrid_core::regions::{OperatingRegion, Setpoint};
use dergrid_core::sim::{
    AggregationConfig, CostSpec, DeviceConfig, LoadConfig, NoiseConfig, PlantKind, RegionSpec, Scenario, SimConfig,
    TargetTrace,
};
use dergrid_core::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::TraceTable;

/// A constant or the name of a time-series column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Quantity {
    Value(f64),
    Series(String),
}

impl Default for Quantity {
    fn default() -> Self {
        Quantity::Value(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    pub voltage_kv: f64,
    pub power_kva: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: usize,
    /// Letters of the phases present, e.g. `"abc"` or `"bc"`.
    pub phases: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutualSpec {
    /// Positions within the line's phases.
    pub i: usize,
    pub j: usize,
    pub y: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub phases: String,
    /// Per-phase series admittance `[re, im]`, S.
    pub series: Vec<[f64; 2]>,
    #[serde(default)]
    pub mutual: Vec<MutualSpec>,
    /// Per-phase total shunt admittance, S; half at each end.
    #[serde(default)]
    pub shunt: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltagePoint {
    pub node: usize,
    pub phase: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VoltageSet {
    /// `"all"`: every node-phase.
    All(String),
    Points(Vec<VoltagePoint>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitoredLine {
    pub id: usize,
    /// Ampacity of every phase of the line, A.
    pub i_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    pub voltages: VoltageSet,
    #[serde(default)]
    pub lines: Vec<MonitoredLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionJson {
    Disk([f64; 3]),
    Interval([f64; 2]),
    Discrete(Vec<[f64; 2]>),
    Pv { rating: f64 },
    /// `capacity` in kWh, `soc0` as a fraction of it.
    Battery { rating: f64, p_max: f64, capacity: f64, soc0: f64 },
    /// Charging `rates` in kW, required `energy` in kWh, `deadline` in s.
    Ev { rates: Vec<f64>, energy: f64, deadline: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostJson {
    pub c_p: f64,
    pub c_q: f64,
    #[serde(default)]
    pub p_ref: f64,
    #[serde(default)]
    pub q_ref: f64,
    #[serde(default)]
    pub track_availability: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub node: usize,
    /// `"a"`, `"b"`, `"c"` (wye) or `"ab"`, `"bc"`, `"ca"` (delta); the
    /// setpoint applies to each.
    pub connections: Vec<String>,
    pub region: RegionJson,
    pub cost: CostJson,
    #[serde(default)]
    pub availability: Option<Quantity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSpec {
    pub id: String,
    pub members: Vec<String>,
}

/// Consumption (positive `p` draws power), kW and kvar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub node: usize,
    pub connection: String,
    pub p: Quantity,
    #[serde(default)]
    pub q: Quantity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Per-phase head power set point, kW.
    pub p0_set: [Quantity; 3],
    /// Nonzero enables tracking.
    #[serde(default = "one")]
    pub enabled: Quantity,
    /// Half-width of the tolerated band, kW.
    pub band: Quantity,
}

fn one() -> Quantity {
    Quantity::Value(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    /// Explicit step size; otherwise `step_fraction` of the largest
    /// step size that guarantees contraction.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub step_fraction: Option<f64>,
    pub r_p: f64,
    pub r_d: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Sampling interval, s.
    pub h: f64,
    #[serde(default)]
    pub disaggregation_tol: Option<f64>,
    #[serde(default)]
    pub disaggregation_max_iter: Option<usize>,
}

/// Standard deviations; `head_power` and `output` in kW, `current` in A.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub voltage: f64,
    #[serde(default)]
    pub current: f64,
    #[serde(default)]
    pub head_power: f64,
    #[serde(default)]
    pub output: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    /// Run length, s; the run has `round(duration / h)` steps.
    pub duration: f64,
    #[serde(default)]
    pub tau: f64,
    /// Link delay, s, rounded to whole steps.
    #[serde(default)]
    pub delay: f64,
    #[serde(default)]
    pub plant: PlantKind,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "yes")]
    pub reanchor: bool,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    #[serde(default)]
    pub lipschitz: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub base: BaseSpec,
    /// Slack voltage magnitude, p.u., balanced.
    #[serde(default = "unit_voltage")]
    pub slack_voltage: f64,
    pub nodes: Vec<NodeSpec>,
    pub lines: Vec<LineSpec>,
    pub measurements: MeasurementSpec,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub aggregations: Vec<AggregationSpec>,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
    /// CSV files, relative to the scenario file.
    #[serde(default)]
    pub timeseries: Vec<String>,
    #[serde(default)]
    pub targets: Option<TargetSpec>,
    pub controller: ControllerSpec,
    pub sim: SimSpec,
}

fn unit_voltage() -> f64 {
    1.0
}

pub fn parse_phases(s: &str) -> Result<Phases> {
    let mut out = Vec::new();
    for ch in s.chars() {
        let p = Phase::from_letter(ch).ok_or_else(|| Error::Schema(format!("unknown phase `{ch}` in `{s}`")))?;
        if out.contains(&p) {
            return Err(Error::Schema(format!("phase `{ch}` repeated in `{s}`")));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Schema("empty phase list".into()));
    }
    Ok(Phases::new(&out))
}

pub fn parse_connection(s: &str) -> Result<PhaseConnection> {
    PhaseConnection::parse(s).ok_or_else(|| Error::Schema(format!("unknown connection `{s}`")))
}

fn complex(x: &[f64; 2]) -> Complex64 {
    Complex64::new(x[0], x[1])
}

/// Series columns available to a scenario, resolved on the run's grid.
struct Series<'a> {
    tables: &'a [TraceTable],
    h: f64,
    steps: usize,
}

impl Series<'_> {
    fn trace(&self, q: &Quantity, scale: f64) -> Result<Vec<f64>> {
        match q {
            Quantity::Value(x) => Ok(vec![x * scale; self.steps]),
            Quantity::Series(name) => {
                let table = self
                    .tables
                    .iter()
                    .find(|t| t.series.contains_key(name))
                    .ok_or_else(|| Error::series(name.clone(), "not found in any time-series file"))?;
                Ok(table.resample(name, self.h, self.steps)?.into_iter().map(|x| x * scale).collect())
            }
        }
    }
}

impl ScenarioFile {
    pub fn from_path(path: &Path) -> Result<(ScenarioFile, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let file = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((file, dir))
    }

    pub fn base(&self) -> BaseValues {
        BaseValues { voltage_kv: self.base.voltage_kv, power_kva: self.base.power_kva }
    }

    pub fn steps(&self) -> usize {
        (self.sim.duration / self.controller.h).round() as usize
    }

    pub fn grid(&self) -> Result<GridModel> {
        let base = self.base();
        if !(base.voltage_kv > 0.0 && base.power_kva > 0.0) {
            return Err(Error::Schema("base voltage and power must be positive".into()));
        }
        let z = base.impedance_ohm();
        let nodes = self
            .nodes
            .iter()
            .map(|n| Ok(Node { id: n.id, phases: parse_phases(&n.phases)? }))
            .collect::<Result<Vec<_>>>()?;
        let mut lines = Vec::with_capacity(self.lines.len());
        for l in &self.lines {
            let phases = parse_phases(&l.phases)?;
            let series: Vec<Complex64> = l.series.iter().map(|y| complex(y) * z).collect();
            let mut line = Line::new(l.id, l.from, l.to, phases, &series)?;
            for m in &l.mutual {
                if m.i >= phases.len() || m.j >= phases.len() || m.i == m.j {
                    return Err(Error::Schema(format!("line {}: bad mutual term ({}, {})", l.id, m.i, m.j)));
                }
                line = line.with_mutual(m.i, m.j, complex(&m.y) * z);
            }
            if !l.shunt.is_empty() {
                if l.shunt.len() != phases.len() {
                    return Err(Error::Schema(format!("line {}: {} shunt entries for {} phases", l.id, l.shunt.len(), phases.len())));
                }
                let sh: Vec<Complex64> = l.shunt.iter().map(|y| complex(y) * z).collect();
                line = line.with_shunt(&sh);
            }
            lines.push(line);
        }
        let mut grid = GridModel::new(nodes, lines, balanced_voltage(self.slack_voltage));
        grid.base = base;
        grid.validate()?;
        Ok(grid)
    }

    fn measurement_sets(&self, grid: &GridModel) -> Result<MeasurementSets> {
        let voltages = match &self.measurements.voltages {
            VoltageSet::All(s) if s == "all" => MeasurementSets::all_voltages(&PhaseIndex::new(grid)),
            VoltageSet::All(s) => return Err(Error::Schema(format!("voltage set must be \"all\" or a list, got `{s}`"))),
            VoltageSet::Points(pts) => pts
                .iter()
                .map(|p| {
                    let ph = p.phase.chars().next().and_then(Phase::from_letter);
                    match ph {
                        Some(ph) if p.phase.len() == 1 => Ok((p.node, ph)),
                        _ => Err(Error::Schema(format!("bad phase `{}` at node {}", p.phase, p.node))),
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(MeasurementSets { voltages, lines: self.measurements.lines.iter().map(|l| l.id).collect() })
    }

    /// Loads the referenced CSV files and builds the per-unit scenario.
    pub fn into_scenario(&self, dir: &Path) -> Result<Scenario> {
        let tables = self
            .timeseries
            .iter()
            .map(|f| TraceTable::from_path(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        self.to_scenario(&tables)
    }

    pub fn to_scenario(&self, tables: &[TraceTable]) -> Result<Scenario> {
        let c = &self.controller;
        if !(c.h > 0.0) {
            return Err(Error::Schema("controller.h must be positive".into()));
        }
        let steps = self.steps();
        let series = Series { tables, h: c.h, steps };
        let base = self.base();
        let s_base = base.power_kva;
        let i_base = base.power_kva / base.voltage_kv;
        let pu = 1.0 / s_base;

        let grid = self.grid()?;
        let sets = self.measurement_sets(&grid)?;
        let mut i_max = Vec::new();
        for l in &self.measurements.lines {
            let line = grid.line(l.id).ok_or_else(|| Error::Schema(format!("monitored line {} not in the grid", l.id)))?;
            i_max.extend(std::iter::repeat_n(l.i_max / i_base, line.phases.len()));
        }

        let devices = self.devices.iter().map(|d| self.device(d, &series, pu)).collect::<Result<Vec<_>>>()?;
        let aggregations =
            self.aggregations.iter().map(|a| AggregationConfig { id: a.id.clone(), members: a.members.clone() }).collect();
        let loads = self
            .loads
            .iter()
            .map(|l| {
                let p = series.trace(&l.p, pu)?;
                let q = series.trace(&l.q, pu)?;
                Ok(LoadConfig {
                    node: l.node,
                    connection: parse_connection(&l.connection)?,
                    demand: p.into_iter().zip(q).map(|(p, q)| Complex64::new(p, q)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = match &self.targets {
            None => TargetTrace::disabled(steps),
            Some(t) => {
                let phases = t.p0_set.iter().map(|q| series.trace(q, pu)).collect::<Result<Vec<_>>>()?;
                TargetTrace {
                    p0_set: (0..steps).map(|k| [phases[0][k], phases[1][k], phases[2][k]]).collect(),
                    enabled: series.trace(&t.enabled, 1.0)?.into_iter().map(|x| x != 0.0).collect(),
                    band: series.trace(&t.band, pu)?,
                }
            }
        };

        let mut opts = DisaggregationOptions::default();
        if let Some(t) = c.disaggregation_tol {
            opts.tol = t;
        }
        if let Some(m) = c.disaggregation_max_iter {
            opts.max_iter = m;
        }
        let params = ControllerParams {
            alpha: c.alpha.unwrap_or(1.0),
            r_p: c.r_p,
            r_d: c.r_d,
            v_min: c.v_min,
            v_max: c.v_max,
            i_max: DVector::from_vec(i_max),
            h: c.h,
            disaggregation: opts,
        };
        let n = &self.sim.noise;
        let sim = SimConfig {
            steps,
            tau: self.sim.tau,
            delay: (self.sim.delay / c.h).round() as usize,
            plant: self.sim.plant,
            noise: NoiseConfig {
                voltage: n.voltage,
                current: n.current / i_base,
                head_power: n.head_power * pu,
                output: n.output * pu,
                seed: n.seed,
            },
            reanchor: self.sim.reanchor,
            reference: self.sim.reference.as_ref().map(|r| {
                let d = ReferenceOptions::default();
                ReferenceOptions { tol: r.tol.unwrap_or(d.tol), max_iter: r.max_iter.unwrap_or(d.max_iter) }
            }),
            lipschitz: self.sim.lipschitz,
        };
        let mut sc = Scenario { grid, sets, devices, aggregations, loads, targets, params, sim };
        match (c.alpha, c.step_fraction) {
            (Some(_), Some(_)) => return Err(Error::Schema("give either controller.alpha or controller.step_fraction".into())),
            (Some(_), None) => {}
            (None, f) => {
                let f = f.unwrap_or(0.9);
                if !(f > 0.0 && f < 1.0) {
                    return Err(Error::Schema(format!("step_fraction must lie in (0, 1), got {f}")));
                }
                let (l, g) = dergrid_core::sim::problem_constants(&sc)?;
                sc.params.alpha = f * analysis::max_stepsize(c.r_p, c.r_d, l, g);
            }
        }
        Ok(sc)
    }

    fn device(&self, d: &DeviceSpec, series: &Series, pu: f64) -> Result<DeviceConfig> {
        let region = match &d.region {
            RegionJson::Disk([lo, hi, r]) => RegionSpec::Fixed(OperatingRegion::disk(lo * pu, hi * pu, r * pu)?),
            RegionJson::Interval([lo, hi]) => RegionSpec::Fixed(OperatingRegion::interval(lo * pu, hi * pu)?),
            RegionJson::Discrete(pts) => {
                RegionSpec::Fixed(OperatingRegion::discrete(pts.iter().map(|x| Setpoint::new(x[0] * pu, x[1] * pu)).collect())?)
            }
            RegionJson::Pv { rating } => RegionSpec::Pv { rating: rating * pu },
            RegionJson::Battery { rating, p_max, capacity, soc0 } => {
                if !(0.0..=1.0).contains(soc0) {
                    return Err(Error::Schema(format!("device `{}`: soc0 must lie in [0, 1]", d.id)));
                }
                RegionSpec::Battery { rating: rating * pu, p_max: p_max * pu, capacity: capacity * pu, soc0: *soc0 }
            }
            RegionJson::Ev { rates, energy, deadline } => {
                RegionSpec::Ev { rates: rates.iter().map(|r| r * pu).collect(), energy: energy * pu, deadline: *deadline }
            }
        };
        let c = &d.cost;
        Ok(DeviceConfig {
            id: d.id.clone(),
            node: d.node,
            connections: d.connections.iter().map(|s| parse_connection(s)).collect::<Result<Vec<_>>>()?,
            region,
            cost: CostSpec { c_p: c.c_p, c_q: c.c_q, p_ref: c.p_ref * pu, q_ref: c.q_ref * pu, track_availability: c.track_availability },
            availability: d.availability.as_ref().map(|q| series.trace(q, pu)).transpose()?,
        })
    }
}

/// Reads a scenario file together with its time series.
pub fn load(path: &Path) -> Result<Scenario> {
    let (file, dir) = ScenarioFile::from_path(path)?;
    file.into_scenario(&dir)
}
