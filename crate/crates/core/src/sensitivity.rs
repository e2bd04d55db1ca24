//! Linear response of voltage magnitudes, line-current magnitudes and head
//! powers to unit setpoints, built by central differences through the plant.
//!
//! A unit (device or aggregation) with connection set `P_j` receives its
//! setpoint `x_j` on every connection in the set, so a three-phase unit with
//! `x_j = (P, Q)` injects `P + jQ` per phase.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::PhaseConnection;
use crate::powerflow::{AcPlant, InjectionSpec, MeasurementSets, Observation};
use crate::regions::Setpoint;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Where a unit's setpoint enters the network.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitAttachment {
    pub id: String,
    pub node: usize,
    pub connections: Vec<PhaseConnection>,
}

impl UnitAttachment {
    pub fn new(id: impl Into<String>, node: usize, connections: Vec<PhaseConnection>) -> UnitAttachment {
        UnitAttachment { id: id.into(), node, connections }
    }
}

/// Adds `x` on every connection of the unit.
pub fn apply_setpoint(plant: &AcPlant, inj: &mut InjectionSpec, unit: &UnitAttachment, x: &Setpoint) -> Result<()> {
    let s = Complex::new(x.x, x.y);
    for &c in &unit.connections {
        plant.add_injection(inj, unit.node, c, s)?;
    }
    Ok(())
}

/// `A_j`, `B_j`, `M_j` of one unit; each has two columns (P, Q).
#[derive(Clone, Debug, PartialEq)]
pub struct UnitSensitivity {
    pub id: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub v: DVector<f64>,
    pub i: DVector<f64>,
    pub p0: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityModel {
    pub units: Vec<UnitSensitivity>,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub m: DVector<f64>,
    /// Setpoints at which the model was taken, in unit order.
    pub base_setpoints: Vec<Setpoint>,
    pub sets: MeasurementSets,
}

impl SensitivityModel {
    /// Model with the given matrices and zero offsets.
    pub fn from_units(units: Vec<UnitSensitivity>, sets: MeasurementSets) -> Result<SensitivityModel> {
        let (nv, ni) = units.first().map(|u| (u.a.nrows(), u.b.nrows())).unwrap_or((sets.voltages.len(), 0));
        for u in &units {
            if u.a.shape() != (nv, 2) || u.b.shape() != (ni, 2) || u.m.shape() != (3, 2) {
                return Err(Error::Dimension(format!("unit `{}` has inconsistent matrix shapes", u.id)));
            }
        }
        let base_setpoints = alloc::vec![Setpoint::zeros(); units.len()];
        Ok(SensitivityModel { units, a: DVector::zeros(nv), b: DVector::zeros(ni), m: DVector::zeros(3), base_setpoints, sets })
    }

    pub fn n_voltage(&self) -> usize {
        self.a.len()
    }

    pub fn n_current(&self) -> usize {
        self.b.len()
    }

    pub fn unit_index(&self, id: &str) -> Result<usize> {
        self.units.iter().position(|u| u.id == id).ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    /// Affine evaluation `Σ_j A_j x_j + a` (and likewise for `B`, `M`).
    pub fn predict(&self, xs: &[Setpoint]) -> Result<Prediction> {
        if xs.len() != self.units.len() {
            return Err(Error::Dimension(format!("{} setpoints for {} units", xs.len(), self.units.len())));
        }
        let mut v = self.a.clone();
        let mut i = self.b.clone();
        let mut p0 = self.m.clone();
        for (u, x) in self.units.iter().zip(xs) {
            v.gemv(1.0, &u.a, x, 1.0);
            i.gemv(1.0, &u.b, x, 1.0);
            p0.gemv(1.0, &u.m, x, 1.0);
        }
        Ok(Prediction { v, i, p0 })
    }

    /// Like [`predict`](Self::predict) with setpoints addressed by unit id;
    /// units not listed contribute nothing.
    pub fn predict_named(&self, xs: &[(&str, Setpoint)]) -> Result<Prediction> {
        let mut full = alloc::vec![Setpoint::zeros(); self.units.len()];
        for (id, x) in xs {
            full[self.unit_index(id)?] = *x;
        }
        self.predict(&full)
    }

    /// Re-anchors the offsets so the model reproduces `obs` at `setpoints`.
    pub fn reanchor(&mut self, setpoints: &[Setpoint], v: &DVector<f64>, i: &DVector<f64>, p0: &DVector<f64>) -> Result<()> {
        if v.len() != self.a.len() || i.len() != self.b.len() || p0.len() != 3 {
            return Err(Error::Dimension("measurement vectors do not match the model".into()));
        }
        self.a = DVector::zeros(self.a.len());
        self.b = DVector::zeros(self.b.len());
        self.m = DVector::zeros(3);
        let lin = self.predict(setpoints)?;
        self.a = v - lin.v;
        self.b = i - lin.i;
        self.m = p0 - lin.p0;
        self.base_setpoints = setpoints.to_vec();
        Ok(())
    }

    /// `G = max(‖[A_1 … A_n]‖₂, ‖[M_1 … M_n]‖₂, ‖[B_1 … B_n]‖₂)`.
    pub fn gain_bound(&self) -> f64 {
        let stack = |pick: &dyn Fn(&UnitSensitivity) -> &DMatrix<f64>, rows: usize| {
            let mut s = DMatrix::zeros(rows, 2 * self.units.len());
            for (k, u) in self.units.iter().enumerate() {
                s.view_mut((0, 2 * k), (rows, 2)).copy_from(pick(u));
            }
            spectral_norm(&s)
        };
        stack(&|u| &u.a, self.a.len())
            .max(stack(&|u| &u.m, 3))
            .max(stack(&|u| &u.b, self.b.len()))
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().copied().fold(0.0, f64::max)
}

fn observation_vectors(obs: &Observation) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (obs.v_mag.clone(), obs.i_mag.clone(), DVector::from_column_slice(&obs.p0))
}

/// Central-difference model at `base_setpoints` on top of `loads`.
pub fn linearize(
    plant: &AcPlant,
    units: &[UnitAttachment],
    base_setpoints: &[Setpoint],
    loads: &InjectionSpec,
    step: f64,
) -> Result<SensitivityModel> {
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {step}")));
    }
    if units.len() != base_setpoints.len() {
        return Err(Error::Dimension(format!("{} base setpoints for {} units", base_setpoints.len(), units.len())));
    }
    let mut base = loads.clone();
    for (u, x) in units.iter().zip(base_setpoints) {
        apply_setpoint(plant, &mut base, u, x)?;
    }
    let fail = |u: &UnitAttachment, e: Error| Error::Linearization { unit: u.id.clone(), reason: e.to_string() };
    let base_obs = plant.observe(&base).map_err(|e| Error::Linearization { unit: "base point".into(), reason: e.to_string() })?;
    let (nv, ni) = (base_obs.v_mag.len(), base_obs.i_mag.len());

    let mut out = Vec::with_capacity(units.len());
    for u in units {
        let mut a = DMatrix::zeros(nv, 2);
        let mut b = DMatrix::zeros(ni, 2);
        let mut m = DMatrix::zeros(3, 2);
        for d in 0..2 {
            let mut e = Setpoint::zeros();
            e[d] = step;
            let mut plus = base.clone();
            apply_setpoint(plant, &mut plus, u, &e).map_err(|err| fail(u, err))?;
            let mut minus = base.clone();
            apply_setpoint(plant, &mut minus, u, &(-e)).map_err(|err| fail(u, err))?;
            let (vp, ip, pp) = observation_vectors(&plant.observe(&plus).map_err(|err| fail(u, err))?);
            let (vm, im, pm) = observation_vectors(&plant.observe(&minus).map_err(|err| fail(u, err))?);
            let h = 2.0 * step;
            a.set_column(d, &((vp - vm) / h));
            b.set_column(d, &((ip - im) / h));
            m.set_column(d, &((pp - pm) / h));
        }
        out.push(UnitSensitivity { id: u.id.clone(), a, b, m });
    }
    let mut model = SensitivityModel::from_units(out, plant.sets.clone())?;
    let (v, i, p0) = observation_vectors(&base_obs);
    model.reanchor(base_setpoints, &v, &i, &p0)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeders;
    use crate::network::{balanced_voltage, GridModel, Line, Node, Phase, Phases};
    use alloc::vec;
    use approx::assert_relative_eq;

    fn four_node_plant() -> (AcPlant, InjectionSpec) {
        let g = feeders::four_node_grid();
        let sets = MeasurementSets { voltages: vec![(1, Phase::A), (2, Phase::A), (3, Phase::A)], lines: vec![1, 3] };
        let plant = AcPlant::new(g, &[], sets).unwrap();
        let mut loads = plant.injections();
        loads.wye[1] = Complex::new(-0.3, -0.1);
        loads.wye[2] = Complex::new(-0.4, -0.15);
        (plant, loads)
    }

    fn units() -> Vec<UnitAttachment> {
        vec![
            UnitAttachment::new("pv", 3, vec![PhaseConnection::Wye(Phase::A)]),
            UnitAttachment::new("bat", 2, vec![PhaseConnection::Wye(Phase::A)]),
        ]
    }

    #[test]
    fn exact_at_base_point() {
        let (plant, loads) = four_node_plant();
        let base = vec![Setpoint::new(0.2, 0.05), Setpoint::new(-0.1, 0.0)];
        let model = linearize(&plant, &units(), &base, &loads, DEFAULT_STEP).unwrap();
        let mut inj = loads.clone();
        for (u, x) in units().iter().zip(&base) {
            apply_setpoint(&plant, &mut inj, u, x).unwrap();
        }
        let obs = plant.observe(&inj).unwrap();
        let pred = model.predict(&base).unwrap();
        assert_relative_eq!(pred.v, obs.v_mag, epsilon = 1e-14);
        assert_relative_eq!(pred.i, obs.i_mag, epsilon = 1e-14);
        assert_relative_eq!(pred.p0, DVector::from_column_slice(&obs.p0), epsilon = 1e-14);
    }

    #[test]
    fn doubling_a_step_doubles_its_effect() {
        let (plant, loads) = four_node_plant();
        let base = vec![Setpoint::zeros(); 2];
        let model = linearize(&plant, &units(), &base, &loads, DEFAULT_STEP).unwrap();
        let p0 = model.predict(&base).unwrap();
        let d = Setpoint::new(0.1, 0.0);
        let p1 = model.predict(&[d, Setpoint::zeros()]).unwrap();
        let p2 = model.predict(&[d * 2.0, Setpoint::zeros()]).unwrap();
        assert_relative_eq!(&p2.v - &p0.v, (&p1.v - &p0.v) * 2.0, epsilon = 1e-14);
    }

    #[test]
    fn lossless_head_power_follows_injection() {
        let pa = Phases::new(&[Phase::A]);
        let g = GridModel::new(
            vec![Node { id: 1, phases: pa }, Node { id: 2, phases: pa }],
            vec![
                Line::uniform(1, 0, 1, pa, Complex::new(0.0, -1.0) / 0.05),
                Line::uniform(2, 1, 2, pa, Complex::new(0.0, -1.0) / 0.04),
            ],
            balanced_voltage(1.0),
        );
        let plant = AcPlant::new(g, &[], MeasurementSets { voltages: vec![(2, Phase::A)], lines: vec![] }).unwrap();
        let mut loads = plant.injections();
        loads.wye[0] = Complex::new(-0.2, -0.05);
        let u = [UnitAttachment::new("d", 2, vec![PhaseConnection::Wye(Phase::A)])];
        let model = linearize(&plant, &u, &[Setpoint::zeros()], &loads, DEFAULT_STEP).unwrap();
        let m = &model.units[0].m;
        assert_relative_eq!(m[(0, 0)], -1.0, epsilon = 1e-8);
        assert_relative_eq!(m[(0, 1)], 0.0, epsilon = 1e-8);
        assert_eq!(m[(1, 0)], 0.0);
    }

    #[test]
    fn gain_of_identity_and_zero() {
        let sets = MeasurementSets { voltages: vec![(1, Phase::A), (1, Phase::B)], lines: vec![] };
        let zero = UnitSensitivity { id: "z".into(), a: DMatrix::zeros(2, 2), b: DMatrix::zeros(0, 2), m: DMatrix::zeros(3, 2) };
        let model = SensitivityModel::from_units(vec![zero.clone()], sets.clone()).unwrap();
        assert_eq!(model.gain_bound(), 0.0);
        let id = UnitSensitivity { a: DMatrix::identity(2, 2), ..zero };
        let model = SensitivityModel::from_units(vec![id], sets).unwrap();
        assert_relative_eq!(model.gain_bound(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn unknown_unit_is_reported() {
        let (plant, loads) = four_node_plant();
        let model = linearize(&plant, &units(), &[Setpoint::zeros(); 2], &loads, DEFAULT_STEP).unwrap();
        assert_eq!(model.predict_named(&[("ev", Setpoint::zeros())]).unwrap_err(), Error::UnknownUnit("ev".into()));
    }

    #[test]
    fn diverging_perturbation_names_the_unit() {
        let (plant, loads) = four_node_plant();
        let err = linearize(&plant, &units(), &[Setpoint::new(-40.0, 0.0), Setpoint::zeros()], &loads, DEFAULT_STEP)
            .unwrap_err();
        assert!(matches!(err, Error::Linearization { .. }));
    }
}
