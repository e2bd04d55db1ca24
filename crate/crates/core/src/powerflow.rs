//! Multiphase AC power flow by fixed-point (Z-bus) iteration.
//!
//! All injections are net injected power in per-unit: generation positive,
//! load negative. Head power `s0` is the power entering the feeder at the
//! slack, so a net load gives `p0 > 0`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::network::{
    build_admittance, build_delta_incidence, czero, czeros, AdmittanceBlocks, Complex64, DeltaIncidence,
    GridModel, Phase, PhaseConnection, PhaseIndex, SLACK,
};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Voltage magnitude below which a division is treated as collapse.
const COLLAPSE_EPS: f64 = 1e-9;

/// Wye and delta net injections. `delta` is indexed by the row of `H`
/// assigned to each delta connection and must be zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSpec {
    pub wye: DVector<Complex64>,
    pub delta: DVector<Complex64>,
}

impl InjectionSpec {
    pub fn zeros(n: usize) -> InjectionSpec {
        InjectionSpec { wye: czeros(n), delta: czeros(n) }
    }

    pub fn len(&self) -> usize {
        self.wye.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wye.is_empty()
    }

    pub fn total(&self) -> Complex64 {
        self.wye.iter().sum::<Complex64>() + self.delta.iter().sum::<Complex64>()
    }

    pub fn scaled(&self, k: f64) -> InjectionSpec {
        InjectionSpec { wye: &self.wye * Complex::new(k, 0.0), delta: &self.delta * Complex::new(k, 0.0) }
    }

    /// Adds `s` at a connection point. Delta rows must exist in `h`.
    pub fn add(
        &mut self,
        index: &PhaseIndex,
        h: &DeltaIncidence,
        node: usize,
        conn: PhaseConnection,
        s: Complex64,
    ) -> Result<()> {
        match conn {
            PhaseConnection::Wye(p) => {
                let pos = index
                    .position(node, p)
                    .ok_or(Error::MissingPhase { node, phase: p.letter() })?;
                self.wye[pos] += s;
            }
            PhaseConnection::Delta(pair) => {
                let row = h.row_of(node, pair).ok_or_else(|| {
                    Error::Topology(format!("no delta row for {} at node {node}", conn.label()))
                })?;
                self.delta[row] += s;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowSolution {
    pub v: DVector<Complex64>,
    /// Net injection currents `YL0 v0 + YLL v`.
    pub i: DVector<Complex64>,
    /// Phase-to-phase delta currents, on `H` rows.
    pub i_delta: DVector<Complex64>,
    pub p0: [f64; 3],
    pub q0: [f64; 3],
    pub iterations: usize,
    pub residual: f64,
}

impl PowerFlowSolution {
    pub fn v_mag(&self) -> DVector<f64> {
        self.v.map(|z| z.norm())
    }

    pub fn s0(&self) -> [Complex64; 3] {
        [0, 1, 2].map(|k| Complex::new(self.p0[k], self.q0[k]))
    }
}

/// Cached factorization of `YLL` plus the no-load profile.
#[derive(Clone, Debug)]
pub struct PowerFlowSolver {
    blocks: AdmittanceBlocks,
    h: DeltaIncidence,
    lu: LU<Complex64, Dyn, Dyn>,
    v0: DVector<Complex64>,
    no_load: DVector<Complex64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl PowerFlowSolver {
    pub fn new(blocks: AdmittanceBlocks, h: DeltaIncidence, v0: [Complex64; 3]) -> Result<PowerFlowSolver> {
        let n = blocks.index.len();
        if h.size() != n {
            return Err(Error::Dimension(format!("H is {} but network has {n} phases", h.size())));
        }
        let v0 = DVector::from_column_slice(&v0);
        let lu = blocks.yll.clone().lu();
        let no_load = lu
            .solve(&(-(&blocks.yl0 * &v0)))
            .ok_or_else(|| Error::DegenerateNetwork("YLL is singular".into()))?;
        Ok(PowerFlowSolver { blocks, h, lu, v0, no_load, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER })
    }

    /// Builds admittance and `H` from a grid and a list of device connections.
    pub fn for_grid(grid: &GridModel, connections: &[(usize, PhaseConnection)]) -> Result<PowerFlowSolver> {
        let blocks = build_admittance(grid)?;
        let h = build_delta_incidence(grid, &blocks.index, connections)?;
        PowerFlowSolver::new(blocks, h, grid.slack_voltage)
    }

    pub fn with_tolerance(mut self, tol: f64, max_iter: usize) -> PowerFlowSolver {
        self.tol = tol;
        self.max_iter = max_iter;
        self
    }

    pub fn blocks(&self) -> &AdmittanceBlocks {
        &self.blocks
    }

    pub fn index(&self) -> &PhaseIndex {
        &self.blocks.index
    }

    pub fn incidence(&self) -> &DeltaIncidence {
        &self.h
    }

    pub fn slack_voltage(&self) -> &DVector<Complex64> {
        &self.v0
    }

    /// `−YLL⁻¹ YL0 v0`.
    pub fn no_load(&self) -> &DVector<Complex64> {
        &self.no_load
    }

    pub fn injections(&self) -> InjectionSpec {
        InjectionSpec::zeros(self.blocks.index.len())
    }

    pub fn solve(&self, inj: &InjectionSpec) -> Result<PowerFlowSolution> {
        let n = self.blocks.index.len();
        if inj.wye.len() != n || inj.delta.len() != n {
            return Err(Error::Dimension(format!("injection vectors must have length {n}")));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter("power-flow tolerance must be positive".into()));
        }
        for (k, s) in inj.delta.iter().enumerate() {
            if *s != czero() && !self.h.is_active(k) {
                return Err(Error::Dimension(format!("delta injection on inactive row {k}")));
            }
        }
        let mut v = self.no_load.clone();
        let mut residual = self.residual(&v, inj)?;
        let mut iterations = 0;
        while residual > self.tol {
            if iterations == self.max_iter || !residual.is_finite() {
                return Err(Error::Divergence { iterations, residual });
            }
            let rhs = self.current_injection(&v, inj)?;
            v = self.lu.solve(&rhs).expect("YLL factorization checked at construction") + &self.no_load;
            iterations += 1;
            residual = self.residual(&v, inj)?;
        }
        let i = &self.blocks.yl0 * &self.v0 + &self.blocks.yll * &v;
        let i_delta = self.delta_currents(&v, inj)?;
        let (p0, q0) = head_power(&self.blocks, &v, &self.v0);
        Ok(PowerFlowSolution { v, i, i_delta, p0, q0, iterations, residual })
    }

    /// `conj(sY ⊘ v) + Hᵀ conj(sΔ ⊘ Hv)`.
    fn current_injection(&self, v: &DVector<Complex64>, inj: &InjectionSpec) -> Result<DVector<Complex64>> {
        let mut out = czeros(v.len());
        for k in 0..v.len() {
            if inj.wye[k] != czero() {
                out[k] = (inj.wye[k] / nonzero(v[k], k)?).conj();
            }
        }
        Ok(out + self.h.apply_transpose(&self.delta_currents(v, inj)?))
    }

    fn delta_currents(&self, v: &DVector<Complex64>, inj: &InjectionSpec) -> Result<DVector<Complex64>> {
        let hv = self.h.apply(v);
        let mut out = czeros(v.len());
        for r in self.h.rows() {
            if inj.delta[r.row] != czero() {
                out[r.row] = (inj.delta[r.row] / nonzero(hv[r.row], r.row)?).conj();
            }
        }
        Ok(out)
    }

    /// `‖v ⊙ conj(i) − sY − v ⊙ (Hᵀ conj(iΔ))‖∞`.
    pub fn residual(&self, v: &DVector<Complex64>, inj: &InjectionSpec) -> Result<f64> {
        let i = &self.blocks.yl0 * &self.v0 + &self.blocks.yll * v;
        let hd = self.h.apply_transpose(&self.delta_currents(v, inj)?.map(|z| z.conj()));
        let mut worst = 0.0f64;
        for k in 0..v.len() {
            let r = v[k] * i[k].conj() - inj.wye[k] - v[k] * hd[k];
            worst = worst.max(r.norm());
        }
        Ok(worst)
    }
}

fn nonzero(z: Complex64, pos: usize) -> Result<Complex64> {
    if z.norm() < COLLAPSE_EPS {
        Err(Error::Collapse(pos))
    } else {
        Ok(z)
    }
}

/// `s0 = v0 ⊙ conj(Y00 v0 + Y0L v)`, split into real and reactive parts.
pub fn head_power(blocks: &AdmittanceBlocks, v: &DVector<Complex64>, v0: &DVector<Complex64>) -> ([f64; 3], [f64; 3]) {
    let i0 = &blocks.y00 * v0 + &blocks.y0l * v;
    let mut p = [0.0; 3];
    let mut q = [0.0; 3];
    for k in 0..3 {
        let s = v0[k] * i0[k].conj();
        p[k] = s.re;
        q[k] = s.im;
    }
    (p, q)
}

fn voltage_at(grid: &GridModel, index: &PhaseIndex, v: &DVector<Complex64>, node: usize, p: Phase) -> Complex64 {
    if node == SLACK {
        grid.slack_voltage[p.index()]
    } else {
        v[index.position(node, p).unwrap()]
    }
}

/// From-end currents, to-end currents, from-end voltages, to-end voltages.
type LineEnds = (DVector<Complex64>, DVector<Complex64>, DVector<Complex64>, DVector<Complex64>);

/// Per-phase from-end and to-end currents of one line, in the line's phase
/// order. Both are oriented into the line.
fn line_end_currents(grid: &GridModel, index: &PhaseIndex, v: &DVector<Complex64>, line_id: usize) -> Result<LineEnds> {
    let line = grid.line(line_id).ok_or(Error::UnknownLine(line_id))?;
    let vf: Vec<Complex64> = line.phases.iter().map(|p| voltage_at(grid, index, v, line.from, p)).collect();
    let vt: Vec<Complex64> = line.phases.iter().map(|p| voltage_at(grid, index, v, line.to, p)).collect();
    let vf = DVector::from_vec(vf);
    let vt = DVector::from_vec(vt);
    let half: DMatrix<Complex64> = &line.shunt * Complex::new(0.5, 0.0);
    let i_from = &line.series * (&vf - &vt) + &half * &vf;
    let i_to = &line.series * (&vt - &vf) + &half * &vt;
    Ok((i_from, i_to, vf, vt))
}

/// Sending-end phase currents of the monitored lines, concatenated in the
/// given order, each line's phases canonical.
pub fn line_currents(grid: &GridModel, index: &PhaseIndex, v: &DVector<Complex64>, monitored: &[usize]) -> Result<DVector<Complex64>> {
    let mut out = Vec::new();
    for &id in monitored {
        let (i_from, _, _, _) = line_end_currents(grid, index, v, id)?;
        out.extend(i_from.iter().copied());
    }
    Ok(DVector::from_vec(out))
}

/// Complex power lost in every line (series plus shunt), summed.
pub fn line_losses(grid: &GridModel, index: &PhaseIndex, v: &DVector<Complex64>) -> Result<Complex64> {
    let mut total = czero();
    for line in &grid.lines {
        let (i_f, i_t, vf, vt) = line_end_currents(grid, index, v, line.id)?;
        total += vf.iter().zip(i_f.iter()).map(|(v, i)| v * i.conj()).sum::<Complex64>();
        total += vt.iter().zip(i_t.iter()).map(|(v, i)| v * i.conj()).sum::<Complex64>();
    }
    Ok(total)
}

/// Measurement points: node-phases for voltage magnitudes and monitored
/// lines (every phase of each) for current magnitudes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MeasurementSets {
    pub voltages: Vec<(usize, Phase)>,
    pub lines: Vec<usize>,
}

impl MeasurementSets {
    /// Number of current channels given the grid's line phasing.
    pub fn current_channels(&self, grid: &GridModel) -> Result<usize> {
        self.lines
            .iter()
            .map(|&id| grid.line(id).map(|l| l.phases.len()).ok_or(Error::UnknownLine(id)))
            .sum()
    }

    /// Every non-slack node-phase.
    pub fn all_voltages(index: &PhaseIndex) -> Vec<(usize, Phase)> {
        index.entries().to_vec()
    }
}

/// Noise-free quantities seen by the measurement layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub v_mag: DVector<f64>,
    pub i_mag: DVector<f64>,
    pub p0: [f64; 3],
    pub solution: PowerFlowSolution,
}

/// Nonlinear plant: grid, solver and the measurement sets it reports on.
#[derive(Clone, Debug)]
pub struct AcPlant {
    pub grid: GridModel,
    pub solver: PowerFlowSolver,
    pub sets: MeasurementSets,
    voltage_rows: Vec<usize>,
}

impl AcPlant {
    pub fn new(grid: GridModel, connections: &[(usize, PhaseConnection)], sets: MeasurementSets) -> Result<AcPlant> {
        let solver = PowerFlowSolver::for_grid(&grid, connections)?;
        let voltage_rows = sets
            .voltages
            .iter()
            .map(|&(n, p)| solver.index().position(n, p).ok_or(Error::MissingPhase { node: n, phase: p.letter() }))
            .collect::<Result<Vec<_>>>()?;
        sets.current_channels(&grid)?;
        Ok(AcPlant { grid, solver, sets, voltage_rows })
    }

    pub fn index(&self) -> &PhaseIndex {
        self.solver.index()
    }

    pub fn injections(&self) -> InjectionSpec {
        self.solver.injections()
    }

    pub fn add_injection(&self, inj: &mut InjectionSpec, node: usize, conn: PhaseConnection, s: Complex64) -> Result<()> {
        inj.add(self.solver.index(), self.solver.incidence(), node, conn, s)
    }

    pub fn observe(&self, inj: &InjectionSpec) -> Result<Observation> {
        let solution = self.solver.solve(inj)?;
        Ok(self.observation_of(solution))
    }

    fn observation_of(&self, solution: PowerFlowSolution) -> Observation {
        let v_mag = DVector::from_iterator(self.voltage_rows.len(), self.voltage_rows.iter().map(|&r| solution.v[r].norm()));
        let i_mag = line_currents(&self.grid, self.solver.index(), &solution.v, &self.sets.lines)
            .expect("monitored lines validated at construction")
            .map(|z| z.norm());
        Observation { v_mag, i_mag, p0: solution.p0, solution }
    }
}
