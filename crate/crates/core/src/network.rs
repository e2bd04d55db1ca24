//! Multiphase distribution network: topology, admittance assembly and the
//! delta-connection incidence matrix.
//!
//! Positions of line-to-ground quantities follow a canonical order: node id
//! ascending, then phase `a < b < c`. The slack node (id 0) is implicit and
//! always three-phase; it occupies rows `0..3` of the full admittance matrix.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use num_traits::Zero;

use crate::error::{Error, Result};

pub type Complex64 = Complex<f64>;

/// Id of the slack (substation) node.
pub const SLACK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    pub fn from_letter(c: char) -> Option<Phase> {
        match c.to_ascii_lowercase() {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }
}

/// Line-to-line pair of a delta connection. The pair `ab` drives current
/// from phase `a` to phase `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DeltaPair {
    AB,
    BC,
    CA,
}

impl DeltaPair {
    pub const ALL: [DeltaPair; 3] = [DeltaPair::AB, DeltaPair::BC, DeltaPair::CA];

    /// `(from, to)` phases.
    pub fn phases(self) -> (Phase, Phase) {
        match self {
            DeltaPair::AB => (Phase::A, Phase::B),
            DeltaPair::BC => (Phase::B, Phase::C),
            DeltaPair::CA => (Phase::C, Phase::A),
        }
    }
}

/// One member of `{a, b, c} ∪ {ab, bc, ca}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhaseConnection {
    Wye(Phase),
    Delta(DeltaPair),
}

impl PhaseConnection {
    /// Every possible connection, wye before delta.
    pub const ALL: [PhaseConnection; 6] = [
        PhaseConnection::Wye(Phase::A),
        PhaseConnection::Wye(Phase::B),
        PhaseConnection::Wye(Phase::C),
        PhaseConnection::Delta(DeltaPair::AB),
        PhaseConnection::Delta(DeltaPair::BC),
        PhaseConnection::Delta(DeltaPair::CA),
    ];

    pub fn parse(s: &str) -> Option<PhaseConnection> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Some(PhaseConnection::Wye(Phase::A)),
            "b" => Some(PhaseConnection::Wye(Phase::B)),
            "c" => Some(PhaseConnection::Wye(Phase::C)),
            "ab" => Some(PhaseConnection::Delta(DeltaPair::AB)),
            "bc" => Some(PhaseConnection::Delta(DeltaPair::BC)),
            "ca" => Some(PhaseConnection::Delta(DeltaPair::CA)),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PhaseConnection::Wye(Phase::A) => "a",
            PhaseConnection::Wye(Phase::B) => "b",
            PhaseConnection::Wye(Phase::C) => "c",
            PhaseConnection::Delta(DeltaPair::AB) => "ab",
            PhaseConnection::Delta(DeltaPair::BC) => "bc",
            PhaseConnection::Delta(DeltaPair::CA) => "ca",
        }
    }
}

impl fmt::Display for PhaseConnection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Subset of `{a, b, c}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Phases(u8);

impl Phases {
    pub const ABC: Phases = Phases(0b111);

    pub fn new(phases: &[Phase]) -> Phases {
        Phases(phases.iter().fold(0, |m, p| m | (1 << p.index())))
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_subset(self, other: Phases) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Present phases in canonical order.
    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: usize,
    pub phases: Phases,
}

/// A multiphase Π-section. `series` and `shunt` are `k × k` over the line's
/// phases in canonical order; `shunt` is the total charging admittance, half
/// of which is placed at each end.
#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub phases: Phases,
    pub series: DMatrix<Complex64>,
    pub shunt: DMatrix<Complex64>,
}

impl Line {
    /// Uncoupled line with the given per-phase series admittances.
    pub fn new(id: usize, from: usize, to: usize, phases: Phases, series: &[Complex64]) -> Result<Line> {
        if series.len() != phases.len() {
            return Err(Error::Dimension(format!(
                "line {id}: {} series admittances for {} phases",
                series.len(),
                phases.len()
            )));
        }
        let k = phases.len();
        Ok(Line {
            id,
            from,
            to,
            phases,
            series: DMatrix::from_diagonal(&DVector::from_column_slice(series)),
            shunt: DMatrix::zeros(k, k),
        })
    }

    /// Sets the off-diagonal (mutual) series terms; symmetric.
    pub fn with_mutual(mut self, i: usize, j: usize, y: Complex64) -> Line {
        self.series[(i, j)] = y;
        self.series[(j, i)] = y;
        self
    }

    pub fn with_shunt(mut self, per_phase: &[Complex64]) -> Line {
        for (i, y) in per_phase.iter().enumerate() {
            self.shunt[(i, i)] = *y;
        }
        self
    }

    /// Same series admittance on every phase.
    pub fn uniform(id: usize, from: usize, to: usize, phases: Phases, y: Complex64) -> Line {
        let ys: Vec<Complex64> = phases.iter().map(|_| y).collect();
        // length matches by construction
        Line::new(id, from, to, phases, &ys).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaseValues {
    /// Line-to-neutral base voltage, kV.
    pub voltage_kv: f64,
    /// Per-phase base power, kVA.
    pub power_kva: f64,
}

impl Default for BaseValues {
    fn default() -> Self {
        BaseValues { voltage_kv: 1.0, power_kva: 1.0 }
    }
}

impl BaseValues {
    pub fn impedance_ohm(&self) -> f64 {
        let v = self.voltage_kv * 1e3;
        v * v / (self.power_kva * 1e3)
    }
}

/// Balanced three-phase voltage of magnitude `mag` with phase `a` at 0 rad.
pub fn balanced_voltage(mag: f64) -> [Complex64; 3] {
    let shift = 2.0 * core::f64::consts::PI / 3.0;
    [
        Complex::from_polar(mag, 0.0),
        Complex::from_polar(mag, -shift),
        Complex::from_polar(mag, shift),
    ]
}

/// Network description in per-unit. Node 0 is the implicit slack and must not
/// appear in `nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridModel {
    pub nodes: Vec<Node>,
    pub lines: Vec<Line>,
    pub slack_voltage: [Complex64; 3],
    pub base: BaseValues,
}

impl GridModel {
    pub fn new(nodes: Vec<Node>, lines: Vec<Line>, slack_voltage: [Complex64; 3]) -> GridModel {
        GridModel { nodes, lines, slack_voltage, base: BaseValues::default() }
    }

    pub fn phases_at(&self, node: usize) -> Option<Phases> {
        if node == SLACK {
            return Some(Phases::ABC);
        }
        self.nodes.iter().find(|n| n.id == node).map(|n| n.phases)
    }

    pub fn line(&self, id: usize) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    /// Checks ids, line phasing and per-phase connectivity to the slack.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if n.id == SLACK {
                return Err(Error::Topology("node 0 is reserved for the slack bus".into()));
            }
            if n.phases.is_empty() {
                return Err(Error::Topology(format!("node {} has no phases", n.id)));
            }
            if !seen.insert(n.id) {
                return Err(Error::Topology(format!("duplicate node id {}", n.id)));
            }
        }
        let mut line_ids = BTreeSet::new();
        for l in &self.lines {
            if !line_ids.insert(l.id) {
                return Err(Error::Topology(format!("duplicate line id {}", l.id)));
            }
            let k = l.phases.len();
            if l.series.shape() != (k, k) || l.shunt.shape() != (k, k) {
                return Err(Error::Dimension(format!("line {} admittance is not {k}x{k}", l.id)));
            }
            for end in [l.from, l.to] {
                let ph = self
                    .phases_at(end)
                    .ok_or_else(|| Error::Topology(format!("line {} references unknown node {end}", l.id)))?;
                if let Some(p) = l.phases.iter().find(|p| !ph.contains(*p)) {
                    return Err(Error::MissingPhase { node: end, phase: p.letter() });
                }
            }
            if l.from == l.to {
                return Err(Error::Topology(format!("line {} is a self loop", l.id)));
            }
        }
        // every (node, phase) must reach (0, phase) through lines carrying it
        for p in Phase::ALL {
            let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for l in self.lines.iter().filter(|l| l.phases.contains(p)) {
                adj.entry(l.from).or_default().push(l.to);
                adj.entry(l.to).or_default().push(l.from);
            }
            let mut reached = BTreeSet::from([SLACK]);
            let mut queue = VecDeque::from([SLACK]);
            while let Some(n) = queue.pop_front() {
                for &m in adj.get(&n).into_iter().flatten() {
                    if reached.insert(m) {
                        queue.push_back(m);
                    }
                }
            }
            if let Some(n) = self.nodes.iter().find(|n| n.phases.contains(p) && !reached.contains(&n.id)) {
                return Err(Error::Topology(format!(
                    "phase {} of node {} is not connected to the slack bus",
                    p.letter(),
                    n.id
                )));
            }
        }
        Ok(())
    }
}

/// Ordered map from `(node, phase)` to row position among non-slack phases.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PhaseIndex {
    entries: Vec<(usize, Phase)>,
    lookup: BTreeMap<(usize, Phase), usize>,
}

impl PhaseIndex {
    pub fn new(grid: &GridModel) -> PhaseIndex {
        let mut nodes: Vec<&Node> = grid.nodes.iter().collect();
        nodes.sort_by_key(|n| n.id);
        let entries: Vec<(usize, Phase)> =
            nodes.iter().flat_map(|n| n.phases.iter().map(move |p| (n.id, p))).collect();
        let lookup = entries.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        PhaseIndex { entries, lookup }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, node: usize, phase: Phase) -> Option<usize> {
        self.lookup.get(&(node, phase)).copied()
    }

    pub fn entry(&self, pos: usize) -> (usize, Phase) {
        self.entries[pos]
    }

    pub fn entries(&self) -> &[(usize, Phase)] {
        &self.entries
    }

    /// Row of `(node, phase)` in the full matrix, slack first.
    pub fn full_position(&self, node: usize, phase: Phase) -> Option<usize> {
        if node == SLACK {
            Some(phase.index())
        } else {
            self.position(node, phase).map(|p| p + 3)
        }
    }
}

/// Partition of the full admittance matrix with slack rows/columns first.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceBlocks {
    pub y00: DMatrix<Complex64>,
    pub y0l: DMatrix<Complex64>,
    pub yl0: DMatrix<Complex64>,
    pub yll: DMatrix<Complex64>,
    pub index: PhaseIndex,
}

impl AdmittanceBlocks {
    /// Reassembles the `(N+3) × (N+3)` matrix.
    pub fn full(&self) -> DMatrix<Complex64> {
        let n = self.index.len();
        let mut y = DMatrix::zeros(n + 3, n + 3);
        y.view_mut((0, 0), (3, 3)).copy_from(&self.y00);
        y.view_mut((0, 3), (3, n)).copy_from(&self.y0l);
        y.view_mut((3, 0), (n, 3)).copy_from(&self.yl0);
        y.view_mut((3, 3), (n, n)).copy_from(&self.yll);
        y
    }
}

/// Assembles the admittance blocks from the Π-model of every line.
pub fn build_admittance(grid: &GridModel) -> Result<AdmittanceBlocks> {
    grid.validate()?;
    let index = PhaseIndex::new(grid);
    let n = index.len();
    let mut y = DMatrix::<Complex64>::zeros(n + 3, n + 3);
    for line in &grid.lines {
        let pos = |node: usize| -> Vec<usize> {
            line.phases.iter().map(|p| index.full_position(node, p).unwrap()).collect()
        };
        let (f, t) = (pos(line.from), pos(line.to));
        let half = Complex::new(0.5, 0.0);
        for i in 0..f.len() {
            for j in 0..f.len() {
                let ys = line.series[(i, j)];
                let ysh = line.shunt[(i, j)] * half;
                y[(f[i], f[j])] += ys + ysh;
                y[(t[i], t[j])] += ys + ysh;
                y[(f[i], t[j])] -= ys;
                y[(t[i], f[j])] -= ys;
            }
        }
    }
    let blocks = AdmittanceBlocks {
        y00: y.view((0, 0), (3, 3)).into_owned(),
        y0l: y.view((0, 3), (3, n)).into_owned(),
        yl0: y.view((3, 0), (n, 3)).into_owned(),
        yll: y.view((3, 3), (n, n)).into_owned(),
        index,
    };
    if n > 0 {
        let lu = blocks.yll.clone().lu();
        let u = lu.u();
        let scale = u.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let min_pivot = (0..n).map(|i| u[(i, i)].norm()).fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-12 * scale) {
            return Err(Error::DegenerateNetwork(format!(
                "YLL is singular (smallest pivot {min_pivot:e})"
            )));
        }
    }
    Ok(blocks)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaRow {
    pub node: usize,
    pub pair: DeltaPair,
    pub row: usize,
    pub plus: usize,
    pub minus: usize,
}

/// Block-diagonal `H` with one `(+1, −1)` row per active delta connection.
/// The row of pair `ab` at node `n` is the position of `(n, a)`; likewise
/// `bc → (n, b)` and `ca → (n, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaIncidence {
    size: usize,
    rows: Vec<DeltaRow>,
    index: BTreeMap<(usize, DeltaPair), usize>,
}

impl DeltaIncidence {
    pub fn empty(size: usize) -> DeltaIncidence {
        DeltaIncidence { size, rows: Vec::new(), index: BTreeMap::new() }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rows(&self) -> &[DeltaRow] {
        &self.rows
    }

    pub fn row_of(&self, node: usize, pair: DeltaPair) -> Option<usize> {
        self.index.get(&(node, pair)).copied()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.size, self.size);
        for r in &self.rows {
            h[(r.row, r.plus)] = 1.0;
            h[(r.row, r.minus)] = -1.0;
        }
        h
    }

    /// `H v`.
    pub fn apply(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        let mut out = DVector::zeros(self.size);
        for r in &self.rows {
            out[r.row] = v[r.plus] - v[r.minus];
        }
        out
    }

    /// `Hᵀ w`.
    pub fn apply_transpose(&self, w: &DVector<Complex64>) -> DVector<Complex64> {
        let mut out = DVector::zeros(self.size);
        for r in &self.rows {
            out[r.plus] += w[r.row];
            out[r.minus] -= w[r.row];
        }
        out
    }

    pub fn is_active(&self, row: usize) -> bool {
        self.rows.iter().any(|r| r.row == row)
    }
}

/// Builds `H` for the given connection points; wye entries are ignored.
pub fn build_delta_incidence(
    grid: &GridModel,
    index: &PhaseIndex,
    devices: &[(usize, PhaseConnection)],
) -> Result<DeltaIncidence> {
    let mut pairs: BTreeSet<(usize, DeltaPair)> = BTreeSet::new();
    for &(node, conn) in devices {
        let phases = grid.phases_at(node).ok_or_else(|| Error::Topology(format!("unknown node {node}")))?;
        match conn {
            PhaseConnection::Wye(p) => {
                if !phases.contains(p) {
                    return Err(Error::MissingPhase { node, phase: p.letter() });
                }
            }
            PhaseConnection::Delta(pair) => {
                if node == SLACK {
                    return Err(Error::Topology("devices cannot connect to the slack bus".into()));
                }
                let (p, q) = pair.phases();
                for ph in [p, q] {
                    if !phases.contains(ph) {
                        return Err(Error::MissingPhase { node, phase: ph.letter() });
                    }
                }
                pairs.insert((node, pair));
            }
        }
    }
    let mut h = DeltaIncidence::empty(index.len());
    for (node, pair) in pairs {
        let (p, q) = pair.phases();
        let plus = index.position(node, p).unwrap();
        let minus = index.position(node, q).unwrap();
        let row = plus;
        h.index.insert((node, pair), row);
        h.rows.push(DeltaRow { node, pair, row, plus, minus });
    }
    h.rows.sort_by_key(|r| r.row);
    Ok(h)
}

/// Complex zero shorthand used throughout.
pub(crate) fn czero() -> Complex64 {
    Complex64::zero()
}

/// `n`-vector of complex zeros.
pub(crate) fn czeros(n: usize) -> DVector<Complex64> {
    DVector::from_vec(vec![czero(); n])
}
