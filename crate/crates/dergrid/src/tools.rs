//! Debugging views: a single power-flow solve and the controller's affine
//! model.

use std::io::{Read, Write};

use dergrid_core::nalgebra::{DMatrix, DVector};
use dergrid_core::network::{GridModel, PhaseConnection};
use dergrid_core::powerflow::PowerFlowSolver;
use dergrid_core::sensitivity::SensitivityModel;
use dergrid_core::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::parse_connection;

/// Injection rows: `node, connection, p, q` in kW / kvar, generation positive.
pub fn read_injections<R: Read>(input: R) -> Result<Vec<(usize, PhaseConnection, Complex64)>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        node: usize,
        connection: String,
        p: f64,
        q: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    rdr.deserialize::<Row>()
        .map(|r| {
            let r = r.map_err(|source| Error::Csv { path: "<injections>".into(), source })?;
            Ok((r.node, parse_connection(&r.connection)?, Complex64::new(r.p, r.q)))
        })
        .collect()
}

/// Solves the grid for the given injections and writes one row per
/// node-phase, with the head power on the node-0 rows.
pub fn powerflow_csv<W: Write>(grid: &GridModel, injections: &[(usize, PhaseConnection, Complex64)], out: W) -> Result<()> {
    let conns: Vec<(usize, PhaseConnection)> = injections.iter().map(|(n, c, _)| (*n, *c)).collect();
    let solver = PowerFlowSolver::for_grid(grid, &conns)?;
    let mut inj = solver.injections();
    let s_base = grid.base.power_kva;
    for (n, c, s) in injections {
        inj.add(solver.index(), solver.incidence(), *n, *c, s / s_base)?;
    }
    let sol = solver.solve(&inj)?;
    let csv_err = |source| Error::Csv { path: "<stdout>".into(), source };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "phase", "v_mag_pu", "v_angle_deg", "p_kw", "q_kvar"]).map_err(csv_err)?;
    for (k, v) in grid.slack_voltage.iter().enumerate() {
        let ph = ['a', 'b', 'c'][k];
        let row = [
            "0".to_string(),
            ph.to_string(),
            format!("{:.9}", v.norm()),
            format!("{:.6}", v.arg().to_degrees()),
            format!("{:.6}", sol.p0[k] * s_base),
            format!("{:.6}", sol.q0[k] * s_base),
        ];
        w.write_record(&row).map_err(csv_err)?;
    }
    for (pos, &(node, phase)) in solver.index().entries().iter().enumerate() {
        let v = sol.v[pos];
        let s = v * sol.i[pos].conj() * s_base;
        let row = [
            node.to_string(),
            phase.letter().to_string(),
            format!("{:.9}", v.norm()),
            format!("{:.6}", v.arg().to_degrees()),
            format!("{:.6}", s.re),
            format!("{:.6}", s.im),
        ];
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(Error::io("<stdout>"))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> MatrixJson {
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data: m.transpose().iter().copied().collect() }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitModelJson {
    pub id: String,
    pub a: MatrixJson,
    pub b: MatrixJson,
    pub m: MatrixJson,
}

/// Per-unit affine model: `|v| ≈ Σ A_j x_j + a` and likewise for the
/// line currents (`B`, `b`) and head powers (`M`, `m`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub voltages: Vec<(usize, char)>,
    pub lines: Vec<usize>,
    pub base_setpoints: Vec<[f64; 2]>,
    pub units: Vec<UnitModelJson>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub m: Vec<f64>,
}

impl ModelJson {
    pub fn from_model(model: &SensitivityModel) -> ModelJson {
        let vec = |v: &DVector<f64>| v.iter().copied().collect();
        ModelJson {
            voltages: model.sets.voltages.iter().map(|(n, p)| (*n, p.letter())).collect(),
            lines: model.sets.lines.clone(),
            base_setpoints: model.base_setpoints.iter().map(|x| [x.x, x.y]).collect(),
            units: model
                .units
                .iter()
                .map(|u| UnitModelJson {
                    id: u.id.clone(),
                    a: MatrixJson::from_matrix(&u.a),
                    b: MatrixJson::from_matrix(&u.b),
                    m: MatrixJson::from_matrix(&u.m),
                })
                .collect(),
            a: vec(&model.a),
            b: vec(&model.b),
            m: vec(&model.m),
        }
    }
}
