//! Small reference feeders in per-unit, used by tests and shipped scenarios.

use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix};

use crate::network::{balanced_voltage, Complex64, GridModel, Line, Node, Phase, Phases};

/// Line with self impedance `zs` on every phase and mutual impedance `zm`
/// between each pair; the series admittance is the inverse impedance matrix.
pub fn coupled_line(id: usize, from: usize, to: usize, phases: Phases, zs: Complex64, zm: Complex64) -> Line {
    let k = phases.len();
    let z = DMatrix::from_fn(k, k, |i, j| if i == j { zs } else { zm });
    let series = z.try_inverse().expect("line impedance matrix must be invertible");
    Line { id, from, to, phases, series, shunt: DMatrix::zeros(k, k) }
}

/// Slack plus three single-phase (phase `a`) nodes in a chain `0-1-2-3`.
pub fn four_node_grid() -> GridModel {
    let pa = Phases::new(&[Phase::A]);
    let z = [(0.005, 0.010), (0.008, 0.012), (0.010, 0.015)];
    let nodes = (1..=3).map(|id| Node { id, phases: pa }).collect();
    let lines = z
        .iter()
        .enumerate()
        .map(|(k, &(r, x))| Line::uniform(k + 1, k, k + 1, pa, Complex::new(1.0, 0.0) / Complex::new(r, x)))
        .collect();
    GridModel::new(nodes, lines, balanced_voltage(1.0))
}

/// Radial 13-node feeder (slack plus 12 nodes) with three-, two- and
/// single-phase laterals. Line `k` feeds node `k`.
pub fn thirteen_node_grid() -> GridModel {
    use Phase::*;
    let abc = Phases::ABC;
    let layout: [(usize, usize, Phases); 12] = [
        (1, 0, abc),
        (2, 1, abc),
        (3, 2, abc),
        (4, 3, abc),
        (5, 2, Phases::new(&[B, C])),
        (6, 5, Phases::new(&[B, C])),
        (7, 3, abc),
        (8, 7, abc),
        (9, 3, Phases::new(&[A])),
        (10, 7, Phases::new(&[A, C])),
        (11, 10, Phases::new(&[C])),
        (12, 4, abc),
    ];
    let length = |id: usize| match id {
        1 => 0.6,
        2 | 3 => 0.5,
        4 | 7 => 0.4,
        _ => 0.3,
    };
    let nodes: Vec<Node> = layout.iter().map(|&(id, _, phases)| Node { id, phases }).collect();
    let lines = layout
        .iter()
        .map(|&(id, from, phases)| {
            let l = length(id);
            coupled_line(id, from, id, phases, Complex::new(0.010 * l, 0.022 * l), Complex::new(0.003 * l, 0.008 * l))
        })
        .collect();
    GridModel::new(nodes, lines, balanced_voltage(1.0))
}
