//! Run logs as JSON lines, the per-step summary table and certification
//! of a logged run against its tracking bound.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dergrid_core::analysis::{measure_run, RunMeasurement};
use dergrid_core::sim::{LogRecord, RunHeader, RunLog};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `runlog.jsonl`: the header first, then one record per step,
/// then the abort reason if the run stopped early.
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Record(Box<LogRecord>),
    Aborted(String),
}

pub fn write_jsonl<W: Write>(log: &RunLog, out: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    let mut line = |l: &Line| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")
    };
    line(&Line::Header(log.header.clone()))?;
    for r in &log.records {
        line(&Line::Record(Box::new(r.clone())))?;
    }
    if let Some(a) = &log.aborted {
        line(&Line::Aborted(a.clone()))?;
    }
    w.flush()
}

pub fn read_jsonl<R: Read>(input: R, path: &Path) -> Result<RunLog> {
    let mut header = None;
    let mut records = Vec::new();
    let mut aborted = None;
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        match parsed {
            Line::Header(h) if n == 0 => header = Some(h),
            Line::Header(_) => return Err(Error::Schema(format!("{}: header on line {}", path.display(), n + 1))),
            Line::Record(r) => records.push(*r),
            Line::Aborted(a) => aborted = Some(a),
        }
    }
    let header = header.ok_or_else(|| Error::Schema(format!("{}: missing header line", path.display())))?;
    Ok(RunLog { header, records, aborted })
}

pub fn read_jsonl_path(path: &Path) -> Result<RunLog> {
    let f = std::fs::File::open(path).map_err(Error::io(path))?;
    read_jsonl(f, path)
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    k: usize,
    t: f64,
    p0_a: f64,
    p0_b: f64,
    p0_c: f64,
    p0_set_a: f64,
    p0_set_b: f64,
    p0_set_c: f64,
    tracking_err: f64,
    max_v: f64,
    min_v: f64,
    max_il_ratio: f64,
    gamma: f64,
    nu: f64,
    lambda: f64,
    mu: f64,
    zeta: f64,
}

/// Largest per-phase deviation of the head power from its set point.
pub fn tracking_error(r: &LogRecord) -> f64 {
    (0..3).map(|k| (r.true_p0[k] - r.p0_set[k]).abs()).fold(0.0, f64::max)
}

/// Per-step summary in per-unit; `i_max` gives the ampacity of each current
/// channel.
pub fn write_summary<W: Write>(log: &RunLog, i_max: &[f64], out: W) -> Result<()> {
    let csv_err = |source| Error::Csv { path: "summary.csv".into(), source };
    let mut w = csv::Writer::from_writer(out);
    for r in &log.records {
        let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
        let il = r.true_i.iter().zip(i_max).map(|(i, m)| i / m).fold(0.0, f64::max);
        let [gamma, nu, lambda, mu, zeta] = r.dual_norms;
        w.serialize(SummaryRow {
            k: r.k,
            t: r.t,
            p0_a: r.true_p0[0],
            p0_b: r.true_p0[1],
            p0_c: r.true_p0[2],
            p0_set_a: r.p0_set[0],
            p0_set_b: r.p0_set[1],
            p0_set_c: r.p0_set[2],
            tracking_err: tracking_error(r),
            max_v: fold(&r.true_v, f64::NEG_INFINITY, f64::max),
            min_v: fold(&r.true_v, f64::INFINITY, f64::min),
            max_il_ratio: il,
            gamma,
            nu,
            lambda,
            mu,
            zeta,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io("summary.csv"))?;
    Ok(())
}

/// Outcome of checking a logged run against its tracking bound.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub measurement: RunMeasurement,
    pub c: f64,
    /// `Δ / (1 − c)` from the run's measured error sup.
    pub asymptotic: f64,
    pub tail_mean: f64,
}

/// Fraction of the run averaged for the asymptotic check.
pub const TAIL_FRACTION: f64 = 0.5;
/// Slack on the asymptotic check.
pub const TAIL_SLACK: f64 = 1.05;

impl Certificate {
    pub fn bound_holds(&self) -> bool {
        self.measurement.all_within()
    }

    pub fn tail_holds(&self) -> bool {
        self.tail_mean <= self.asymptotic * TAIL_SLACK
    }

    pub fn passed(&self) -> bool {
        self.bound_holds() && self.tail_holds()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let csv_err = |source| Error::Csv { path: "certificate".into(), source };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "gap", "bound", "margin"]).map_err(csv_err)?;
        let m = &self.measurement;
        for (k, (g, b)) in m.gaps.iter().zip(&m.bounds).enumerate() {
            w.write_record(&[k.to_string(), format!("{g:e}"), format!("{b:e}"), format!("{:e}", b - g)]).map_err(csv_err)?;
        }
        w.flush().map_err(Error::io("certificate"))?;
        Ok(())
    }
}

pub fn certify(log: &RunLog) -> Result<Certificate> {
    let records = log
        .step_records()
        .ok_or_else(|| Error::Schema("run log lacks reference points; rerun with sim.reference set".into()))?;
    let k = log.constants()?;
    if !k.contracts() {
        return Err(Error::Schema(format!("contraction factor c = {} is not below 1", k.c)));
    }
    let measurement = measure_run(&records, &k)?;
    let asymptotic = measurement.budget.asymptotic_bound(k.c)?;
    let tail_mean = measurement.tail_mean(TAIL_FRACTION);
    Ok(Certificate { measurement, c: k.c, asymptotic, tail_mean })
}

pub fn write_run(log: &RunLog, i_max: &[f64], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let p = dir.join("runlog.jsonl");
    write_jsonl(log, std::fs::File::create(&p).map_err(Error::io(&p))?).map_err(Error::io(&p))?;
    let s = dir.join("summary.csv");
    write_summary(log, i_max, std::fs::File::create(&s).map_err(Error::io(&s))?)
}
