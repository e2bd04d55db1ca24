//! CSV time series: a `timestamp` column in seconds followed by named
//! series, resampled onto the controller grid by linear interpolation.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TraceTable {
    pub times: Vec<f64>,
    pub series: BTreeMap<String, Vec<f64>>,
}

impl TraceTable {
    pub fn from_path(path: &Path) -> Result<TraceTable> {
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        TraceTable::from_reader(file).map_err(|e| match e {
            Error::Csv { source, .. } => Error::Csv { path: path.to_path_buf(), source },
            other => other,
        })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<TraceTable> {
        let csv_err = |source| Error::Csv { path: "<csv>".into(), source };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("timestamp") {
            return Err(Error::Schema("time series must start with a `timestamp` column".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize, name: &str| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::series(name, format!("row {}: missing or non-numeric value", row + 1)))
            };
            let t = num(0, "timestamp")?;
            if let Some(&prev) = times.last() {
                if t <= prev {
                    return Err(Error::series("timestamp", format!("row {}: {t} does not follow {prev}", row + 1)));
                }
            }
            times.push(t);
            for (j, name) in names.iter().enumerate() {
                cols[j].push(num(j + 1, name)?);
            }
        }
        Ok(TraceTable { times, series: names.into_iter().zip(cols).collect() })
    }

    /// Values of `name` at `t_k = k·h`, `k < steps`.
    pub fn resample(&self, name: &str, h: f64, steps: usize) -> Result<Vec<f64>> {
        let y = self.series.get(name).ok_or_else(|| Error::series(name, "not found in any time-series file"))?;
        let end = (steps.saturating_sub(1)) as f64 * h;
        let (t0, t1) = (self.times.first().copied(), self.times.last().copied());
        match (t0, t1) {
            (Some(a), Some(b)) if a <= 0.0 && b >= end => {}
            _ => {
                return Err(Error::series(
                    name,
                    format!("covers [{}, {}] s but the run needs [0, {end}] s", t0.unwrap_or(f64::NAN), t1.unwrap_or(f64::NAN)),
                ))
            }
        }
        Ok((0..steps).map(|k| interpolate(&self.times, y, k as f64 * h)).collect())
    }
}

fn interpolate(t: &[f64], y: &[f64], x: f64) -> f64 {
    let i = t.partition_point(|&s| s <= x);
    if i == 0 {
        return y[0];
    }
    if i == t.len() {
        return y[t.len() - 1];
    }
    let w = (x - t[i - 1]) / (t[i] - t[i - 1]);
    y[i - 1] + w * (y[i] - y[i - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> Result<TraceTable> {
        TraceTable::from_reader(s.as_bytes())
    }

    #[test]
    fn constant_column() {
        let t = table("timestamp,x\n0,2.5\n10,2.5\n").unwrap();
        assert_eq!(t.resample("x", 1.0, 11).unwrap(), vec![2.5; 11]);
    }

    #[test]
    fn six_second_samples_to_one_second() {
        let t = table("timestamp,x\n0,1\n6,4\n12,-2\n").unwrap();
        let y = t.resample("x", 1.0, 13).unwrap();
        assert_eq!(y[3], 2.5);
        assert_eq!(y[9], 1.0);
        assert_eq!(y[6], 4.0);
        assert!((y[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn missing_tail_names_the_series() {
        let t = table("timestamp,pv,load\n0,1,1\n5,1,1\n").unwrap();
        let e = t.resample("load", 1.0, 10).unwrap_err().to_string();
        assert!(e.contains("`load`") && e.contains("covers"), "{e}");
    }

    #[test]
    fn non_monotone_timestamps() {
        let e = table("timestamp,x\n0,1\n5,1\n5,2\n").unwrap_err().to_string();
        assert!(e.contains("timestamp") && e.contains("row 3"), "{e}");
    }

    #[test]
    fn blank_cell_names_the_series() {
        let e = table("timestamp,a,b\n0,1,\n").unwrap_err().to_string();
        assert!(e.contains("`b`"), "{e}");
    }

    #[test]
    fn unknown_series() {
        let t = table("timestamp,a\n0,1\n").unwrap();
        assert!(t.resample("zz", 1.0, 1).unwrap_err().to_string().contains("`zz`"));
    }
}
