//! CSV and JSON writers for harness results. Reals use the fixed
//! 17-significant-digit format so outputs are byte-stable.

use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::Serialize;

use super::{AlphaRow, CrossValidation, EpsilonRow, RunMetrics};
use crate::error::{Error, Result};
use crate::ingest::DemandSample;
use crate::textfmt::real;

fn flag(b: bool) -> &'static str {
    if b { "1" } else { "0" }
}

pub fn write_steps<W: Write>(writer: W, runs: &[RunMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["policy", "step", "mismatch", "idle", "cost", "fleet", "dispatched"])?;
    for run in runs {
        for s in &run.steps {
            w.write_record([
                run.policy.as_str().to_string(),
                s.step.to_string(),
                real(s.mismatch),
                real(s.idle),
                real(s.cost),
                real(s.fleet),
                real(s.dispatched),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cross_validation<W: Write>(writer: W, cv: &CrossValidation) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let [a, b] = [cv.summaries[0].policy.as_str(), cv.summaries[1].policy.as_str()];
    let mut header = vec!["date".to_string(), "t".into(), "label".into()];
    for col in ["cost", "mismatch", "idle", "within_bound"] {
        header.push(format!("{col}_{a}"));
        header.push(format!("{col}_{b}"));
    }
    w.write_record(&header)?;
    for r in &cv.rows {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.t.to_string(),
            r.label.clone(),
            real(r.cost[0]),
            real(r.cost[1]),
            real(r.mismatch[0]),
            real(r.mismatch[1]),
            real(r.idle[0]),
            real(r.idle[1]),
            flag(r.within_bound[0]).into(),
            flag(r.within_bound[1]).into(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_epsilon_sweep<W: Write>(writer: W, rows: &[EpsilonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["policy", "epsilon", "optimum", "mean_test_cost", "guarantee"])?;
    for r in rows {
        w.write_record([
            r.policy.as_str().to_string(),
            r.epsilon.map_or_else(String::new, real),
            real(r.optimum),
            real(r.mean_test_cost),
            real(r.guarantee),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_alpha_sweep<W: Write>(writer: W, rows: &[AlphaRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["alpha", "mismatch", "fairness"])?;
    for r in rows {
        w.write_record([real(r.alpha), real(r.mismatch), real(r.fairness)])?;
    }
    w.flush()?;
    Ok(())
}

/// Samples as `date,t,label,r0,r1,...`.
pub fn write_samples<W: Write>(writer: W, samples: &[DemandSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = samples.first().map_or(0, |s| s.r_c.len());
    let mut header = vec!["date".to_string(), "t".into(), "label".into()];
    header.extend((0..d).map(|i| format!("r{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.date.format("%Y-%m-%d").to_string(), s.t.to_string(), s.label.clone()];
        row.extend(s.r_c.iter().map(|v| real(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(reader: R) -> Result<Vec<DemandSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let parse_err = |e: &dyn std::fmt::Display| Error::Parse(e.to_string());
    let mut out: Vec<DemandSample> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() < 4 {
            return Err(Error::Parse(format!("sample row has {} fields", row.len())));
        }
        let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d").map_err(|e| parse_err(&e))?;
        let t = row[1].parse::<usize>().map_err(|e| parse_err(&e))?;
        let r_c = row
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(&e)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = out.first() {
            if first.r_c.len() != r_c.len() {
                return Err(Error::Dimension { expected: first.r_c.len(), got: r_c.len() });
            }
        }
        out.push(DemandSample { date, t, label: row[2].to_string(), r_c });
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip() {
        let s = vec![
            DemandSample {
                date: NaiveDate::from_ymd_opt(2024, 3, 1).unwrap(),
                t: 2,
                label: "weekday".into(),
                r_c: vec![0.1, 1.0 / 3.0, 7.0],
            },
            DemandSample {
                date: NaiveDate::from_ymd_opt(2024, 3, 2).unwrap(),
                t: 0,
                label: "weekend".into(),
                r_c: vec![1e-300, 2.5, 0.0],
            },
        ];
        let mut buf = Vec::new();
        write_samples(&mut buf, &s).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), s);
    }
}
