//! CSV ingestion: `id,r,x,delta,u,z1..zp` (times in years, delta 0/1).
//! With a calendar close date, a `y` column of initiation dates
//! (YYYY-MM-DD) may replace `u`.

use std::path::Path;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use survref::{Dataset, SubjectRecord};

use crate::UsageError;

const DAYS_PER_YEAR: f64 = 365.25;

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

/// Covariate columns `z1..zp` in order.
fn covariate_columns(headers: &csv::StringRecord) -> Result<Vec<usize>> {
    let mut cols = Vec::new();
    for p in 1.. {
        match column(headers, &format!("z{p}")) {
            Some(i) => cols.push(i),
            None => break,
        }
    }
    let extra = headers
        .iter()
        .filter(|h| {
            let h = h.trim();
            h.starts_with('z') && h[1..].parse::<usize>().is_ok_and(|k| k == 0 || k > cols.len())
        })
        .collect::<Vec<_>>();
    if !extra.is_empty() {
        return Err(UsageError::msg(format!(
            "covariate columns must be numbered z1..zp without gaps; found {extra:?}"
        ))
        .into());
    }
    Ok(cols)
}

pub fn ingest_dataset(path: &Path, close_date: Option<NaiveDate>) -> Result<Dataset> {
    let fail = |msg: String| -> anyhow::Error { UsageError::msg(format!("{}: {msg}", path.display())).into() };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(UsageError::from)?;
    let headers = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    let need = |name: &str| column(&headers, name).ok_or_else(|| fail(format!("missing column `{name}`")));
    let (id, r, x, delta) = (need("id")?, need("r")?, need("x")?, need("delta")?);
    let horizon = match (column(&headers, "u"), column(&headers, "y"), close_date) {
        (Some(u), _, None) => Horizon::Direct(u),
        (_, Some(y), Some(d2)) => Horizon::FromDate(y, d2),
        (Some(_), _, Some(_)) => return Err(fail("--d2 needs a `y` column of initiation dates".into())),
        (None, Some(_), None) => return Err(fail("a `y` column needs the study close date via --d2".into())),
        (None, None, _) => return Err(fail("missing column `u`".into())),
    };
    let zcols = covariate_columns(&headers)?;

    let mut records = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                fail(format!("line {line}: expected {expected_len} fields, found {len}"))
            }
            _ => fail(format!("line {line}: {e}")),
        })?;
        let num = |i: usize, name: &str| -> Result<f64> {
            let s = row.get(i).unwrap_or("");
            let v: f64 = s
                .parse()
                .map_err(|_| fail(format!("line {line}: column `{name}` is not a number: '{s}'")))?;
            if !v.is_finite() {
                return Err(fail(format!("line {line}: column `{name}` is not finite")));
            }
            Ok(v)
        };
        let rv = num(r, "r")?;
        let xv = num(x, "x")?;
        let dv = match row.get(delta).unwrap_or("") {
            "0" => false,
            "1" => true,
            other => return Err(fail(format!("line {line}: delta must be 0 or 1, got '{other}'"))),
        };
        let uv = match horizon {
            Horizon::Direct(u) => num(u, "u")?,
            Horizon::FromDate(y, d2) => {
                let s = row.get(y).unwrap_or("");
                let start = NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map_err(|_| fail(format!("line {line}: `y` must be a YYYY-MM-DD date, got '{s}'")))?;
                (d2 - start).num_days() as f64 / DAYS_PER_YEAR
            }
        };
        if !(rv > 0.0) {
            return Err(fail(format!("line {line}: referral time r = {rv} must be positive")));
        }
        if rv >= xv {
            return Err(fail(format!(
                "line {line}: referral time r = {rv} must precede the event or censoring time x = {xv}"
            )));
        }
        if xv > uv * (1.0 + 1e-12) {
            return Err(fail(format!(
                "line {line}: x = {xv} exceeds the time to study close u = {uv}; follow-up after the close is not supported"
            )));
        }
        let mut z = Vec::with_capacity(zcols.len() + 1);
        z.push(1.0);
        for (p, &c) in zcols.iter().enumerate() {
            z.push(num(c, &format!("z{}", p + 1))?);
        }
        records.push(SubjectRecord {
            id: row.get(id).unwrap_or("").to_string(),
            r: rv,
            x: xv,
            delta: dv,
            u: uv,
            z,
        });
    }
    if records.is_empty() {
        return Err(fail("no data rows".into()));
    }
    Dataset::new(records).map_err(|e| fail(e.to_string()))
}

#[derive(Clone, Copy)]
enum Horizon {
    Direct(usize),
    FromDate(usize, NaiveDate),
}

/// Writes a dataset in the ingestion format (the intercept column is
/// implied and omitted).
pub fn write_dataset<W: std::io::Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let p = data.n_covariates().saturating_sub(1);
    let mut header = vec!["id".to_string(), "r".into(), "x".into(), "delta".into(), "u".into()];
    header.extend((1..=p).map(|k| format!("z{k}")));
    wtr.write_record(&header)?;
    for rec in data.records() {
        let mut row = vec![
            rec.id.clone(),
            rec.r.to_string(),
            rec.x.to_string(),
            if rec.delta { "1".into() } else { "0".into() },
            rec.u.to_string(),
        ];
        row.extend(rec.z[1..].iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
