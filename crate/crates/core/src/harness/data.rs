//! Long-format CSV datasets.
//!
//! Observations: `subject_id, t, feat_<name>..., label, weight`. Context:
//! `subject_id, ctx_<name>...`. A blank cell is a missing value.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::preprocess::{RawSubject, Row};

/// Subjects plus the column names they were read with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedData {
    pub feature_names: Vec<String>,
    pub context_names: Vec<String>,
    pub subjects: Vec<RawSubject>,
}

fn csv_err(line: u64, msg: impl Into<String>) -> HarnessError {
    HarnessError::Csv {
        line,
        msg: msg.into(),
    }
}

fn parse_opt(cell: &str, line: u64, col: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| csv_err(line, format!("column {col}: cannot parse {cell:?} as a number")))?;
    if !v.is_finite() {
        return Err(csv_err(line, format!("column {col}: non-finite value")));
    }
    Ok(Some(v))
}

enum Col {
    Id,
    Time,
    Feature(usize),
    Label,
    Weight,
}

/// Reads observation rows and, optionally, a context table.
pub fn read_dataset(obs: impl Read, context: Option<impl Read>) -> Result<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(obs);
    let headers = rdr.headers()?.clone();
    let mut cols = Vec::with_capacity(headers.len());
    let mut feature_names = Vec::new();
    for h in headers.iter() {
        cols.push(match h {
            "subject_id" => Col::Id,
            "t" => Col::Time,
            "label" => Col::Label,
            "weight" => Col::Weight,
            _ => match h.strip_prefix("feat_") {
                Some(name) if !name.is_empty() => {
                    feature_names.push(name.to_string());
                    Col::Feature(feature_names.len() - 1)
                }
                _ => return Err(HarnessError::UnknownColumn(h.to_string())),
            },
        });
    }
    for need in ["subject_id", "t"] {
        if !headers.iter().any(|h| h == need) {
            return Err(csv_err(1, format!("missing required column {need}")));
        }
    }
    if feature_names.is_empty() {
        return Err(csv_err(1, "no feat_ columns"));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(u64, Row)>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(csv_err(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let mut id = String::new();
        let mut row = Row {
            t: f64::NAN,
            features: vec![None; feature_names.len()],
            label: None,
            weight: 1.0,
        };
        for ((col, cell), name) in cols.iter().zip(rec.iter()).zip(headers.iter()) {
            match col {
                Col::Id => id = cell.to_string(),
                Col::Time => {
                    row.t = parse_opt(cell, line, name)?.ok_or_else(|| csv_err(line, "missing time"))?
                }
                Col::Feature(j) => row.features[*j] = parse_opt(cell, line, name)?,
                Col::Label => row.label = parse_opt(cell, line, name)?,
                Col::Weight => row.weight = parse_opt(cell, line, name)?.unwrap_or(0.0),
            }
        }
        if id.is_empty() {
            return Err(csv_err(line, "empty subject_id"));
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((line, row));
    }

    let (context_names, contexts) = match context {
        Some(r) => read_context(r)?,
        None => (Vec::new(), HashMap::new()),
    };
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rs = rows.remove(&id).unwrap_or_default();
        rs.sort_by(|a, b| a.1.t.total_cmp(&b.1.t));
        for w in rs.windows(2) {
            if w[0].1.t == w[1].1.t {
                return Err(HarnessError::DuplicateTime {
                    id: id.clone(),
                    t: w[1].1.t,
                    line: w[1].0,
                });
            }
        }
        let context = contexts
            .get(&id)
            .cloned()
            .unwrap_or_else(|| vec![None; context_names.len()]);
        subjects.push(RawSubject {
            id,
            context,
            rows: rs.into_iter().map(|(_, r)| r).collect(),
        });
    }
    Ok(LoadedData {
        feature_names,
        context_names,
        subjects,
    })
}

type ContextTable = (Vec<String>, HashMap<String, Vec<Option<f64>>>);

fn read_context(r: impl Read) -> Result<ContextTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("subject_id") {
        return Err(csv_err(1, "context table must start with subject_id"));
    }
    let mut names = Vec::new();
    for h in headers.iter().skip(1) {
        match h.strip_prefix("ctx_") {
            Some(n) if !n.is_empty() => names.push(n.to_string()),
            _ => return Err(HarnessError::UnknownColumn(h.to_string())),
        }
    }
    let mut table = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(csv_err(line, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let vals = rec
            .iter()
            .zip(headers.iter())
            .skip(1)
            .map(|(c, h)| parse_opt(c, line, h))
            .collect::<Result<Vec<_>>>()?;
        if table.insert(rec[0].to_string(), vals).is_some() {
            return Err(csv_err(line, format!("duplicate context row for {}", &rec[0])));
        }
    }
    Ok((names, table))
}

pub fn load_dataset(path: &Path, context_path: Option<&Path>) -> Result<LoadedData> {
    let obs = std::fs::File::open(path)?;
    let ctx = context_path.map(std::fs::File::open).transpose()?;
    read_dataset(obs, ctx)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Writes the observation table; values round-trip exactly.
pub fn write_observations(data: &LoadedData, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string(), "t".to_string()];
    header.extend(data.feature_names.iter().map(|n| format!("feat_{n}")));
    header.extend(["label".to_string(), "weight".to_string()]);
    wtr.write_record(&header)?;
    for s in &data.subjects {
        for r in &s.rows {
            let mut rec = vec![s.id.clone(), format!("{:?}", r.t)];
            rec.extend(r.features.iter().map(|&v| fmt_opt(v)));
            rec.push(fmt_opt(r.label));
            rec.push(format!("{:?}", r.weight));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_context(data: &LoadedData, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string()];
    header.extend(data.context_names.iter().map(|n| format!("ctx_{n}")));
    wtr.write_record(&header)?;
    for s in &data.subjects {
        let mut rec = vec![s.id.clone()];
        rec.extend(s.context.iter().map(|&v| fmt_opt(v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const OBS: &str = "subject_id,t,feat_a,feat_b,label,weight\n\
        s1,0.0,1.0,,0,1\n\
        s2,1.0,2.0,3.0,1,1\n\
        s1,2.0,,4.0,,0\n\
        s1,1.0,5.0,6.0,1,1\n\
        s2,0.5,,,0,1\n";

    #[test]
    fn groups_sorts_and_keeps_missing() {
        let d = read_dataset(OBS.as_bytes(), None::<&[u8]>).unwrap();
        assert_eq!(d.feature_names, vec!["a", "b"]);
        assert_eq!(d.subjects.len(), 2);
        let s1 = &d.subjects[0];
        assert_eq!(s1.rows.len(), 3);
        assert_eq!(s1.rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
        assert_eq!(s1.rows[0].features, vec![Some(1.0), None]);
        assert_eq!(s1.rows[2].label, None);
        assert_eq!(d.subjects[1].rows.len(), 2);
    }

    #[test]
    fn unknown_column_and_bad_number() {
        let e = read_dataset("subject_id,t,foo\n".as_bytes(), None::<&[u8]>).unwrap_err();
        assert!(matches!(e, HarnessError::UnknownColumn(c) if c == "foo"));
        let e = read_dataset("subject_id,t,feat_a\ns,0,x\n".as_bytes(), None::<&[u8]>).unwrap_err();
        assert!(matches!(e, HarnessError::Csv { line: 2, .. }));
    }

    #[test]
    fn duplicate_time_rejected() {
        let e = read_dataset("subject_id,t,feat_a\ns,0,1\ns,0,2\n".as_bytes(), None::<&[u8]>).unwrap_err();
        assert!(matches!(e, HarnessError::DuplicateTime { .. }));
    }

    #[test]
    fn context_join_and_roundtrip() {
        let ctx = "subject_id,ctx_age\ns1,40\n";
        let d = read_dataset(OBS.as_bytes(), Some(ctx.as_bytes())).unwrap();
        assert_eq!(d.subjects[0].context, vec![Some(40.0)]);
        assert_eq!(d.subjects[1].context, vec![None]);
        let (mut o, mut c) = (Vec::new(), Vec::new());
        write_observations(&d, &mut o).unwrap();
        write_context(&d, &mut c).unwrap();
        let back = read_dataset(&o[..], Some(&c[..])).unwrap();
        assert_eq!(back, d);
    }
}
