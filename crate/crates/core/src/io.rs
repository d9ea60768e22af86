//! File formats: model JSON, trace / states / labeled-training CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{FhmmError, Result};
use crate::model::{FhmmModel, ObservationTrace, StateSequence};

pub fn read_model(path: &Path) -> Result<FhmmModel> {
    let text = std::fs::read_to_string(path).map_err(|e| FhmmError::io(path, e))?;
    let model: FhmmModel = serde_json::from_str(&text).map_err(|e| FhmmError::parse(path, e))?;
    let model = model.with_default_initial();
    model.validate().map_err(|e| FhmmError::parse(path, e))?;
    Ok(model)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| FhmmError::parse(path, e))?;
    writeln!(out).map_err(|e| FhmmError::io(path, e))?;
    out.flush().map_err(|e| FhmmError::io(path, e))
}

pub fn write_model(path: &Path, model: &FhmmModel) -> Result<()> {
    write_json(path, model)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FhmmError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| FhmmError::io(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| FhmmError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> FhmmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FhmmError::io(path, io),
        other => FhmmError::parse(path, format!("{other:?}")),
    }
}

fn field<T: std::str::FromStr>(
    path: &Path,
    record: &csv::StringRecord,
    col: usize,
    name: &str,
) -> Result<T> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record
        .get(col)
        .ok_or_else(|| FhmmError::parse(path, format!("line {line}: missing column {name}")))?;
    raw.parse()
        .map_err(|_| FhmmError::parse(path, format!("line {line}: bad {name} value {raw:?}")))
}

fn check_header(
    path: &Path,
    header: &csv::StringRecord,
    fixed: &[&str],
    prefix: &str,
) -> Result<usize> {
    let cols: Vec<&str> = header.iter().collect();
    let extra = cols.len().checked_sub(fixed.len());
    let ok = extra.is_some()
        && cols.iter().zip(fixed).all(|(a, b)| a == b)
        && cols[fixed.len()..]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("{prefix}{}", i + 1));
    if !ok {
        return Err(FhmmError::parse(
            path,
            format!(
                "expected header {}[,{prefix}1..{prefix}M], got {}",
                fixed.join(","),
                cols.join(",")
            ),
        ));
    }
    Ok(extra.unwrap_or(0))
}

fn check_time(path: &Path, prev: Option<i64>, t: i64) -> Result<()> {
    if prev.is_some_and(|p| t <= p) {
        return Err(FhmmError::parse(
            path,
            format!("time {t} does not increase"),
        ));
    }
    Ok(())
}

/// Reads `t,aggregate[,app_1..app_M]`.
pub fn read_trace(path: &Path) -> Result<ObservationTrace> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let m = check_header(path, &header, &["t", "aggregate"], "app_")?;
    let mut aggregate = Vec::new();
    let mut per_appliance = Vec::new();
    let mut prev = None;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let t: i64 = field(path, &record, 0, "t")?;
        check_time(path, prev, t)?;
        prev = Some(t);
        let y: f64 = field(path, &record, 1, "aggregate")?;
        if !y.is_finite() {
            return Err(FhmmError::parse(
                path,
                format!("t = {t}: non-finite aggregate"),
            ));
        }
        aggregate.push(y);
        if m > 0 {
            let row = (0..m)
                .map(|i| field(path, &record, 2 + i, &format!("app_{}", i + 1)))
                .collect::<Result<Vec<f64>>>()?;
            per_appliance.push(row);
        }
    }
    if aggregate.is_empty() {
        return Err(FhmmError::parse(path, "trace has no rows"));
    }
    Ok(ObservationTrace {
        aggregate,
        per_appliance: (m > 0).then_some(per_appliance),
    })
}

pub fn write_trace(path: &Path, trace: &ObservationTrace) -> Result<()> {
    let mut w = writer(path)?;
    let m = trace
        .per_appliance
        .as_ref()
        .and_then(|p| p.first())
        .map_or(0, Vec::len);
    let mut header = vec!["t".to_string(), "aggregate".to_string()];
    header.extend((1..=m).map(|i| format!("app_{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (t, y) in trace.aggregate.iter().enumerate() {
        let mut row = vec![t.to_string(), y.to_string()];
        if let Some(p) = &trace.per_appliance {
            row.extend(p[t].iter().map(f64::to_string));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FhmmError::io(path, e))
}

/// Writes `t,app_1..app_M,watts_1..watts_M` with 1-based state numbers.
pub fn write_states(path: &Path, states: &StateSequence, model: &FhmmModel) -> Result<()> {
    let mut w = writer(path)?;
    let m = states.num_appliances();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("app_{i}")));
    header.extend((1..=m).map(|i| format!("watts_{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (t, (row, watts)) in states.rows().zip(states.reconstruct(model)).enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|s| (s + 1).to_string()));
        rec.extend(watts.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FhmmError::io(path, e))
}

/// Reads a states file; trailing `watts_*` columns are ignored.
pub fn read_states(path: &Path, model: &FhmmModel) -> Result<StateSequence> {
    let num_states = model.num_states();
    let m = num_states.len();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=m).map(|i| format!("app_{i}")))
        .collect();
    if header.len() < expected.len() || header.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(FhmmError::parse(
            path,
            format!("expected header starting {}", expected.join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut prev = None;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let t: i64 = field(path, &record, 0, "t")?;
        check_time(path, prev, t)?;
        prev = Some(t);
        let row = (0..m)
            .map(|i| {
                let s: usize = field(path, &record, 1 + i, &expected[1 + i])?;
                if s == 0 || s > num_states[i] {
                    return Err(FhmmError::parse(
                        path,
                        format!(
                            "t = {t}: state {s} of app_{} outside 1..={}",
                            i + 1,
                            num_states[i]
                        ),
                    ));
                }
                Ok(s - 1)
            })
            .collect::<Result<Vec<usize>>>()?;
        rows.push(row);
    }
    StateSequence::from_rows(rows, &num_states).map_err(|e| FhmmError::parse(path, e))
}

/// One appliance's readings from a labeled training file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub id: String,
    pub watts: Vec<f64>,
}

/// Reads `t,appliance_id,watts`; appliances keep their order of first
/// appearance and readings are sorted by `t`.
pub fn read_labeled(path: &Path) -> Result<Vec<LabeledTrace>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["t", "appliance_id", "watts"] {
        return Err(FhmmError::parse(
            path,
            "expected header t,appliance_id,watts",
        ));
    }
    let mut groups: Vec<(String, Vec<(i64, f64)>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let t: i64 = field(path, &record, 0, "t")?;
        let id: String = field(path, &record, 1, "appliance_id")?;
        let w: f64 = field(path, &record, 2, "watts")?;
        if !w.is_finite() {
            return Err(FhmmError::parse(path, format!("t = {t}: non-finite watts")));
        }
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push((t, w)),
            None => groups.push((id, vec![(t, w)])),
        }
    }
    if groups.is_empty() {
        return Err(FhmmError::parse(path, "no labeled readings"));
    }
    groups
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|(t, _)| *t);
            if let Some(w) = v.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(FhmmError::parse(
                    path,
                    format!("appliance {id}: duplicate reading at t = {}", w[0].0),
                ));
            }
            Ok(LabeledTrace {
                id,
                watts: v.into_iter().map(|(_, w)| w).collect(),
            })
        })
        .collect()
}

pub fn write_labeled(path: &Path, traces: &[LabeledTrace]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "appliance_id", "watts"])
        .map_err(|e| csv_err(path, e))?;
    for tr in traces {
        for (t, watts) in tr.watts.iter().enumerate() {
            w.write_record([t.to_string(), tr.id.clone(), watts.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| FhmmError::io(path, e))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(text.as_bytes())
        .map_err(|e| FhmmError::io(path, e))?;
    out.flush().map_err(|e| FhmmError::io(path, e))
}

/// Opens `path` for a streamed writer such as the residual log.
pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, ApplianceHmm};

    fn model() -> FhmmModel {
        let app = |mu: f64| ApplianceHmm::new(vec![0.0, mu], vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        FhmmModel::new(vec![app(100.0), app(250.0)], 5.0, 5.0)
    }

    #[test]
    fn model_round_trip_and_default_initial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_model(&path, &model()).unwrap();
        assert_eq!(read_model(&path).unwrap(), model());
        std::fs::write(
            &path,
            r#"{"appliances":[{"mu":[0,100],"P":[[1,0],[0,1]]}],"sigma":1,"sigma_diff":2}"#,
        )
        .unwrap();
        let m = read_model(&path).unwrap();
        assert_eq!(m.initial_dist, vec![vec![0.5, 0.5]]);
    }

    #[test]
    fn bad_model_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"appliances":[{"mu":[0,1],"P":[[0.5,0.6],[0,1]]}],"sigma":1,"sigma_diff":1}"#,
        )
        .unwrap();
        let err = read_model(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("bad.json"));
        assert!(err.to_string().contains("row not stochastic"));
        let missing = read_model(&dir.path().join("nope.json")).unwrap_err();
        assert!(missing.to_string().contains("nope.json"));
        assert_eq!(missing.exit_code(), 3);
    }

    #[test]
    fn trace_and_states_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = model();
        let (states, trace) = simulate(&model, 12, 3).unwrap();
        let tp = dir.path().join("trace.csv");
        write_trace(&tp, &trace).unwrap();
        assert_eq!(read_trace(&tp).unwrap(), trace);
        let sp = dir.path().join("states.csv");
        write_states(&sp, &states, &model).unwrap();
        let text = std::fs::read_to_string(&sp).unwrap();
        assert!(text.starts_with("t,app_1,app_2,watts_1,watts_2\n"));
        assert_eq!(read_states(&sp, &model).unwrap(), states);
    }

    #[test]
    fn trace_header_and_values_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "t,agg\n0,1\n").unwrap();
        assert!(read_trace(&p).unwrap_err().to_string().contains("header"));
        std::fs::write(&p, "t,aggregate\n0,1\n1,x\n").unwrap();
        assert!(read_trace(&p)
            .unwrap_err()
            .to_string()
            .contains("aggregate"));
        std::fs::write(&p, "t,aggregate\n1,1\n1,2\n").unwrap();
        assert!(read_trace(&p).is_err());
        std::fs::write(&p, "t,aggregate\n0,1.5\n1,2\n").unwrap();
        assert_eq!(read_trace(&p).unwrap().aggregate, vec![1.5, 2.0]);
    }

    #[test]
    fn states_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "t,app_1,app_2\n0,1,3\n").unwrap();
        assert!(read_states(&p, &model()).is_err());
        std::fs::write(&p, "t,app_1,app_2\n0,0,1\n").unwrap();
        assert!(read_states(&p, &model()).is_err());
    }

    #[test]
    fn labeled_groups_by_appliance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        std::fs::write(
            &p,
            "t,appliance_id,watts\n1,fridge,5\n0,fridge,4\n0,kettle,0\n",
        )
        .unwrap();
        let l = read_labeled(&p).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l[0].id, "fridge");
        assert_eq!(l[0].watts, vec![4.0, 5.0]);
        let q = dir.path().join("round.csv");
        write_labeled(&q, &l).unwrap();
        assert_eq!(read_labeled(&q).unwrap(), l);
        std::fs::write(&p, "t,appliance_id,watts\n0,a,1\n0,a,2\n").unwrap();
        assert!(read_labeled(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }
}
