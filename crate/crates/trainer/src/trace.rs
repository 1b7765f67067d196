//! Line-delimited JSON trace: one object per iteration with flattened, sorted keys.
//!
//! ```text
//! {"feat_absmean.0":0.81,"grad_absmax.embed.weight":0.02,"iter":1,"loss":2.07,"rms.embed.weight":1.0,"skipped_tensors":[]}
//! ```
//!
//! Non-finite numbers are written as `null`.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use lowbit_core::stability::{TraceRecord, TrainTrace};
use serde_json::{Map, Number, Value};

use crate::error::{TrainerError, TrainerResult};

fn number(v: f64) -> Value {
    Number::from_f64(v).map_or(Value::Null, Value::Number)
}

pub fn record_to_json(r: &TraceRecord) -> String {
    let mut m = Map::new();
    m.insert("iter".into(), Value::from(r.iter));
    m.insert("loss".into(), r.loss.map_or(Value::Null, number));
    for (name, v) in &r.rms {
        m.insert(format!("rms.{name}"), number(*v));
    }
    for (name, v) in &r.grad_absmax {
        m.insert(format!("grad_absmax.{name}"), number(*v));
    }
    for (k, v) in &r.feat_absmean {
        m.insert(format!("feat_absmean.{k}"), number(*v));
    }
    m.insert(
        "skipped_tensors".into(),
        Value::Array(r.skipped_tensors.iter().cloned().map(Value::String).collect()),
    );
    Value::Object(m).to_string()
}

pub fn write_trace(trace: &TrainTrace, out: &mut impl Write) -> std::io::Result<()> {
    for r in &trace.records {
        writeln!(out, "{}", record_to_json(r))?;
    }
    Ok(())
}

pub fn save_trace(trace: &TrainTrace, path: &Path) -> TrainerResult<()> {
    let file = std::fs::File::create(path).map_err(|e| TrainerError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_trace(trace, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| TrainerError::io(path, e))
}

fn as_f64(v: &Value, line: usize, key: &str) -> TrainerResult<f64> {
    match v {
        Value::Null => Ok(f64::NAN),
        Value::Number(n) => Ok(n.as_f64().unwrap_or(f64::NAN)),
        _ => Err(TrainerError::Trace {
            line,
            msg: format!("'{key}' is not a number"),
        }),
    }
}

pub fn parse_record(text: &str, line: usize) -> TrainerResult<TraceRecord> {
    let err = |msg: String| TrainerError::Trace { line, msg };
    let value: Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(err("record is not an object".into()));
    };
    let mut r = TraceRecord::default();
    let mut has_iter = false;
    let mut has_skipped = false;
    for (key, v) in &map {
        if key == "iter" {
            r.iter = v.as_u64().ok_or_else(|| err("'iter' is not a non-negative integer".into()))?;
            has_iter = true;
        } else if key == "loss" {
            let l = as_f64(v, line, key)?;
            r.loss = l.is_finite().then_some(l);
        } else if key == "skipped_tensors" {
            let arr = v.as_array().ok_or_else(|| err("'skipped_tensors' is not a list".into()))?;
            r.skipped_tensors = arr
                .iter()
                .map(|s| s.as_str().map(str::to_string).ok_or_else(|| err("skipped tensor name is not a string".into())))
                .collect::<TrainerResult<_>>()?;
            has_skipped = true;
        } else if let Some(name) = key.strip_prefix("rms.") {
            r.rms.push((name.to_string(), as_f64(v, line, key)?));
        } else if let Some(name) = key.strip_prefix("grad_absmax.") {
            r.grad_absmax.push((name.to_string(), as_f64(v, line, key)?));
        } else if let Some(idx) = key.strip_prefix("feat_absmean.") {
            let k: usize = idx.parse().map_err(|_| err(format!("bad block index in '{key}'")))?;
            r.feat_absmean.push((k, as_f64(v, line, key)?));
        } else {
            return Err(err(format!("unknown key '{key}'")));
        }
    }
    if !has_iter || !has_skipped || !map.contains_key("loss") {
        return Err(err("record needs 'iter', 'loss' and 'skipped_tensors'".into()));
    }
    r.feat_absmean.sort_by_key(|&(k, _)| k);
    Ok(r)
}

/// Parses a whole trace and checks that iterations increase and every record carries the
/// same key set.
pub fn read_trace(reader: impl BufRead) -> TrainerResult<TrainTrace> {
    let mut trace = TrainTrace::default();
    let mut keys: Option<BTreeSet<String>> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| TrainerError::Trace {
            line: line_no,
            msg: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let r = parse_record(&text, line_no)?;
        let these = key_set(&r);
        match &keys {
            None => keys = Some(these),
            Some(k) if *k != these => {
                return Err(TrainerError::Trace {
                    line: line_no,
                    msg: "key set differs from the first record".into(),
                })
            }
            _ => {}
        }
        if let Some(prev) = trace.records.last() {
            if r.iter <= prev.iter {
                return Err(TrainerError::Trace {
                    line: line_no,
                    msg: format!("iteration {} does not follow {}", r.iter, prev.iter),
                });
            }
        }
        trace.records.push(r);
    }
    if trace.records.is_empty() {
        return Err(TrainerError::Trace {
            line: 0,
            msg: "trace is empty".into(),
        });
    }
    Ok(trace)
}

pub fn load_trace(path: &Path) -> TrainerResult<TrainTrace> {
    let file = std::fs::File::open(path).map_err(|e| TrainerError::io(path, e))?;
    read_trace(std::io::BufReader::new(file))
}

fn key_set(r: &TraceRecord) -> BTreeSet<String> {
    let mut k = BTreeSet::new();
    k.extend(r.rms.iter().map(|(n, _)| format!("rms.{n}")));
    k.extend(r.grad_absmax.iter().map(|(n, _)| format!("grad_absmax.{n}")));
    k.extend(r.feat_absmean.iter().map(|(n, _)| format!("feat_absmean.{n}")));
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(iter: u64) -> TraceRecord {
        TraceRecord {
            iter,
            loss: Some(1.25),
            rms: vec![("blocks.0.w".into(), f64::NAN), ("embed.weight".into(), 0.5)],
            grad_absmax: vec![("blocks.0.w".into(), 2.0), ("embed.weight".into(), 0.125)],
            feat_absmean: vec![(0, 0.75), (1, 0.5)],
            skipped_tensors: vec!["blocks.0.w".into()],
        }
    }

    #[test]
    fn keys_are_sorted_and_nan_is_null() {
        let line = record_to_json(&sample(3));
        assert_eq!(
            line,
            r#"{"feat_absmean.0":0.75,"feat_absmean.1":0.5,"grad_absmax.blocks.0.w":2.0,"grad_absmax.embed.weight":0.125,"iter":3,"loss":1.25,"rms.blocks.0.w":null,"rms.embed.weight":0.5,"skipped_tensors":["blocks.0.w"]}"#
        );
    }

    #[test]
    fn round_trip() {
        let trace = TrainTrace {
            records: vec![sample(1), sample(2)],
        };
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[1].iter, 2);
        assert!(back.records[0].rms[0].1.is_nan());
        assert_eq!(back.records[0].rms[1], ("embed.weight".to_string(), 0.5));
        assert_eq!(back.records[0].skipped_tensors, vec!["blocks.0.w".to_string()]);
    }

    #[test]
    fn malformed_traces_are_rejected() {
        for bad in [
            "not json",
            "[1,2]",
            r#"{"iter":1,"loss":1.0}"#,
            r#"{"iter":1,"loss":1.0,"skipped_tensors":[],"weird":3}"#,
            r#"{"iter":-1,"loss":1.0,"skipped_tensors":[]}"#,
            "",
        ] {
            assert!(read_trace(bad.as_bytes()).is_err(), "{bad}");
        }
        let two = "{\"iter\":2,\"loss\":1.0,\"skipped_tensors\":[]}\n{\"iter\":2,\"loss\":1.0,\"skipped_tensors\":[]}\n";
        assert!(read_trace(two.as_bytes()).is_err());
        let keys = "{\"iter\":1,\"loss\":1.0,\"skipped_tensors\":[],\"rms.a\":1}\n{\"iter\":2,\"loss\":1.0,\"skipped_tensors\":[]}\n";
        assert!(read_trace(keys.as_bytes()).is_err());
    }
}
