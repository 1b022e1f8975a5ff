//! Text artifacts: checkpoints, datasets and CSV reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a file back gives
//! the identical bits. Every artifact carries the tool version, the seed and a config digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{FdmnError, Result};
use crate::mandel::{KinematicClass, Mat6, MaterialTensor, Role};
use crate::materials::{OrientationState, Provenance, SampleRecord};
use crate::network::{NetworkParameters, Topology};
use crate::online::ErrorTable;
use crate::training::{FitReport, RestartLog};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const CHECKPOINT_MAGIC: &str = "fdmn-checkpoint";
const DATASET_MAGIC: &str = "fdmn-dataset";
const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of a canonical configuration string.
pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Tool version, seed and config digest stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub tool: String,
    pub seed: u64,
    pub digest: String,
}

impl Stamp {
    pub fn new(seed: u64, config: &str) -> Self {
        Stamp { tool: TOOL_VERSION.to_string(), seed, digest: digest(config) }
    }
}

fn perr(line: usize, message: impl Into<String>) -> FdmnError {
    FdmnError::Parse { line, message: message.into() }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| perr(line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(perr(line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

/// Lines with their 1-based numbers, skipping blanks and `#` comments.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn key_value<'a>(entry: Option<(usize, &'a str)>, key: &str) -> Result<(usize, &'a str)> {
    let (n, l) = entry.ok_or_else(|| perr(0, format!("missing {key:?} line")))?;
    match l.split_once(char::is_whitespace) {
        Some((k, v)) if k == key => Ok((n, v.trim())),
        None if l == key => Ok((n, "")),
        _ => Err(perr(n, format!("expected {key:?}"))),
    }
}

// --- checkpoints --------------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub topology: Topology,
    pub params: NetworkParameters,
    pub stamp: Stamp,
    /// Free-form training metadata, written in key order.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(topology: Topology, params: NetworkParameters, stamp: Stamp) -> Result<Self> {
        params.check(&topology)?;
        Ok(Checkpoint { topology, params, stamp, meta: BTreeMap::new() })
    }

    /// Checkpoint of the best restart with its errors recorded.
    pub fn from_report(topology: Topology, report: &FitReport, stamp: Stamp) -> Result<Self> {
        let mut c = Checkpoint::new(topology, report.best_params.clone(), stamp)?;
        let best = report.best();
        c.meta.insert("best_restart".into(), report.best_restart.to_string());
        c.meta.insert("restarts".into(), report.restarts.len().to_string());
        c.meta.insert("aborted".into(), report.aborted().to_string());
        c.meta.insert("epochs".into(), report.epochs.len().to_string());
        if let Some((t, v)) = best.final_errors() {
            c.meta.insert("train_error".into(), format!("{t:e}"));
            c.meta.insert("validation_error".into(), format!("{v:e}"));
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(s, "tool {}", self.stamp.tool);
        let _ = writeln!(s, "seed {}", self.stamp.seed);
        let _ = writeln!(s, "digest {}", self.stamp.digest);
        let _ = writeln!(s, "depth {}", self.topology.depth());
        let _ = writeln!(s, "rank {}", self.topology.rank());
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        let _ = writeln!(s, "weights {}", self.params.weights.len());
        for w in &self.params.weights {
            let _ = writeln!(s, "{w:e}");
        }
        let _ = writeln!(s, "angles {}", self.params.angles.len());
        for a in &self.params.angles {
            let _ = writeln!(s, "{a:e}");
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut it = content_lines(text).peekable();
        let (n, v) = key_value(it.next(), CHECKPOINT_MAGIC)?;
        if v != FORMAT_VERSION.to_string() {
            return Err(perr(n, format!("unsupported checkpoint version {v:?}")));
        }
        let (_, tool) = key_value(it.next(), "tool")?;
        let (n, seed) = key_value(it.next(), "seed")?;
        let seed = seed.parse().map_err(|_| perr(n, "bad seed"))?;
        let (_, dig) = key_value(it.next(), "digest")?;
        let (n, depth) = key_value(it.next(), "depth")?;
        let depth = depth.parse().map_err(|_| perr(n, "bad depth"))?;
        let (n, rank) = key_value(it.next(), "rank")?;
        let rank = rank.parse().map_err(|_| perr(n, "bad rank"))?;
        let topology = Topology::new(depth, rank).map_err(|e| perr(n, e.to_string()))?;
        let mut meta = BTreeMap::new();
        while let Some(&(n, l)) = it.peek() {
            let Some(rest) = l.strip_prefix("meta ") else { break };
            let (k, v) = rest.split_once(' ').ok_or_else(|| perr(n, "meta needs a key and a value"))?;
            meta.insert(k.to_string(), v.to_string());
            it.next();
        }
        let mut array = |key: &str, expected: usize| -> Result<Vec<f64>> {
            let (n, count) = key_value(it.next(), key)?;
            let count: usize = count.parse().map_err(|_| perr(n, format!("bad {key} count")))?;
            if count != expected {
                return Err(perr(n, format!("expected {expected} {key}, found {count}")));
            }
            (0..count)
                .map(|_| {
                    let (n, l) = it.next().ok_or_else(|| perr(0, format!("truncated {key}")))?;
                    parse_f64(l, n)
                })
                .collect()
        };
        let weights = array("weights", topology.n_weights())?;
        let angles = array("angles", topology.n_angles())?;
        key_value(it.next(), "end")?;
        if let Some((n, _)) = it.next() {
            return Err(perr(n, "trailing content after end"));
        }
        let params = NetworkParameters::new(&topology, weights, angles)?;
        Ok(Checkpoint {
            topology,
            params,
            stamp: Stamp { tool: tool.to_string(), seed, digest: dig.to_string() },
            meta,
        })
    }
}

// --- datasets -----------------------------------------------------------------------------------

fn matrix_tokens(m: &Mat6, out: &mut String) {
    for i in 0..6 {
        for j in 0..6 {
            let _ = write!(out, " {:e}", m[(i, j)]);
        }
    }
}

pub fn write_dataset(records: &[SampleRecord], stamp: &Stamp) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{DATASET_MAGIC} {FORMAT_VERSION}");
    s.push_str("# units: viscosities in Pa s (Mandel 6x6, row-major); orientation eigenvalues dimensionless\n");
    s.push_str("# columns: provenance lambda1 lambda2 V[36] Vbar[36]\n");
    let _ = writeln!(s, "tool {}", stamp.tool);
    let _ = writeln!(s, "seed {}", stamp.seed);
    let _ = writeln!(s, "digest {}", stamp.digest);
    let _ = writeln!(s, "records {}", records.len());
    for r in records {
        let _ = write!(s, "{} {:e} {:e}", r.provenance.tag(), r.orientation.lambda1, r.orientation.lambda2);
        matrix_tokens(r.matrix.matrix(), &mut s);
        matrix_tokens(r.effective.matrix(), &mut s);
        s.push('\n');
    }
    s
}

fn parse_record(line: &str, n: usize) -> Result<SampleRecord> {
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() != 75 {
        return Err(perr(n, format!("expected 75 fields, found {}", tok.len())));
    }
    let provenance = Provenance::parse(tok[0]).ok_or_else(|| perr(n, format!("unknown provenance {:?}", tok[0])))?;
    let l1 = parse_f64(tok[1], n)?;
    let l2 = parse_f64(tok[2], n)?;
    let orientation = OrientationState::new(l1, l2).map_err(|e| perr(n, e.to_string()))?;
    let read = |offset: usize, what: &str| -> Result<MaterialTensor> {
        let mut m = Mat6::zeros();
        for k in 0..36 {
            m[(k / 6, k % 6)] = parse_f64(tok[offset + k], n)?;
        }
        MaterialTensor::new(m, KinematicClass::Incompressible, Role::Primal).map_err(|e| perr(n, format!("{what}: {e}")))
    };
    let matrix = read(3, "matrix tensor")?;
    let effective = read(39, "effective tensor")?;
    SampleRecord::new(matrix, effective, provenance, orientation).map_err(|e| perr(n, e.to_string()))
}

/// Reads a dataset file, validating every record. Errors carry the 1-based line number.
pub fn read_dataset(text: &str) -> Result<(Stamp, Vec<SampleRecord>)> {
    let mut it = content_lines(text);
    let (n, v) = key_value(it.next(), DATASET_MAGIC)?;
    if v != FORMAT_VERSION.to_string() {
        return Err(perr(n, format!("unsupported dataset version {v:?}")));
    }
    let (_, tool) = key_value(it.next(), "tool")?;
    let (n, seed) = key_value(it.next(), "seed")?;
    let seed = seed.parse().map_err(|_| perr(n, "bad seed"))?;
    let (_, dig) = key_value(it.next(), "digest")?;
    let (n, count) = key_value(it.next(), "records")?;
    let count: usize = count.parse().map_err(|_| perr(n, "bad record count"))?;
    let records = it.map(|(n, l)| parse_record(l, n)).collect::<Result<Vec<_>>>()?;
    if records.len() != count {
        return Err(perr(n, format!("header announces {count} records, found {}", records.len())));
    }
    Ok((Stamp { tool: tool.to_string(), seed, digest: dig.to_string() }, records))
}

// --- CSV ----------------------------------------------------------------------------------------

fn csv_header(s: &mut String, stamp: &Stamp) {
    let _ = writeln!(s, "# tool {} seed {} digest {}", stamp.tool, stamp.seed, stamp.digest);
}

/// Per-epoch spread over restarts.
pub fn training_log_csv(report: &FitReport, stamp: &Stamp) -> String {
    let mut s = String::new();
    csv_header(&mut s, stamp);
    s.push_str("epoch,train_min,train_max,train_avg,val_min,val_max,val_avg,lr_angles,lr_weights\n");
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            e.epoch,
            e.train.min,
            e.train.max,
            e.train.avg,
            e.validation.min,
            e.validation.max,
            e.validation.avg,
            e.lr_angles,
            e.lr_weights
        );
    }
    s
}

/// Full per-restart histories.
pub fn restart_log_csv(restarts: &[RestartLog], stamp: &Stamp) -> String {
    let mut s = String::new();
    csv_header(&mut s, stamp);
    s.push_str("restart,epoch,train,validation,aborted\n");
    for r in restarts {
        for (e, (t, v)) in r.history.iter().enumerate() {
            let _ = writeln!(s, "{},{},{:e},{:e},", r.index, e, t, v);
        }
        if let Some(reason) = &r.aborted {
            let _ = writeln!(s, "{},{},,,{}", r.index, r.history.len(), reason.replace(',', ";"));
        }
    }
    s
}

pub fn error_table_csv(table: &ErrorTable, orientation: &OrientationState, stamp: &Stamp) -> String {
    let mut s = String::new();
    csv_header(&mut s, stamp);
    s.push_str("lambda1,lambda2,load,rate,s1,s2,s3,s4,s5,e_on\n");
    for r in &table.rows {
        let c = r.stress.coords();
        let _ = writeln!(
            s,
            "{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            orientation.lambda1, orientation.lambda2, r.load, r.rate, c[0], c[1], c[2], c[3], c[4], r.error
        );
    }
    s
}

pub fn error_summary_csv(table: &ErrorTable, orientation: &OrientationState, stamp: &Stamp) -> String {
    let mut s = String::new();
    csv_header(&mut s, stamp);
    s.push_str("lambda1,lambda2,cases,e_on_max,e_on_mean,seconds\n");
    let _ = writeln!(
        s,
        "{:e},{:e},{},{:e},{:e},{:e}",
        orientation.lambda1,
        orientation.lambda2,
        table.rows.len(),
        table.max,
        table.mean,
        table.seconds
    );
    s
}
