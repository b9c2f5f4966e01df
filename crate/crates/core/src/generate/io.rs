use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DistributionKind, DistributionSource, GenError};
use crate::vrp::{Instance, Solution, TaskSpec};

fn io_err(path: &Path, source: std::io::Error) -> GenError {
    GenError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GenError {
    GenError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads a point file with one `<id> <x> <y>` record per line. Blank lines
/// and lines starting with `#` are skipped. Each axis is min-max scaled to
/// `[0, 1]`; an axis with zero spread maps to 0.5.
pub fn load_map_points(path: impl AsRef<Path>) -> Result<DistributionSource, GenError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "map".to_string());
    parse_map_points(&text, &name, path)
}

pub fn parse_map_points(text: &str, name: &str, origin: &Path) -> Result<DistributionSource, GenError> {
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(origin, idx + 1, format!("expected `<id> <x> <y>`, found {} fields", fields.len())));
        }
        let mut xy = [0.0; 2];
        for (slot, field) in xy.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(origin, idx + 1, format!("bad coordinate {field:?}")))?;
        }
        raw.push(xy);
    }
    if raw.is_empty() {
        return Err(parse_err(origin, 0, "no points"));
    }
    let mut points = raw.clone();
    for axis in 0..2 {
        let lo = raw.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        for (p, r) in points.iter_mut().zip(&raw) {
            p[axis] = if hi > lo { (r[axis] - lo) / (hi - lo) } else { 0.5 };
        }
    }
    Ok(DistributionSource {
        name: name.to_string(),
        kind: DistributionKind::MapPoints,
        points,
    })
}

/// One line of an instance file. Demands are stored normalized by `Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub task: String,
    pub n: usize,
    pub coords: Vec<[f64; 2]>,
    pub demand: Vec<f64>,
    pub tw: Vec<[f64; 2]>,
    pub service: Vec<f64>,
    #[serde(rename = "L")]
    pub duration_limit: Option<f64>,
    #[serde(rename = "Q")]
    pub capacity: f64,
}

impl From<&Instance> for InstanceRecord {
    fn from(inst: &Instance) -> Self {
        InstanceRecord {
            task: inst.task.name(),
            n: inst.n(),
            coords: inst.coords.clone(),
            demand: inst.demand.clone(),
            tw: inst.time_windows.clone(),
            service: inst.service.clone(),
            duration_limit: inst.duration_limit,
            capacity: inst.capacity,
        }
    }
}

impl InstanceRecord {
    pub fn into_instance(self) -> Result<Instance, String> {
        let task: TaskSpec = self.task.parse().map_err(|e: crate::vrp::VrpError| e.to_string())?;
        if self.coords.len() != self.n + 1 {
            return Err(format!("n is {} but {} coordinates are given", self.n, self.coords.len()));
        }
        let inst = Instance {
            task,
            coords: self.coords,
            demand: self.demand,
            capacity: self.capacity,
            time_windows: self.tw,
            service: self.service,
            duration_limit: self.duration_limit,
        };
        inst.check().map_err(|e| e.to_string())?;
        Ok(inst)
    }
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), GenError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(|e| io_err(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

fn read_lines<T, F>(path: &Path, mut convert: F) -> Result<Vec<T>, GenError>
where
    F: FnMut(&str) -> Result<T, String>,
{
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(convert(&line).map_err(|msg| parse_err(path, idx + 1, msg))?);
    }
    Ok(out)
}

/// Writes one JSON object per line. Floats round-trip bit-exactly.
pub fn write_instances(path: impl AsRef<Path>, instances: &[Instance]) -> Result<(), GenError> {
    write_lines(path.as_ref(), instances.iter().map(InstanceRecord::from))
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<Instance>, GenError> {
    read_lines(path.as_ref(), |line| {
        serde_json::from_str::<InstanceRecord>(line)
            .map_err(|e| e.to_string())?
            .into_instance()
    })
}

/// Reference solution for one instance, line-aligned with the instance file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub cost: f64,
    pub tours: Vec<Vec<usize>>,
}

impl SolutionRecord {
    pub fn solution(&self) -> Solution {
        Solution::new(self.tours.clone())
    }
}

pub fn write_solutions(path: impl AsRef<Path>, records: &[SolutionRecord]) -> Result<(), GenError> {
    write_lines(path.as_ref(), records.iter())
}

pub fn read_solutions(path: impl AsRef<Path>) -> Result<Vec<SolutionRecord>, GenError> {
    read_lines(path.as_ref(), |line| {
        let rec: SolutionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if !rec.cost.is_finite() {
            return Err("cost must be finite".into());
        }
        Ok(rec)
    })
}
