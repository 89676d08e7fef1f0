//! On-disk formats: instance files, tour files, dataset manifests.
//!
//! Both instance and tour files are UTF-8 `key = value` documents with a
//! fixed field order, floats printed with 17 significant digits (enough to
//! round-trip an f64 exactly), and the literal `inf` for infinities. The
//! writer is canonical: serializing the same value twice yields identical
//! bytes, which is what the dataset hashing and the determinism guarantees
//! lean on.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::vrp::instance::ProblemInstance;
use crate::vrp::tour::Tour;
use crate::vrp::variant::VariantId;

pub const INSTANCE_FORMAT_VERSION: u64 = 1;
pub const TOUR_FORMAT_VERSION: u64 = 1;

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{:.16e}", v)
    }
}

fn fmt_demand(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 9e15 {
        format!("{}", v as i64)
    } else {
        fmt_f64(v)
    }
}

fn fmt_f64_list(vs: &[f64], demandish: bool) -> String {
    let items: Vec<String> = vs
        .iter()
        .map(|v| if demandish { fmt_demand(*v) } else { fmt_f64(*v) })
        .collect();
    format!("[{}]", items.join(", "))
}

fn fmt_coords(coords: &[[f64; 2]]) -> String {
    let items: Vec<String> = coords
        .iter()
        .map(|c| format!("[{}, {}]", fmt_f64(c[0]), fmt_f64(c[1])))
        .collect();
    format!("[{}]", items.join(", "))
}

/// Canonical instance serialization.
pub fn write_instance(inst: &ProblemInstance) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version = {INSTANCE_FORMAT_VERSION}");
    let _ = writeln!(s, "variant = {}", inst.variant.name());
    let _ = writeln!(s, "n = {}", inst.n);
    let _ = writeln!(s, "seed = {}", inst.seed);
    let _ = writeln!(s, "coords = {}", fmt_coords(&inst.coords));
    let _ = writeln!(s, "linehaul = {}", fmt_f64_list(&inst.linehaul, true));
    let _ = writeln!(s, "backhaul = {}", fmt_f64_list(&inst.backhaul, true));
    let _ = writeln!(s, "capacity = {}", fmt_demand(inst.capacity));
    let _ = writeln!(s, "open = {}", u8::from(inst.open));
    let _ = writeln!(s, "dur_limit = {}", fmt_f64(inst.dur_limit));
    let _ = writeln!(s, "tw_beg = {}", fmt_f64_list(&inst.tw_beg, false));
    let _ = writeln!(s, "tw_end = {}", fmt_f64_list(&inst.tw_end, false));
    let _ = writeln!(s, "tw_dur = {}", fmt_f64_list(&inst.tw_dur, false));
    s
}

/// Hex SHA-256 of the canonical instance serialization; referenced by tour
/// files so a tour cannot silently drift from its instance.
pub fn instance_hash(inst: &ProblemInstance) -> String {
    let mut hasher = Sha256::new();
    hasher.update(write_instance(inst).as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{:02x}", b);
    }
    s
}

fn parse_kv(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CoreError::Parse(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        other => other
            .parse::<f64>()
            .map_err(|_| CoreError::Parse(format!("bad float `{other}`"))),
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| CoreError::Parse(format!("expected a list, got `{s}`")))?;
    let inner = inner.trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|item| parse_f64(item.trim())).collect()
}

fn parse_coords(s: &str) -> Result<Vec<[f64; 2]>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| CoreError::Parse(format!("expected a coord list, got `{s}`")))?;
    let mut coords = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let start = rest
            .find('[')
            .ok_or_else(|| CoreError::Parse("malformed coord list".into()))?;
        let end = rest[start..]
            .find(']')
            .ok_or_else(|| CoreError::Parse("unterminated coord pair".into()))?
            + start;
        let pair = parse_f64_list(&rest[start..=end])?;
        if pair.len() != 2 {
            return Err(CoreError::Parse("coord pair must have 2 entries".into()));
        }
        coords.push([pair[0], pair[1]]);
        rest = rest[end + 1..].trim_start_matches([',', ' ']);
    }
    Ok(coords)
}

fn require<'m>(map: &'m HashMap<String, String>, key: &str) -> Result<&'m str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| CoreError::Parse(format!("missing field `{key}`")))
}

pub fn read_instance(text: &str) -> Result<ProblemInstance> {
    let map = parse_kv(text)?;
    let version: u64 = require(&map, "version")?
        .parse()
        .map_err(|_| CoreError::Parse("bad version".into()))?;
    if version != INSTANCE_FORMAT_VERSION {
        return Err(CoreError::Parse(format!(
            "unsupported instance format version {version}"
        )));
    }
    let variant = VariantId::parse(require(&map, "variant")?)?;
    let n: usize = require(&map, "n")?
        .parse()
        .map_err(|_| CoreError::Parse("bad n".into()))?;
    let seed: u64 = require(&map, "seed")?
        .parse()
        .map_err(|_| CoreError::Parse("bad seed".into()))?;
    let inst = ProblemInstance {
        variant,
        n,
        seed,
        coords: parse_coords(require(&map, "coords")?)?,
        linehaul: parse_f64_list(require(&map, "linehaul")?)?,
        backhaul: parse_f64_list(require(&map, "backhaul")?)?,
        capacity: parse_f64(require(&map, "capacity")?)?,
        open: require(&map, "open")? == "1",
        dur_limit: parse_f64(require(&map, "dur_limit")?)?,
        tw_beg: parse_f64_list(require(&map, "tw_beg")?)?,
        tw_end: parse_f64_list(require(&map, "tw_end")?)?,
        tw_dur: parse_f64_list(require(&map, "tw_dur")?)?,
    };
    inst.validate()?;
    Ok(inst)
}

pub fn write_tour(tour: &Tour, instance_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version = {TOUR_FORMAT_VERSION}");
    let _ = writeln!(s, "instance_hash = {instance_hash}");
    let nodes: Vec<String> = tour.nodes.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "nodes = [{}]", nodes.join(", "));
    let _ = writeln!(s, "cost = {}", fmt_f64(tour.cost));
    s
}

pub fn read_tour(text: &str) -> Result<(Tour, String)> {
    let map = parse_kv(text)?;
    let version: u64 = require(&map, "version")?
        .parse()
        .map_err(|_| CoreError::Parse("bad version".into()))?;
    if version != TOUR_FORMAT_VERSION {
        return Err(CoreError::Parse(format!(
            "unsupported tour format version {version}"
        )));
    }
    let hash = require(&map, "instance_hash")?.to_string();
    let nodes: Vec<usize> = parse_f64_list(require(&map, "nodes")?)?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let cost = parse_f64(require(&map, "cost")?)?;
    Ok((Tour { nodes, cost }, hash))
}

/// One dataset entry: an instance file plus its variant tag.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub variant: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Parse(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
