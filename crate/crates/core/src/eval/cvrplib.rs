//! CVRPLIB/TSPLIB instance parsing (EUC_2D CVRP files).
//!
//! Coordinates are min-max scaled into the unit square with one shared
//! factor for both axes, so distances scale linearly; the factor and the
//! offsets are retained to report costs in the original units.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::vrp::instance::ProblemInstance;
use crate::vrp::variant::VariantId;

#[derive(Debug, Clone)]
pub struct CvrplibInstance {
    pub name: String,
    pub instance: ProblemInstance,
    /// Multiply unit-square costs by this to recover original units.
    pub scale: f64,
    pub offset: [f64; 2],
}

impl CvrplibInstance {
    pub fn original_cost(&self, unit_cost: f64) -> f64 {
        unit_cost * self.scale
    }
}

fn err(msg: impl Into<String>) -> CoreError {
    CoreError::Parse(msg.into())
}

pub fn parse_cvrplib(text: &str) -> Result<CvrplibInstance> {
    let mut header: HashMap<String, String> = HashMap::new();
    let mut coords: HashMap<usize, [f64; 2]> = HashMap::new();
    let mut demands: HashMap<usize, f64> = HashMap::new();
    let mut depot_ids: Vec<usize> = Vec::new();

    #[derive(PartialEq)]
    enum Section {
        Header,
        Coords,
        Demands,
        Depot,
        Done,
    }
    let mut section = Section::Header;

    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "NODE_COORD_SECTION" => {
                section = Section::Coords;
                continue;
            }
            "DEMAND_SECTION" => {
                section = Section::Demands;
                continue;
            }
            "DEPOT_SECTION" => {
                section = Section::Depot;
                continue;
            }
            "EOF" => {
                section = Section::Done;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Header => {
                if let Some((key, value)) = line.split_once(':') {
                    header.insert(key.trim().to_string(), value.trim().to_string());
                }
            }
            Section::Coords => {
                let mut it = line.split_whitespace();
                let id: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad NODE_COORD_SECTION line"))?;
                let x: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad x coordinate"))?;
                let y: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad y coordinate"))?;
                coords.insert(id, [x, y]);
            }
            Section::Demands => {
                let mut it = line.split_whitespace();
                let id: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad DEMAND_SECTION line"))?;
                let q: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad demand"))?;
                demands.insert(id, q);
            }
            Section::Depot => {
                let id: i64 = line
                    .parse()
                    .map_err(|_| err("bad DEPOT_SECTION line"))?;
                if id >= 0 {
                    depot_ids.push(id as usize);
                }
            }
            Section::Done => {}
        }
    }

    let name = header.get("NAME").cloned().unwrap_or_default();
    if let Some(t) = header.get("TYPE") {
        if t != "CVRP" {
            return Err(err(format!("unsupported TYPE `{t}`")));
        }
    }
    match header.get("EDGE_WEIGHT_TYPE") {
        Some(t) if t == "EUC_2D" => {}
        Some(t) => return Err(err(format!("unsupported EDGE_WEIGHT_TYPE `{t}`"))),
        None => return Err(err("missing EDGE_WEIGHT_TYPE")),
    }
    let dimension: usize = header
        .get("DIMENSION")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err("missing DIMENSION"))?;
    let capacity: f64 = header
        .get("CAPACITY")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err("missing CAPACITY"))?;
    if coords.len() != dimension {
        return Err(err(format!(
            "NODE_COORD_SECTION has {} entries, DIMENSION is {dimension}",
            coords.len()
        )));
    }
    if demands.len() != dimension {
        return Err(err(format!(
            "DEMAND_SECTION has {} entries, DIMENSION is {dimension}",
            demands.len()
        )));
    }
    let depot_id = *depot_ids.first().ok_or_else(|| err("missing DEPOT_SECTION"))?;

    // Depot first, customers in file order.
    let mut order = Vec::with_capacity(dimension);
    order.push(depot_id);
    for id in 1..=dimension {
        if id != depot_id {
            order.push(id);
        }
    }

    let raw: Vec<[f64; 2]> = order
        .iter()
        .map(|id| {
            coords
                .get(id)
                .copied()
                .ok_or_else(|| err(format!("node {id} missing coordinates")))
        })
        .collect::<Result<_>>()?;
    let min_x = raw.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let max_x = raw.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = raw.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    let max_y = raw.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);
    let scale = (max_x - min_x).max(max_y - min_y);
    let scale = if scale > 0.0 { scale } else { 1.0 };

    let unit_coords: Vec<[f64; 2]> = raw
        .iter()
        .map(|c| [(c[0] - min_x) / scale, (c[1] - min_y) / scale])
        .collect();

    let n = dimension - 1;
    let linehaul: Vec<f64> = order
        .iter()
        .map(|id| demands.get(id).copied().unwrap_or(0.0))
        .collect();
    if linehaul[0] != 0.0 {
        return Err(err("depot demand must be zero"));
    }

    let instance = ProblemInstance {
        variant: VariantId::CVRP,
        n,
        seed: 0,
        coords: unit_coords,
        linehaul,
        backhaul: vec![0.0; n + 1],
        capacity,
        open: false,
        dur_limit: f64::INFINITY,
        tw_beg: vec![0.0; n + 1],
        tw_end: vec![f64::INFINITY; n + 1],
        tw_dur: vec![0.0; n + 1],
    };
    instance.validate()?;
    Ok(CvrplibInstance {
        name,
        instance,
        scale,
        offset: [min_x, min_y],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vrp::tour::tour_cost_nodes;

    const SAMPLE: &str = "NAME : toy-n5-k2\n\
COMMENT : hand-built\n\
TYPE : CVRP\n\
DIMENSION : 5\n\
EDGE_WEIGHT_TYPE : EUC_2D\n\
CAPACITY : 10\n\
NODE_COORD_SECTION\n\
1 0 0\n\
2 10 0\n\
3 10 10\n\
4 0 10\n\
5 5 5\n\
DEMAND_SECTION\n\
1 0\n\
2 3\n\
3 4\n\
4 5\n\
5 2\n\
DEPOT_SECTION\n\
 1\n\
 -1\n\
EOF\n";

    #[test]
    fn parses_and_scales_into_unit_square() {
        let parsed = parse_cvrplib(SAMPLE).unwrap();
        assert_eq!(parsed.name, "toy-n5-k2");
        assert_eq!(parsed.instance.n, 4);
        assert_eq!(parsed.instance.capacity, 10.0);
        assert_eq!(parsed.scale, 10.0);
        for c in &parsed.instance.coords {
            assert!((0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]));
        }
        assert_eq!(parsed.instance.coords[0], [0.0, 0.0]);
    }

    #[test]
    fn scaled_costs_recover_original_units() {
        let parsed = parse_cvrplib(SAMPLE).unwrap();
        let nodes = vec![0, 1, 2, 0, 3, 4, 0];
        let unit = tour_cost_nodes(&parsed.instance, &nodes);
        // original-unit cost computed by hand on the raw coordinates
        let original = 10.0 + 10.0 + (200f64).sqrt() + 10.0 + (50f64).sqrt() + (50f64).sqrt();
        assert!((parsed.original_cost(unit) - original).abs() < 1e-9);
    }

    #[test]
    fn native_reserialization_preserves_costs() {
        use crate::vrp::files::{read_instance, write_instance};
        let parsed = parse_cvrplib(SAMPLE).unwrap();
        let native = write_instance(&parsed.instance);
        let reread = read_instance(&native).unwrap();
        let nodes = vec![0, 2, 4, 0, 1, 3, 0];
        let a = tour_cost_nodes(&parsed.instance, &nodes) * parsed.scale;
        let b = tour_cost_nodes(&reread, &nodes) * parsed.scale;
        assert!((a - b).abs() / a.abs() < 1e-6);
    }

    #[test]
    fn missing_demand_section_is_an_error() {
        let start = SAMPLE.find("DEMAND_SECTION").unwrap();
        let end = SAMPLE.find("DEPOT_SECTION").unwrap();
        let broken = format!("{}{}", &SAMPLE[..start], &SAMPLE[end..]);
        assert!(parse_cvrplib(&broken).is_err());
    }

    #[test]
    fn non_euclidean_files_are_rejected() {
        let broken = SAMPLE.replace("EUC_2D", "EXPLICIT");
        assert!(parse_cvrplib(&broken).is_err());
    }
}
