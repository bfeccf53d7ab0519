use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{Instance, Normalization, Point};
use crate::error::{Error, Result};

/// Coordinate rescaling applied while parsing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalize {
    /// Rescale into the unit square only when some coordinate lies outside it.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Header,
    Coords,
    Demands,
    Depot,
    Done,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn number<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| err(line, format!("non-numeric {what} `{tok}`")))
}

/// Parses TSPLIB-style CVRP text with [`Normalize::Auto`].
pub fn parse_instance_file(text: &str) -> Result<Instance> {
    parse_instance_file_with(text, Normalize::Auto)
}

pub fn parse_instance_file_with(text: &str, normalize: Normalize) -> Result<Instance> {
    let mut name = String::from("unnamed");
    let mut dimension: Option<(usize, usize)> = None;
    let mut capacity: Option<u32> = None;
    let mut coords: BTreeMap<usize, (Point, usize)> = BTreeMap::new();
    let mut demands: BTreeMap<usize, (u32, usize)> = BTreeMap::new();
    let mut depots: Vec<usize> = Vec::new();
    let mut seen = [false; 3];
    let mut section = Section::Header;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let keyword = trimmed.split_whitespace().next().unwrap_or("");
        match keyword {
            "NODE_COORD_SECTION" => {
                section = Section::Coords;
                seen[0] = true;
                continue;
            }
            "DEMAND_SECTION" => {
                section = Section::Demands;
                seen[1] = true;
                continue;
            }
            "DEPOT_SECTION" => {
                section = Section::Depot;
                seen[2] = true;
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
                let (key, value) = trimmed
                    .split_once(':')
                    .ok_or_else(|| err(line, format!("expected `KEY : value`, got `{trimmed}`")))?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "NAME" => name = value.to_string(),
                    "TYPE" if value != "CVRP" => {
                        return Err(err(line, format!("unsupported TYPE `{value}`")))
                    }
                    "EDGE_WEIGHT_TYPE" if value != "EUC_2D" => {
                        return Err(err(line, format!("unsupported EDGE_WEIGHT_TYPE `{value}`")))
                    }
                    "DIMENSION" => dimension = Some((number(value, line, "DIMENSION")?, line)),
                    "CAPACITY" => capacity = Some(number(value, line, "CAPACITY")?),
                    _ => {}
                }
            }
            Section::Coords => {
                let toks: Vec<&str> = trimmed.split_whitespace().collect();
                if toks.len() != 3 {
                    return Err(err(line, "coordinate line needs `<id> <x> <y>`"));
                }
                let id: usize = number(toks[0], line, "node id")?;
                let p = Point::new(number(toks[1], line, "x")?, number(toks[2], line, "y")?);
                if !p.x.is_finite() || !p.y.is_finite() {
                    return Err(err(line, "non-finite coordinate"));
                }
                if coords.insert(id, (p, line)).is_some() {
                    return Err(err(line, format!("duplicate node id {id}")));
                }
            }
            Section::Demands => {
                let toks: Vec<&str> = trimmed.split_whitespace().collect();
                if toks.len() != 2 {
                    return Err(err(line, "demand line needs `<id> <q>`"));
                }
                let id: usize = number(toks[0], line, "node id")?;
                let q: u32 = number(toks[1], line, "demand")?;
                if demands.insert(id, (q, line)).is_some() {
                    return Err(err(line, format!("duplicate demand for node {id}")));
                }
            }
            Section::Depot => {
                let id: i64 = number(trimmed, line, "depot id")?;
                if id == -1 {
                    section = Section::Done;
                } else if id <= 0 {
                    return Err(err(line, format!("invalid depot id {id}")));
                } else {
                    depots.push(id as usize);
                }
            }
            Section::Done => return Err(err(line, format!("unexpected content `{trimmed}`"))),
        }
    }

    let end = last_line.max(1);
    let names = ["NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"];
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(err(end, format!("missing {}", names[i])));
    }
    let (dimension, dim_line) = dimension.ok_or_else(|| err(end, "missing DIMENSION"))?;
    let capacity = capacity.ok_or_else(|| err(end, "missing CAPACITY"))?;
    if capacity == 0 {
        return Err(err(end, "CAPACITY must be positive"));
    }
    if coords.len() != dimension || demands.len() != dimension {
        return Err(err(
            dim_line,
            format!(
                "DIMENSION {dimension} but {} coordinates and {} demands",
                coords.len(),
                demands.len()
            ),
        ));
    }
    if dimension < 2 {
        return Err(err(dim_line, "need a depot and at least one customer"));
    }
    if let Some((id, _)) = coords.iter().find(|(id, _)| !demands.contains_key(id)) {
        return Err(err(end, format!("node {id} has coordinates but no demand")));
    }
    let depot_id = match depots.as_slice() {
        [d] => *d,
        [] => return Err(err(end, "DEPOT_SECTION lists no depot")),
        _ => return Err(err(end, "multiple depots are not supported")),
    };
    let (depot, _) = *coords
        .get(&depot_id)
        .ok_or_else(|| err(end, format!("depot {depot_id} has no coordinates")))?;
    let (depot_demand, depot_line) = demands[&depot_id];
    if depot_demand != 0 {
        return Err(err(depot_line, format!("depot demand must be 0, got {depot_demand}")));
    }

    let mut customers = Vec::with_capacity(dimension - 1);
    let mut qs = Vec::with_capacity(dimension - 1);
    for (&id, &(p, _)) in coords.iter().filter(|(id, _)| **id != depot_id) {
        let (q, qline) = demands[&id];
        if q == 0 || q > capacity {
            return Err(err(qline, format!("demand {q} of node {id} outside 1..={capacity}")));
        }
        customers.push(p);
        qs.push(q);
    }

    let mut inst = Instance {
        name,
        depot,
        customers,
        demands: qs,
        capacity,
        normalization: None,
    };
    let outside = std::iter::once(inst.depot)
        .chain(inst.customers.iter().copied())
        .any(|p| !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y));
    if normalize == Normalize::Always || (normalize == Normalize::Auto && outside) {
        normalize_coords(&mut inst);
    }
    Ok(inst)
}

fn normalize_coords(inst: &mut Instance) {
    let all: Vec<Point> = std::iter::once(inst.depot).chain(inst.customers.iter().copied()).collect();
    let min_x = all.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let min_y = all.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_x = all.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let max_y = all.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let mut scale = (max_x - min_x).max(max_y - min_y);
    if scale <= 0.0 {
        scale = 1.0;
    }
    let offset = Point::new(min_x, min_y);
    let map = |p: Point| Point::new((p.x - offset.x) / scale, (p.y - offset.y) / scale);
    inst.depot = map(inst.depot);
    inst.customers.iter_mut().for_each(|p| *p = map(*p));
    inst.normalization = Some(Normalization { offset, scale });
}

/// Emits the TSPLIB CVRP grammar with the depot as node 1.
pub fn write_instance_file(inst: &Instance) -> String {
    let mut s = String::new();
    let name: String = inst.name.split_whitespace().collect::<Vec<_>>().join("_");
    let name = if name.is_empty() { "unnamed".to_string() } else { name };
    writeln!(s, "NAME : {name}").unwrap();
    writeln!(s, "TYPE : CVRP").unwrap();
    writeln!(s, "DIMENSION : {}", inst.num_nodes()).unwrap();
    writeln!(s, "EDGE_WEIGHT_TYPE : EUC_2D").unwrap();
    writeln!(s, "CAPACITY : {}", inst.capacity).unwrap();
    writeln!(s, "NODE_COORD_SECTION").unwrap();
    for node in 0..inst.num_nodes() {
        let p = inst.coord(node);
        writeln!(s, "{} {:?} {:?}", node + 1, p.x, p.y).unwrap();
    }
    writeln!(s, "DEMAND_SECTION").unwrap();
    for node in 0..inst.num_nodes() {
        writeln!(s, "{} {}", node + 1, inst.demand(node)).unwrap();
    }
    s.push_str("DEPOT_SECTION\n1\n-1\nEOF\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::generate_instance;
    use proptest::prelude::*;

    const MINIMAL: &str = "NAME : tiny
TYPE : CVRP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 30
NODE_COORD_SECTION
1 0.5 0.5
2 0.1 0.2
3 0.9 0.4
DEMAND_SECTION
1 0
2 4
3 7
DEPOT_SECTION
1
-1
EOF
";

    #[test]
    fn parses_minimal_file() {
        let inst = parse_instance_file(MINIMAL).unwrap();
        assert_eq!(inst.name, "tiny");
        assert_eq!(inst.n(), 2);
        assert_eq!(inst.capacity, 30);
        assert_eq!(inst.depot, Point::new(0.5, 0.5));
        assert_eq!(inst.customers, vec![Point::new(0.1, 0.2), Point::new(0.9, 0.4)]);
        assert_eq!(inst.demands, vec![4, 7]);
        assert!(inst.normalization.is_none());
    }

    #[test]
    fn depot_demand_must_be_zero() {
        let text = MINIMAL.replace("1 0\n", "1 5\n");
        match parse_instance_file(&text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 11);
                assert!(msg.contains("depot demand"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn reports_line_of_bad_token() {
        let text = MINIMAL.replace("2 0.1 0.2", "2 0.1 abc");
        assert!(matches!(parse_instance_file(&text), Err(Error::Parse { line: 8, .. })));
    }

    #[test]
    fn missing_section_and_dimension_mismatch() {
        let no_demand: String = MINIMAL
            .lines()
            .filter(|l| !l.starts_with("DEMAND_SECTION"))
            .filter(|l| !matches!(*l, "1 0" | "2 4" | "3 7"))
            .map(|l| format!("{l}\n"))
            .collect();
        let e = parse_instance_file(&no_demand).unwrap_err();
        assert!(e.to_string().contains("DEMAND_SECTION"), "{e}");
        let wrong_dim = MINIMAL.replace("DIMENSION : 3", "DIMENSION : 4");
        assert!(matches!(parse_instance_file(&wrong_dim), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn writer_emits_header_fields() {
        let inst = Instance::new("one", Point::new(0.0, 0.0), vec![Point::new(0.0, 1.0)], vec![5], 30).unwrap();
        let text = write_instance_file(&inst);
        assert!(text.contains("DIMENSION : 2"));
        assert!(text.contains("CAPACITY : 30"));
    }

    #[test]
    fn cvrp20_has_21_coord_and_demand_lines() {
        let text = write_instance_file(&generate_instance(20, 30, 3).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        let start = lines.iter().position(|l| *l == "NODE_COORD_SECTION").unwrap();
        let mid = lines.iter().position(|l| *l == "DEMAND_SECTION").unwrap();
        let end = lines.iter().position(|l| *l == "DEPOT_SECTION").unwrap();
        assert_eq!(mid - start - 1, 21);
        assert_eq!(end - mid - 1, 21);
    }

    #[test]
    fn auto_normalization_rescales_cvrplib_coordinates() {
        let text = MINIMAL
            .replace("1 0.5 0.5", "1 50 50")
            .replace("2 0.1 0.2", "2 10 20")
            .replace("3 0.9 0.4", "3 90 40");
        let inst = parse_instance_file(&text).unwrap();
        let norm = inst.normalization.unwrap();
        assert_eq!(norm.scale, 80.0);
        assert_eq!(norm.offset, Point::new(10.0, 20.0));
        assert_eq!(inst.customers[0], Point::new(0.0, 0.0));
        assert_eq!(inst.customers[1], Point::new(1.0, 0.25));
        let raw = parse_instance_file_with(&text, Normalize::Never).unwrap();
        assert_eq!(raw.depot, Point::new(50.0, 50.0));
    }

    #[test]
    fn non_first_depot_is_moved_to_index_zero() {
        let text = MINIMAL
            .replace("1 0\n2 4", "1 4\n2 0")
            .replace("DEPOT_SECTION\n1\n", "DEPOT_SECTION\n2\n");
        let inst = parse_instance_file(&text).unwrap();
        assert_eq!(inst.depot, Point::new(0.1, 0.2));
        assert_eq!(inst.customers, vec![Point::new(0.5, 0.5), Point::new(0.9, 0.4)]);
        assert_eq!(inst.demands, vec![4, 7]);
    }

    #[test]
    fn roundtrip_on_100_random_instances() {
        for seed in 0..100 {
            let inst = generate_instance(1 + (seed as usize % 30), 30, seed).unwrap();
            let back = parse_instance_file(&write_instance_file(&inst)).unwrap();
            assert_eq!(back, inst);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_arbitrary(n in 1usize..40, cap in 9u32..60, seed in any::<u64>()) {
            let inst = generate_instance(n, cap, seed).unwrap();
            let once = parse_instance_file(&write_instance_file(&inst)).unwrap();
            prop_assert_eq!(&once, &inst);
            prop_assert_eq!(write_instance_file(&once), write_instance_file(&inst));
        }
    }
}
