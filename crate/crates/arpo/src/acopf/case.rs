//! MATPOWER case files: the network model, the text parser, the serializer,
//! and the bundled fixtures.
//!
//! Loads, generation limits, and branch ratings are normalized to per-unit on
//! the system base at parse time; cost coefficients stay in their original
//! currency units per MW. Out-of-service generators and branches are dropped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("missing section mpc.{0}")]
    MissingSection(&'static str),
    #[error("malformed case text: {0}")]
    Malformed(String),
    #[error("unsupported generator cost: {0}")]
    UnsupportedGencost(String),
    #[error("expected exactly one reference bus, found {0}")]
    ReferenceCount(usize),
    #[error("bus {0} is marked isolated")]
    IsolatedBus(usize),
    #[error("generator on PQ bus {0}")]
    GeneratorOnPqBus(usize),
    #[error("PV bus {0} has no in-service generator")]
    PvBusWithoutGenerator(usize),
    #[error("more than one in-service generator on bus {0}")]
    DuplicateGeneratorBus(usize),
    #[error("branch references unknown bus {0}")]
    UnknownBus(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Pq,
    Pv,
    Ref,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// Original MATPOWER bus number.
    pub id: usize,
    pub bus_type: BusType,
    /// Active load, per-unit.
    pub p_load: f64,
    /// Reactive load, per-unit.
    pub q_load: f64,
    /// Shunt conductance, per-unit (MW at unit voltage over the base).
    pub shunt_g: f64,
    /// Shunt susceptance, per-unit.
    pub shunt_b: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// Internal index of the host bus.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Dispatch from the case file, per-unit.
    pub p_set: f64,
    /// Voltage magnitude setpoint from the case file.
    pub v_set: f64,
    /// Cost coefficients in ascending degree, original units per MW.
    pub cost: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Internal index of the from bus.
    pub from: usize,
    /// Internal index of the to bus.
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b: f64,
    /// Off-nominal tap ratio at the from end; 1 when the file holds 0.
    pub tap: f64,
    /// Phase shift, radians.
    pub shift: f64,
    /// Rating, per-unit; 0 means unlimited.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerNetwork {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    /// Internal index of the reference bus.
    pub reference: usize,
}

impl PowerNetwork {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Internal indices of buses hosting a generator, ascending.
    pub fn gen_buses(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.generators.iter().map(|g| g.bus).collect();
        out.sort_unstable();
        out
    }

    /// Generator buses without the reference, ascending.
    pub fn pv_buses(&self) -> Vec<usize> {
        self.gen_buses()
            .into_iter()
            .filter(|&k| k != self.reference)
            .collect()
    }

    /// Buses without a generator, ascending.
    pub fn pq_buses(&self) -> Vec<usize> {
        let gens = self.gen_buses();
        (0..self.n()).filter(|k| !gens.contains(k)).collect()
    }

    /// Buses with positive active load, ascending; these carry the
    /// uncertainty coordinates.
    pub fn zeta_buses(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&k| self.buses[k].p_load > 0.0)
            .collect()
    }

    pub fn generator_at(&self, bus: usize) -> Option<&Generator> {
        self.generators.iter().find(|g| g.bus == bus)
    }

    fn validate(&self) -> Result<(), CaseError> {
        let refs = self
            .buses
            .iter()
            .filter(|b| b.bus_type == BusType::Ref)
            .count();
        if refs != 1 {
            return Err(CaseError::ReferenceCount(refs));
        }
        let mut seen = vec![false; self.n()];
        for g in &self.generators {
            let bus = &self.buses[g.bus];
            if bus.bus_type == BusType::Pq {
                return Err(CaseError::GeneratorOnPqBus(bus.id));
            }
            if seen[g.bus] {
                return Err(CaseError::DuplicateGeneratorBus(bus.id));
            }
            seen[g.bus] = true;
        }
        for (k, bus) in self.buses.iter().enumerate() {
            if bus.bus_type == BusType::Pv && !seen[k] {
                return Err(CaseError::PvBusWithoutGenerator(bus.id));
            }
        }
        Ok(())
    }
}

/// Text of a bundled standard case, by name.
pub fn bundled_case(name: &str) -> Option<&'static str> {
    match name {
        "case6ww" => Some(include_str!("../../cases/case6ww.m")),
        "case9" => Some(include_str!("../../cases/case9.m")),
        "case14" => Some(include_str!("../../cases/case14.m")),
        "case30" => Some(include_str!("../../cases/case30.m")),
        "case39" => Some(include_str!("../../cases/case39.m")),
        "case57" => Some(include_str!("../../cases/case57.m")),
        "case118" => Some(include_str!("../../cases/case118.m")),
        _ => None,
    }
}

fn section<'a>(text: &'a str, name: &'static str) -> Option<&'a str> {
    let needle = format!("mpc.{name}");
    let mut start = 0;
    while let Some(pos) = text[start..].find(&needle) {
        let abs = start + pos + needle.len();
        let rest = text[abs..].trim_start();
        if let Some(body) = rest.strip_prefix('=') {
            return Some(body);
        }
        start = abs;
    }
    None
}

fn scalar(text: &str, name: &'static str) -> Result<f64, CaseError> {
    let body = section(text, name).ok_or(CaseError::MissingSection(name))?;
    let end = body.find(';').unwrap_or(body.len());
    body[..end]
        .trim()
        .parse()
        .map_err(|_| CaseError::Malformed(format!("mpc.{name} is not a number")))
}

fn matrix(text: &str, name: &'static str) -> Result<Vec<Vec<f64>>, CaseError> {
    let body = section(text, name).ok_or(CaseError::MissingSection(name))?;
    let open = body
        .find('[')
        .ok_or_else(|| CaseError::Malformed(format!("mpc.{name} has no opening bracket")))?;
    let close = body[open..]
        .find(']')
        .ok_or_else(|| CaseError::Malformed(format!("mpc.{name} has no closing bracket")))?;
    let inner = &body[open + 1..open + close];
    let mut rows = Vec::new();
    for chunk in inner.split(';') {
        if chunk.split_whitespace().next().is_none() {
            continue;
        }
        let fields: Result<Vec<f64>, _> = chunk.split_whitespace().map(str::parse).collect();
        match fields {
            Ok(f) => rows.push(f),
            Err(_) => {
                return Err(CaseError::Malformed(format!(
                    "mpc.{name} row {} is not numeric",
                    rows.len() + 1
                )))
            }
        }
    }
    Ok(rows)
}

fn need(row: &[f64], len: usize, name: &'static str, i: usize) -> Result<(), CaseError> {
    if row.len() < len {
        Err(CaseError::Malformed(format!(
            "mpc.{name} row {} has {} of {len} columns",
            i + 1,
            row.len()
        )))
    } else {
        Ok(())
    }
}

/// Parses MATPOWER case text into the per-unit network model.
pub fn parse_matpower(text: &str) -> Result<PowerNetwork, CaseError> {
    let clean: String = text
        .lines()
        .map(|l| l.split('%').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n");
    let base = scalar(&clean, "baseMVA")?;
    if !(base > 0.0) {
        return Err(CaseError::Malformed("baseMVA must be positive".into()));
    }

    let mut buses = Vec::new();
    let mut index_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut reference = None;
    for (i, row) in matrix(&clean, "bus")?.iter().enumerate() {
        need(row, 13, "bus", i)?;
        let id = row[0] as usize;
        let bus_type = match row[1] as i64 {
            1 => BusType::Pq,
            2 => BusType::Pv,
            3 => BusType::Ref,
            _ => return Err(CaseError::IsolatedBus(id)),
        };
        if bus_type == BusType::Ref {
            reference = Some(buses.len());
        }
        index_of.insert(id, buses.len());
        buses.push(Bus {
            id,
            bus_type,
            p_load: row[2] / base,
            q_load: row[3] / base,
            shunt_g: row[4] / base,
            shunt_b: row[5] / base,
            v_min: row[12],
            v_max: row[11],
        });
    }

    let gen_rows = matrix(&clean, "gen")?;
    let cost_rows = matrix(&clean, "gencost")?;
    if cost_rows.len() != gen_rows.len() {
        return Err(CaseError::UnsupportedGencost(format!(
            "{} cost rows for {} generators",
            cost_rows.len(),
            gen_rows.len()
        )));
    }
    let mut generators = Vec::new();
    for (i, (row, cost)) in gen_rows.iter().zip(&cost_rows).enumerate() {
        need(row, 10, "gen", i)?;
        need(cost, 4, "gencost", i)?;
        if row[7] <= 0.0 {
            continue;
        }
        if cost[0] as i64 != 2 {
            return Err(CaseError::UnsupportedGencost(
                "only polynomial cost model 2 is supported".into(),
            ));
        }
        let ncost = cost[3] as usize;
        if ncost > 3 {
            return Err(CaseError::UnsupportedGencost(
                "polynomial degree above 2 is not supported".into(),
            ));
        }
        need(cost, 4 + ncost, "gencost", i)?;
        // Coefficients are listed highest degree first.
        let mut c = [0.0; 3];
        for (d, &v) in cost[4..4 + ncost].iter().rev().enumerate() {
            c[d] = v;
        }
        let id = row[0] as usize;
        let bus = *index_of.get(&id).ok_or(CaseError::UnknownBus(id))?;
        generators.push(Generator {
            bus,
            p_min: row[9] / base,
            p_max: row[8] / base,
            q_min: row[4] / base,
            q_max: row[3] / base,
            p_set: row[1] / base,
            v_set: row[5],
            cost: c,
        });
    }

    let mut branches = Vec::new();
    for (i, row) in matrix(&clean, "branch")?.iter().enumerate() {
        need(row, 11, "branch", i)?;
        if row[10] <= 0.0 {
            continue;
        }
        let from_id = row[0] as usize;
        let to_id = row[1] as usize;
        branches.push(Branch {
            from: *index_of.get(&from_id).ok_or(CaseError::UnknownBus(from_id))?,
            to: *index_of.get(&to_id).ok_or(CaseError::UnknownBus(to_id))?,
            r: row[2],
            x: row[3],
            b: row[4],
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            shift: row[9].to_radians(),
            rate: row[5] / base,
        });
    }

    let net = PowerNetwork {
        base_mva: base,
        buses,
        generators,
        branches,
        reference: reference.ok_or(CaseError::ReferenceCount(0))?,
    };
    net.validate()?;
    Ok(net)
}

/// Serializes the network back to MATPOWER case text. Inverse of
/// [`parse_matpower`] up to the fields the model keeps.
pub fn to_matpower(net: &PowerNetwork) -> String {
    let b = net.base_mva;
    let mut out = String::new();
    out.push_str("function mpc = case\nmpc.version = '2';\n");
    let _ = writeln!(out, "mpc.baseMVA = {b};");
    out.push_str("\nmpc.bus = [\n");
    for bus in &net.buses {
        let t = match bus.bus_type {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Ref => 3,
        };
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t1\t0\t0\t1\t{}\t{};",
            bus.id,
            t,
            bus.p_load * b,
            bus.q_load * b,
            bus.shunt_g * b,
            bus.shunt_b * b,
            bus.v_max,
            bus.v_min
        );
    }
    out.push_str("];\n\nmpc.gen = [\n");
    for g in &net.generators {
        let _ = writeln!(
            out,
            "\t{}\t{}\t0\t{}\t{}\t{}\t{}\t1\t{}\t{};",
            net.buses[g.bus].id,
            g.p_set * b,
            g.q_max * b,
            g.q_min * b,
            g.v_set,
            b,
            g.p_max * b,
            g.p_min * b
        );
    }
    out.push_str("];\n\nmpc.branch = [\n");
    for br in &net.branches {
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t0\t0\t{}\t{}\t1\t-360\t360;",
            net.buses[br.from].id,
            net.buses[br.to].id,
            br.r,
            br.x,
            br.b,
            br.rate * b,
            if br.tap == 1.0 { 0.0 } else { br.tap },
            br.shift.to_degrees()
        );
    }
    out.push_str("];\n\nmpc.gencost = [\n");
    for g in &net.generators {
        let _ = writeln!(
            out,
            "\t2\t0\t0\t3\t{}\t{}\t{};",
            g.cost[2], g.cost[1], g.cost[0]
        );
    }
    out.push_str("];\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case9_parses_to_the_published_shape() {
        let net = parse_matpower(bundled_case("case9").unwrap()).unwrap();
        assert_eq!(net.n(), 9);
        assert_eq!(net.generators.len(), 3);
        assert_eq!(net.branches.len(), 9);
        assert_eq!(net.base_mva, 100.0);
        assert_eq!(net.reference, 0);
        assert_eq!(net.gen_buses(), vec![0, 1, 2]);
        assert_eq!(net.pv_buses(), vec![1, 2]);
        assert_eq!(net.zeta_buses(), vec![4, 6, 8]);
        assert_eq!(net.buses[4].p_load, 0.9);
        assert_eq!(net.buses[8].q_load, 0.5);
        assert_eq!(net.buses[3].v_min, 0.9);
        assert_eq!(net.buses[3].v_max, 1.1);
        let g = net.generator_at(0).unwrap();
        assert_eq!(g.cost, [150.0, 5.0, 0.11]);
        assert_eq!(g.p_max, 2.5);
        assert_eq!(g.p_min, 0.1);
        let last = &net.branches[8];
        assert_eq!((last.from, last.to), (8, 3));
        assert_eq!(last.rate, 2.5);
        assert_eq!(last.tap, 1.0);
    }

    #[test]
    fn case14_counts_match_the_published_file() {
        let net = parse_matpower(bundled_case("case14").unwrap()).unwrap();
        assert_eq!(net.n(), 14);
        assert_eq!(net.generators.len(), 5);
        assert_eq!(net.branches.len(), 20);
        assert_eq!(net.zeta_buses().len(), 11);
        // Shunt at bus 9 and an off-nominal tap on the 5-6 transformer.
        assert_eq!(net.buses[8].shunt_b, 0.19);
        assert!(net.branches.iter().any(|br| br.tap == 0.932));
    }

    #[test]
    fn all_bundled_fixtures_parse_and_validate() {
        for (name, n, g, br) in [
            ("case6ww", 6, 3, 11),
            ("case9", 9, 3, 9),
            ("case14", 14, 5, 20),
            ("case30", 30, 6, 41),
            ("case39", 39, 10, 46),
            ("case57", 57, 7, 80),
            ("case118", 118, 54, 186),
        ] {
            let net = parse_matpower(bundled_case(name).unwrap()).unwrap();
            assert_eq!(net.n(), n, "{name} buses");
            assert_eq!(net.generators.len(), g, "{name} generators");
            assert_eq!(net.branches.len(), br, "{name} branches");
        }
    }

    #[test]
    fn round_trip_is_idempotent() {
        for name in ["case6ww", "case9", "case14", "case30", "case39", "case57", "case118"] {
            let first = parse_matpower(bundled_case(name).unwrap()).unwrap();
            let second = parse_matpower(&to_matpower(&first)).unwrap();
            assert_eq!(first, second, "{name} round trip");
        }
    }

    #[test]
    fn missing_sections_are_reported() {
        assert!(matches!(
            parse_matpower("mpc.baseMVA = 100;"),
            Err(CaseError::MissingSection("bus"))
        ));
        assert!(matches!(
            parse_matpower(""),
            Err(CaseError::MissingSection("baseMVA"))
        ));
    }

    #[test]
    fn piecewise_costs_are_rejected() {
        let text = bundled_case("case9").unwrap().replace("2\t1500", "1\t1500");
        assert!(matches!(
            parse_matpower(&text),
            Err(CaseError::UnsupportedGencost(_))
        ));
    }

    #[test]
    fn out_of_service_rows_are_dropped() {
        let text = "function mpc = t\nmpc.baseMVA = 100;\n\
            mpc.bus = [\n1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;\n2 1 50 10 0 0 1 1 0 0 1 1.1 0.9;\n];\n\
            mpc.gen = [\n1 0 0 300 -300 1 100 1 250 10;\n2 0 0 300 -300 1 100 0 250 10;\n];\n\
            mpc.branch = [\n1 2 0.01 0.1 0 250 0 0 0 0 1 -360 360;\n1 2 0.01 0.1 0 250 0 0 0 0 0 -360 360;\n];\n\
            mpc.gencost = [\n2 0 0 3 0.1 5 150;\n2 0 0 3 0.1 5 150;\n];\n";
        let net = parse_matpower(text).unwrap();
        assert_eq!(net.generators.len(), 1);
        assert_eq!(net.branches.len(), 1);
    }

    #[test]
    fn comments_are_ignored() {
        let text = bundled_case("case9")
            .unwrap()
            .replace("mpc.gen = [", "% a remark\nmpc.gen = [ % trailing");
        assert_eq!(parse_matpower(&text).unwrap().generators.len(), 3);
    }
}
