//! TSPLIB / CVRPLIB readers, the `efr-inst-1` instance container, and
//! JSON-lines report output.
//!
//! Coordinates are shifted to the origin and divided by the larger of the two
//! axis extents, so aspect ratio is kept and every point lands in [0,1]².
//! Distances stay real-valued: TSPLIB's per-edge integer rounding is not
//! applied, so lengths times [`LibraryMeta::scale`] differ slightly from
//! published optima. [`library_length`] recomputes a route under the
//! library's own rounding rule for comparison with those optima.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{DistMatrix, ProblemInstance, ProblemKind};
use crate::report::SolveReport;
use crate::solution::check_feasible;

pub const INSTANCE_FORMAT: &str = "efr-inst-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeWeightType {
    #[serde(rename = "EUC_2D")]
    Euc2d,
    #[serde(rename = "CEIL_2D")]
    Ceil2d,
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "EXPLICIT")]
    Explicit,
}

impl fmt::Display for EdgeWeightType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeWeightType::Euc2d => "EUC_2D",
            EdgeWeightType::Ceil2d => "CEIL_2D",
            EdgeWeightType::Att => "ATT",
            EdgeWeightType::Explicit => "EXPLICIT",
        })
    }
}

impl FromStr for EdgeWeightType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EUC_2D" => Ok(EdgeWeightType::Euc2d),
            "CEIL_2D" => Ok(EdgeWeightType::Ceil2d),
            "ATT" => Ok(EdgeWeightType::Att),
            "EXPLICIT" => Ok(EdgeWeightType::Explicit),
            other => Err(Error::Unsupported(format!("EDGE_WEIGHT_TYPE {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryMeta {
    pub name: String,
    pub declared_dimension: usize,
    pub edge_weight_type: EdgeWeightType,
    /// From an OPTIMAL_VALUE / BEST_KNOWN header or an "Optimal value: x" comment.
    pub declared_optimum: Option<f64>,
    /// Raw units per normalized unit; 1 for explicit matrices.
    pub scale: f64,
    /// Raw coordinate subtracted before scaling.
    pub offset: [f64; 2],
    /// File coordinates in instance order (depot first for CVRP).
    pub raw_coords: Option<Vec<[f64; 2]>>,
    /// File node id of each instance index.
    pub node_ids: Vec<usize>,
}

impl LibraryMeta {
    /// Converts a normalized length back to file units.
    pub fn raw_length(&self, normalized: f64) -> f64 {
        normalized * self.scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MatrixFormat {
    Full,
    UpperRow,
    LowerRow,
    UpperDiagRow,
    LowerDiagRow,
}

impl MatrixFormat {
    fn parse(s: &str, line: usize) -> Result<Self> {
        Ok(match s {
            "FULL_MATRIX" => MatrixFormat::Full,
            "UPPER_ROW" => MatrixFormat::UpperRow,
            "LOWER_ROW" => MatrixFormat::LowerRow,
            "UPPER_DIAG_ROW" => MatrixFormat::UpperDiagRow,
            "LOWER_DIAG_ROW" => MatrixFormat::LowerDiagRow,
            other => return Err(Error::Unsupported(format!("EDGE_WEIGHT_FORMAT {other} (line {line})"))),
        })
    }

    /// (row, col) of each listed entry, in file order.
    fn cells(self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..n {
            let cols: Box<dyn Iterator<Item = usize>> = match self {
                MatrixFormat::Full => Box::new(0..n),
                MatrixFormat::UpperRow => Box::new(i + 1..n),
                MatrixFormat::LowerRow => Box::new(0..i),
                MatrixFormat::UpperDiagRow => Box::new(i..n),
                MatrixFormat::LowerDiagRow => Box::new(0..=i),
            };
            out.extend(cols.map(|j| (i, j)));
        }
        out
    }
}

#[derive(Default)]
struct Parsed {
    name: Option<String>,
    kind: Option<String>,
    comment: Option<String>,
    dimension: Option<usize>,
    weight_type: Option<EdgeWeightType>,
    weight_format: Option<(MatrixFormat, usize)>,
    capacity: Option<u32>,
    optimum: Option<f64>,
    coords: Option<Vec<[f64; 2]>>,
    weights: Option<Vec<f64>>,
    demands: Option<Vec<u32>>,
    depots: Option<Vec<usize>>,
}

struct Lines<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty()).collect();
        Lines { lines, pos: 0 }
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    fn last_line(&self) -> usize {
        self.lines.get(self.pos.saturating_sub(1)).map_or(0, |l| l.0)
    }

    /// Next data line, or `None` at end of text or at the next keyword.
    fn data(&mut self) -> Option<(usize, &'a str)> {
        let (no, l) = self.peek()?;
        if l.starts_with(|c: char| c.is_ascii_alphabetic()) {
            return None;
        }
        self.pos += 1;
        Some((no, l))
    }
}

fn need_dimension(p: &Parsed, line: usize, section: &str) -> Result<usize> {
    p.dimension.ok_or_else(|| Error::parse(line, format!("{section} before DIMENSION")))
}

fn num<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::parse(line, format!("invalid {what} `{tok}`")))
}

/// Reads `dim` lines of `id value...`, returning values by node index.
fn id_rows<'a>(lines: &mut Lines<'a>, dim: usize, section: &str, width: usize) -> Result<Vec<Vec<&'a str>>> {
    let mut rows: Vec<Option<Vec<&str>>> = vec![None; dim];
    for _ in 0..dim {
        let Some((no, l)) = lines.data() else {
            let missing = rows.iter().position(Option::is_none).map_or(0, |i| i + 1);
            return Err(Error::parse(lines.last_line(), format!("{section} ends before node {missing}")));
        };
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < width + 1 {
            return Err(Error::parse(no, format!("{section} entry needs an id and {width} value(s)")));
        }
        let id: usize = num(toks[0], no, "node id")?;
        if id == 0 || id > dim {
            return Err(Error::parse(no, format!("node id {id} outside 1..={dim}")));
        }
        if rows[id - 1].replace(toks[1..=width].to_vec()).is_some() {
            return Err(Error::parse(no, format!("node {id} listed twice in {section}")));
        }
    }
    Ok(rows.into_iter().map(|r| r.expect("all ids filled")).collect())
}

fn optimum_from_comment(comment: &str) -> Option<f64> {
    let lower = comment.to_ascii_lowercase();
    for key in ["optimal value:", "best value:", "optimum:"] {
        if let Some(at) = lower.find(key) {
            let rest = &comment[at + key.len()..];
            let tok: String = rest.trim_start().chars().take_while(|c| c.is_ascii_digit() || *c == '.').collect();
            if let Ok(v) = tok.parse() {
                return Some(v);
            }
        }
    }
    None
}

fn parse_text(text: &str) -> Result<Parsed> {
    let mut p = Parsed::default();
    let mut lines = Lines::new(text);
    while let Some((no, line)) = lines.peek() {
        lines.pos += 1;
        let (key, value) = match line.split_once(':') {
            Some((k, v)) => (k.trim().to_ascii_uppercase(), v.trim()),
            None => (line.to_ascii_uppercase(), ""),
        };
        match key.as_str() {
            "NAME" => p.name = Some(value.to_string()),
            "TYPE" => p.kind = Some(value.to_ascii_uppercase()),
            "COMMENT" => {
                p.optimum = p.optimum.or_else(|| optimum_from_comment(value));
                p.comment = Some(value.to_string());
            }
            "DIMENSION" => p.dimension = Some(num(value, no, "DIMENSION")?),
            "EDGE_WEIGHT_TYPE" => p.weight_type = Some(value.to_ascii_uppercase().parse()?),
            "EDGE_WEIGHT_FORMAT" => p.weight_format = Some((MatrixFormat::parse(&value.to_ascii_uppercase(), no)?, no)),
            "CAPACITY" => p.capacity = Some(num(value, no, "CAPACITY")?),
            "OPTIMAL_VALUE" | "BEST_KNOWN" => p.optimum = Some(num(value, no, &key)?),
            "NODE_COORD_TYPE" => {
                if !value.eq_ignore_ascii_case("TWOD_COORDS") {
                    return Err(Error::Unsupported(format!("NODE_COORD_TYPE {value}")));
                }
            }
            "DISPLAY_DATA_TYPE" | "VEHICLES" => {}
            "NODE_COORD_SECTION" => {
                let dim = need_dimension(&p, no, &key)?;
                let rows = id_rows(&mut lines, dim, "NODE_COORD_SECTION", 2)?;
                let mut coords = Vec::with_capacity(dim);
                for (i, r) in rows.iter().enumerate() {
                    let x: f64 = num(r[0], no, &format!("x coordinate of node {}", i + 1))?;
                    let y: f64 = num(r[1], no, &format!("y coordinate of node {}", i + 1))?;
                    if !(x.is_finite() && y.is_finite()) {
                        return Err(Error::parse(no, format!("non-finite coordinate for node {}", i + 1)));
                    }
                    coords.push([x, y]);
                }
                p.coords = Some(coords);
            }
            "DISPLAY_DATA_SECTION" => {
                let dim = need_dimension(&p, no, &key)?;
                id_rows(&mut lines, dim, "DISPLAY_DATA_SECTION", 2)?;
            }
            "EDGE_WEIGHT_SECTION" => {
                let dim = need_dimension(&p, no, &key)?;
                let format = p.weight_format.map_or(MatrixFormat::Full, |f| f.0);
                let want = format.cells(dim).len();
                let mut vals = Vec::with_capacity(want);
                while vals.len() < want {
                    let Some((ln, l)) = lines.data() else {
                        return Err(Error::parse(lines.last_line(), format!("EDGE_WEIGHT_SECTION has {} of {want} entries", vals.len())));
                    };
                    for tok in l.split_whitespace() {
                        vals.push(num::<f64>(tok, ln, "edge weight")?);
                    }
                }
                if vals.len() != want {
                    return Err(Error::parse(lines.last_line(), format!("EDGE_WEIGHT_SECTION has {} entries, expected {want}", vals.len())));
                }
                p.weights = Some(vals);
            }
            "DEMAND_SECTION" => {
                let dim = need_dimension(&p, no, &key)?;
                let rows = id_rows(&mut lines, dim, "DEMAND_SECTION", 1)?;
                p.demands = Some(rows.iter().map(|r| num(r[0], no, "demand")).collect::<Result<_>>()?);
            }
            "DEPOT_SECTION" => {
                let mut depots = Vec::new();
                loop {
                    let Some((ln, l)) = lines.data() else {
                        return Err(Error::parse(lines.last_line(), "DEPOT_SECTION is not terminated by -1"));
                    };
                    let v: i64 = num(l, ln, "depot id")?;
                    if v == -1 {
                        break;
                    }
                    if v < 1 {
                        return Err(Error::parse(ln, format!("invalid depot id {v}")));
                    }
                    depots.push(v as usize);
                }
                p.depots = Some(depots);
            }
            "EOF" => break,
            "TOUR_SECTION" | "FIXED_EDGES_SECTION" | "EDGE_DATA_SECTION" | "EDGE_DATA_FORMAT" => {
                return Err(Error::Unsupported(format!("{key} (line {no})")));
            }
            _ => return Err(Error::parse(no, format!("unknown keyword `{key}`"))),
        }
    }
    Ok(p)
}

fn att_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / 10f64.sqrt()
}

/// Builds dist and normalized coords; returns (coords, dist, scale, offset).
fn geometry(p: &Parsed, order: &[usize]) -> Result<(Option<Vec<[f64; 2]>>, DistMatrix, f64, [f64; 2], Option<Vec<[f64; 2]>>)> {
    let wt = p.weight_type.ok_or_else(|| Error::parse(0, "missing EDGE_WEIGHT_TYPE"))?;
    let n = order.len();
    if wt == EdgeWeightType::Explicit {
        let vals = p.weights.as_ref().ok_or_else(|| Error::parse(0, "EXPLICIT weights without EDGE_WEIGHT_SECTION"))?;
        let format = p.weight_format.map_or(MatrixFormat::Full, |f| f.0);
        let mut file = DistMatrix::zeros(n);
        for (&(i, j), &v) in format.cells(n).iter().zip(vals) {
            file.set(i, j, v);
            if format != MatrixFormat::Full {
                file.set(j, i, v);
            }
        }
        for i in 0..n {
            file.set(i, i, 0.0);
        }
        return Ok((None, file.permuted(order), 1.0, [0.0, 0.0], None));
    }
    let raw = p.coords.as_ref().ok_or_else(|| Error::parse(0, format!("{wt} instance without NODE_COORD_SECTION")))?;
    let raw: Vec<[f64; 2]> = order.iter().map(|&i| raw[i]).collect();
    let min = |k: usize| raw.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
    let max = |k: usize| raw.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
    let offset = [min(0), min(1)];
    let extent = (max(0) - offset[0]).max(max(1) - offset[1]);
    let scale = if extent > 0.0 { extent } else { 1.0 };
    let coords: Vec<[f64; 2]> = raw.iter().map(|c| [(c[0] - offset[0]) / scale, (c[1] - offset[1]) / scale]).collect();
    let dist = match wt {
        EdgeWeightType::Att => {
            let mut m = DistMatrix::zeros(n);
            for i in 0..n {
                for j in i + 1..n {
                    let d = att_distance(raw[i], raw[j]) / scale;
                    m.set(i, j, d);
                    m.set(j, i, d);
                }
            }
            m
        }
        _ => DistMatrix::euclidean(&coords),
    };
    Ok((Some(coords), dist, scale, offset, Some(raw)))
}

fn build(p: Parsed, kind: ProblemKind, order: Vec<usize>) -> Result<(ProblemInstance, LibraryMeta)> {
    let dim = p.dimension.ok_or_else(|| Error::parse(0, "missing DIMENSION"))?;
    let (coords, dist, scale, offset, raw) = geometry(&p, &order)?;
    let wt = p.weight_type.expect("checked in geometry");
    let name = p.name.clone().unwrap_or_default();
    let mut inst = ProblemInstance::from_matrix(kind, dist, 0);
    inst.coords = coords;
    let node_ids: Vec<usize> = order.iter().map(|i| i + 1).collect();
    inst.meta.insert("name".into(), serde_json::json!(name));
    inst.meta.insert("source_format".into(), serde_json::json!(if kind == ProblemKind::Cvrp { "cvrplib" } else { "tsplib" }));
    inst.meta.insert("edge_weight_type".into(), serde_json::json!(wt.to_string()));
    inst.meta.insert("scale".into(), serde_json::json!(scale));
    inst.meta.insert("offset".into(), serde_json::json!(offset));
    inst.meta.insert("distance_rounding".into(), serde_json::json!("none"));
    if let Some(opt) = p.optimum {
        inst.meta.insert("declared_optimum".into(), serde_json::json!(opt));
    }
    if node_ids.iter().enumerate().any(|(i, &id)| id != i + 1) {
        inst.meta.insert("node_ids".into(), serde_json::json!(node_ids));
    }
    let meta = LibraryMeta { name, declared_dimension: dim, edge_weight_type: wt, declared_optimum: p.optimum, scale, offset, raw_coords: raw, node_ids };
    Ok((inst, meta))
}

/// Parses a TSPLIB95 `TSP` or `ATSP` file.
pub fn parse_tsplib(text: &str) -> Result<(ProblemInstance, LibraryMeta)> {
    let p = parse_text(text)?;
    let kind = match p.kind.as_deref() {
        Some("TSP") | None => ProblemKind::Tsp,
        Some("ATSP") => ProblemKind::Atsp,
        Some(other) => return Err(Error::Unsupported(format!("TYPE {other} in a TSPLIB tour problem"))),
    };
    let dim = p.dimension.ok_or_else(|| Error::parse(0, "missing DIMENSION"))?;
    if dim < 3 {
        return Err(Error::Data(format!("DIMENSION {dim} is too small for a tour")));
    }
    let (inst, meta) = build(p, kind, (0..dim).collect())?;
    inst.validate()?;
    Ok((inst, meta))
}

/// Parses a CVRPLIB file. The depot is moved to index 0.
pub fn parse_cvrplib(text: &str) -> Result<(ProblemInstance, LibraryMeta)> {
    let p = parse_text(text)?;
    if let Some(k) = p.kind.as_deref() {
        if k != "CVRP" {
            return Err(Error::Unsupported(format!("TYPE {k} in a CVRPLIB file")));
        }
    }
    let dim = p.dimension.ok_or_else(|| Error::parse(0, "missing DIMENSION"))?;
    let capacity = p.capacity.ok_or_else(|| Error::parse(0, "missing CAPACITY"))?;
    let demands = p.demands.clone().ok_or_else(|| Error::parse(0, "missing DEMAND_SECTION"))?;
    let depot = match p.depots.as_deref() {
        None | Some([]) => 1,
        Some([d]) if *d <= dim => *d,
        Some([d]) => return Err(Error::parse(0, format!("depot {d} outside 1..={dim}"))),
        Some(many) => return Err(Error::Unsupported(format!("{} depots", many.len()))),
    };
    if demands[depot - 1] != 0 {
        return Err(Error::parse(0, format!("depot node {depot} has demand {}, expected 0", demands[depot - 1])));
    }
    let order: Vec<usize> = std::iter::once(depot - 1).chain((0..dim).filter(|&i| i != depot - 1)).collect();
    let ordered: Vec<u32> = order.iter().map(|&i| demands[i]).collect();
    let (inst, meta) = build(p, ProblemKind::Cvrp, order)?;
    let inst = inst.with_demands(ordered, capacity);
    inst.validate()?;
    Ok((inst, meta))
}

fn nint(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Length of `route` under the library's integer distance convention
/// (nint for EUC_2D, ceiling for CEIL_2D, pseudo-Euclidean for ATT).
/// EXPLICIT weights are summed as given.
pub fn library_length(instance: &ProblemInstance, meta: &LibraryMeta, route: &[usize]) -> Result<f64> {
    check_feasible(instance, route)?;
    let edge = |a: usize, b: usize| -> f64 {
        let Some(raw) = &meta.raw_coords else {
            return instance.dist.get(a, b);
        };
        let (p, q) = (raw[a], raw[b]);
        match meta.edge_weight_type {
            EdgeWeightType::Euc2d => nint((p[0] - q[0]).hypot(p[1] - q[1])),
            EdgeWeightType::Ceil2d => (p[0] - q[0]).hypot(p[1] - q[1]).ceil(),
            EdgeWeightType::Att => {
                let r = att_distance(p, q);
                let t = nint(r);
                if t < r {
                    t + 1.0
                } else {
                    t
                }
            }
            EdgeWeightType::Explicit => instance.dist.get(a, b),
        }
    };
    let mut total: f64 = route.windows(2).map(|w| edge(w[0], w[1])).sum();
    if instance.kind != ProblemKind::Cvrp {
        total += edge(route[route.len() - 1], route[0]);
    }
    Ok(total)
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    instances: Vec<ProblemInstance>,
}

pub fn instances_to_string(instances: &[ProblemInstance]) -> String {
    let c = Container { format: INSTANCE_FORMAT.into(), instances: instances.to_vec() };
    serde_json::to_string(&c).expect("instances serialize")
}

pub fn instances_from_str(text: &str) -> Result<Vec<ProblemInstance>> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    match v.get("format").and_then(|f| f.as_str()) {
        Some(INSTANCE_FORMAT) => {}
        Some(other) => return Err(Error::Incompatible(format!("instance container version {other}, expected {INSTANCE_FORMAT}"))),
        None => return Err(Error::Data("instance container has no format tag".into())),
    }
    let c: Container = serde_json::from_value(v).map_err(|e| Error::Data(format!("malformed instance container: {e}")))?;
    for inst in &c.instances {
        inst.validate()?;
    }
    Ok(c.instances)
}

/// Writes an `efr-inst-1` container.
pub fn write_instances(path: &Path, instances: &[ProblemInstance]) -> Result<()> {
    std::fs::write(path, instances_to_string(instances)).map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: &Path) -> Result<Vec<ProblemInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    instances_from_str(&text)
}

/// Loads instances by extension: `.vrp` as CVRPLIB, `.tsp`/`.atsp` as
/// TSPLIB, anything else as an `efr-inst-1` container.
pub fn load_instances(path: &Path) -> Result<Vec<ProblemInstance>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let read = || std::fs::read_to_string(path).map_err(|e| Error::io(path, e));
    match ext.as_str() {
        "vrp" => Ok(vec![parse_cvrplib(&read()?)?.0]),
        "tsp" | "atsp" => Ok(vec![parse_tsplib(&read()?)?.0]),
        _ => read_instances(path),
    }
}

/// Appends `report` to `path` as one JSON line.
pub fn write_report(report: &SolveReport, path: &Path) -> Result<()> {
    let mut line = serde_json::to_string(report).expect("report serializes");
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}
