//! Routing instances and the synthetic instance generators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
    Atsp,
}

impl ProblemKind {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, ProblemKind::Atsp)
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
            ProblemKind::Atsp => "atsp",
        })
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            "atsp" => Ok(ProblemKind::Atsp),
            other => Err(Error::Argument(format!("unknown problem kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Explosion,
    Grid,
    Implosion,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::Uniform => "uniform",
            Distribution::Explosion => "explosion",
            Distribution::Grid => "grid",
            Distribution::Implosion => "implosion",
        })
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Distribution::Uniform),
            "explosion" => Ok(Distribution::Explosion),
            "grid" => Ok(Distribution::Grid),
            "implosion" => Ok(Distribution::Implosion),
            other => Err(Error::Argument(format!("unknown distribution `{other}`"))),
        }
    }
}

/// Radius of the disturbed disc for explosion/implosion.
pub const MUTATION_RADIUS: f64 = 0.3;
/// Contraction factor toward the centre for implosion.
pub const IMPLOSION_FACTOR: f64 = 0.5;
/// Half-width of the uniform jitter added to grid points.
pub const GRID_JITTER: f64 = 0.01;

/// Square `n x n` row-major distance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistMatrix {
    pub fn zeros(n: usize) -> Self {
        DistMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Argument(format!("distance row {i} has {} entries, expected {n}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(DistMatrix { n, data })
    }

    pub fn from_flat(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Argument(format!("distance data has {} entries, expected {}", data.len(), n * n)));
        }
        Ok(DistMatrix { n, data })
    }

    pub fn euclidean(coords: &[[f64; 2]]) -> Self {
        let n = coords.len();
        let mut m = DistMatrix::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                let d = (coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]);
                m.data[i * n + j] = d;
                m.data[j * n + i] = d;
            }
        }
        m
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Relabels nodes: entry `(perm[i], perm[j])` of the result equals `(i, j)` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut m = DistMatrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m.set(perm[i], perm[j], self.get(i, j));
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub kind: ProblemKind,
    /// Node count, including the depot for CVRP.
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<[f64; 2]>>,
    pub dist: DistMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demands: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
    pub seed: u64,
    /// Generator parameters or source-file information.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ProblemInstance {
    pub fn from_coords(kind: ProblemKind, coords: Vec<[f64; 2]>, seed: u64) -> Self {
        let dist = DistMatrix::euclidean(&coords);
        ProblemInstance { kind, n: coords.len(), coords: Some(coords), dist, demands: None, capacity: None, seed, meta: BTreeMap::new() }
    }

    pub fn from_matrix(kind: ProblemKind, dist: DistMatrix, seed: u64) -> Self {
        ProblemInstance { kind, n: dist.n(), coords: None, dist, demands: None, capacity: None, seed, meta: BTreeMap::new() }
    }

    pub fn with_demands(mut self, demands: Vec<u32>, capacity: u32) -> Self {
        self.demands = Some(demands);
        self.capacity = Some(capacity);
        self
    }

    /// Nodes a solution must visit exactly once (all nodes, or customers for CVRP).
    pub fn customer_count(&self) -> usize {
        match self.kind {
            ProblemKind::Cvrp => self.n - 1,
            _ => self.n,
        }
    }

    pub fn demand(&self, i: usize) -> u32 {
        self.demands.as_ref().map_or(0, |d| d[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if self.dist.n() != n {
            return Err(Error::Data(format!("distance matrix is {}x{}, node count is {n}", self.dist.n(), self.dist.n())));
        }
        for i in 0..n {
            if self.dist.get(i, i) != 0.0 {
                return Err(Error::Data(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..n {
                let d = self.dist.get(i, j);
                if !(d.is_finite() && d >= 0.0) {
                    return Err(Error::Data(format!("distance ({i},{j}) = {d} is not a finite nonnegative value")));
                }
            }
        }
        if let Some(c) = &self.coords {
            if c.len() != n {
                return Err(Error::Data(format!("{} coordinates for {n} nodes", c.len())));
            }
        }
        if self.kind.is_symmetric() && !self.dist.is_symmetric() {
            return Err(Error::Data(format!("{} instance has an asymmetric distance matrix", self.kind)));
        }
        if self.kind == ProblemKind::Cvrp {
            let (Some(d), Some(cap)) = (&self.demands, self.capacity) else {
                return Err(Error::Data("CVRP instance without demands and capacity".into()));
            };
            if d.len() != n {
                return Err(Error::Data(format!("{} demands for {n} nodes", d.len())));
            }
            if cap == 0 {
                return Err(Error::Data("capacity must be positive".into()));
            }
            if d[0] != 0 {
                return Err(Error::Data(format!("depot demand is {}, expected 0", d[0])));
            }
            if let Some((i, &q)) = d.iter().enumerate().find(|(_, &q)| q > cap) {
                return Err(Error::Data(format!("demand {q} of node {i} exceeds capacity {cap}")));
            }
            if n < 2 {
                return Err(Error::Data("CVRP instance needs at least one customer".into()));
            }
        }
        Ok(())
    }
}

/// Vehicle capacity for a CVRP instance with `customers` customers:
/// piecewise linear through (10, 20), (20, 30), (50, 40), (100, 50), rounded,
/// extended linearly outside that range and never below 10.
pub fn cvrp_capacity(customers: usize) -> u32 {
    const ANCHORS: [(f64, f64); 4] = [(10.0, 20.0), (20.0, 30.0), (50.0, 40.0), (100.0, 50.0)];
    let x = customers as f64;
    let seg = ANCHORS.windows(2).position(|w| x <= w[1].0).unwrap_or(ANCHORS.len() - 2);
    let ((x0, y0), (x1, y1)) = (ANCHORS[seg], ANCHORS[seg + 1]);
    let y = y0 + (x - x0) * (y1 - y0) / (x1 - x0);
    y.round().max(10.0) as u32
}

pub const MAX_DEMAND: u32 = 9;

fn sample_points(count: usize, distribution: Distribution, rng: &mut crate::rng::Rng, meta: &mut BTreeMap<String, serde_json::Value>) -> Vec<[f64; 2]> {
    let uniform = |rng: &mut crate::rng::Rng| -> Vec<[f64; 2]> { (0..count).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect() };
    match distribution {
        Distribution::Uniform => uniform(rng),
        Distribution::Explosion | Distribution::Implosion => {
            let mut pts = uniform(rng);
            let center = [rng.gen::<f64>(), rng.gen::<f64>()];
            for p in pts.iter_mut() {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let r = dx.hypot(dy);
                if r >= MUTATION_RADIUS || r == 0.0 {
                    continue;
                }
                let new_r = if distribution == Distribution::Explosion { MUTATION_RADIUS + r } else { IMPLOSION_FACTOR * r };
                p[0] = (center[0] + dx / r * new_r).clamp(0.0, 1.0);
                p[1] = (center[1] + dy / r * new_r).clamp(0.0, 1.0);
            }
            meta.insert("center".into(), serde_json::json!(center));
            meta.insert("radius".into(), serde_json::json!(MUTATION_RADIUS));
            if distribution == Distribution::Implosion {
                meta.insert("factor".into(), serde_json::json!(IMPLOSION_FACTOR));
            }
            pts
        }
        Distribution::Grid => {
            let side = (count as f64).sqrt().ceil() as usize;
            let cells = sample(rng, side * side, count).into_vec();
            meta.insert("grid_side".into(), serde_json::json!(side));
            meta.insert("jitter".into(), serde_json::json!(GRID_JITTER));
            cells
                .into_iter()
                .map(|c| {
                    let (gx, gy) = ((c % side) as f64 + 0.5, (c / side) as f64 + 0.5);
                    let jx = rng.gen_range(-GRID_JITTER..=GRID_JITTER);
                    let jy = rng.gen_range(-GRID_JITTER..=GRID_JITTER);
                    [(gx / side as f64 + jx).clamp(0.0, 1.0), (gy / side as f64 + jy).clamp(0.0, 1.0)]
                })
                .collect()
        }
    }
}

/// Generates a random instance.
///
/// `size` is the node count for TSP/ATSP and the customer count for CVRP
/// (which adds a depot at index 0).
pub fn generate_instance(kind: ProblemKind, size: usize, distribution: Distribution, seed: u64) -> Result<ProblemInstance> {
    match kind {
        ProblemKind::Atsp => {
            if distribution != Distribution::Uniform {
                return Err(Error::Config(format!("ATSP supports only the uniform distribution, got {distribution}")));
            }
            generate_atsp_instance(size, seed)
        }
        ProblemKind::Tsp => {
            if size < 3 {
                return Err(Error::Argument(format!("TSP needs at least 3 nodes, got {size}")));
            }
            let mut rng = seeded(seed);
            let mut meta = BTreeMap::new();
            let coords = sample_points(size, distribution, &mut rng, &mut meta);
            meta.insert("distribution".into(), serde_json::json!(distribution.to_string()));
            let mut inst = ProblemInstance::from_coords(kind, coords, seed);
            inst.meta = meta;
            Ok(inst)
        }
        ProblemKind::Cvrp => {
            if size < 2 {
                return Err(Error::Argument(format!("CVRP needs at least 2 customers, got {size}")));
            }
            let mut rng = seeded(seed);
            let mut meta = BTreeMap::new();
            let depot = [rng.gen::<f64>(), rng.gen::<f64>()];
            let mut coords = vec![depot];
            coords.extend(sample_points(size, distribution, &mut rng, &mut meta));
            let mut demands = vec![0];
            demands.extend((0..size).map(|_| rng.gen_range(1..=MAX_DEMAND)));
            meta.insert("distribution".into(), serde_json::json!(distribution.to_string()));
            let mut inst = ProblemInstance::from_coords(kind, coords, seed).with_demands(demands, cvrp_capacity(size));
            inst.meta = meta;
            Ok(inst)
        }
    }
}

/// Random asymmetric matrix: i.i.d. U[0,1) off-diagonal entries, then
/// closed under shortest paths so the triangle inequality holds.
pub fn generate_atsp_instance(n: usize, seed: u64) -> Result<ProblemInstance> {
    if n < 3 {
        return Err(Error::Argument(format!("ATSP needs at least 3 nodes, got {n}")));
    }
    let mut rng = seeded(seed);
    let mut m = DistMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m.set(i, j, rng.gen::<f64>());
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = m.get(i, k);
            for j in 0..n {
                let via = dik + m.get(k, j);
                if via < m.get(i, j) {
                    m.set(i, j, via);
                }
            }
        }
    }
    let mut inst = ProblemInstance::from_matrix(ProblemKind::Atsp, m, seed);
    inst.meta.insert("distribution".into(), serde_json::json!("uniform"));
    inst.meta.insert("triangle_closure".into(), serde_json::json!(true));
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsp_instance_is_symmetric_with_zero_diagonal() {
        let inst = generate_instance(ProblemKind::Tsp, 4, Distribution::Uniform, 3).unwrap();
        assert_eq!(inst.n, 4);
        assert!(inst.dist.is_symmetric());
        for i in 0..4 {
            assert_eq!(inst.dist.get(i, i), 0.0);
        }
        inst.validate().unwrap();
    }

    #[test]
    fn unit_square_diagonal_is_sqrt2() {
        let inst = ProblemInstance::from_coords(ProblemKind::Tsp, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], 0);
        assert!((inst.dist.get(0, 2) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cvrp20_follows_demand_convention() {
        for seed in 0..20 {
            let inst = generate_instance(ProblemKind::Cvrp, 20, Distribution::Uniform, seed).unwrap();
            assert_eq!(inst.n, 21);
            assert_eq!(inst.capacity, Some(30));
            let d = inst.demands.as_ref().unwrap();
            assert_eq!(d[0], 0);
            assert!(d[1..].iter().all(|&q| (1..=9).contains(&q)));
            inst.validate().unwrap();
        }
    }

    #[test]
    fn capacity_anchors_and_interpolation() {
        assert_eq!(cvrp_capacity(10), 20);
        assert_eq!(cvrp_capacity(20), 30);
        assert_eq!(cvrp_capacity(50), 40);
        assert_eq!(cvrp_capacity(100), 50);
        assert_eq!(cvrp_capacity(35), 35);
        assert_eq!(cvrp_capacity(5), 15);
        assert_eq!(cvrp_capacity(2), 12);
        assert_eq!(cvrp_capacity(200), 70);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        for dist in [Distribution::Uniform, Distribution::Explosion, Distribution::Grid, Distribution::Implosion] {
            let a = generate_instance(ProblemKind::Tsp, 30, dist, 11).unwrap();
            let b = generate_instance(ProblemKind::Tsp, 30, dist, 11).unwrap();
            let c = generate_instance(ProblemKind::Tsp, 30, dist, 12).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.coords, c.coords);
            assert!(a.coords.unwrap().iter().all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
        }
    }

    #[test]
    fn explosion_empties_the_disc_and_implosion_contracts_it() {
        let inst = generate_instance(ProblemKind::Tsp, 200, Distribution::Explosion, 5).unwrap();
        let c: [f64; 2] = serde_json::from_value(inst.meta["center"].clone()).unwrap();
        for p in inst.coords.unwrap() {
            let r = (p[0] - c[0]).hypot(p[1] - c[1]);
            // clamping to the unit square can only pull a pushed point inward along one axis
            assert!(r >= MUTATION_RADIUS - 1e-12 || p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0);
        }
        let inst = generate_instance(ProblemKind::Tsp, 200, Distribution::Implosion, 5).unwrap();
        let c: [f64; 2] = serde_json::from_value(inst.meta["center"].clone()).unwrap();
        for p in inst.coords.unwrap() {
            let r = (p[0] - c[0]).hypot(p[1] - c[1]);
            assert!(!(IMPLOSION_FACTOR * MUTATION_RADIUS..MUTATION_RADIUS).contains(&r));
        }
    }

    #[test]
    fn grid_points_occupy_distinct_cells() {
        let inst = generate_instance(ProblemKind::Tsp, 10, Distribution::Grid, 1).unwrap();
        let mut cells: Vec<(i64, i64)> = inst.coords.unwrap().iter().map(|p| ((p[0] * 4.0).floor() as i64, (p[1] * 4.0).floor() as i64)).collect();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 10);
    }

    #[test]
    fn atsp_is_asymmetric_for_many_seeds() {
        for seed in 0..100 {
            let inst = generate_atsp_instance(3, seed).unwrap();
            inst.validate().unwrap();
            assert!((0..3).all(|i| inst.dist.get(i, i) == 0.0));
            let asym = (0..3).any(|i| (0..3).any(|j| inst.dist.get(i, j) != inst.dist.get(j, i)));
            assert!(asym, "seed {seed} produced a symmetric matrix");
        }
    }

    #[test]
    fn atsp_matrix_satisfies_triangle_inequality() {
        let inst = generate_atsp_instance(12, 4).unwrap();
        let d = &inst.dist;
        for i in 0..12 {
            for j in 0..12 {
                for k in 0..12 {
                    assert!(d.get(i, j) <= d.get(i, k) + d.get(k, j) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn unsupported_combinations_and_small_sizes_are_rejected() {
        assert!(matches!(generate_instance(ProblemKind::Atsp, 10, Distribution::Grid, 0), Err(Error::Config(_))));
        assert!(generate_instance(ProblemKind::Tsp, 2, Distribution::Uniform, 0).is_err());
        assert!(generate_instance(ProblemKind::Cvrp, 1, Distribution::Uniform, 0).is_err());
        assert!(generate_atsp_instance(2, 0).is_err());
    }

    #[test]
    fn validate_catches_bad_cvrp_data() {
        let base = ProblemInstance::from_coords(ProblemKind::Cvrp, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0);
        assert!(base.clone().validate().is_err());
        assert!(base.clone().with_demands(vec![1, 2, 3], 10).validate().is_err());
        assert!(base.clone().with_demands(vec![0, 2, 11], 10).validate().is_err());
        base.with_demands(vec![0, 2, 10], 10).validate().unwrap();
    }
}
