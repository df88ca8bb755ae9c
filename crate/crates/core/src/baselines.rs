//! Reference solvers: an exact dynamic program for small tours plus the
//! classic construction and local-search heuristics.

use crate::error::{Error, Result};
use crate::instance::{ProblemInstance, ProblemKind};
use crate::solution::{route_length_unchecked, Solution};

/// Largest instance `held_karp` accepts.
pub const HELD_KARP_MAX_N: usize = 16;

const IMPROVE_EPS: f64 = 1e-12;

fn require_tour(instance: &ProblemInstance, what: &str) -> Result<()> {
    match instance.kind {
        ProblemKind::Tsp | ProblemKind::Atsp => Ok(()),
        ProblemKind::Cvrp => Err(Error::Unsupported(format!("{what} solves TSP/ATSP only"))),
    }
}

fn finish(instance: &ProblemInstance, route: Vec<usize>) -> Solution {
    let length = route_length_unchecked(instance, &route);
    Solution { route, length, feasible: true }
}

/// Exact minimum tour by dynamic programming over subsets. Node 0 is fixed
/// as the start; directed distances are honoured.
pub fn held_karp(instance: &ProblemInstance) -> Result<Solution> {
    require_tour(instance, "held_karp")?;
    let n = instance.n;
    if n > HELD_KARP_MAX_N {
        return Err(Error::TooLarge { n, limit: HELD_KARP_MAX_N });
    }
    if n <= 2 {
        return Ok(finish(instance, (0..n).collect()));
    }
    let d = &instance.dist;
    // Subsets over nodes 1..n, bit (j - 1) for node j.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let mut cost = vec![f64::INFINITY; (1 << m) * m];
    let mut parent = vec![u8::MAX; (1 << m) * m];
    for j in 0..m {
        cost[(1 << j) * m + j] = d.get(0, j + 1);
    }
    for set in 1..=full {
        for last in 0..m {
            if set & (1 << last) == 0 {
                continue;
            }
            let c = cost[set * m + last];
            if !c.is_finite() {
                continue;
            }
            let mut rest = full & !set;
            while rest != 0 {
                let next = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let ns = set | (1 << next);
                let cand = c + d.get(last + 1, next + 1);
                if cand < cost[ns * m + next] {
                    cost[ns * m + next] = cand;
                    parent[ns * m + next] = last as u8;
                }
            }
        }
    }
    let (mut last, mut best) = (0, f64::INFINITY);
    for j in 0..m {
        let c = cost[full * m + j] + d.get(j + 1, 0);
        if c < best {
            best = c;
            last = j;
        }
    }
    let mut rev = Vec::with_capacity(n);
    let mut set = full;
    loop {
        rev.push(last + 1);
        let p = parent[set * m + last];
        set &= !(1 << last);
        if p == u8::MAX {
            break;
        }
        last = p as usize;
    }
    rev.push(0);
    rev.reverse();
    Ok(finish(instance, rev))
}

/// Greedy closest-unvisited construction; ties go to the lower index.
pub fn nearest_neighbor(instance: &ProblemInstance, start: usize) -> Result<Solution> {
    require_tour(instance, "nearest_neighbor")?;
    let n = instance.n;
    if start >= n {
        return Err(Error::Argument(format!("start node {start} out of range")));
    }
    let mut visited = vec![false; n];
    let mut route = vec![start];
    visited[start] = true;
    let mut cur = start;
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !visited[j])
            .min_by(|&a, &b| instance.dist.get(cur, a).total_cmp(&instance.dist.get(cur, b)))
            .expect("an unvisited node remains");
        visited[next] = true;
        route.push(next);
        cur = next;
    }
    Ok(finish(instance, route))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertionRule {
    Nearest,
    Furthest,
}

/// Nearest or furthest insertion starting from node 0. The node to insert is
/// chosen by its distance to the partial tour; it goes where the (directed)
/// detour is cheapest.
pub fn insertion(instance: &ProblemInstance, rule: InsertionRule) -> Result<Solution> {
    require_tour(instance, "insertion")?;
    let n = instance.n;
    let d = &instance.dist;
    let sym_d = |a: usize, b: usize| d.get(a, b).min(d.get(b, a));
    let mut tour = vec![0usize];
    let mut in_tour = vec![false; n];
    in_tour[0] = true;
    // distance of each outside node to the nearest tour node
    let mut gap: Vec<f64> = (0..n).map(|v| sym_d(0, v)).collect();
    for _ in 1..n {
        let candidates = (0..n).filter(|&v| !in_tour[v]);
        let pick = match rule {
            InsertionRule::Nearest => candidates.min_by(|&a, &b| gap[a].total_cmp(&gap[b])),
            InsertionRule::Furthest => candidates.fold(None, |best: Option<usize>, v| match best {
                Some(b) if gap[b] >= gap[v] => Some(b),
                _ => Some(v),
            }),
        }
        .expect("an outside node remains");
        let len = tour.len();
        let (mut best_pos, mut best_cost) = (0, f64::INFINITY);
        for pos in 0..len {
            let (a, b) = (tour[pos], tour[(pos + 1) % len]);
            let extra = if len == 1 { d.get(a, pick) + d.get(pick, a) } else { d.get(a, pick) + d.get(pick, b) - d.get(a, b) };
            if extra < best_cost {
                best_cost = extra;
                best_pos = pos;
            }
        }
        tour.insert(best_pos + 1, pick);
        in_tour[pick] = true;
        for v in 0..n {
            if !in_tour[v] {
                gap[v] = gap[v].min(sym_d(pick, v));
            }
        }
    }
    Ok(finish(instance, tour))
}

/// Applies first-improvement 2-opt to a closed cycle in place. Scan order is
/// fixed: `i` ascending, then `j` ascending; the scan restarts after each move.
fn two_opt_cycle(dist: &crate::instance::DistMatrix, tour: &mut [usize]) {
    let n = tour.len();
    if n < 4 {
        return;
    }
    'outer: loop {
        for i in 0..n - 1 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (tour[i], tour[i + 1]);
                let (c, e) = (tour[j], tour[(j + 1) % n]);
                let delta = dist.get(a, c) + dist.get(b, e) - dist.get(a, b) - dist.get(c, e);
                if delta < -IMPROVE_EPS {
                    tour[i + 1..=j].reverse();
                    continue 'outer;
                }
            }
        }
        break;
    }
}

/// First-improvement 2-opt to a local optimum. Symmetric instances only.
pub fn two_opt(instance: &ProblemInstance, solution: &Solution) -> Result<Solution> {
    require_tour(instance, "two_opt")?;
    if !instance.kind.is_symmetric() {
        return Err(Error::Unsupported("two_opt requires a symmetric instance".into()));
    }
    crate::solution::check_feasible(instance, &solution.route)?;
    let mut tour = solution.route.clone();
    two_opt_cycle(&instance.dist, &mut tour);
    Ok(finish(instance, tour))
}

/// Nearest-feasible-customer construction with capacity-triggered depot
/// returns, followed by 2-opt inside every route.
pub fn cvrp_greedy_reference(instance: &ProblemInstance) -> Result<Solution> {
    if instance.kind != ProblemKind::Cvrp {
        return Err(Error::Unsupported("cvrp_greedy_reference solves CVRP only".into()));
    }
    let cap = instance.capacity.ok_or_else(|| Error::Data("CVRP instance without capacity".into()))?;
    let n = instance.n;
    let d = &instance.dist;
    let mut visited = vec![false; n];
    visited[0] = true;
    let mut routes: Vec<Vec<usize>> = Vec::new();
    let mut remaining = n - 1;
    while remaining > 0 {
        let mut route = vec![0];
        let mut load = cap;
        let mut cur = 0;
        loop {
            let next = (1..n)
                .filter(|&c| !visited[c] && instance.demand(c) <= load)
                .min_by(|&a, &b| d.get(cur, a).total_cmp(&d.get(cur, b)));
            let Some(c) = next else { break };
            visited[c] = true;
            load -= instance.demand(c);
            route.push(c);
            cur = c;
            remaining -= 1;
        }
        if route.len() == 1 {
            return Err(Error::Data("a customer demand exceeds vehicle capacity".into()));
        }
        two_opt_cycle(d, &mut route);
        // keep the depot first after the cycle was reordered
        let depot_at = route.iter().position(|&v| v == 0).expect("depot in route");
        route.rotate_left(depot_at);
        routes.push(route);
    }
    let mut full = Vec::with_capacity(n + routes.len());
    for r in routes {
        full.extend(r);
    }
    full.push(0);
    Solution::evaluate(instance, full)
}
