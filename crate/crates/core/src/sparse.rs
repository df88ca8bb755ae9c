//! k-nearest-neighbour sparsification feeding the graph encoder.

use crate::error::{Error, Result};
use crate::instance::ProblemInstance;

pub const CODE_NONE: u8 = 0;
pub const CODE_NEIGHBOR: u8 = 1;
pub const CODE_SELF: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    pub n: usize,
    pub k: usize,
    /// Row-major `n x n` adjacency codes: 2 on the diagonal, 1 for the `k`
    /// nearest neighbours of row `i`, 0 elsewhere. Not necessarily symmetric.
    pub adj_code: Vec<u8>,
    /// Row-major copy of the distance matrix.
    pub edge_weight: Vec<f64>,
}

impl SparseGraph {
    pub fn code(&self, i: usize, j: usize) -> u8 {
        self.adj_code[i * self.n + j]
    }

    /// Nonzero-code edges `(i, j)` in row-major order. Self-loops included.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n * (self.k + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                if self.code(i, j) != CODE_NONE {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.code(i, j) == CODE_NEIGHBOR)
    }
}

/// Marks the `k` closest other nodes of each row; ties go to the lower index.
pub fn knn_sparsify(instance: &ProblemInstance, k: usize) -> Result<SparseGraph> {
    let n = instance.n;
    if k == 0 || k + 1 > n {
        return Err(Error::Argument(format!("k = {k} outside 1..={}", n.saturating_sub(1))));
    }
    let mut adj_code = vec![CODE_NONE; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = instance.dist.row(i);
        // stable sort keeps index order among equal distances
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        for &j in &order[..k] {
            adj_code[i * n + j] = CODE_NEIGHBOR;
        }
        adj_code[i * n + i] = CODE_SELF;
    }
    Ok(SparseGraph { n, k, adj_code, edge_weight: instance.dist.as_slice().to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_instance, Distribution, ProblemKind};

    fn collinear() -> ProblemInstance {
        ProblemInstance::from_coords(ProblemKind::Tsp, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], 0)
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let g = knn_sparsify(&collinear(), 1).unwrap();
        // brute force: node 1 is at distance 1 from both 0 and 2
        let inst = collinear();
        let best = (0..4).filter(|&j| j != 1).map(|j| inst.dist.get(1, j)).fold(f64::INFINITY, f64::min);
        let first_best = (0..4).find(|&j| j != 1 && inst.dist.get(1, j) == best).unwrap();
        assert_eq!(first_best, 0);
        assert_eq!(g.neighbors(1).collect::<Vec<_>>(), vec![0]);
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![1]);
        assert_eq!(g.neighbors(3).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn full_k_marks_every_pair() {
        let inst = generate_instance(ProblemKind::Tsp, 7, Distribution::Uniform, 2).unwrap();
        let g = knn_sparsify(&inst, 6).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(g.code(i, j), if i == j { CODE_SELF } else { CODE_NEIGHBOR });
            }
        }
        assert_eq!(g.edges().len(), 49);
    }

    #[test]
    fn rows_have_exactly_k_neighbors_and_self_code() {
        let inst = generate_instance(ProblemKind::Tsp, 25, Distribution::Uniform, 9).unwrap();
        let g = knn_sparsify(&inst, 5).unwrap();
        for i in 0..25 {
            assert_eq!(g.code(i, i), CODE_SELF);
            assert_eq!(g.neighbors(i).count(), 5);
            let worst_in = g.neighbors(i).map(|j| inst.dist.get(i, j)).fold(0.0, f64::max);
            let best_out = (0..25).filter(|&j| j != i && g.code(i, j) == CODE_NONE).map(|j| inst.dist.get(i, j)).fold(f64::INFINITY, f64::min);
            assert!(worst_in <= best_out);
        }
    }

    #[test]
    fn rejects_k_out_of_range() {
        let inst = collinear();
        assert!(knn_sparsify(&inst, 0).is_err());
        assert!(knn_sparsify(&inst, 4).is_err());
        assert!(knn_sparsify(&inst, 3).is_ok());
    }
}
