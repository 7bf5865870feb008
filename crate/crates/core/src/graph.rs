//! Interaction-graph and relation-graph construction.

use crate::error::{DreamError, Result};
use crate::ingest::{Interaction, Modality};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor2D;

/// Symmetric-normalized user-item adjacency over M+N nodes (users stacked
/// above items). Each edge (u, i) contributes entries (u, M+i) and (M+i, u)
/// with weight 1/sqrt(deg(u) * deg(i)).
#[derive(Debug, Clone)]
pub struct NormalizedBipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub adjacency: SparseMatrix,
}

pub fn build_normalized_adjacency(
    train: &[Interaction],
    num_users: usize,
    num_items: usize,
) -> Result<NormalizedBipartiteGraph> {
    let mut user_deg = vec![0u32; num_users];
    let mut item_deg = vec![0u32; num_items];
    for e in train {
        if e.user as usize >= num_users || e.item as usize >= num_items {
            return Err(DreamError::Dimension {
                context: "interaction index".into(),
                expected: num_users.max(num_items),
                found: e.user.max(e.item) as usize,
            });
        }
        user_deg[e.user as usize] += 1;
        item_deg[e.item as usize] += 1;
    }
    let mut entries = Vec::with_capacity(train.len() * 2);
    for e in train {
        let du = user_deg[e.user as usize];
        let di = item_deg[e.item as usize];
        let w = 1.0 / ((du as f64 * di as f64).sqrt()) as f32;
        let u = e.user;
        let i = num_users as u32 + e.item;
        entries.push((u, i, w));
        entries.push((i, u, w));
    }
    let n = num_users + num_items;
    Ok(NormalizedBipartiteGraph {
        num_users,
        num_items,
        adjacency: SparseMatrix::new(n, n, entries)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphScope {
    ItemItem,
    UserUser,
}

/// Frozen top-k cosine-similarity graph over the rows of one modality's
/// feature matrix, symmetric-normalized by the row degrees of the binarized
/// directed kNN matrix.
#[derive(Debug, Clone)]
pub struct RelationGraph {
    pub modality: Modality,
    pub scope: GraphScope,
    pub k: usize,
    pub matrix: SparseMatrix,
}

/// Build a relation graph: cosine similarity between all row pairs, keep the
/// top-k per row (self excluded unless `self_loop`; ties broken by lower
/// index), binarize, then normalize S~ = D^{-1/2} S^ D^{-1/2} with D the row
/// degree of the binarized matrix. Zero-degree rows contribute zero weights.
pub fn build_relation_graph(
    features: &Tensor2D,
    modality: Modality,
    scope: GraphScope,
    k: usize,
    self_loop: bool,
) -> Result<RelationGraph> {
    if k == 0 {
        return Err(DreamError::Config("relation graph k must be >= 1".into()));
    }
    let n = features.rows;
    if n < 2 {
        return Err(DreamError::Config(format!(
            "cannot build a relation graph over {n} rows"
        )));
    }
    let norms: Vec<f64> = (0..n)
        .map(|r| {
            features
                .row(r)
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let zero_rows = norms.iter().filter(|&&v| v <= 0.0).count();
    if zero_rows > 0 {
        eprintln!(
            "warning: {zero_rows} all-zero feature rows get empty neighbor sets ({} {:?})",
            modality.name(),
            scope
        );
    }

    // Directed kNN adjacency (row -> its top-k neighbors).
    let keep = k.min(n - 1);
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut sims = vec![0.0f64; n];
    for i in 0..n {
        if norms[i] <= 0.0 {
            continue;
        }
        let row_i = features.row(i);
        for j in 0..n {
            if norms[j] <= 0.0 || j == i {
                sims[j] = f64::NEG_INFINITY;
                continue;
            }
            let mut acc = 0.0f64;
            let row_j = features.row(j);
            for t in 0..features.cols {
                acc += row_i[t] as f64 * row_j[t] as f64;
            }
            sims[j] = acc / (norms[i] * norms[j]);
        }
        // Zero-norm rows still rank (at -inf) below any finite similarity;
        // with all candidates at -inf nothing is kept for this row.
        let mut idx: Vec<u32> = (0..n as u32).filter(|&j| j as usize != i).collect();
        idx.sort_by(|&a, &b| {
            sims[b as usize]
                .partial_cmp(&sims[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let kept: Vec<u32> = idx
            .into_iter()
            .take(keep)
            .filter(|&j| sims[j as usize] > f64::NEG_INFINITY)
            .collect();
        neighbors[i] = kept;
        if self_loop {
            neighbors[i].push(i as u32);
        }
    }

    // Row degrees of the binarized directed matrix.
    let deg: Vec<usize> = neighbors.iter().map(|v| v.len()).collect();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut entries = Vec::new();
    for (i, ns) in neighbors.iter().enumerate() {
        for &j in ns {
            let w = inv_sqrt[i] * inv_sqrt[j as usize];
            entries.push((i as u32, j, w as f32));
        }
    }
    Ok(RelationGraph {
        modality,
        scope,
        k,
        matrix: SparseMatrix::new(n, n, entries)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inter(pairs: &[(u32, u32)]) -> Vec<Interaction> {
        pairs
            .iter()
            .map(|&(user, item)| Interaction { user, item })
            .collect()
    }

    #[test]
    fn adjacency_single_edge() {
        let g = build_normalized_adjacency(&inter(&[(0, 0)]), 1, 1).unwrap();
        assert_eq!(g.adjacency.entries, vec![(0, 1, 1.0), (1, 0, 1.0)]);
    }

    #[test]
    fn adjacency_hand_case() {
        let g = build_normalized_adjacency(&inter(&[(0, 0), (0, 1), (1, 1)]), 2, 2).unwrap();
        let d = g.adjacency.to_dense();
        let inv_sqrt2 = 1.0 / 2.0f32.sqrt();
        assert!((d.get(0, 2) - inv_sqrt2).abs() < 1e-6); // u0-i0: 1/sqrt(2*1)
        assert!((d.get(0, 3) - 0.5).abs() < 1e-6); // u0-i1: 1/sqrt(2*2)
        assert!((d.get(1, 3) - inv_sqrt2).abs() < 1e-6); // u1-i1: 1/sqrt(1*2)
        // Symmetry over all entries.
        for &(r, c, w) in &g.adjacency.entries {
            assert_eq!(d.get(c as usize, r as usize), w);
        }
    }

    #[test]
    fn adjacency_no_edges() {
        let g = build_normalized_adjacency(&[], 2, 3).unwrap();
        assert_eq!(g.adjacency.nnz(), 0);
    }

    /// Dense oracle: A from edges, D row sums, D^{-1/2} A D^{-1/2}.
    fn dense_normalized_oracle(edges: &[Interaction], m: usize, n: usize) -> Tensor2D {
        let size = m + n;
        let mut a = Tensor2D::zeros(size, size);
        for e in edges {
            a.set(e.user as usize, m + e.item as usize, 1.0);
            a.set(m + e.item as usize, e.user as usize, 1.0);
        }
        let mut dinv = Tensor2D::zeros(size, size);
        for r in 0..size {
            let deg: f32 = a.row(r).iter().sum();
            if deg > 0.0 {
                dinv.set(r, r, 1.0 / deg.sqrt());
            }
        }
        matmul(&matmul(&dinv, &a).unwrap(), &dinv).unwrap()
    }

    #[test]
    fn adjacency_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let m = rng.random_range(1..25);
            let n = rng.random_range(1..25);
            let mut set = std::collections::HashSet::new();
            for _ in 0..rng.random_range(0..80) {
                set.insert((rng.random_range(0..m as u32), rng.random_range(0..n as u32)));
            }
            let edges: Vec<Interaction> = set
                .into_iter()
                .map(|(user, item)| Interaction { user, item })
                .collect();
            let g = build_normalized_adjacency(&edges, m, n).unwrap();
            let dense = g.adjacency.to_dense();
            let oracle = dense_normalized_oracle(&edges, m, n);
            for idx in 0..dense.data.len() {
                assert!(
                    (dense.data[idx] - oracle.data[idx]).abs() <= 1e-6,
                    "mismatch at {idx}"
                );
            }
        }
    }

    #[test]
    fn relation_graph_mutual_nearest() {
        let f = Tensor2D::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let g = build_relation_graph(&f, Modality::Vision, GraphScope::ItemItem, 1, false).unwrap();
        assert_eq!(g.matrix.entries, vec![(0, 1, 1.0), (1, 0, 1.0)]);
    }

    #[test]
    fn relation_graph_hand_case() {
        let f = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let g = build_relation_graph(&f, Modality::Vision, GraphScope::ItemItem, 1, false).unwrap();
        // row0 -> row1, row1 -> row0, row2 -> row1 (cos(2,1) ~ 0.1104 > 0).
        let pattern: Vec<(u32, u32)> = g.matrix.entries.iter().map(|&(r, c, _)| (r, c)).collect();
        assert_eq!(pattern, vec![(0, 1), (1, 0), (2, 1)]);
        // All out-degrees are 1 so every kept weight is 1/sqrt(1*1).
        for &(_, _, w) in &g.matrix.entries {
            assert!((w - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relation_graph_orthogonal_tiebreak() {
        let f = Tensor2D::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let g = build_relation_graph(&f, Modality::Text, GraphScope::UserUser, 1, false).unwrap();
        let pattern: Vec<(u32, u32)> = g.matrix.entries.iter().map(|&(r, c, _)| (r, c)).collect();
        // Ties at similarity 0 resolve to the lowest other index.
        assert_eq!(pattern, vec![(0, 1), (1, 0), (2, 0)]);
    }

    #[test]
    fn relation_graph_rejects_tiny_input() {
        let f = Tensor2D::from_rows(&[vec![1.0]]);
        assert!(build_relation_graph(&f, Modality::Vision, GraphScope::ItemItem, 1, false).is_err());
        let f2 = Tensor2D::from_rows(&[vec![1.0], vec![2.0]]);
        assert!(build_relation_graph(&f2, Modality::Vision, GraphScope::ItemItem, 0, false).is_err());
    }

    /// Exhaustive-sort oracle for the full relation-graph pipeline.
    fn relation_oracle(f: &Tensor2D, k: usize, self_loop: bool) -> Tensor2D {
        let n = f.rows;
        let mut binary = Tensor2D::zeros(n, n);
        for i in 0..n {
            let ni = crate::tensor::norm(f.row(i));
            if ni <= 0.0 {
                continue;
            }
            let mut scored: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i && crate::tensor::norm(f.row(j)) > 0.0)
                .map(|j| {
                    let c = crate::tensor::cosine(f.row(i), f.row(j)) as f64;
                    (j, c)
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(j, _) in scored.iter().take(k.min(n - 1)) {
                binary.set(i, j, 1.0);
            }
            if self_loop {
                binary.set(i, i, 1.0);
            }
        }
        let mut dinv = Tensor2D::zeros(n, n);
        for r in 0..n {
            let deg: f32 = binary.row(r).iter().sum();
            if deg > 0.0 {
                dinv.set(r, r, 1.0 / deg.sqrt());
            }
        }
        matmul(&matmul(&dinv, &binary).unwrap(), &dinv).unwrap()
    }

    #[test]
    fn relation_graph_matches_oracle_on_random_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..30 {
            let n = rng.random_range(2..40);
            let d = rng.random_range(1..8);
            let k = rng.random_range(1..6);
            let self_loop = rng.random_range(0..2) == 1;
            let mut data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Occasionally zero out a row.
            if n > 2 && rng.random_range(0..3) == 0 {
                let z = rng.random_range(0..n);
                for t in 0..d {
                    data[z * d + t] = 0.0;
                }
            }
            let f = Tensor2D::from_data(n, d, data).unwrap();
            let g = build_relation_graph(&f, Modality::Vision, GraphScope::ItemItem, k, self_loop)
                .unwrap();
            let dense = g.matrix.to_dense();
            let oracle = relation_oracle(&f, k, self_loop);
            for idx in 0..dense.data.len() {
                assert!(
                    (dense.data[idx] - oracle.data[idx]).abs() <= 1e-6,
                    "trial {trial} idx {idx}: {} vs {}",
                    dense.data[idx],
                    oracle.data[idx]
                );
            }
        }
    }
}
