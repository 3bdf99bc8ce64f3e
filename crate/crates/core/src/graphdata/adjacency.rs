use super::KgDataset;
use crate::tensor::{CsrMatrix, Element};

/// Symmetrically normalized adjacency `D^{-1/2}(A+I)D^{-1/2}` over the
/// unified index space. `A` is the undirected union of train interactions
/// and KG triples with relation types collapsed; every edge has weight 1.
pub fn build_adjacency<T: Element>(ds: &KgDataset) -> CsrMatrix<T> {
    let edges = ds
        .train
        .iter()
        .map(|&(u, i)| (ds.user_node(u), ds.item_node(i)))
        .chain(
            ds.triples
                .iter()
                .map(|t| (ds.entity_node(t.head), ds.entity_node(t.tail))),
        );
    build_adjacency_from_edges(ds.num_nodes(), edges)
}

/// Normalized adjacency of an undirected graph on `n` nodes with self-loops
/// added. Edge order and multiplicity do not affect the result.
pub fn build_adjacency_from_edges<T: Element>(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
) -> CsrMatrix<T> {
    let mut nbrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for (a, b) in edges {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    for row in &mut nbrs {
        row.sort_unstable();
        row.dedup();
    }
    let deg: Vec<f64> = nbrs.iter().map(|r| r.len() as f64).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let nnz = nbrs.iter().map(Vec::len).sum();
    let mut col_idx = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    for (i, row) in nbrs.iter().enumerate() {
        for &j in row {
            col_idx.push(j);
            values.push(T::from_f64(1.0 / (deg[i] * deg[j]).sqrt()));
        }
        row_ptr.push(col_idx.len());
    }
    CsrMatrix::new(n, n, row_ptr, col_idx, values).expect("adjacency rows are canonical")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::{synth_generate, SynthSpec};

    #[test]
    fn two_nodes_one_edge() {
        let a = build_adjacency_from_edges::<f64>(2, [(0, 1)]);
        assert_eq!(a.densify().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn isolated_node_keeps_self_loop() {
        let a = build_adjacency_from_edges::<f64>(3, [(0, 1)]);
        assert_eq!(a.row(2), (&[2usize][..], &[1.0][..]));
    }

    #[test]
    fn edge_order_and_duplicates_do_not_matter() {
        let e = [(0, 1), (2, 3), (1, 2), (4, 0)];
        let a = build_adjacency_from_edges::<f32>(5, e);
        let mut rev: Vec<_> = e.iter().rev().map(|&(x, y)| (y, x)).collect();
        rev.push((1, 0));
        let b = build_adjacency_from_edges::<f32>(5, rev);
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_adjacency_reconstructs_a_plus_i() {
        let ds = synth_generate(&SynthSpec::small()).unwrap();
        let a = build_adjacency::<f64>(&ds);
        assert!(a.is_symmetric());
        let n = a.rows();
        let deg: Vec<f64> = (0..n).map(|r| a.row(r).0.len() as f64).collect();
        let mut worst = 0.0f64;
        for r in 0..n {
            let (cols, vals) = a.row(r);
            assert!(cols.contains(&r));
            let err: f64 = cols
                .iter()
                .zip(vals)
                .map(|(&c, &v)| (deg[r].sqrt() * v * deg[c].sqrt() - 1.0).abs())
                .sum();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-12, "{worst}");
    }
}
