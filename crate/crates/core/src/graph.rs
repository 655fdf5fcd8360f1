//! Symmetric-normalized bipartite adjacency in CSR form and the sparse x dense
//! product used for propagation.

use std::io::Write;

use rayon::prelude::*;

use crate::data::SplitDataset;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

// Below this many output values spmm stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Normalized adjacency over `N + M` nodes: users are rows `[0, N)`, items
/// are rows `[N, N+M)`. Entry `(u, N+i)` is `1/sqrt(deg(u) deg(i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdjacency {
    n_users: usize,
    n_items: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdjacencyOptions {
    /// Keep nodes without train edges as empty rows instead of failing.
    pub allow_isolated: bool,
}

impl SparseAdjacency {
    /// Builds the normalized adjacency from (user, item) edges. Repeated
    /// edges are merged.
    pub fn from_edges(
        n_users: usize,
        n_items: usize,
        edges: &[(u32, u32)],
        opts: AdjacencyOptions,
    ) -> Result<Self> {
        let n = n_users + n_items;
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(u, i) in edges {
            if u as usize >= n_users || i as usize >= n_items {
                return Err(Error::OutOfRange(format!("edge ({u}, {i})")));
            }
            adj[u as usize].push(n_users as u32 + i);
            adj[n_users + i as usize].push(u);
        }
        for nbrs in adj.iter_mut() {
            nbrs.sort_unstable();
            nbrs.dedup();
        }
        if !opts.allow_isolated {
            if let Some(node) = adj.iter().position(Vec::is_empty) {
                return Err(if node < n_users {
                    Error::IsolatedNode {
                        kind: "user",
                        index: node,
                    }
                } else {
                    Error::IsolatedNode {
                        kind: "item",
                        index: node - n_users,
                    }
                });
            }
        }
        let nnz = adj.iter().map(Vec::len).sum();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0);
        for nbrs in adj.iter() {
            for &c in nbrs {
                col_indices.push(c);
                values.push(1.0 / ((nbrs.len() * adj[c as usize].len()) as f64).sqrt());
            }
            row_offsets.push(col_indices.len());
        }
        Ok(SparseAdjacency {
            n_users,
            n_items,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// A matrix with the right shape and no entries.
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        SparseAdjacency {
            n_users,
            n_items,
            row_offsets: vec![0; n_users + n_items + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`, ascending by column.
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&(c as u32)).map_or(0.0, |k| vals[k])
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_nodes();
        let mut out = vec![vec![0.0; n]; n];
        for (r, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c as usize] = v;
            }
        }
        out
    }

    /// Coordinate dump, one `row col value` line per stored entry.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        for r in 0..self.n_nodes() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{r} {c} {v}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Normalized adjacency over the train partition only.
pub fn build_adjacency(ds: &SplitDataset) -> Result<SparseAdjacency> {
    build_adjacency_with(ds, AdjacencyOptions::default())
}

pub fn build_adjacency_with(ds: &SplitDataset, opts: AdjacencyOptions) -> Result<SparseAdjacency> {
    SparseAdjacency::from_edges(ds.n_users(), ds.n_items(), &ds.train_pairs(), opts)
}

/// `out = A * e`, each output row accumulated in ascending column order.
pub fn spmm_into(a: &SparseAdjacency, e: &EmbeddingMatrix, out: &mut EmbeddingMatrix) -> Result<()> {
    if a.n_nodes() != e.rows() || !out.same_shape(e) {
        return Err(Error::DimensionMismatch(format!(
            "adjacency has {} nodes, input {}x{}, output {}x{}",
            a.n_nodes(),
            e.rows(),
            e.dims(),
            out.rows(),
            out.dims()
        )));
    }
    let dims = e.dims();
    if dims == 0 {
        return Ok(());
    }
    let kernel = |(r, dst): (usize, &mut [f64])| {
        dst.fill(0.0);
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (d, s) in dst.iter_mut().zip(e.row(c as usize)) {
                *d += v * s;
            }
        }
    };
    let buf = out.as_mut_slice();
    if buf.len() >= PAR_THRESHOLD {
        buf.par_chunks_mut(dims).enumerate().for_each(kernel);
    } else {
        buf.chunks_mut(dims).enumerate().for_each(kernel);
    }
    Ok(())
}

pub fn spmm(a: &SparseAdjacency, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = EmbeddingMatrix::zeros(e.rows(), e.dims());
    spmm_into(a, e, &mut out)?;
    Ok(out)
}
