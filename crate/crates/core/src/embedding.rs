//! Dense row-major embedding matrices and their snapshot formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Node embeddings, users in rows `[0, N)` and items in rows `[N, N+M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dims: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dims,
            data: vec![0.0; rows * dims],
        }
    }

    pub fn from_vec(rows: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dims {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{dims} matrix",
                data.len()
            )));
        }
        Ok(EmbeddingMatrix { rows, dims, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(EmbeddingMatrix {
            rows: rows.len(),
            dims,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dims..(r + 1) * self.dims]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dims..(r + 1) * self.dims]
    }

    pub fn same_shape(&self, other: &EmbeddingMatrix) -> bool {
        self.rows == other.rows && self.dims == other.dims
    }

    fn check_shape(&self, other: &EmbeddingMatrix) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.dims, other.rows, other.dims
            )))
        }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &EmbeddingMatrix) -> Result<()> {
        self.check_shape(x)?;
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Returns `self + alpha * x`.
    pub fn added(&self, alpha: f64, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let mut out = self.clone();
        out.axpy(alpha, x)?;
        Ok(out)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &EmbeddingMatrix) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &EmbeddingMatrix) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Text snapshot: a `rows dims` header, then one row per line. Values use
    /// the shortest representation that parses back to the same `f64`.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.rows, self.dims)?;
        for r in 0..self.rows {
            let mut first = true;
            for v in self.row(r) {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                write!(w, "{v}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: "<embedding text>".into(),
            reason,
        };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))??;
        let mut hdr = header.split_whitespace().map(str::parse::<usize>);
        let (rows, dims) = match (hdr.next(), hdr.next(), hdr.next()) {
            (Some(Ok(r)), Some(Ok(d)), None) => (r, d),
            _ => return Err(bad(format!("bad header `{header}`"))),
        };
        let mut data = Vec::with_capacity(rows * dims);
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| bad(format!("row {idx}: bad value `{tok}`")))?,
                );
            }
            if data.len() - before != dims {
                return Err(bad(format!("row {idx}: expected {dims} values")));
            }
        }
        Self::from_vec(rows, dims, data)
    }

    /// Binary snapshot: rows and dims as little-endian u64, then the values
    /// as little-endian f64, row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.dims as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let dims = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * dims);
        for _ in 0..rows * dims {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Self::from_vec(rows, dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        if is_binary_path(path) {
            self.write_binary(w)
        } else {
            self.write_text(w)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        if is_binary_path(path) {
            Self::read_binary(r)
        } else {
            Self::read_text(r)
        }
    }
}

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

/// I.i.d. `N(0, std^2)` entries from a seeded ChaCha stream.
pub fn init_embeddings(n_rows: usize, dims: usize, std: f64, seed: u64) -> Result<EmbeddingMatrix> {
    if dims == 0 || !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "init_embeddings needs dims >= 1 and std > 0 (got dims={dims}, std={std})"
        )));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n_rows * dims).map(|_| normal.sample(&mut rng)).collect();
    EmbeddingMatrix::from_vec(n_rows, dims, data)
}
