//! Dense row-major matrices, small vector helpers and the `MAT0` binary
//! matrix format shared by all persisted models.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = self * x  (rows x cols) * (cols) -> (rows)
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    /// y = self^T * x  (cols) <- (rows)
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, row) in self.data.chunks_exact(self.cols).enumerate() {
            let xr = x[r];
            if xr != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += xr * w;
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Solves the symmetric positive-definite system `a * x = b` in place via
/// Cholesky factorization. `a` is k x k row-major and is overwritten with
/// its factor; `b` is overwritten with the solution.
pub fn cholesky_solve(a: &mut [f64], b: &mut [f64]) -> Result<()> {
    let k = b.len();
    assert_eq!(a.len(), k * k);
    // factor: a = L L^T, L stored in the lower triangle
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Training(format!(
                "matrix not positive definite at pivot {j} (d = {d})"
            )));
        }
        let l = d.sqrt();
        a[j * k + j] = l;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / l;
        }
    }
    // forward substitution L y = b
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= a[i * k + p] * b[p];
        }
        b[i] = s / a[i * k + i];
    }
    // back substitution L^T x = y
    for i in (0..k).rev() {
        let mut s = b[i];
        for p in (i + 1)..k {
            s -= a[p * k + i] * b[p];
        }
        b[i] = s / a[i * k + i];
    }
    Ok(())
}

/// FNV-1a 64-bit: a stable cheap hash used for content fingerprints and
/// per-pair RNG seeds. Not a general-purpose hash map hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const MAT0_MAGIC: &[u8; 4] = b"MAT0";

/// Writes a matrix as `MAT0`: magic, u32 LE rows, u32 LE cols, row-major
/// little-endian f32 entries.
pub fn write_mat0(path: &Path, m: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAT0_MAGIC).map_err(io)?;
    w.write_all(&(m.rows as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.cols as u32).to_le_bytes()).map_err(io)?;
    for &v in &m.data {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_mat0(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAT0_MAGIC {
        return Err(Error::parse(path, 0, "bad MAT0 magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4).map_err(io)?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut b4).map_err(io)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    Ok(Matrix { rows, cols, data })
}

/// Id-keyed embedding rows. Insertion order is preserved so that
/// persistence is deterministic.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Matrix,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Matrix) -> Self {
        assert_eq!(ids.len(), vectors.rows());
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        EmbeddingTable {
            ids,
            index,
            vectors,
        }
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingTable::new(Vec::new(), Matrix::zeros(0, dim))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.vectors.row(i)))
    }

    /// Persists as `<stem>.ids` (one id per line) plus `<stem>.mat`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let ids_path = dir.join(format!("{stem}.ids"));
        let mut out = String::new();
        for id in &self.ids {
            out.push_str(id);
            out.push('\n');
        }
        std::fs::write(&ids_path, out).map_err(|e| Error::io(&ids_path, e))?;
        write_mat0(&dir.join(format!("{stem}.mat")), &self.vectors)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let ids_path = dir.join(format!("{stem}.ids"));
        let text = std::fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids: Vec<String> = text.lines().map(str::to_owned).collect();
        let vectors = read_mat0(&dir.join(format!("{stem}.mat")))?;
        if ids.len() != vectors.rows() {
            return Err(Error::Dimension(format!(
                "{stem}: {} ids vs {} matrix rows",
                ids.len(),
                vectors.rows()
            )));
        }
        Ok(EmbeddingTable::new(ids, vectors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_matches_known_solution() {
        // A = [[4,1],[1,3]], b = [1,2] -> x = [1/11, 7/11]
        let mut a = vec![4.0, 1.0, 1.0, 3.0];
        let mut b = vec![1.0, 2.0];
        cholesky_solve(&mut a, &mut b).unwrap();
        assert!((b[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((b[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        let mut b = vec![1.0, 1.0];
        assert!(cholesky_solve(&mut a, &mut b).is_err());
    }

    #[test]
    fn mat0_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 * 0.5);
        let path = dir.path().join("m.mat");
        write_mat0(&path, &m).unwrap();
        let back = read_mat0(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn embedding_table_lookup_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let t = EmbeddingTable::new(
            vec!["a".into(), "b".into()],
            Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        );
        assert_eq!(t.get("b").unwrap(), &[0.0, 1.0, 0.0]);
        assert!(t.get("c").is_none());
        t.save(dir.path(), "emb").unwrap();
        let back = EmbeddingTable::load(dir.path(), "emb").unwrap();
        assert_eq!(back.ids(), t.ids());
        assert_eq!(back.get("a").unwrap(), t.get("a").unwrap());
    }
}
