use super::{Real, Tensor};
use crate::error::{dim_err, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<Real>,
}

impl CsrMatrix {
    /// Builds a matrix from (row, col, value) entries. Duplicates are summed;
    /// column indices end up sorted within each row.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, Real)]) -> Result<Self> {
        let mut sorted = entries.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(dim_err!("entry ({r}, {c}) outside a {rows}×{cols} matrix"));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<Real> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(CsrMatrix { rows, cols, indptr, indices, values })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix { rows: n, cols: n, indptr: (0..=n).collect(), indices: (0..n).collect(), values: vec![1.0; n] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[Real]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |i| vals[i])
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut entries = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            entries.extend(cols.iter().zip(vals).map(|(&c, &v)| (c, r, v)));
        }
        CsrMatrix::from_triplets(self.cols, self.rows, &entries).expect("transpose indices in range")
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros([self.rows, self.cols]);
        let cols = self.cols;
        let data = out.data_mut();
        for r in 0..self.rows {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                data[r * cols + c] = v;
            }
        }
        out
    }

    /// Largest |A[i][j] − A[j][i]| over stored entries of both triangles.
    pub fn asymmetry(&self) -> Real {
        let mut worst: Real = 0.0;
        for r in 0..self.rows {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// Sparse × dense product into a fresh row-major buffer; `x` is `cols × k`.
    pub(crate) fn mul_dense(&self, x: &[Real], k: usize) -> Vec<Real> {
        let mut out = vec![0.0; self.rows * k];
        for r in 0..self.rows {
            let dst = &mut out[r * k..(r + 1) * k];
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                dst.iter_mut().zip(&x[c * k..(c + 1) * k]).for_each(|(o, xv)| *o += v * xv);
            }
        }
        out
    }

    /// Accumulates `selfᵀ · dy` into `dx`; `dy` is `rows × k`.
    pub(crate) fn mul_transpose_add(&self, dy: &[Real], k: usize, dx: &mut [Real]) {
        for r in 0..self.rows {
            let src = &dy[r * k..(r + 1) * k];
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                dx[c * k..(c + 1) * k].iter_mut().zip(src).for_each(|(o, g)| *o += v * g);
            }
        }
    }

    /// Exact sparse-dense product `self · x` for a 2-D `x`.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        let (r, k) = x.dims2()?;
        if r != self.cols {
            return Err(dim_err!("sparse {}×{} times dense {:?}", self.rows, self.cols, x.shape()));
        }
        Tensor::new([self.rows, k], self.mul_dense(x.data(), k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort_columns() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 0.5), (1, 1, -1.0)]).unwrap();
        assert_eq!(m.row(0), (&[0usize, 2][..], &[2.0, 1.5][..]));
        assert_eq!(m.get(1, 1), -1.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn identity_product_returns_input() {
        let x = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(CsrMatrix::identity(3).matmul_dense(&x).unwrap(), x);
    }

    #[test]
    fn out_of_range_entry_is_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }
}
