//! Dense FP32 matrices, channel-group partitioning, deterministic RNG, and
//! the binary tensor container shared by every module.
//!
//! Layout convention: weight matrices are stored `(d_in × d_out)` so rows
//! index input channels; activation matrices are `(tokens × d_in)` so columns
//! index input channels. All data is row-major FP32. Matvec/matmul
//! accumulation is FP64 so results are deterministic and test tolerances can
//! stay tight.

mod file;
mod rng;

pub use file::{load_tensors, save_tensors, TensorData, TensorEntry, TensorFile};
pub use rng::Rng;

use crate::{Error, Result};

/// Dense row-major FP32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from row-major data; rejects length mismatches and non-finite
    /// values on ingest.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite value in matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Standard-normal entries, deterministic per RNG state.
    pub fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.next_normal() as f32).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Group views over the row (channel) dimension, in order.
    pub fn row_groups(&self, layout: &GroupLayout) -> Vec<&[f32]> {
        (0..layout.num_groups)
            .map(|g| {
                let (start, len) = layout.group_bounds(g);
                &self.data[start * self.cols..(start + len) * self.cols]
            })
            .collect()
    }
}

/// Partitioning of a channel dimension into fixed-size groups.
///
/// The last group may be short; it is processed at its live length (no zero
/// padding enters quantization statistics and rotations never touch a padded
/// channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub group_size: usize,
    pub num_groups: usize,
    pub channels: usize,
    pub padded: bool,
}

impl GroupLayout {
    pub fn new(channels: usize, group_size: usize) -> Result<Self> {
        if group_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "group size must be >= 2, got {group_size}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("channel count must be positive".into()));
        }
        let num_groups = channels.div_ceil(group_size);
        Ok(Self { group_size, num_groups, channels, padded: channels % group_size != 0 })
    }

    /// (first channel, live length) of group `g`.
    #[inline]
    pub fn group_bounds(&self, g: usize) -> (usize, usize) {
        let start = g * self.group_size;
        let len = self.group_size.min(self.channels - start);
        (start, len)
    }
}

/// Partition the row (channel) dimension of a weight matrix.
pub fn partition_groups(m: &Matrix, group_size: usize) -> Result<GroupLayout> {
    GroupLayout::new(m.rows, group_size)
}

/// `a · b` with FP64 accumulation per output element.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    crate::parallel::for_each_chunk_mut(&mut out.data, n, |i, out_row| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (j, &bv) in b_row.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for (o, &v) in out_row.iter_mut().zip(&acc) {
            *o = v as f32;
        }
    });
    out
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_at_b row mismatch");
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut out = Matrix::zeros(m, n);
    crate::parallel::for_each_chunk_mut(&mut out.data, n, |i, out_row| {
        let mut acc = vec![0.0f64; n];
        for kk in 0..k {
            let av = a.data[kk * m + i] as f64;
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (j, &bv) in b_row.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for (o, &v) in out_row.iter_mut().zip(&acc) {
            *o = v as f32;
        }
    });
    out
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_a_bt column mismatch");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    crate::parallel::for_each_chunk_mut(&mut out.data, n, |i, out_row| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av as f64 * bv as f64;
            }
            *o = acc as f32;
        }
    });
    out
}

/// Fisher–Yates shuffle driven by the crate PRNG; deterministic per seed.
pub fn rng_shuffle<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_layout_exact_division() {
        let l = GroupLayout::new(4, 2).unwrap();
        assert_eq!(l.num_groups, 2);
        assert!(!l.padded);
        assert_eq!(l.group_bounds(0), (0, 2));
        assert_eq!(l.group_bounds(1), (2, 2));
    }

    #[test]
    fn group_layout_single_group_128() {
        let l = GroupLayout::new(128, 128).unwrap();
        assert_eq!(l.num_groups, 1);
        assert!(!l.padded);
    }

    #[test]
    fn group_layout_short_last_group() {
        let l = GroupLayout::new(5, 2).unwrap();
        assert_eq!(l.num_groups, 3);
        assert!(l.padded);
        assert_eq!(l.group_bounds(2), (4, 1));
    }

    #[test]
    fn group_layout_rejects_small_group() {
        assert!(GroupLayout::new(8, 1).is_err());
    }

    #[test]
    fn group_views_reconstruct_rows() {
        let mut rng = Rng::new(3);
        let m = Matrix::randn(7, 3, &mut rng);
        let layout = partition_groups(&m, 3).unwrap();
        let mut rebuilt = Vec::new();
        for view in m.row_groups(&layout) {
            rebuilt.extend_from_slice(view);
        }
        assert_eq!(rebuilt, m.data);
    }

    #[test]
    fn shuffle_empty_and_singleton() {
        let mut rng = Rng::new(0);
        let mut empty: Vec<u32> = vec![];
        rng_shuffle(&mut empty, &mut rng);
        assert!(empty.is_empty());
        let mut one = vec![42];
        rng_shuffle(&mut one, &mut rng);
        assert_eq!(one, vec![42]);
    }

    #[test]
    fn shuffle_deterministic_per_seed() {
        let mut a: Vec<usize> = (0..6).collect();
        let mut b: Vec<usize> = (0..6).collect();
        rng_shuffle(&mut a, &mut Rng::new(123));
        rng_shuffle(&mut b, &mut Rng::new(123));
        assert_eq!(a, b);
        // Frozen from the independent reference implementation.
        let mut c: Vec<usize> = (0..6).collect();
        rng_shuffle(&mut c, &mut Rng::new(7));
        assert_eq!(c, vec![3, 5, 1, 2, 4, 0]);
        let mut d: Vec<usize> = (0..6).collect();
        rng_shuffle(&mut d, &mut Rng::new(0));
        assert_eq!(d, vec![3, 4, 1, 0, 5, 2]);
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let mut rng = Rng::new(11);
        let a = Matrix::randn(5, 4, &mut rng);
        let b = Matrix::randn(5, 3, &mut rng);
        let direct = matmul(&a.transpose(), &b);
        let fused = matmul_at_b(&a, &b);
        assert!(direct.max_abs_diff(&fused) < 1e-6);

        let c = Matrix::randn(6, 4, &mut rng);
        let direct = matmul(&a, &c.transpose());
        let fused = matmul_a_bt(&a, &c);
        assert!(direct.max_abs_diff(&fused) < 1e-6);
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f32::NAN]).is_err());
    }
}
