//! Compute kernels behind the tape ops.
//!
//! Every kernel comes in a sequential flavor and, with the `parallel` feature,
//! a rayon flavor. The two produce bitwise-identical output: parallelism is
//! only ever over independent output rows (or groups), and the per-row
//! reduction order is fixed, so thread count never changes a result.

use super::matrix::Matrix;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// dst += s * src
#[inline]
fn axpy(dst: &mut [f64], s: f64, src: &[f64]) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn matmul_row(a_row: &[f64], b: &Matrix, out_row: &mut [f64]) {
    for (k, &aik) in a_row.iter().enumerate() {
        // Zero-skip: binary feature matrices make this the dominant case.
        if aik != 0.0 {
            axpy(out_row, aik, b.row(k));
        }
    }
}

pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let cols = b.cols().max(1);
    for (out_row, a_row) in out.data_mut().chunks_mut(cols).zip(a.data().chunks(a.cols().max(1))) {
        matmul_row(a_row, b, out_row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let cols = b.cols().max(1);
    out.data_mut()
        .par_chunks_mut(cols)
        .zip(a.data().par_chunks(a.cols().max(1)))
        .for_each(|(out_row, a_row)| matmul_row(a_row, b, out_row));
    out
}

/// C = A * B, dispatching on the `parallel` feature.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    #[cfg(feature = "parallel")]
    {
        matmul_par(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        matmul_seq(a, b)
    }
}

fn matmul_nt_row(a_row: &[f64], b: &Matrix, out_row: &mut [f64]) {
    for (j, out) in out_row.iter_mut().enumerate() {
        let b_row = b.row(j);
        let mut acc = 0.0;
        for (x, y) in a_row.iter().zip(b_row) {
            acc += x * y;
        }
        *out = acc;
    }
}

pub fn matmul_nt_seq(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols());
    let mut out = Matrix::zeros(a.rows(), b.rows());
    let cols = b.rows().max(1);
    for (out_row, a_row) in out.data_mut().chunks_mut(cols).zip(a.data().chunks(a.cols().max(1))) {
        matmul_nt_row(a_row, b, out_row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols());
    let mut out = Matrix::zeros(a.rows(), b.rows());
    let cols = b.rows().max(1);
    out.data_mut()
        .par_chunks_mut(cols)
        .zip(a.data().par_chunks(a.cols().max(1)))
        .for_each(|(out_row, a_row)| matmul_nt_row(a_row, b, out_row));
    out
}

/// C = A * B^T (rows of B used as columns), dispatching on the feature.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    #[cfg(feature = "parallel")]
    {
        matmul_nt_par(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        matmul_nt_seq(a, b)
    }
}

/// Broadcasts a 1xC bias over every row.
pub fn add_bias(a: &Matrix, bias: &Matrix) -> Matrix {
    assert_eq!(bias.rows(), 1);
    assert_eq!(bias.cols(), a.cols());
    let mut out = a.clone();
    let b = bias.row(0);
    for row in out.data_mut().chunks_mut(b.len()) {
        for (v, add) in row.iter_mut().zip(b) {
            *v += add;
        }
    }
    out
}

pub fn map_elementwise(a: &Matrix, f: impl Fn(f64) -> f64 + Sync) -> Matrix {
    let mut out = a.clone();
    #[cfg(feature = "parallel")]
    {
        out.data_mut().par_iter_mut().for_each(|v| *v = f(*v));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    }
    out
}

pub fn relu(a: &Matrix) -> Matrix {
    map_elementwise(a, |v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(a: &Matrix) -> Matrix {
    map_elementwise(a, sigmoid_scalar)
}

/// Index groups with the reverse membership map, built once and shared by
/// forward pooling and its backward scatter.
#[derive(Debug, Clone)]
pub struct GroupIndex {
    groups: Vec<Vec<usize>>,
    /// input row -> groups containing it, ascending
    reverse: Vec<Vec<usize>>,
    input_rows: usize,
}

impl GroupIndex {
    pub fn new(groups: Vec<Vec<usize>>, input_rows: usize) -> Self {
        let mut reverse = vec![Vec::new(); input_rows];
        for (g, members) in groups.iter().enumerate() {
            for &m in members {
                assert!(m < input_rows, "group member {m} out of range {input_rows}");
                reverse[m].push(g);
            }
        }
        GroupIndex {
            groups,
            reverse,
            input_rows,
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn has_empty_group(&self) -> Option<usize> {
        self.groups.iter().position(|g| g.is_empty())
    }
}

fn group_mean_row(members: &[usize], rows: &Matrix, out_row: &mut [f64]) {
    // Empty groups pool to the zero vector; callers that forbid them check first.
    if members.is_empty() {
        return;
    }
    for &m in members {
        axpy(out_row, 1.0, rows.row(m));
    }
    let inv = 1.0 / members.len() as f64;
    for v in out_row.iter_mut() {
        *v *= inv;
    }
}

pub fn group_mean_seq(rows: &Matrix, index: &GroupIndex) -> Matrix {
    let mut out = Matrix::zeros(index.len(), rows.cols());
    let cols = rows.cols().max(1);
    for (out_row, members) in out.data_mut().chunks_mut(cols).zip(index.groups.iter()) {
        group_mean_row(members, rows, out_row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn group_mean_par(rows: &Matrix, index: &GroupIndex) -> Matrix {
    let mut out = Matrix::zeros(index.len(), rows.cols());
    let cols = rows.cols().max(1);
    out.data_mut()
        .par_chunks_mut(cols)
        .zip(index.groups.par_iter())
        .for_each(|(out_row, members)| group_mean_row(members, rows, out_row));
    out
}

pub fn group_mean(rows: &Matrix, index: &GroupIndex) -> Matrix {
    #[cfg(feature = "parallel")]
    {
        group_mean_par(rows, index)
    }
    #[cfg(not(feature = "parallel"))]
    {
        group_mean_seq(rows, index)
    }
}

/// Backward of `group_mean`: d_in[i] = sum over groups g containing i of
/// d_out[g] / |g|. Parallel over input rows; per-row accumulation order is
/// the ascending group order from the reverse map, so it is deterministic.
pub fn group_mean_backward(d_out: &Matrix, index: &GroupIndex) -> Matrix {
    let mut d_in = Matrix::zeros(index.input_rows, d_out.cols());
    let cols = d_out.cols().max(1);
    let scatter = |(d_row, memberships): (&mut [f64], &Vec<usize>)| {
        for &g in memberships {
            let w = 1.0 / index.groups[g].len() as f64;
            axpy(d_row, w, d_out.row(g));
        }
    };
    #[cfg(feature = "parallel")]
    {
        d_in.data_mut()
            .par_chunks_mut(cols)
            .zip(index.reverse.par_iter())
            .for_each(scatter);
    }
    #[cfg(not(feature = "parallel"))]
    {
        d_in.data_mut()
            .chunks_mut(cols)
            .zip(index.reverse.iter())
            .for_each(scatter);
    }
    d_in
}

/// out[k] = dot(left.row(pairs[k].0), right.row(pairs[k].1)); 1xK result.
pub fn pair_dot(left: &Matrix, right: &Matrix, pairs: &[(u32, u32)]) -> Matrix {
    assert_eq!(left.cols(), right.cols());
    let dot = |&(i, j): &(u32, u32)| -> f64 {
        let a = left.row(i as usize);
        let b = right.row(j as usize);
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let data: Vec<f64> = pairs.par_iter().map(dot).collect();
    #[cfg(not(feature = "parallel"))]
    let data: Vec<f64> = pairs.iter().map(dot).collect();
    Matrix::from_vec(1, pairs.len(), data).expect("finite dot products")
}

/// Per-row partial sums combined sequentially in row order, so the total is
/// independent of thread count.
pub fn rowwise_sum(values: &Matrix, per_entry: impl Fn(usize, f64) -> f64 + Sync) -> f64 {
    let cols = values.cols().max(1);
    let row_part = |(r, row): (usize, &[f64])| -> f64 {
        let mut acc = 0.0;
        for (c, &v) in row.iter().enumerate() {
            acc += per_entry(r * cols + c, v);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<f64> = values
        .data()
        .par_chunks(cols)
        .enumerate()
        .map(row_part)
        .collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<f64> = values.data().chunks(cols).enumerate().map(row_part).collect();
    parts.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        assert_eq!(matmul(&a, &b), Matrix::from_rows(&[vec![11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = Matrix::from_vec(5, 4, (0..20).map(|_| next()).collect()).unwrap();
        let b = Matrix::from_vec(4, 3, (0..12).map(|_| next()).collect()).unwrap();
        let got = matmul(&a, &b);
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let nt = matmul_nt(&a, &b.transpose());
        assert!(nt.max_abs_diff(&got) < 1e-12);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let a = Matrix::from_vec(7, 9, (0..63).map(|i| (i as f64).sin()).collect()).unwrap();
        let b = Matrix::from_vec(9, 5, (0..45).map(|i| (i as f64).cos()).collect()).unwrap();
        assert_eq!(matmul_par(&a, &b), matmul_seq(&a, &b));
        assert_eq!(matmul_nt_par(&a, &b.transpose()), matmul_nt_seq(&a, &b.transpose()));
        let idx = GroupIndex::new(vec![vec![0, 2, 4], vec![1], vec![5, 6]], 7);
        assert_eq!(group_mean_par(&a, &idx), group_mean_seq(&a, &idx));
    }

    #[test]
    fn group_mean_examples() {
        let rows = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let idx = GroupIndex::new(vec![vec![0, 1]], 2);
        assert_eq!(group_mean(&rows, &idx), Matrix::from_rows(&[vec![1.0, 1.0]]));
        let singleton = GroupIndex::new(vec![vec![0]], 2);
        assert_eq!(group_mean(&rows, &singleton), Matrix::from_rows(&[vec![2.0, 0.0]]));
    }

    #[test]
    fn group_mean_output_within_envelope() {
        let rows = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 5.0], vec![-1.0, 0.5]]);
        let idx = GroupIndex::new(vec![vec![0, 1, 2], vec![1, 2]], 3);
        let out = group_mean(&rows, &idx);
        for (g, members) in idx.groups().iter().enumerate() {
            for c in 0..rows.cols() {
                let lo = members.iter().map(|&m| rows.get(m, c)).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|&m| rows.get(m, c)).fold(f64::NEG_INFINITY, f64::max);
                assert!(out.get(g, c) >= lo - 1e-15 && out.get(g, c) <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let m = Matrix::from_rows(&[vec![-3.0, 0.0, 3.0]]);
        assert_eq!(relu(&m), Matrix::from_rows(&[vec![0.0, 0.0, 3.0]]));
        let s = sigmoid(&m);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);
        for v in s.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn pair_dot_matches_full_product() {
        let l = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let r = Matrix::from_rows(&[vec![0.5, 0.5], vec![2.0, 1.0], vec![-1.0, 4.0]]);
        let full = matmul_nt(&l, &r);
        let pairs = vec![(0u32, 2u32), (1, 0), (1, 1)];
        let got = pair_dot(&l, &r, &pairs);
        assert_eq!(got.row(0), &[full.get(0, 2), full.get(1, 0), full.get(1, 1)]);
    }
}
