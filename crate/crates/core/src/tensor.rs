//! Dense row-major `f32` tensors.
//!
//! Storage is 32-bit; every reduction (norms, inner products, matmul
//! accumulators) runs in 64-bit. Large reductions are split into
//! [`REDUCTION_CHUNK`]-element blocks that may be summed on worker threads;
//! block partial sums are always combined in block order, so results do not
//! depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block size for chunked reductions.
pub const REDUCTION_CHUNK: usize = 1 << 14;

/// Matrix products below this many multiply-adds stay on the calling thread.
const PARALLEL_MATMUL_WORK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Every dimension must be positive and `data.len()` must equal the
    /// product of the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel])
    }

    /// Rank-1 tensor over `data`. Panics on empty input.
    pub fn from_vec(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "tensor must have at least one element");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Flattened rank-1 view of the same data.
    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor {
            shape: vec![n],
            data: self.data,
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rows `rows` of a rank-2 tensor, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "select_rows needs a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::InvalidArgument(format!(
                    "row {r} out of range for {} rows",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn scale(&self, alpha: f32) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        check_same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        lp_norm(self, 2)
    }

    pub fn l1_norm(&self) -> f64 {
        lp_norm(self, 1)
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Sum of `f` over paired elements, accumulated in f64 by fixed blocks.
fn chunked_sum(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f64 + Sync) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let block = |(x, y): (&[f32], &[f32])| -> f64 {
        x.iter().zip(y).map(|(&u, &v)| f(u, v)).sum::<f64>()
    };
    if a.len() <= REDUCTION_CHUNK {
        return block((a, b));
    }
    let partials: Vec<f64> = a
        .par_chunks(REDUCTION_CHUNK)
        .zip(b.par_chunks(REDUCTION_CHUNK))
        .map(block)
        .collect();
    partials.into_iter().sum()
}

/// `(Σ|x_i|^p)^(1/p)` over all elements.
pub fn lp_norm(t: &Tensor, p: u32) -> f64 {
    slice_lp_norm(t.data(), p)
}

/// [`lp_norm`] over a raw slice, e.g. one row of a batch.
pub fn slice_lp_norm(d: &[f32], p: u32) -> f64 {
    assert!(p >= 1, "lp_norm needs p >= 1");
    match p {
        1 => chunked_sum(d, d, |x, _| (x as f64).abs()),
        2 => chunked_sum(d, d, |x, _| (x as f64) * (x as f64)).sqrt(),
        _ => {
            let s = chunked_sum(d, d, |x, _| (x as f64).abs().powi(p as i32));
            s.powf(1.0 / p as f64)
        }
    }
}

/// Flat inner product.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("dot", a, b)?;
    Ok(chunked_sum(a.data(), b.data(), |x, y| x as f64 * y as f64))
}

/// Projection of `v` onto the line spanned by `axis`, both read as flat vectors.
pub fn project_onto(v: &Tensor, axis: &Tensor) -> Result<Tensor> {
    check_same_shape("project_onto", v, axis)?;
    let axis_sq = dot(axis, axis)?;
    if axis_sq == 0.0 {
        return Err(Error::ZeroAxis);
    }
    let coef = dot(v, axis)? / axis_sq;
    Ok(Tensor {
        shape: v.shape.clone(),
        data: axis.data.iter().map(|&a| (coef * a as f64) as f32).collect(),
    })
}

/// `alpha·x + y`.
pub fn axpy(alpha: f32, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.zip_with(y, "axpy", |a, b| alpha * a + b)
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape.clone(),
            right: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Matrix product `a·b` for `a: [m,k]`, `b: [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_matrix("matmul", a)?;
    let (kb, n) = check_matrix("matmul", b)?;
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let fill = |(i, row): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av as f64 * bv as f64;
            }
        }
        for (o, s) in row.iter_mut().zip(acc) {
            *o = s as f32;
        }
    };
    if m * n * k >= PARALLEL_MATMUL_WORK {
        out.par_chunks_mut(n).enumerate().for_each(fill);
    } else {
        out.chunks_mut(n).enumerate().for_each(fill);
    }
    Tensor::new(vec![m, n], out)
}

/// `a·bᵀ` for `a: [m,k]`, `b: [n,k]`; the layout used for `[out, in]` weights.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_matrix("matmul_transposed", a)?;
    let (n, kb) = check_matrix("matmul_transposed", b)?;
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul_transposed",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let fill = |(i, row): (usize, &mut [f32])| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let s: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            *o = s as f32;
        }
    };
    if m * n * k >= PARALLEL_MATMUL_WORK {
        out.par_chunks_mut(n).enumerate().for_each(fill);
    } else {
        out.chunks_mut(n).enumerate().for_each(fill);
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f32]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn lp_norm_examples() {
        assert_eq!(lp_norm(&v(&[3.0, 4.0]), 2), 5.0);
        assert_eq!(lp_norm(&v(&[1.0, -1.0, 1.0, -1.0]), 1), 4.0);
        for p in 1..5 {
            assert_eq!(lp_norm(&Tensor::zeros(&[3, 2]).unwrap(), p), 0.0);
        }
        assert!((lp_norm(&v(&[1.0, 2.0]), 3) - 9f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(
            project_onto(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap().data(),
            &[1.0, 0.0]
        );
        assert_eq!(
            project_onto(&v(&[2.0, 0.0]), &v(&[0.0, 3.0])).unwrap().data(),
            &[0.0, 0.0]
        );
        assert_eq!(
            project_onto(&v(&[1.0, 2.0]), &v(&[1.0, 1.0])).unwrap().data(),
            &[1.5, 1.5]
        );
        assert!(matches!(
            project_onto(&v(&[1.0, 2.0]), &v(&[0.0, 0.0])),
            Err(Error::ZeroAxis)
        ));
        assert!(matches!(
            project_onto(&v(&[1.0, 2.0]), &v(&[1.0, 0.0, 0.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn axpy_examples() {
        let x = v(&[1.0, -2.5, 4.0]);
        let zeros = Tensor::zeros(&[3]).unwrap();
        assert_eq!(axpy(1.0, &x, &zeros).unwrap(), x);
        assert_eq!(axpy(-1.0, &x, &x).unwrap(), zeros);
        let out = axpy(0.3, &v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.3, 0.6]);
        assert!(axpy(1.0, &x, &v(&[1.0])).is_err());
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        let z = Tensor::zeros(&[4, 2]).unwrap();
        assert_eq!(matmul(&z, &m).unwrap(), Tensor::zeros(&[4, 3]).unwrap());
        assert!(matches!(
            matmul(&m, &m),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_transposed_agrees_with_matmul() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap();
        let w = Tensor::matrix(4, 3, (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        let mut wt = vec![0.0; 12];
        for r in 0..4 {
            for c in 0..3 {
                wt[c * 4 + r] = w.data()[r * 3 + c];
            }
        }
        let wt = Tensor::matrix(3, 4, wt).unwrap();
        assert_eq!(
            matmul_transposed(&a, &w).unwrap(),
            matmul(&a, &wt).unwrap()
        );
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn chunked_reduction_is_consistent() {
        let n = REDUCTION_CHUNK * 3 + 17;
        let t = Tensor::from_vec((0..n).map(|i| ((i % 7) as f32) - 3.0).collect());
        let direct: f64 = t.data().iter().map(|&x| (x as f64).abs()).sum();
        assert_eq!(lp_norm(&t, 1), direct);
    }

    fn pair(max_len: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1..max_len).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f32..10.0, n),
                prop::collection::vec(-10.0f32..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn triangle_inequality((a, b) in pair(64), p in 1u32..=2) {
            let a = Tensor::from_vec(a);
            let b = Tensor::from_vec(b);
            let s = a.add(&b).unwrap();
            let lhs = lp_norm(&s, p);
            let rhs = lp_norm(&a, p) + lp_norm(&b, p);
            prop_assert!(lhs <= rhs * (1.0 + 1e-5) + 1e-12);
        }

        #[test]
        fn projection_is_idempotent((x, a) in pair(64)) {
            let x = Tensor::from_vec(x);
            let a = Tensor::from_vec(a);
            prop_assume!(a.l2_norm() > 1e-3);
            let p1 = project_onto(&x, &a).unwrap();
            let p2 = project_onto(&p1, &a).unwrap();
            let scale = p1.l2_norm().max(1.0);
            for (u, w) in p1.data().iter().zip(p2.data()) {
                prop_assert!(((u - w).abs() as f64) <= 1e-6 * scale);
            }
        }

        #[test]
        fn projection_residual_is_orthogonal((x, a) in pair(64)) {
            let x = Tensor::from_vec(x);
            let a = Tensor::from_vec(a);
            prop_assume!(a.l2_norm() > 1e-3);
            let r = x.sub(&project_onto(&x, &a).unwrap()).unwrap();
            let inner = dot(&r, &a).unwrap().abs();
            prop_assert!(inner <= 1e-5 * x.l2_norm() * a.l2_norm() + 1e-9);
        }
    }
}
