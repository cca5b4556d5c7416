//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! The matrix multiply is the single performance-critical kernel; it uses an
//! i-k-j loop order so the inner loop runs over contiguous rows of both the
//! output and the right-hand operand.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {:?}", shape)));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Permutes axes, materializing the result.
    pub fn permuted(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        if axes.len() != rank {
            return Err(Error::Shape(format!(
                "permutation {:?} does not match rank {}",
                axes, rank
            )));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::Shape(format!("invalid permutation {:?}", axes)));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        let mut out = vec![T::zero(); self.data.len()];
        let mut idx = vec![0usize; rank];
        for (out_pos, slot) in out.iter_mut().enumerate() {
            let mut rem = out_pos;
            for d in 0..rank {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            let mut in_pos = 0;
            for d in 0..rank {
                in_pos += idx[d] * in_strides[axes[d]];
            }
            *slot = self.data[in_pos];
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Repeats the tensor `times` times along a new leading batch axis
    /// collapsed into the first dimension. A `(1, S, H)` tensor becomes
    /// `(times, S, H)`.
    pub fn repeat_first(&self, times: usize) -> Result<Self> {
        if self.shape.is_empty() || self.shape[0] != 1 {
            return Err(Error::Shape(format!(
                "repeat_first expects leading dimension 1, got {:?}",
                self.shape
            )));
        }
        let mut shape = self.shape.clone();
        shape[0] = times;
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Ok(Self { shape, data })
    }

    // ---- serialization ------------------------------------------------
    //
    // Little-endian header: rank as u64, then each dim as u64, then the
    // payload as raw 32-bit floats.

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.into_f32().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated tensor payload".into()))?;
            data.push(T::from_f32(f32::from_le_bytes(buf)));
        }
        Tensor::new(shape, data)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated tensor header".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// ---- matmul kernels ----------------------------------------------------

/// `c += a @ b` for row-major `a: (m, k)`, `b: (k, n)`, `c: (m, n)`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    }
}

/// `c += a @ b^T` for `a: (m, k)`, `b: (n, k)`, `c: (m, n)`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a_row[p] * b_row[p];
            }
            c_row[j] = c_row[j] + acc;
        }
    }
}

/// `c += a^T @ b` for `a: (m, k)`, `b: (m, n)`, `c: (k, n)`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (8, 8, 8), (5, 17, 3)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive_matmul(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // A @ B == A @ (B^T)^T
            let mut bt = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            matmul_nt_acc(&a, &bt, &mut c2, m, k, n);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // A @ B == (A^T)^T @ B
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c3 = vec![0.0; m * n];
            matmul_tn_acc(&at, &b, &mut c3, k, m, n);
            for (x, y) in c3.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::zeros(vec![2, 3]).reshaped(vec![7]).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, -2.5, 0.0, 4.25, 1e-20, 3e8]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        // rank + 2 dims + 6 floats
        assert_eq!(buf.len(), 8 + 16 + 24);
        let back = Tensor::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_serialization_errors() {
        let t = Tensor::<f32>::zeros(vec![4, 4]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::<f32>::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn permute_swaps_axes() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.permuted(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
        let back = p.permuted(&[1, 0]).unwrap();
        assert_eq!(back, t);
    }
}
