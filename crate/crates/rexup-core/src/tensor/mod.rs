//! Dense row-major tensors with reverse-mode autodiff and Adam.

mod checkpoint;
mod store;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtra};
pub use store::{adam_defaults, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::{Error, Result, Scalar};

/// A dense tensor: a shape and a row-major data buffer.
///
/// Rank 1 tensors are vectors `[n]`, rank 2 are matrices `[rows, cols]`.
/// A length-1 vector doubles as a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: Scalar) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<Scalar>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(
                "from_vec",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if data.len() != expected {
            return Err(Error::dimension(
                "from_vec",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                op: "from_vec".into(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self> {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn is_vector(&self) -> bool {
        self.rank() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.rank() == 2
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Rows of a matrix, or 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.is_matrix() {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix, or the length of a vector.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has a shape")
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Scalar] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Scalar {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D transpose.
    pub fn transposed(&self) -> Tensor {
        debug_assert!(self.is_matrix());
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Scalar> {
        self.data.iter()
    }
}

/// `out[m] = a[m x k] * b[k x n]`, also accepting a rank-1 `b[k]` as a
/// column (yielding a rank-1 result).
pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        _ => {
            return Err(Error::dimension(
                "matmul",
                format!("left operand must be a matrix, got {:?}", a.shape()),
            ))
        }
    };
    let (k2, n, vec_rhs) = match b.shape() {
        [k2, n] => (*k2, *n, false),
        [k2] => (*k2, 1, true),
        _ => {
            return Err(Error::dimension(
                "matmul",
                format!("right operand has shape {:?}", b.shape()),
            ))
        }
    };
    if k != k2 {
        return Err(Error::dimension(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    if vec_rhs {
        for i in 0..m {
            let row = a.row(i);
            let mut acc = 0.0;
            for p in 0..k {
                acc += row[p] * b.data[p];
            }
            out[i] = acc;
        }
        return Ok(Tensor {
            shape: vec![m],
            data: out,
        });
    }
    // i-k-j order: streams over rows of b, vectorizes the inner loop.
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(&[2], vec![1.0, Scalar::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul_values(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent triple-loop multiply for [[1,2],[3,4]] x [[5],[6]].
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        let mut oracle = vec![0.0; 2];
        for i in 0..2 {
            for j in 0..1 {
                for p in 0..2 {
                    oracle[i * 1 + j] += a.data()[i * 2 + p] * b.data()[p * 1 + j];
                }
            }
        }
        assert_eq!(oracle, vec![17.0, 39.0]);
        let got = matmul_values(&a, &b).unwrap();
        assert_eq!(got.data(), &oracle[..]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3]);
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = matmul_values(&z, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let err = matmul_values(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transposed().transposed(), a);
        assert_eq!(a.transposed().shape(), &[3, 2]);
        assert_eq!(a.transposed().row(0), &[1.0, 4.0]);
    }
}
