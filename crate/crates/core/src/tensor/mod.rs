//! Dense double-precision tensors, a reverse-mode tape over them, a
//! finite-difference gradient oracle and seeded initialization.

mod gradcheck;
mod init;
mod param;
mod tape;

use std::fmt::{self, Write as _};

use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheckError, GradCheckReport, DEFAULT_FD_STEP};
pub use init::{seeded_init, InitScheme, SplitMix64};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var, GELU_COEFF, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("tensor text: {0}")]
    Parse(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
}

pub const MAX_RANK: usize = 3;

/// Row-major `f64` array of rank 1 to 3 with positive dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "new",
                msg: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid shape");
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    /// Rows of equal length into an `r×c` matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let c = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != c) {
            return Err(TensorError::Invalid { op: "from_rows", msg: "ragged rows".into() });
        }
        Self::new(&[rows.len(), c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Invalid { op, msg: format!("expected a matrix, got shape {:?}", self.shape) }),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    /// `shape: d0 d1 ...` line followed by one line of values. Values use the
    /// shortest representation that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut out = String::from("shape:");
        for d in &self.shape {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let vals: Vec<String> = self.data.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
        out
    }

    /// Inverse of [`Tensor::to_text`]; values may span several lines.
    pub fn parse(text: &str) -> Result<Self, TensorError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| TensorError::Parse("missing shape line".into()))?;
        let dims = header.strip_prefix("shape:").ok_or_else(|| TensorError::Parse(format!("bad header {header:?}")))?;
        let shape = dims
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TensorError::Parse(e.to_string()))?;
        let data = lines
            .flat_map(str::split_whitespace)
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TensorError::Parse(e.to_string()))?;
        Self::new(&shape, data)
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(TensorError::Invalid {
            op: "shape",
            msg: format!("shape {shape:?} must have rank 1..=3 and positive dimensions"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let t = Tensor::new(&[2, 3], vec![0.1, -1e-300, 3.0, f64::MIN_POSITIVE, 1.0 / 3.0, -0.0]).unwrap();
        let back = Tensor::parse(&t.to_text()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(t.to_text().starts_with("shape: 2 3\n"));
    }
}
