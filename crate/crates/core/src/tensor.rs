//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const TENSOR_MAGIC: &[u8; 4] = b"HCLT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element of a [`Tensor`].
pub trait Element: Float + Debug + Default + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a·b + beta·c` over raw strided buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= span(m, k, a_strides));
                assert!(b.len() as isize >= span(k, n, b_strides));
                // SAFETY: the asserts above bound every strided access to the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);

/// Row-major strides for a shape.
pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element> {
    data: Vec<T>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

pub enum Operand<'a, T: Element> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_parts_unchecked(shape, data)?;
        t.check_finite()?;
        Ok(t)
    }

    /// Validates shape/length but not finiteness. Used on hot paths where the
    /// caller checks finiteness at a coarser grain.
    pub(crate) fn from_parts_unchecked(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::arg(format!("zero extent in shape {shape:?}")));
        }
        let expected = checked_numel(shape)
            .ok_or_else(|| Error::arg(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::arg(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            shape: shape.to_vec(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = checked_numel(shape).expect("shape overflow");
        Self::from_parts_unchecked(shape, vec![T::zero(); n]).expect("zero extent")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let off: usize = index
            .iter()
            .zip(self.strides())
            .zip(&self.shape)
            .map(|((&i, s), &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum();
        self.data[off]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if checked_numel(shape) != Some(self.data.len()) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Self::from_parts_unchecked(shape, self.data)
    }

    /// Gathers rows (slices along the leading axis) into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::arg("select_rows on a scalar"))?;
        if rows.is_empty() {
            return Err(Error::arg("select_rows with no rows"));
        }
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::arg(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::from_parts_unchecked(&shape, data)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "non-finite element at flat index {i} of tensor {:?}",
                self.shape
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.data,
            (k as isize, 1),
            &other.data,
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let out = Self::from_parts_unchecked(&[m, n], out)?;
        out.check_finite()?;
        Ok(out)
    }

    pub fn elementwise(&self, op: BinaryOp, rhs: Operand<'_, T>) -> Result<Self> {
        let apply = |a: T, b: T| -> Result<T> {
            Ok(match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b == T::zero() {
                        return Err(Error::Numeric("division by zero".into()));
                    }
                    a / b
                }
                BinaryOp::Max => a.max(b),
            })
        };
        let data = match rhs {
            Operand::Scalar(s) => self
                .data
                .iter()
                .map(|&a| apply(a, s))
                .collect::<Result<Vec<_>>>()?,
            Operand::Tensor(t) => {
                if t.shape != self.shape {
                    return Err(Error::shape("elementwise", &self.shape, &t.shape));
                }
                self.data
                    .iter()
                    .zip(&t.data)
                    .map(|(&a, &b)| apply(a, b))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let out = Self::from_parts_unchecked(&self.shape, data)?;
        out.check_finite()?;
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.elementwise(BinaryOp::Add, Operand::Tensor(rhs))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.elementwise(BinaryOp::Mul, Operand::Tensor(rhs))
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.elementwise(BinaryOp::Mul, Operand::Scalar(s))
    }

    /// I.i.d. uniform on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform_fan(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::arg("fan_in and fan_out must be >= 1"));
        }
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = checked_numel(shape).ok_or_else(|| Error::arg("shape overflow"))?;
        let data = (0..n)
            .map(|_| T::from_f64((2.0 * rng.uniform() - 1.0) * bound))
            .collect();
        Self::from_parts_unchecked(shape, data)
    }

    /// Appends the `HCLT` encoding of this tensor.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(T::DTYPE as u8);
        out.push(u8::try_from(self.shape.len()).expect("rank fits in u8"));
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(self.data.len() * T::DTYPE.size());
        for &v in &self.data {
            v.write_le(out);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |r: &str| Error::format("tensor", r);
        if bytes.len() < 6 {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err(bad("bad magic"));
        }
        let dtype = DType::from_tag(bytes[4]).ok_or_else(|| bad("unknown dtype tag"))?;
        if dtype != T::DTYPE {
            return Err(bad("dtype does not match requested element type"));
        }
        let rank = bytes[5] as usize;
        let mut pos = 6;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated extents"))?;
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| bad("extent too large"))?);
            pos += 8;
        }
        if shape.contains(&0) {
            return Err(bad("zero extent"));
        }
        let numel = checked_numel(&shape).ok_or_else(|| bad("extent product overflows"))?;
        let width = dtype.size();
        let nbytes = numel.checked_mul(width).ok_or_else(|| bad("payload too large"))?;
        let end = pos.checked_add(nbytes).ok_or_else(|| bad("payload too large"))?;
        let payload = bytes.get(pos..end).ok_or_else(|| bad("truncated payload"))?;
        let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
        let t = Self::new(&shape, data).map_err(|e| bad(&e.to_string()))?;
        Ok((t, end))
    }

    /// Decodes a buffer holding exactly one tensor.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode(bytes)?;
        if used != bytes.len() {
            return Err(Error::format("tensor", "trailing bytes"));
        }
        Ok(t)
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}
