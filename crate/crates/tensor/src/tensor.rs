use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Dense row-major n-dimensional array.
///
/// A `Tensor` is a plain value: it owns its storage and never shares it. Gradient
/// bookkeeping lives on the [`Tape`](crate::Tape) that records operations over
/// tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::dim("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn: valid shape")
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| crate::cst(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .zip(self.strides())
            .map(|((&i, &d), s)| {
                assert!(i < d, "index {i} out of extent {d}");
                i * s
            })
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(TensorError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Encodes as `rank:u64, extents:u64*rank, payload` (all little-endian).
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (1 + self.rank()) + T::BYTES * self.numel());
        out.extend_from_slice(&(self.rank() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Decodes one tensor from `r`. `base` is the absolute byte offset of the
    /// reader position, used only for error reporting.
    pub fn read_from(r: &mut impl Read, base: u64) -> Result<Self> {
        let mut pos = base;
        let rank = read_u64(r, &mut pos)?;
        if rank == 0 || rank > 16 {
            return Err(TensorError::Format {
                offset: base,
                msg: format!("implausible tensor rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u64(r, &mut pos)?;
            if d == 0 || d > (1 << 40) {
                return Err(TensorError::Format {
                    offset: pos - 8,
                    msg: format!("implausible extent {d}"),
                });
            }
            shape.push(d as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n < (1 << 34))
            .ok_or_else(|| TensorError::Format {
                offset: base,
                msg: format!("tensor extents {shape:?} overflow"),
            })?;
        let mut payload = vec![0u8; numel * T::BYTES];
        r.read_exact(&mut payload).map_err(|e| TensorError::Format {
            offset: pos,
            msg: format!("truncated payload of {} bytes: {e}", payload.len()),
        })?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(&shape, data)
    }

    /// Size in bytes of the encoding produced by [`Tensor::to_bytes`].
    pub fn encoded_len(&self) -> usize {
        8 * (1 + self.rank()) + T::BYTES * self.numel()
    }
}

fn read_u64(r: &mut impl Read, pos: &mut u64) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| TensorError::Format {
        offset: *pos,
        msg: format!("truncated header: {e}"),
    })?;
    *pos += 8;
    Ok(u64::from_le_bytes(buf))
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits `shape` around `axis` into `(outer, len, inner)` element counts.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
