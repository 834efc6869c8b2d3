use std::ops::Range;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Splits `shape` into `(outer, reduced, inner)` around a contiguous axis range.
fn split_range(shape: &[usize], axes: &Range<usize>) -> (usize, usize, usize) {
    (
        shape[..axes.start].iter().product(),
        shape[axes.clone()].iter().product(),
        shape[axes.end..].iter().product(),
    )
}

/// Per-group mean and biased variance over a contiguous axis range. Groups are
/// ordered `outer`-major, `inner`-minor.
pub fn moments<T: Real>(x: &Tensor<T>, axes: Range<usize>) -> (Vec<T>, Vec<T>) {
    let (outer, red, inner) = split_range(x.shape(), &axes);
    let src = x.data();
    let n = T::from_usize(red).unwrap();
    let mut mean = vec![T::zero(); outer * inner];
    let mut var = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let m = &mut mean[o * inner..(o + 1) * inner];
        for r in 0..red {
            let row = &src[(o * red + r) * inner..(o * red + r + 1) * inner];
            m.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= n);
        let v = &mut var[o * inner..(o + 1) * inner];
        for r in 0..red {
            let row = &src[(o * red + r) * inner..(o * red + r + 1) * inner];
            for ((a, &x), &mu) in v.iter_mut().zip(row).zip(m.iter()) {
                *a += (x - mu) * (x - mu);
            }
        }
        v.iter_mut().for_each(|a| *a /= n);
    }
    (mean, var)
}

impl<T: Real> Tape<T> {
    /// Standardizes `x` to zero mean and unit (biased) variance over the
    /// contiguous axes `axes`: batch norm uses `0..rank-1`, instance norm
    /// `1..rank-1`, layer norm `rank-1..rank`.
    pub fn normalize(&mut self, x: Var, axes: Range<usize>, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() || axes.end > shape.len() {
            return Err(TensorError::dim("normalize", format!("axes {axes:?} invalid for {shape:?}")));
        }
        let (outer, red, inner) = split_range(&shape, &axes);
        let (mean, var) = moments(self.value(x), axes);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for r in 0..red {
                let base = (o * red + r) * inner;
                for i in 0..inner {
                    let g = o * inner + i;
                    out[base + i] = (src[base + i] - mean[g]) * inv_std[g];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                // dx = inv_std * (g - mean(g) - y * mean(g * y)) per group
                let y = args.output.data();
                let g = args.grad;
                let n = T::from_usize(red).unwrap();
                let mut mg = vec![T::zero(); outer * inner];
                let mut mgy = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for r in 0..red {
                        let base = (o * red + r) * inner;
                        for i in 0..inner {
                            mg[o * inner + i] += g[base + i];
                            mgy[o * inner + i] += g[base + i] * y[base + i];
                        }
                    }
                }
                mg.iter_mut().chain(mgy.iter_mut()).for_each(|v| *v /= n);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for r in 0..red {
                        let base = (o * red + r) * inner;
                        for i in 0..inner {
                            let k = o * inner + i;
                            gx[base + i] = inv_std[k] * (g[base + i] - mg[k] - y[base + i] * mgy[k]);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
