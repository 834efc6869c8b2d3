use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{split_axis, Tensor};

fn prepare<T: Real>(tape: &Tape<T>, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
    let shape = tape.shape(x);
    if axis >= shape.len() {
        return Err(TensorError::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    if !tape.value(x).all_finite() {
        return Err(TensorError::Numeric(format!("{op}: non-finite input")));
    }
    Ok(split_axis(shape, axis))
}

/// Visits each slice along the softmax axis as (start offset, stride).
fn for_slices(outer: usize, len: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

impl<T: Real> Tape<T> {
    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = prepare(self, "softmax", x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for_slices(outer, len, inner, |start, stride| {
            let m = (0..len).map(|l| src[start + l * stride]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for l in 0..len {
                let e = (src[start + l * stride] - m).exp();
                out[start + l * stride] = e;
                z += e;
            }
            for l in 0..len {
                out[start + l * stride] /= z;
            }
        });
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad;
                let mut gx = vec![T::zero(); y.len()];
                for_slices(outer, len, inner, |start, stride| {
                    let dot: T = (0..len).map(|l| g[start + l * stride] * y[start + l * stride]).sum();
                    for l in 0..len {
                        let k = start + l * stride;
                        gx[k] = y[k] * (g[k] - dot);
                    }
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = prepare(self, "log_softmax", x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for_slices(outer, len, inner, |start, stride| {
            let m = (0..len).map(|l| src[start + l * stride]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..len).map(|l| (src[start + l * stride] - m).exp()).sum::<T>().ln();
            for l in 0..len {
                out[start + l * stride] = src[start + l * stride] - lse;
            }
        });
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad;
                let mut gx = vec![T::zero(); y.len()];
                for_slices(outer, len, inner, |start, stride| {
                    let gsum: T = (0..len).map(|l| g[start + l * stride]).sum();
                    for l in 0..len {
                        let k = start + l * stride;
                        gx[k] = g[k] - y[k].exp() * gsum;
                    }
                });
                vec![Some(gx)]
            }),
        ))
    }
}
