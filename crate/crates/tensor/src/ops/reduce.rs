use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{split_axis, Tensor};

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim || shape.len() == 1 {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: T = self.value(x).data().iter().copied().sum();
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sum over one axis. A rank-1 input reduces to shape `[1]`.
    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim("sum", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let value = Tensor::new(&reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &args.grad[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        g[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| TensorError::dim("mean", format!("axis {axis} out of range")))?;
        let s = self.sum(x, axis, keepdim)?;
        Ok(self.mul_scalar(s, T::one() / T::from_usize(len).unwrap()))
    }

    /// Maximum over one axis, with the winning index per output (first on ties).
    pub fn max(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim("max", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for l in 1..len {
                    if src[(o * len + l) * inner + i] > src[(o * len + best) * inner + i] {
                        best = l;
                    }
                }
                arg.push(best);
                out.push(src[(o * len + best) * inner + i]);
            }
        }
        let value = Tensor::new(&reduced_shape(&shape, axis, keepdim), out)?;
        let indices = arg.clone();
        let var = self.record(
            value,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        g[(o * len + arg[k]) * inner + i] += args.grad[k];
                    }
                }
                vec![Some(g)]
            }),
        );
        Ok((var, indices))
    }
}
