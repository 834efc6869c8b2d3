use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{split_axis, strides_of, Tensor};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Gathers `src` (with `shape`) through the axis permutation `perm`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Real> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(value, &[x], Box::new(|args| vec![Some(args.grad.to_vec())])))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::dim("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let (_, g) = permute_data(args.grad, &out_shape, &inverse);
                vec![Some(g)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        check_axis("transpose", self.shape(x), a.max(b))?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        for v in xs {
            let s = self.shape(*v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(TensorError::shape("concat", &base, s));
            }
        }
        let lens: Vec<usize> = xs.iter().map(|v| self.shape(*v)[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in xs.iter().zip(&lens) {
                let src = self.value(*v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(
            value,
            xs,
            Box::new(move |args| {
                let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&args.grad[off..off + len * inner]);
                        off += len * inner;
                    }
                }
                grads.into_iter().zip(&args.needs).map(|(g, &n)| n.then_some(g)).collect()
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::dim(
                "narrow",
                format!("range {start}..{} exceeds extent {} of {shape:?}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Splits `x` into `n` equal pieces along `axis`.
    pub fn chunk(&mut self, x: Var, n: usize, axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        check_axis("chunk", &shape, axis)?;
        if n == 0 || shape[axis] % n != 0 {
            return Err(TensorError::dim("chunk", format!("extent {} of {shape:?} not divisible by {n}", shape[axis])));
        }
        let len = shape[axis] / n;
        (0..n).map(|i| self.narrow(x, axis, i * len, len)).collect()
    }

    /// Selects entries `indices` along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("index_select", &shape, axis)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(TensorError::dim("index_select", format!("indices {indices:?} invalid for {shape:?} axis {axis}")));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * full + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor::new(&out_shape, data)?;
        let indices = indices.to_vec();
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * full * inner];
                let mut off = 0;
                for o in 0..outer {
                    for &i in &indices {
                        let base = (o * full + i) * inner;
                        for (d, &s) in g[base..base + inner].iter_mut().zip(&args.grad[off..off + inner]) {
                            *d += s;
                        }
                        off += inner;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Picks elements by flat (row-major) index into a 1-D result.
    pub fn take(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if flat.is_empty() || flat.iter().any(|&i| i >= n) {
            return Err(TensorError::dim("take", format!("flat indices out of range for {n} elements")));
        }
        let src = self.value(x).data();
        let value = Tensor::new(&[flat.len()], flat.iter().map(|&i| src[i]).collect())?;
        let flat = flat.to_vec();
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); n];
                for (&i, &s) in flat.iter().zip(args.grad) {
                    g[i] += s;
                }
                vec![Some(g)]
            }),
        ))
    }
}
