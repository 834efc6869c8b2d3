use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// Row-major (row stride, col stride) for an r×c matrix, optionally viewed transposed.
fn layout(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<T: Real> Tape<T> {
    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            layout(k, false),
            self.value(b).data(),
            layout(n, false),
            T::zero(),
            &mut out,
            layout(n, false),
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |args| {
                let g = args.grad;
                let (av, bv) = (args.inputs[0].data(), args.inputs[1].data());
                // dA = G · Bᵀ
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, layout(n, false), bv, layout(n, true), T::zero(), &mut ga, layout(k, false));
                    ga
                });
                // dB = Aᵀ · G
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av, layout(k, true), g, layout(n, false), T::zero(), &mut gb, layout(n, false));
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched matrix product of `a: [B, m, k]` and `b: [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    layout(k, false),
                    &bv[i * k * n..(i + 1) * k * n],
                    layout(n, false),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    layout(n, false),
                );
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |args| {
                let g = args.grad;
                let (av, bv) = (args.inputs[0].data(), args.inputs[1].data());
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            layout(n, false),
                            &bv[i * k * n..(i + 1) * k * n],
                            layout(n, true),
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            layout(k, false),
                        );
                    }
                    ga
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            layout(k, true),
                            &g[i * m * n..(i + 1) * m * n],
                            layout(n, false),
                            T::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            layout(n, false),
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}
