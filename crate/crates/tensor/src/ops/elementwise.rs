use crate::error::{Result, TensorError};
use crate::real::{cst, Real};
use crate::tape::{Tape, Var};
use crate::tensor::{strides_of, Tensor};

/// How an operand's elements map onto the broadcast output.
#[derive(Clone, Debug)]
enum Access {
    Same,
    /// Operand is a trailing block repeated over leading dims: `i % n`.
    Cycle(usize),
    /// Operand is a leading block with each element repeated `inner` times: `i / inner`.
    Repeat(usize),
    /// Arbitrary broadcast: per-output-axis strides (0 on broadcast axes).
    General(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Broadcast {
    out_shape: Vec<usize>,
    a: Access,
    b: Access,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape(op, a, b)),
        };
    }
    Ok(out)
}

fn access_for(shape: &[usize], out: &[usize]) -> Access {
    let numel: usize = shape.iter().product();
    let out_numel: usize = out.iter().product();
    if numel == out_numel {
        return Access::Same;
    }
    // Align to the output rank by left-padding with ones.
    let mut padded = vec![1; out.len() - shape.len()];
    padded.extend_from_slice(shape);
    // Trailing block: leading axes all 1, remaining axes equal the output.
    let first_real = padded.iter().position(|&d| d != 1).unwrap_or(out.len());
    if padded[first_real..] == out[first_real..] {
        return Access::Cycle(numel);
    }
    // Leading block: trailing axes all 1, leading axes equal the output.
    let last_real = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if padded[..last_real] == out[..last_real] {
        return Access::Repeat(out[last_real..].iter().product());
    }
    let own = strides_of(&padded);
    Access::General(
        padded
            .iter()
            .zip(own)
            .map(|(&d, s)| if d == 1 { 0 } else { s })
            .collect(),
    )
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let out_shape = broadcast_shape(op, a, b)?;
        Ok(Broadcast {
            a: access_for(a, &out_shape),
            b: access_for(b, &out_shape),
            out_shape,
        })
    }

    fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }
}

/// Invokes `f(out_index, operand_index)` for every output element.
fn for_each_index(access: &Access, out_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out_shape.iter().product();
    match access {
        Access::Same => (0..n).for_each(|i| f(i, i)),
        Access::Cycle(m) => (0..n).for_each(|i| f(i, i % m)),
        Access::Repeat(inner) => (0..n).for_each(|i| f(i, i / inner)),
        Access::General(strides) => {
            let out_strides = strides_of(out_shape);
            for i in 0..n {
                let mut rem = i;
                let mut off = 0;
                for (os, s) in out_strides.iter().zip(strides) {
                    off += (rem / os) * s;
                    rem %= os;
                }
                f(i, off);
            }
        }
    }
}

fn gather<T: Real>(access: &Access, out_shape: &[usize], src: &[T]) -> Vec<T> {
    if let Access::Same = access {
        return src.to_vec();
    }
    let mut out = vec![T::zero(); out_shape.iter().product()];
    for_each_index(access, out_shape, |i, j| out[i] = src[j]);
    out
}

/// Sums an output-shaped gradient back onto an operand of `len` elements.
fn reduce_to<T: Real>(access: &Access, out_shape: &[usize], grad: &[T], len: usize) -> Vec<T> {
    if let Access::Same = access {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for_each_index(access, out_shape, |i, j| out[j] += grad[i]);
    out
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let plan = Broadcast::new(name, self.shape(a), self.shape(b))?;
        let av = gather(&plan.a, &plan.out_shape, self.value(a).data());
        let bv = gather(&plan.b, &plan.out_shape, self.value(b).data());
        let data: Vec<T> = match op {
            BinOp::Add => av.iter().zip(&bv).map(|(&x, &y)| x + y).collect(),
            BinOp::Sub => av.iter().zip(&bv).map(|(&x, &y)| x - y).collect(),
            BinOp::Mul => av.iter().zip(&bv).map(|(&x, &y)| x * y).collect(),
            BinOp::Div => av.iter().zip(&bv).map(|(&x, &y)| x / y).collect(),
        };
        debug_assert_eq!(data.len(), plan.out_numel());
        let (av, bv) = match op {
            BinOp::Add | BinOp::Sub => (Vec::new(), Vec::new()),
            BinOp::Mul | BinOp::Div => (av, bv),
        };
        let value = Tensor::new(&plan.out_shape, data)?;
        let (len_a, len_b) = (self.value(a).numel(), self.value(b).numel());
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |args| {
                let g = args.grad;
                let ga = args.needs[0].then(|| {
                    let local: Vec<T> = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().zip(&bv).map(|(&g, &y)| g * y).collect(),
                        BinOp::Div => g.iter().zip(&bv).map(|(&g, &y)| g / y).collect(),
                    };
                    reduce_to(&plan.a, &plan.out_shape, &local, len_a)
                });
                let gb = args.needs[1].then(|| {
                    let local: Vec<T> = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&g| -g).collect(),
                        BinOp::Mul => g.iter().zip(&av).map(|(&g, &x)| g * x).collect(),
                        BinOp::Div => g
                            .iter()
                            .zip(&av)
                            .zip(&bv)
                            .map(|((&g, &x), &y)| -g * x / (y * y))
                            .collect(),
                    };
                    reduce_to(&plan.b, &plan.out_shape, &local, len_b)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// Multiplies `x` by a constant mask (broadcast like [`Tape::mul`]).
    pub fn masked_mul(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let m = self.constant(mask.clone());
        self.mul(x, m)
    }

    /// Applies `f` elementwise; `df(x, y)` is the local derivative given input and output.
    pub fn map_unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.record(
            value,
            &[x],
            Box::new(move |args| {
                let g = args
                    .grad
                    .iter()
                    .zip(args.inputs[0].data())
                    .zip(args.output.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, T::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_unary(x, T::ln, |x, _| T::one() / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map_unary(x, T::sqrt, |_, y| cst::<T>(0.5) / y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| -v, |_, _| -T::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map_unary(x, move |v| v + c, |_, _| T::one())
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        self.map_unary(x, move |v| v * c, move |_, _| c)
    }
}
