use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Window configuration for 2-D pooling over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Window {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Window { kernel, stride, padding }
    }

    /// Odd square kernel, stride 1, output the same size as the input.
    pub fn same(kernel: usize) -> Self {
        Window::new((kernel, kernel), (1, 1), (kernel / 2, kernel / 2))
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw || ph >= kh || pw >= kw {
            return Err(TensorError::dim("pool", format!("window {self:?} invalid for {h}×{w}")));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    /// In-bounds input cells `(y, x)` of output cell `(oy, ox)`.
    fn cells(&self, h: usize, w: usize, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize)> {
        let y0 = (oy * self.stride.0) as isize - self.padding.0 as isize;
        let x0 = (ox * self.stride.1) as isize - self.padding.1 as isize;
        let (kh, kw) = self.kernel;
        (y0.max(0)..(y0 + kh as isize).min(h as isize)).flat_map(move |y| {
            (x0.max(0)..(x0 + kw as isize).min(w as isize)).map(move |x| (y as usize, x as usize))
        })
    }
}

fn nhwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(TensorError::dim(op, format!("expected [B, H, W, C], got {shape:?}"))),
    }
}

/// Windowed max pooling on an NHWC tensor; returns output and flat argmax per output.
pub fn max_pool2d_forward<T: Real>(x: &Tensor<T>, win: Window) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, h, w, c) = nhwc("max_pool2d", x.shape())?;
    let (oh, ow) = win.out_hw(h, w)?;
    let src = x.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut arg = Vec::with_capacity(b * oh * ow * c);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for (y, xx) in win.cells(h, w, oy, ox) {
                        let k = ((n * h + y) * w + xx) * c + ch;
                        if best == usize::MAX || src[k] > src[best] {
                            best = k;
                        }
                    }
                    arg.push(best);
                    out.push(src[best]);
                }
            }
        }
    }
    Ok((Tensor::new(&[b, oh, ow, c], out)?, arg))
}

impl<T: Real> Tape<T> {
    pub fn max_pool2d(&mut self, x: Var, win: Window) -> Result<Var> {
        let (value, arg) = max_pool2d_forward(self.value(x), win)?;
        let n = self.value(x).numel();
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); n];
                for (&k, &s) in arg.iter().zip(args.grad) {
                    g[k] += s;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Windowed average pooling; each window averages its in-bounds cells only.
    pub fn avg_pool2d(&mut self, x: Var, win: Window) -> Result<Var> {
        let (b, h, w, c) = nhwc("avg_pool2d", self.shape(x))?;
        let (oh, ow) = win.out_hw(h, w)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * oh * ow * c];
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((n * oh + oy) * ow + ox) * c;
                    let cells: Vec<_> = win.cells(h, w, oy, ox).collect();
                    let inv = T::one() / T::from_usize(cells.len()).unwrap();
                    for (y, xx) in cells {
                        let k = ((n * h + y) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += src[k + ch] * inv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, oh, ow, c], out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); b * h * w * c];
                for n in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o = ((n * oh + oy) * ow + ox) * c;
                            let cells: Vec<_> = win.cells(h, w, oy, ox).collect();
                            let inv = T::one() / T::from_usize(cells.len()).unwrap();
                            for (y, xx) in cells {
                                let k = ((n * h + y) * w + xx) * c;
                                for ch in 0..c {
                                    g[k + ch] += args.grad[o + ch] * inv;
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean over the spatial axes: `[B, H, W, C] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = nhwc("global_avg_pool", self.shape(x))?;
        let flat = self.reshape(x, &[b, h * w, c])?;
        self.mean(flat, 1, false)
    }
}
