use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution over NHWC inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_hw();
        let (k, ci) = (self.kernel, self.in_ch);
        let mut cols = vec![T::zero(); self.batch * oh * ow * self.patch_len()];
        let mut row = 0;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut cols[row * self.patch_len()..(row + 1) * self.patch_len()];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * ci;
                            let d = (ky * k + kx) * ci;
                            dst[d..d + ci].copy_from_slice(&x[src..src + ci]);
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_hw();
        let (k, ci) = (self.kernel, self.in_ch);
        let mut x = vec![T::zero(); self.batch * self.height * self.width * ci];
        let mut row = 0;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src_row = &cols[row * self.patch_len()..(row + 1) * self.patch_len()];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let dst = ((b * self.height + iy as usize) * self.width + ix as usize) * ci;
                            let s = (ky * k + kx) * ci;
                            for (d, &v) in x[dst..dst + ci].iter_mut().zip(&src_row[s..s + ci]) {
                                *d += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        x
    }
}

impl<T: Real> Tape<T> {
    /// 2-D convolution of `x: [B, H, W, Cin]` with `w: [k, k, Cin, Cout]` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sx[3] != sw[2] {
            return Err(TensorError::shape("conv2d", &sx, &sw));
        }
        if stride == 0 || sx[1] + 2 * padding < sw[0] || sx[2] + 2 * padding < sw[0] {
            return Err(TensorError::dim("conv2d", format!("kernel {} does not fit input {sx:?} with padding {padding}", sw[0])));
        }
        let geo = ConvGeometry {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            in_ch: sx[3],
            out_ch: sw[3],
            kernel: sw[0],
            stride,
            padding,
        };
        let (oh, ow) = geo.out_hw();
        let rows = geo.batch * oh * ow;
        let kk = geo.patch_len();
        let co = geo.out_ch;
        let cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            geo.im2col(self.value(x).data())
        };
        let mut out = vec![T::zero(); rows * co];
        {
            let lhs = if geo.is_pointwise() { self.value(x).data() } else { &cols };
            T::gemm(rows, kk, co, lhs, (kk as isize, 1), self.value(w).data(), (co as isize, 1), T::zero(), &mut out, (co as isize, 1));
        }
        let value = Tensor::new(&[geo.batch, oh, ow, co], out)?;
        Ok(self.record(
            value,
            &[x, w],
            Box::new(move |args| {
                let g = args.grad;
                let lhs = if geo.is_pointwise() { args.inputs[0].data() } else { &cols };
                let gw = args.needs[1].then(|| {
                    let mut gw = vec![T::zero(); kk * co];
                    T::gemm(kk, rows, co, lhs, (1, kk as isize), g, (co as isize, 1), T::zero(), &mut gw, (co as isize, 1));
                    gw
                });
                let gx = args.needs[0].then(|| {
                    let mut gcols = vec![T::zero(); rows * kk];
                    T::gemm(rows, co, kk, g, (co as isize, 1), args.inputs[1].data(), (1, co as isize), T::zero(), &mut gcols, (kk as isize, 1));
                    if geo.is_pointwise() {
                        gcols
                    } else {
                        geo.col2im(&gcols)
                    }
                });
                vec![gx, gw]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, co) = (w.shape()[0], w.shape()[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, oh, ow, co]);
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    acc += x.at(&[n, iy as usize, ix as usize, c]) * w.at(&[ky, kx, c, o]);
                                }
                            }
                        }
                        let off = out.offset(&[n, oy, ox, o]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Tensor::from_fn(&[2, 5, 4, 3], |i| ((i * 7919) % 23) as f64 / 23.0 - 0.5);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let w = Tensor::from_fn(&[k, k, 3, 2], |i| ((i * 104729) % 17) as f64 / 17.0 - 0.5);
            let mut tape = Tape::new();
            let vx = tape.constant(x.clone());
            let vw = tape.constant(w.clone());
            let y = tape.conv2d(vx, vw, stride, pad).unwrap();
            let expect = naive_conv(&x, &w, stride, pad);
            assert_eq!(tape.shape(y), expect.shape());
            assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn same_padding_preserves_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 16, 8, 4]));
        let w = tape.constant(Tensor::ones(&[3, 3, 4, 6]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 16, 8, 6]);
        let w2 = tape.constant(Tensor::ones(&[3, 3, 5, 6]));
        assert!(tape.conv2d(x, w2, 1, 1).is_err());
    }
}
