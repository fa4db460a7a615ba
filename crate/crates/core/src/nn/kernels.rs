//! Batched layer kernels over flat row-major buffers.

use crate::error::{Error, Result};
use crate::nn::spec::Activation;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        [c, h, w]: [usize; 3],
        out_ch: usize,
        [kh, kw]: [usize; 2],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::arg("stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d kernel larger than padded input",
                &[h + 2 * pad, w + 2 * pad],
                &[kh, kw],
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(i, j)`,
    /// or `None` if it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + i).checked_sub(self.pad)?;
        let x = (ox * self.stride + j).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for ch in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ch * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            cols[row + oy * self.wo + ox] = match self.source(oy, ox, i, j) {
                                Some((y, xx)) => x[(ch * self.h + y) * self.w + xx],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        for ch in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ch * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.source(oy, ox, i, j) {
                                dx[(ch * self.h + y) * self.w + xx] =
                                    dx[(ch * self.h + y) * self.w + xx] + cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Cross-correlation plus bias for a batch; returns `[B, out_ch, ho, wo]`.
    pub fn forward<T: Element>(&self, batch: usize, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
        let (patch, pos) = (self.patch(), self.positions());
        let in_sz = self.c * self.h * self.w;
        let out_sz = self.out_ch * pos;
        let mut out = vec![T::zero(); batch * out_sz];
        let mut cols = vec![T::zero(); patch * pos];
        for b in 0..batch {
            self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
            let o = &mut out[b * out_sz..(b + 1) * out_sz];
            for (oc, row) in o.chunks_exact_mut(pos).enumerate() {
                row.fill(bias[oc]);
            }
            T::gemm(
                self.out_ch,
                patch,
                pos,
                weight,
                (patch as isize, 1),
                &cols,
                (pos as isize, 1),
                T::one(),
                o,
            );
        }
        out
    }

    /// Gradients w.r.t. weight, bias, and input given the gradient of the
    /// pre-activation output.
    pub fn backward<T: Element>(
        &self,
        batch: usize,
        x: &[T],
        weight: &[T],
        dy: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (patch, pos) = (self.patch(), self.positions());
        let in_sz = self.c * self.h * self.w;
        let out_sz = self.out_ch * pos;
        let mut dw = vec![T::zero(); self.out_ch * patch];
        let mut db = vec![T::zero(); self.out_ch];
        let mut dx = vec![T::zero(); batch * in_sz];
        let mut cols = vec![T::zero(); patch * pos];
        let mut dcols = vec![T::zero(); patch * pos];
        for b in 0..batch {
            let g = &dy[b * out_sz..(b + 1) * out_sz];
            for (oc, row) in g.chunks_exact(pos).enumerate() {
                db[oc] = row.iter().fold(db[oc], |acc, &v| acc + v);
            }
            self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
            // dW += dY · colsᵀ
            T::gemm(
                self.out_ch,
                pos,
                patch,
                g,
                (pos as isize, 1),
                &cols,
                (1, pos as isize),
                T::one(),
                &mut dw,
            );
            // dcols = Wᵀ · dY
            T::gemm(
                patch,
                self.out_ch,
                pos,
                weight,
                (1, patch as isize),
                g,
                (pos as isize, 1),
                T::zero(),
                &mut dcols,
            );
            self.col2im_add(&dcols, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
        (dw, db, dx)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new([c, h, w]: [usize; 3], window: usize, stride: usize) -> Result<Self> {
        let fits = |e: usize| window >= 1 && stride >= 1 && e >= window && (e - window).is_multiple_of(stride);
        if !fits(h) || !fits(w) {
            return Err(Error::shape("pool window does not tile input", &[h, w], &[window, stride]));
        }
        Ok(Self {
            c,
            h,
            w,
            window,
            stride,
            ho: (h - window) / stride + 1,
            wo: (w - window) / stride + 1,
        })
    }

    fn planes(&self, batch: usize) -> usize {
        batch * self.c
    }

    /// Max pooling; ties resolve to the first position in row-major scan
    /// order. Returns outputs and flat argmax indices into `x`.
    pub fn max_forward<T: Element>(&self, batch: usize, x: &[T]) -> (Vec<T>, Vec<usize>) {
        let n = self.planes(batch) * self.ho * self.wo;
        let mut out = Vec::with_capacity(n);
        let mut arg = Vec::with_capacity(n);
        for plane in 0..self.planes(batch) {
            let base = plane * self.h * self.w;
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let mut best_i = base + oy * self.stride * self.w + ox * self.stride;
                    let mut best = x[best_i];
                    for i in 0..self.window {
                        for j in 0..self.window {
                            let idx = base + (oy * self.stride + i) * self.w + ox * self.stride + j;
                            if x[idx] > best {
                                best = x[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
        (out, arg)
    }

    pub fn avg_forward<T: Element>(&self, batch: usize, x: &[T]) -> Vec<T> {
        let scale = T::from_f64(1.0 / (self.window * self.window) as f64);
        let mut out = Vec::with_capacity(self.planes(batch) * self.ho * self.wo);
        for plane in 0..self.planes(batch) {
            let base = plane * self.h * self.w;
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let mut s = T::zero();
                    for i in 0..self.window {
                        let row = base + (oy * self.stride + i) * self.w + ox * self.stride;
                        for j in 0..self.window {
                            s = s + x[row + j];
                        }
                    }
                    out.push(s * scale);
                }
            }
        }
        out
    }

    pub fn avg_backward<T: Element>(&self, batch: usize, dy: &[T]) -> Vec<T> {
        let scale = T::from_f64(1.0 / (self.window * self.window) as f64);
        let mut dx = vec![T::zero(); self.planes(batch) * self.h * self.w];
        for plane in 0..self.planes(batch) {
            let base = plane * self.h * self.w;
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let g = dy[(plane * self.ho + oy) * self.wo + ox] * scale;
                    for i in 0..self.window {
                        let row = base + (oy * self.stride + i) * self.w + ox * self.stride;
                        for j in 0..self.window {
                            dx[row + j] = dx[row + j] + g;
                        }
                    }
                }
            }
        }
        dx
    }
}

pub(crate) fn max_backward<T: Element>(input_len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] = dx[i] + g;
    }
    dx
}

pub(crate) fn activate<T: Element>(act: Activation, x: &mut [T]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => x.iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        }),
        Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
    }
}

/// Multiplies `grad` in place by the activation derivative, expressed in
/// terms of the activation output.
pub(crate) fn activate_backward<T: Element>(act: Activation, out: &[T], grad: &mut [T]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, &o)| {
            if o <= T::zero() {
                *g = T::zero()
            }
        }),
        Activation::Tanh => grad
            .iter_mut()
            .zip(out)
            .for_each(|(g, &o)| *g = *g * (T::one() - o * o)),
    }
}

/// Convolution of a `[B, C, H, W]` batch with a `[O, C, kh, kw]` kernel.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match *input.shape() {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(Error::shape("conv2d input", input.shape(), &[0, 0, 0, 0])),
    };
    let [o, kc, kh, kw] = match *kernel.shape() {
        [o, kc, kh, kw] => [o, kc, kh, kw],
        _ => return Err(Error::shape("conv2d kernel", kernel.shape(), &[0, 0, 0, 0])),
    };
    if kc != c {
        return Err(Error::shape("conv2d channels", input.shape(), kernel.shape()));
    }
    if bias.shape() != [o] {
        return Err(Error::shape("conv2d bias", bias.shape(), &[o]));
    }
    let g = ConvGeom::new([c, h, w], o, [kh, kw], stride, padding)?;
    let out = g.forward(b, input.data(), kernel.data(), bias.data());
    let out = Tensor::from_parts_unchecked(&[b, o, g.ho, g.wo], out)?;
    out.check_finite()?;
    Ok(out)
}

/// Max pooling over a `[B, C, H, W]` batch. Windows must tile the input
/// exactly (no padding).
pub fn maxpool_forward<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = match *input.shape() {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(Error::shape("maxpool input", input.shape(), &[0, 0, 0, 0])),
    };
    let g = PoolGeom::new([c, h, w], window, stride)?;
    let (out, arg) = g.max_forward(b, input.data());
    Ok((Tensor::from_parts_unchecked(&[b, c, g.ho, g.wo], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[1.]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        assert_eq!(conv2d_forward(&x, &k, &b, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_windows() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let out = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn strided_padded_extent() {
        let x = Tensor::<f32>::full(&[2, 1, 5, 5], 1.0);
        let k = Tensor::<f32>::full(&[4, 1, 3, 3], 1.0);
        let out = conv2d_forward(&x, &k, &Tensor::zeros(&[4]), 2, 1).unwrap();
        assert_eq!(out.shape(), &[2, 4, 3, 3]);
        // corner sees a 2×2 patch of ones, centre a full 3×3
        assert_eq!(out.get(&[0, 0, 0, 0]), 4.0);
        assert_eq!(out.get(&[1, 3, 1, 1]), 9.0);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let k = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).is_err());
        let big = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        assert!(conv2d_forward(&x, &big, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let (out, arg) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 7.0);
        let (out, arg) = maxpool_forward(&c, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);

        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(maxpool_forward(&odd, 2, 2).is_err());
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass() {
        let vals: Vec<f64> = (0..32).map(|i| ((i * 37) % 11) as f64).collect();
        let x = Tensor::<f64>::from_f64(&[2, 1, 4, 4], &vals).unwrap();
        let (out, arg) = maxpool_forward(&x, 2, 2).unwrap();
        let dy: Vec<f64> = (0..out.len()).map(|i| i as f64 + 0.5).collect();
        let dx = max_backward(x.len(), &arg, &dy);
        assert_eq!(dx.iter().sum::<f64>(), dy.iter().sum::<f64>());
        assert_eq!(dx.iter().filter(|&&v| v != 0.0).count(), dy.len());
    }
}
