use rand::Rng;

use super::{kaiming_uniform, Binder, Params};
use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, Real, Tensor, Var};

/// `floor((len + 2·pad − k)/stride) + 1`, or `None` if the window never fits.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one sample `[C, H, W]` into `[C·kh·kw, oh·ow]`.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols();
        let mut r = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + i) as isize - self.pad.0 as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride.1 + j) as isize - self.pad.1 as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates columns back into `[C, H, W]`.
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let p = self.cols();
        let mut r = 0;
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + i) as isize - self.pad.0 as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride.1 + j) as isize - self.pad.1 as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], stride: (usize, usize), pad: (usize, usize)) -> Result<Geometry> {
    let ([_, c, h, wd], [_, wc, kh, kw]) = (x, w) else {
        return Err(Error::ShapeMismatch(format!("conv2d expects NCHW input and OIHW weight, got {x:?}, {w:?}")));
    };
    if c != wc {
        return Err(Error::ShapeMismatch(format!("conv2d input has {c} channels, weight expects {wc}")));
    }
    let oh = conv_out_len(*h, *kh, stride.0, pad.0);
    let ow = conv_out_len(*wd, *kw, stride.1, pad.1);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::ShapeMismatch(format!("kernel {kh}×{kw} does not fit input {h}×{wd} with padding {pad:?}")));
    };
    Ok(Geometry { c: *c, h: *h, w: *wd, kh: *kh, kw: *kw, oh, ow, stride, pad })
}

struct Conv2dOp {
    stride: (usize, usize),
    pad: (usize, usize),
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geo = geometry(x.shape(), w.shape(), self.stride, self.pad)?;
        let (n, co) = (x.shape()[0], w.shape()[0]);
        let (k, p) = (geo.rows(), geo.cols());
        let in_len = geo.c * geo.h * geo.w;

        let mut gx = needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut gw = needs[1].then(|| vec![T::zero(); w.numel()]);
        let mut cols = vec![T::zero(); k * p];
        let mut gcols = vec![T::zero(); k * p];
        for s in 0..n {
            let go = &grad.data()[s * co * p..(s + 1) * co * p];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
                // dW += dOut · colsᵀ
                T::gemm(co, p, k, T::one(), go, (p, 1), &cols, (1, p), T::one(), gw, (k, 1));
            }
            if let Some(gx) = gx.as_mut() {
                // dCols = Wᵀ · dOut
                T::gemm(k, co, p, T::one(), w.data(), (1, k), go, (p, 1), T::zero(), &mut gcols, (p, 1));
                geo.col2im(&gcols, &mut gx[s * in_len..(s + 1) * in_len]);
            }
        }
        let mut grads = vec![
            gx.map(|g| Tensor::new(x.shape(), g)).transpose()?,
            gw.map(|g| Tensor::new(w.shape(), g)).transpose()?,
        ];
        if inputs.len() == 3 {
            let gb = needs[2].then(|| {
                let mut acc = vec![T::zero(); co];
                for (i, chunk) in grad.data().chunks(p).enumerate() {
                    acc[i % co] += chunk.iter().copied().sum::<T>();
                }
                Tensor::new(&[co], acc).expect("bias grad shape")
            });
            grads.push(gb);
        }
        debug_assert_eq!(out.shape()[1], co);
        Ok(grads)
    }
}

/// Cross-correlation of `x: [N, C, H, W]` with `weight: [O, C, kh, kw]`.
pub fn conv2d<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Var> {
    let (xv, wv) = (g.value(x), g.value(weight));
    let geo = geometry(xv.shape(), wv.shape(), stride, padding)?;
    let (n, co) = (xv.shape()[0], wv.shape()[0]);
    let (k, p) = (geo.rows(), geo.cols());
    let bias_values = match bias {
        Some(b) => {
            let bv = g.value(b);
            if bv.shape() != [co] {
                return Err(Error::ShapeMismatch(format!("conv2d bias {:?} for {co} output channels", bv.shape())));
            }
            Some(bv.data().to_vec())
        }
        None => None,
    };
    let in_len = geo.c * geo.h * geo.w;
    let mut out = vec![T::zero(); n * co * p];
    let mut cols = vec![T::zero(); k * p];
    for s in 0..n {
        geo.im2col(&xv.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let dst = &mut out[s * co * p..(s + 1) * co * p];
        if let Some(b) = &bias_values {
            for (row, &bias) in dst.chunks_mut(p).zip(b) {
                row.fill(bias);
            }
        }
        T::gemm(co, k, p, T::one(), wv.data(), (k, 1), &cols, (p, 1), T::one(), dst, (p, 1));
    }
    let out = Tensor::new(&[n, co, geo.oh, geo.ow], out)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    g.apply(Box::new(Conv2dOp { stride, pad: padding }), &inputs, out)
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = vec![T::zero(); inputs[0].numel()];
        for (&src, &go) in self.argmax.iter().zip(grad.data()) {
            g[src] += go;
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), g)?)])
    }
}

/// Max-pooling with rectangular `(h, w)` windows and no padding. The
/// gradient goes to the first maximal element of each window.
pub fn maxpool2d<T: Real>(g: &mut Graph<T>, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
    let xv = g.value(x);
    let [n, c, h, w] = xv.shape() else {
        return Err(Error::ShapeMismatch(format!("maxpool2d expects NCHW, got {:?}", xv.shape())));
    };
    let (Some(oh), Some(ow)) = (conv_out_len(*h, window.0, stride.0, 0), conv_out_len(*w, window.1, stride.1, 0)) else {
        return Err(Error::ShapeMismatch(format!("pool window {window:?} does not fit {h}×{w}")));
    };
    let data = xv.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride.0 * w + ox * stride.1;
                for i in 0..window.0 {
                    for j in 0..window.1 {
                        let idx = base + (oy * stride.0 + i) * w + ox * stride.1 + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(&[*n, *c, oh, ow], out)?;
    g.apply(Box::new(MaxPoolOp { argmax }), &[x], out)
}

/// Convolution layer description; its tensors live in [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Omitted in front of batch normalization, which cancels it.
    pub bias: bool,
}

impl Conv2d {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        params.insert(format!("{name}.weight"), kaiming_uniform(&[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng), true);
        params.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true);
        Self { name: name.to_string(), in_ch, out_ch, kernel, stride, padding, bias: true }
    }

    /// Same as [`Conv2d::new`] but without a bias term.
    pub fn unbiased<T: Real>(
        params: &mut Params<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        params.insert(format!("{name}.weight"), kaiming_uniform(&[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng), true);
        Self { name: name.to_string(), in_ch, out_ch, kernel, stride, padding, bias: false }
    }

    /// 3×3, stride 1, padding 1.
    pub fn same3<T: Real>(params: &mut Params<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self::new(params, name, in_ch, out_ch, (3, 3), (1, 1), (1, 1), rng)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel.0 * self.kernel.1 + if self.bias { self.out_ch } else { 0 }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_len(h, self.kernel.0, self.stride.0, self.padding.0)?,
            conv_out_len(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let w = b.var(g, &format!("{}.weight", self.name))?;
        let bias = if self.bias { Some(b.var(g, &format!("{}.bias", self.name))?) } else { None };
        conv2d(g, x, w, bias, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{cases, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = x.shape() else { unreachable!() };
        let [o, _, kh, kw] = w.shape() else { unreachable!() };
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = vec![0.0; n * o * oh * ow];
        for s in 0..*n {
            for oc in 0..*o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..*c {
                            for i in 0..*kh {
                                for j in 0..*kw {
                                    let (iy, ix) = (y as isize + i as isize - pad as isize, xx as isize + j as isize - pad as isize);
                                    if iy >= 0 && ix >= 0 && (iy as usize) < *h && (ix as usize) < *wd {
                                        acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((s * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_and_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = random_tensor::<f64>(&[1, 1, 4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = conv2d(&mut g, x, w, Some(b), (1, 1), (0, 0)).unwrap();
        assert_eq!(g.value(y), &xv);

        let z = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(random_tensor(&[3, 2, 3, 3], 1.0, &mut rng));
        let b = g.constant(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let y = conv2d(&mut g, z, w, Some(b), (1, 1), (1, 1)).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert_eq!(*v, [0.5, -1.0, 2.0][i / 16]);
        }
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = random_tensor::<f64>(&[1, 2, 5, 5], 1.0, &mut rng);
        let wv = random_tensor::<f64>(&[3, 2, 3, 3], 1.0, &mut rng);
        let bv = [0.1, -0.2, 0.3];
        let mut g = Graph::new();
        let (x, w) = (g.constant(xv.clone()), g.constant(wv.clone()));
        let b = g.constant(Tensor::from_f64(&[3], &bv).unwrap());
        let y = conv2d(&mut g, x, w, Some(b), (1, 1), (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 5, 5]);
        for (a, e) in g.value(y).data().iter().zip(naive_conv(&xv, &wv, &bv, 1)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(conv2d(&mut g, x, w, None, (1, 1), (0, 0)), Err(Error::ShapeMismatch(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(conv2d(&mut g, x, w, None, (1, 1), (0, 0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn maxpool_values_ties_and_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let y = maxpool2d(&mut g, x, (2, 2), (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[4.]);

        let c = g.leaf(Tensor::full(&[1, 1, 2, 4], 0.7), true);
        let y = maxpool2d(&mut g, c, (2, 2), (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, 0.7]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(c).unwrap().data(), &[1., 0., 1., 0., 0., 0., 0., 0.]);

        let wide = g.constant(Tensor::zeros(&[1, 1, 4, 100]));
        let y = maxpool2d(&mut g, wide, (1, 2), (1, 2)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 50]);
        let tall = g.constant(Tensor::zeros(&[1, 1, 1, 3]));
        assert!(maxpool2d(&mut g, tall, (2, 1), (2, 1)).is_err());
    }

    #[test]
    fn conv_and_pool_gradients() {
        for seed in 0..20 {
            assert!(cases::conv(seed).unwrap().passes(1e-4));
            assert!(cases::pool(seed).unwrap().passes(1e-4));
        }
    }

    #[test]
    fn output_dims_formula() {
        assert_eq!(conv_out_len(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_len(5, 3, 2, 0), Some(2));
        assert_eq!(conv_out_len(2, 3, 1, 0), None);
    }
}
