use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, Real, Tensor, Var};

/// Row-major 2×3 affine map from output to input normalized coordinates:
/// `(x_s, y_s) = (a·x + b·y + c, d·x + e·y + f)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: Self = Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self([sx, 0.0, 0.0, 0.0, sy, 0.0])
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Nearest,
    #[default]
    Bilinear,
}

/// Normalized coordinate of pixel center `i` on an axis of `len` pixels.
fn norm_coord(i: usize, len: usize) -> f64 {
    (2 * i + 1) as f64 / len as f64 - 1.0
}

/// Inverse of [`norm_coord`]: continuous pixel index of normalized `s`.
fn pixel_coord(s: f64, len: usize) -> f64 {
    ((s + 1.0) * len as f64 - 1.0) / 2.0
}

struct Plane<'a, T> {
    data: &'a [T],
    h: usize,
    w: usize,
}

impl<T: Real> Plane<'_, T> {
    fn at(&self, y: i64, x: i64) -> T {
        if y < 0 || x < 0 || y >= self.h as i64 || x >= self.w as i64 {
            T::zero()
        } else {
            self.data[y as usize * self.w + x as usize]
        }
    }
}

/// One output pixel's sampling footprint: up to four (y, x, weight) taps.
struct Taps {
    x0: i64,
    y0: i64,
    fx: f64,
    fy: f64,
}

fn taps(ix: f64, iy: f64) -> Taps {
    let (x0, y0) = (ix.floor(), iy.floor());
    Taps { x0: x0 as i64, y0: y0 as i64, fx: ix - x0, fy: iy - y0 }
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn dims(x: &[usize], out: (usize, usize)) -> Result<Dims> {
    let [n, c, h, w] = *x else {
        return Err(Error::ShapeMismatch(format!("grid sample expects NCHW input, got {x:?}")));
    };
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::ShapeMismatch(format!("grid sample output size {out:?}")));
    }
    Ok(Dims { n, c, h, w, oh: out.0, ow: out.1 })
}

/// Source pixel coordinates (ix, iy) of output pixel (i, j) under `t`.
fn source(t: &[f64], d: &Dims, i: usize, j: usize) -> (f64, f64) {
    let (xn, yn) = (norm_coord(j, d.ow), norm_coord(i, d.oh));
    let sx = t[0] * xn + t[1] * yn + t[2];
    let sy = t[3] * xn + t[4] * yn + t[5];
    (pixel_coord(sx, d.w), pixel_coord(sy, d.h))
}

fn forward<T: Real>(x: &[T], thetas: &[[f64; 6]], d: &Dims, mode: SampleMode) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.c * d.oh * d.ow];
    for s in 0..d.n {
        for i in 0..d.oh {
            for j in 0..d.ow {
                let (ix, iy) = source(&thetas[s], d, i, j);
                for ch in 0..d.c {
                    let base = (s * d.c + ch) * d.h * d.w;
                    let p = Plane { data: &x[base..base + d.h * d.w], h: d.h, w: d.w };
                    let v = match mode {
                        SampleMode::Nearest => p.at(iy.round() as i64, ix.round() as i64),
                        SampleMode::Bilinear => {
                            let tp = taps(ix, iy);
                            let (fx, fy) = (T::lit(tp.fx), T::lit(tp.fy));
                            let one = T::one();
                            (one - fy) * ((one - fx) * p.at(tp.y0, tp.x0) + fx * p.at(tp.y0, tp.x0 + 1))
                                + fy * ((one - fx) * p.at(tp.y0 + 1, tp.x0) + fx * p.at(tp.y0 + 1, tp.x0 + 1))
                        }
                    };
                    out[((s * d.c + ch) * d.oh + i) * d.ow + j] = v;
                }
            }
        }
    }
    out
}

fn theta_rows<T: Real>(theta: &Tensor<T>, n: usize) -> Result<Vec<[f64; 6]>> {
    if theta.shape() != [n, 6] {
        return Err(Error::ShapeMismatch(format!("theta {:?}, expected [{n}, 6]", theta.shape())));
    }
    Ok(theta
        .data()
        .chunks(6)
        .map(|r| std::array::from_fn(|k| r[k].to_f64().expect("finite theta")))
        .collect())
}

struct SamplerOp {
    out: (usize, usize),
    mode: SampleMode,
}

impl<T: Real> Backward<T> for SamplerOp {
    fn name(&self) -> &'static str {
        "affine_grid_sample"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, theta) = (inputs[0], inputs[1]);
        let d = dims(x.shape(), self.out)?;
        let thetas = theta_rows(theta, d.n)?;
        let mut gx = vec![T::zero(); x.numel()];
        let mut gt = vec![0.0f64; d.n * 6];
        let inside = |y: i64, xx: i64| y >= 0 && xx >= 0 && y < d.h as i64 && xx < d.w as i64;
        for s in 0..d.n {
            for i in 0..d.oh {
                for j in 0..d.ow {
                    let (ix, iy) = source(&thetas[s], &d, i, j);
                    let (xn, yn) = (norm_coord(j, d.ow), norm_coord(i, d.oh));
                    let (mut d_ix, mut d_iy) = (0.0, 0.0);
                    for ch in 0..d.c {
                        let base = (s * d.c + ch) * d.h * d.w;
                        let go = grad.data()[((s * d.c + ch) * d.oh + i) * d.ow + j];
                        match self.mode {
                            SampleMode::Nearest => {
                                let (y, xx) = (iy.round() as i64, ix.round() as i64);
                                if inside(y, xx) {
                                    gx[base + y as usize * d.w + xx as usize] += go;
                                }
                            }
                            SampleMode::Bilinear => {
                                let tp = taps(ix, iy);
                                let p = Plane { data: &x.data()[base..base + d.h * d.w], h: d.h, w: d.w };
                                for (dy, dx, wt) in [
                                    (0, 0, (1.0 - tp.fy) * (1.0 - tp.fx)),
                                    (0, 1, (1.0 - tp.fy) * tp.fx),
                                    (1, 0, tp.fy * (1.0 - tp.fx)),
                                    (1, 1, tp.fy * tp.fx),
                                ] {
                                    let (y, xx) = (tp.y0 + dy, tp.x0 + dx);
                                    if inside(y, xx) {
                                        gx[base + y as usize * d.w + xx as usize] += go * T::lit(wt);
                                    }
                                }
                                let g = go.to_f64().expect("finite grad");
                                let v = |dy: i64, dx: i64| p.at(tp.y0 + dy, tp.x0 + dx).to_f64().expect("finite input");
                                d_ix += g * ((1.0 - tp.fy) * (v(0, 1) - v(0, 0)) + tp.fy * (v(1, 1) - v(1, 0)));
                                d_iy += g * ((1.0 - tp.fx) * (v(1, 0) - v(0, 0)) + tp.fx * (v(1, 1) - v(0, 1)));
                            }
                        }
                    }
                    // ix = ((sx + 1)·W − 1) / 2, so dix/dsx = W / 2.
                    let d_sx = d_ix * d.w as f64 / 2.0;
                    let d_sy = d_iy * d.h as f64 / 2.0;
                    let row = &mut gt[s * 6..s * 6 + 6];
                    row[0] += d_sx * xn;
                    row[1] += d_sx * yn;
                    row[2] += d_sx;
                    row[3] += d_sy * xn;
                    row[4] += d_sy * yn;
                    row[5] += d_sy;
                }
            }
        }
        let gx = needs[0].then(|| Tensor::new(x.shape(), gx).expect("dx shape"));
        let gt = needs[1].then(|| Tensor::new(theta.shape(), gt.into_iter().map(T::lit).collect()).expect("dtheta shape"));
        Ok(vec![gx, gt])
    }
}

/// Samples `x` under per-sample affine maps `theta: [N, 6]` onto an
/// `out = (H', W')` grid. Samples falling outside the input read as zero.
///
/// Coordinates refer to pixel centers (pixel `i` of `L` sits at
/// `(2i + 1)/L − 1`), so the identity map at equal size is a no-op and a
/// shift by 2 leaves the image entirely.
pub fn affine_grid_sample<T: Real>(g: &mut Graph<T>, x: Var, theta: Var, out: (usize, usize), mode: SampleMode) -> Result<Var> {
    let d = dims(g.shape(x), out)?;
    let thetas = theta_rows(g.value(theta), d.n)?;
    let y = forward(g.value(x).data(), &thetas, &d, mode);
    let y = Tensor::new(&[d.n, d.c, d.oh, d.ow], y)?;
    g.apply(Box::new(SamplerOp { out, mode }), &[x, theta], y)
}

/// Graph-free sampling with one map shared by every sample.
pub fn sample_affine<T: Real>(x: &Tensor<T>, theta: &AffineParams, out: (usize, usize), mode: SampleMode) -> Result<Tensor<T>> {
    let d = dims(x.shape(), out)?;
    let y = forward(x.data(), &vec![theta.0; d.n], &d, mode);
    Tensor::new(&[d.n, d.c, d.oh, d.ow], y)
}

/// Plain separable bilinear resize of an NCHW tensor with the same
/// pixel-center convention and zero padding as the sampler.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out: (usize, usize)) -> Result<Tensor<T>> {
    let d = dims(x.shape(), out)?;
    let axis = |o: usize, src: usize| -> Vec<(i64, f64)> {
        (0..o)
            .map(|i| {
                let c = (i as f64 + 0.5) * src as f64 / o as f64 - 0.5;
                (c.floor() as i64, c - c.floor())
            })
            .collect()
    };
    let (rows, cols) = (axis(d.oh, d.h), axis(d.ow, d.w));
    let mut y = vec![T::zero(); d.n * d.c * d.oh * d.ow];
    for plane in 0..d.n * d.c {
        let p = Plane { data: &x.data()[plane * d.h * d.w..(plane + 1) * d.h * d.w], h: d.h, w: d.w };
        for (i, &(y0, fy)) in rows.iter().enumerate() {
            for (j, &(x0, fx)) in cols.iter().enumerate() {
                let (fx, fy) = (T::lit(fx), T::lit(fy));
                let one = T::one();
                let top = (one - fx) * p.at(y0, x0) + fx * p.at(y0, x0 + 1);
                let bottom = (one - fx) * p.at(y0 + 1, x0) + fx * p.at(y0 + 1, x0 + 1);
                y[(plane * d.oh + i) * d.ow + j] = (one - fy) * top + fy * bottom;
            }
        }
    }
    Tensor::new(&[d.n, d.c, d.oh, d.ow], y)
}
