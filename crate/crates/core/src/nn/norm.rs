use super::{Binder, Params};
use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        other => Err(Error::ShapeMismatch(format!("batchnorm2d expects NCHW, got {other:?}"))),
    }
}

fn check_channel_param<T: Real>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::ShapeMismatch(format!("batchnorm2d {what} {:?} for {c} channels", t.shape())));
    }
    Ok(())
}

/// Shared normalize-and-scale forward; returns (y, x̂).
fn normalize<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
    let (n, c, hw) = dims(x.shape()).expect("validated shape");
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

struct BatchNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics depend on x (training mode).
    batch_stats: bool,
}

impl<T: Real> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, c, hw) = dims(inputs[0].shape())?;
        let gamma = inputs[1].data();
        let m = T::lit((n * hw) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy[ch] += grad.data()[i];
                    sum_dy_xhat[ch] += grad.data()[i] * self.xhat[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); inputs[0].numel()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in base..base + hw {
                        gx[i] = if self.batch_stats {
                            k * (grad.data()[i] - (sum_dy[ch] + self.xhat[i] * sum_dy_xhat[ch]) / m)
                        } else {
                            k * grad.data()[i]
                        };
                    }
                }
            }
            Tensor::new(inputs[0].shape(), gx).expect("dx shape")
        });
        let gg = needs[1].then(|| Tensor::new(&[c], sum_dy_xhat).expect("dgamma shape"));
        let gb = needs[2].then(|| Tensor::new(&[c], sum_dy).expect("dbeta shape"));
        Ok(vec![gx, gg, gb])
    }
}

/// Training-mode batch normalization over (N, H, W) per channel.
///
/// Returns the output and the batch `(mean, unbiased variance)` used to
/// update running statistics.
pub fn batchnorm2d_train<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<(Var, (Vec<T>, Vec<T>))> {
    let xv = g.value(x);
    let (n, c, hw) = dims(xv.shape())?;
    check_channel_param(g.value(gamma), c, "gamma")?;
    check_channel_param(g.value(beta), c, "beta")?;
    let m = (n * hw) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            mean[ch] += xv.data()[base..base + hw].iter().copied().sum::<T>();
        }
    }
    for v in &mut mean {
        *v /= T::lit(m);
    }
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for &v in &xv.data()[base..base + hw] {
                let d = v - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let unbiased: Vec<T> = var.iter().map(|&v| if m > 1.0 { v / T::lit(m - 1.0) } else { v / T::lit(m) }).collect();
    for v in &mut var {
        *v /= T::lit(m);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
    let (y, xhat) = normalize(xv, g.value(gamma).data(), g.value(beta).data(), &mean, &inv_std);
    let out = Tensor::new(xv.shape(), y)?;
    let v = g.apply(Box::new(BatchNormOp { xhat, inv_std, batch_stats: true }), &[x, gamma, beta], out)?;
    Ok((v, (mean, unbiased)))
}

/// Eval-mode batch normalization with fixed statistics.
pub fn batchnorm2d_eval<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, mean: &Tensor<T>, var: &Tensor<T>) -> Result<Var> {
    let xv = g.value(x);
    let (_, c, _) = dims(xv.shape())?;
    for (t, what) in [(g.value(gamma), "gamma"), (g.value(beta), "beta"), (mean, "running_mean"), (var, "running_var")] {
        check_channel_param(t, c, what)?;
    }
    let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
    let (y, xhat) = normalize(xv, g.value(gamma).data(), g.value(beta).data(), mean.data(), &inv_std);
    let out = Tensor::new(xv.shape(), y)?;
    g.apply(Box::new(BatchNormOp { xhat, inv_std, batch_stats: false }), &[x, gamma, beta], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(params: &mut Params<T>, name: &str, channels: usize) -> Self {
        params.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true);
        params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        params.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false);
        params.insert(format!("{name}.running_var"), Tensor::full(&[channels], T::one()), false);
        Self { name: name.to_string(), channels }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    /// Training mode (taken from the binder) normalizes with batch
    /// statistics and queues a momentum update of the running statistics.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let gamma = b.var(g, &format!("{}.gamma", self.name))?;
        let beta = b.var(g, &format!("{}.beta", self.name))?;
        let mean_name = format!("{}.running_mean", self.name);
        let var_name = format!("{}.running_var", self.name);
        let running_mean = b.params().get(&mean_name).ok_or_else(|| Error::ArchMismatch(mean_name.clone()))?.clone();
        let running_var = b.params().get(&var_name).ok_or_else(|| Error::ArchMismatch(var_name.clone()))?.clone();
        if !b.training() {
            return batchnorm2d_eval(g, x, gamma, beta, &running_mean, &running_var);
        }
        let (y, (mean, var)) = batchnorm2d_train(g, x, gamma, beta)?;
        let mom = T::lit(BN_MOMENTUM);
        let blend = |old: &Tensor<T>, new: &[T]| {
            let data = old.data().iter().zip(new).map(|(&o, &v)| (T::one() - mom) * o + mom * v).collect();
            Tensor::new(old.shape(), data).expect("running stat shape")
        };
        b.push_update(mean_name, blend(&running_mean, &mean));
        b.push_update(var_name, blend(&running_var, &var));
        Ok(y)
    }
}
