//! Central finite-difference gradient checking.
//!
//! The library-level suite ([`run_suite`]) is what `strlab gradcheck` runs;
//! the same helpers back the unit tests of every differentiable layer.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Denominator floor for the relative error, so that gradients that are
/// zero in both routes compare as absolute differences.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// One-sided slopes differing by more than this fraction mark a
/// coordinate whose step straddles a ReLU or max-pool kink.
pub const KINK_RATIO: f64 = 1e-2;

/// Central differences at `step` and `step / 10` must agree to this
/// relative error for the coordinate to count; otherwise a kink or
/// roundoff makes the numeric reference itself unreliable there.
pub const CONVERGENCE_TOL: f64 = 1e-5;

/// Largest fraction of probed coordinates that may be skipped as kinks.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates left out because the loss is not differentiable there.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        let probed = (self.checked + self.skipped) as f64;
        self.checked > 0 && self.max_rel_err < tolerance && self.skipped as f64 <= MAX_SKIPPED_FRACTION * probed
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn random_tensor<T: Real>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-scale..scale))).collect();
    Tensor::new(shape, data).expect("random tensor shape")
}

/// Checks every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(inputs, step, coords, f)
}

/// Checks up to `per_input` randomly chosen coordinates of each input.
pub fn check_gradients_sampled<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    per_input: usize,
    rng: &mut impl Rng,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            let mut picked = sample(rng, n, per_input.min(n)).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect();
    check_coords(inputs, step, coords, f)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

fn check_coords<F>(inputs: &[Tensor<f64>], step: f64, coords: Vec<Vec<usize>>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradReport { checked: 0, skipped: 0, max_rel_err: 0.0, worst: None };
    let base = g.value(out).item();
    let mut probe = inputs.to_vec();
    for (which, idxs) in coords.iter().enumerate() {
        for &i in idxs {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let plus = eval(&probe, &f)?;
            probe[which].data_mut()[i] = orig - step;
            let minus = eval(&probe, &f)?;
            probe[which].data_mut()[i] = orig;
            let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
            if (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(REL_ERR_FLOOR) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let fine = step / 10.0;
            probe[which].data_mut()[i] = orig + fine;
            let fine_plus = eval(&probe, &f)?;
            probe[which].data_mut()[i] = orig - fine;
            let fine_minus = eval(&probe, &f)?;
            probe[which].data_mut()[i] = orig;
            if rel_err(numeric, (fine_plus - fine_minus) / (2.0 * fine)) > CONVERGENCE_TOL {
                report.skipped += 1;
                continue;
            }
            let a = analytic[which].data()[i];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((which, i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// One named entry of the finite-difference suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Tolerance of the suite at 64-bit precision.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Runs the finite-difference check for every differentiable layer and
/// both full models over `seeds` consecutive seeds starting at `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<Vec<SuiteResult>> {
    let cases: Vec<(&'static str, fn(u64) -> Result<GradReport>)> = vec![
        ("elementwise+matmul", cases::composite),
        ("conv2d", cases::conv),
        ("maxpool2d", cases::pool),
        ("bilstm", cases::bilstm),
        ("batchnorm2d", cases::batchnorm),
        ("grid_sample_bilinear", cases::sampler),
        ("ctc_loss", cases::ctc),
        ("crnn", cases::crnn),
        ("starnet", cases::starnet),
    ];
    let mut results = Vec::new();
    for (name, case) in cases {
        let mut worst: f64 = 0.0;
        let mut passed = true;
        for s in 0..seeds {
            let report = case(base_seed.wrapping_add(s as u64))?;
            worst = worst.max(report.max_rel_err);
            passed &= report.passes(SUITE_TOLERANCE);
        }
        results.push(SuiteResult { name, seeds, max_rel_err: worst, passed });
    }
    Ok(results)
}

pub mod cases {
    //! Individual gradient-check cases, one seed each.

    use super::*;
    use crate::ctc;
    use crate::models::{CrnnConfig, Model, StarNetConfig};
    use crate::nn::{self, BiLstm, Params, SampleMode};
    use crate::textcodec::Vocabulary;

    const STEP: f64 = 1e-5;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn composite(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let inputs = vec![random_tensor(&[3, 4], 1.0, &mut r), random_tensor(&[4, 5], 1.0, &mut r), random_tensor(&[5], 1.0, &mut r)];
        let proj = random_tensor::<f64>(&[3, 5], 1.0, &mut r);
        check_gradients(&inputs, STEP, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let b = g.add_row_bias(m, v[2])?;
            let t = g.tanh(b)?;
            let s = g.sigmoid(b)?;
            let ts = g.mul(t, s)?;
            let r = g.relu(b)?;
            let y = g.add(ts, r)?;
            let ls = g.log_softmax(y)?;
            g.weighted_sum(ls, proj.clone())
        })
    }

    pub fn conv(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let inputs = vec![random_tensor(&[2, 2, 5, 6], 1.0, &mut r), random_tensor(&[3, 2, 3, 3], 0.5, &mut r), random_tensor(&[3], 0.5, &mut r)];
        let proj = random_tensor::<f64>(&[2, 3, 3, 3], 1.0, &mut r);
        check_gradients(&inputs, STEP, |g, v| {
            let y = nn::conv2d(g, v[0], v[1], Some(v[2]), (2, 2), (1, 1))?;
            g.weighted_sum(y, proj.clone())
        })
    }

    pub fn pool(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let inputs = vec![random_tensor(&[2, 2, 4, 6], 1.0, &mut r)];
        let proj = random_tensor::<f64>(&[2, 2, 2, 6], 1.0, &mut r);
        check_gradients(&inputs, STEP, |g, v| {
            let y = nn::maxpool2d(g, v[0], (2, 1), (2, 1))?;
            g.weighted_sum(y, proj.clone())
        })
    }

    pub fn bilstm(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let mut params = Params::new();
        let layer = BiLstm::new(&mut params, "lstm", 3, 4, &mut r);
        let mut inputs = vec![random_tensor(&[4, 2, 3], 1.0, &mut r)];
        let names = layer.param_names();
        for name in &names {
            inputs.push(params.get(name).expect("bilstm param").clone());
        }
        let proj = random_tensor::<f64>(&[4, 2, 8], 1.0, &mut r);
        check_gradients(&inputs, STEP, |g, v| {
            let y = layer.forward_with(g, v[0], &v[1..])?;
            g.weighted_sum(y, proj.clone())
        })
    }

    pub fn batchnorm(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let inputs = vec![random_tensor(&[3, 2, 3, 3], 1.0, &mut r), random_tensor(&[2], 1.0, &mut r), random_tensor(&[2], 1.0, &mut r)];
        let proj = random_tensor::<f64>(&[3, 2, 3, 3], 1.0, &mut r);
        check_gradients(&inputs, STEP, |g, v| {
            let (y, _) = nn::batchnorm2d_train(g, v[0], v[1], v[2])?;
            g.weighted_sum(y, proj.clone())
        })
    }

    pub fn sampler(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let mut theta = random_tensor::<f64>(&[2, 6], 0.3, &mut r);
        for n in 0..2 {
            theta.data_mut()[n * 6] += 0.8;
            theta.data_mut()[n * 6 + 4] += 0.8;
        }
        let inputs = vec![random_tensor(&[2, 2, 5, 7], 1.0, &mut r), theta];
        let proj = random_tensor::<f64>(&[2, 2, 4, 6], 1.0, &mut r);
        check_gradients(&inputs, STEP, |g, v| {
            let y = nn::affine_grid_sample(g, v[0], v[1], (4, 6), SampleMode::Bilinear)?;
            g.weighted_sum(y, proj.clone())
        })
    }

    pub fn ctc(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let (frames, batch, classes) = (6, 2, 4);
        let targets = vec![ctc::LabelSeq::from_ids(vec![1, 2, 2])?, ctc::LabelSeq::from_ids(vec![3])?];
        let inputs = vec![random_tensor(&[frames, batch, classes + 1], 2.0, &mut r)];
        check_gradients(&inputs, STEP, |g, v| {
            let lp = g.log_softmax(v[0])?;
            ctc::ctc_loss(g, lp, &targets)
        })
    }

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::from_codepoints("abc".chars()).expect("vocab")
    }

    pub fn crnn(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let model = Model::<f64>::crnn(CrnnConfig::tiny(), tiny_vocab(), seed)?;
        model_case(&model, 1e-5, &mut r)
    }

    pub fn starnet(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let mut model = Model::<f64>::starnet(StarNetConfig::tiny(), tiny_vocab(), seed)?;
        // Move the localizer off its identity initialization so gradients reach it.
        model.perturb_localizer_head(0.05, &mut r);
        model_case(&model, 1e-6, &mut r)
    }

    /// Checks a few coordinates of each parameter tensor through a full
    /// forward pass ending in the CTC loss.
    fn model_case(model: &Model<f64>, step: f64, r: &mut ChaCha8Rng) -> Result<GradReport> {
        let (h, w) = model.input_size();
        // A few random low-frequency waves; pixel noise would make the
        // sampled image, and so the loss, jump under tiny theta changes.
        let waves: Vec<[f64; 4]> = (0..3).map(|_| [r.random_range(0.5..3.0), r.random_range(0.5..3.0), r.random_range(0.0..6.3), r.random_range(0.05..0.15)]).collect();
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
                pixels.push(0.5 + waves.iter().map(|[fy, fx, ph, a]| a * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin()).sum::<f64>());
            }
        }
        let image = Tensor::<f64>::new(&[1, 1, h, w], pixels)?;
        let targets = vec![ctc::LabelSeq::from_ids(vec![1, 3, 2])?];
        let names = model.params().trainable_names();
        // Zero-initialized biases put dead units exactly on a ReLU kink.
        let inputs: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                let t = model.params().get(n).expect("param").clone();
                if n.ends_with(".bias") { t.map(|v| v + r.random_range(-0.1..0.1)) } else { t }
            })
            .collect();
        check_gradients_sampled(&inputs, step, 2, r, |g, v| {
            let lp = model.forward_with_params(g, &names, v, &image, true)?;
            ctc::ctc_loss(g, lp, &targets)
        })
    }
}
