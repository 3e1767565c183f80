//! Connectionist temporal classification: log-space forward–backward loss,
//! greedy decoding and an exhaustive reference likelihood.
//!
//! Posteriors are `[T, N, C+1]` tensors of per-frame log-probabilities with
//! class 0 as the blank.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, Real, Tensor, Var};
use crate::textcodec::Vocabulary;

pub const BLANK: usize = 0;

/// Target label sequence; ids are in `1..=C`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSeq {
    pub ids: Vec<usize>,
    pub text: String,
}

impl LabelSeq {
    pub fn new(ids: Vec<usize>, text: impl Into<String>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::BlankInTarget);
        }
        Ok(Self { ids, text: text.into() })
    }

    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        Self::new(ids, String::new())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fewest frames any alignment needs: one per label plus a blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.ids.len() + self.ids.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `[T, N, K]` dimensions of a posterior.
fn post_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, n, k] if k >= 1 => Ok((t, n, k)),
        _ => Err(Error::ShapeMismatch(format!("CTC posterior must be [T, N, C+1], got {shape:?}"))),
    }
}

fn validate(targets: &[LabelSeq], frames: usize, batch: usize, classes: usize) -> Result<()> {
    if targets.len() != batch {
        return Err(Error::ShapeMismatch(format!("{} targets for a batch of {batch}", targets.len())));
    }
    for t in targets {
        if t.ids.contains(&BLANK) {
            return Err(Error::BlankInTarget);
        }
        if let Some(&bad) = t.ids.iter().find(|&&id| id >= classes) {
            return Err(Error::ShapeMismatch(format!("label id {bad} outside {classes} posterior classes")));
        }
        let needed = t.min_frames();
        if needed > frames {
            return Err(Error::TargetTooLong { needed, frames });
        }
    }
    Ok(())
}

/// Forward–backward tables of one batch item.
struct Lattice {
    ext: Vec<usize>,
    /// `alpha[t][s]`: log-prob of prefixes ending in state `s` at `t`, frame `t` included.
    alpha: Vec<Vec<f64>>,
    log_p: f64,
}

impl Lattice {
    fn new(lp: &dyn Fn(usize, usize) -> f64, frames: usize, ids: &[usize]) -> Self {
        let mut ext = Vec::with_capacity(2 * ids.len() + 1);
        ext.push(BLANK);
        for &id in ids {
            ext.push(id);
            ext.push(BLANK);
        }
        let s_len = ext.len();
        let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
        alpha[0][0] = lp(0, ext[0]);
        if s_len > 1 {
            alpha[0][1] = lp(0, ext[1]);
        }
        for t in 1..frames {
            for s in 0..s_len {
                let mut acc = alpha[t - 1][s];
                if s >= 1 {
                    acc = log_add(acc, alpha[t - 1][s - 1]);
                }
                if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                    acc = log_add(acc, alpha[t - 1][s - 2]);
                }
                if acc != f64::NEG_INFINITY {
                    alpha[t][s] = acc + lp(t, ext[s]);
                }
            }
        }
        let last = &alpha[frames - 1];
        let log_p = if s_len > 1 { log_add(last[s_len - 1], last[s_len - 2]) } else { last[0] };
        Self { ext, alpha, log_p }
    }

    /// d log p / d lp(t, k), accumulated into `out(t, k)`, scaled by `scale`.
    fn grad(&self, lp: &dyn Fn(usize, usize) -> f64, frames: usize, scale: f64, out: &mut dyn FnMut(usize, usize, f64)) {
        let s_len = self.ext.len();
        let ext = &self.ext;
        // beta excludes frame t itself.
        let mut beta = vec![f64::NEG_INFINITY; s_len];
        beta[s_len - 1] = 0.0;
        if s_len > 1 {
            beta[s_len - 2] = 0.0;
        }
        for t in (0..frames).rev() {
            for s in 0..s_len {
                let occ = self.alpha[t][s] + beta[s] - self.log_p;
                if occ > f64::NEG_INFINITY {
                    out(t, ext[s], scale * occ.exp());
                }
            }
            if t == 0 {
                break;
            }
            let emit: Vec<f64> = (0..s_len).map(|s| beta[s] + lp(t, ext[s])).collect();
            for s in 0..s_len {
                let mut acc = emit[s];
                if s + 1 < s_len {
                    acc = log_add(acc, emit[s + 1]);
                }
                if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                    acc = log_add(acc, emit[s + 2]);
                }
                beta[s] = acc;
            }
        }
    }
}

fn item_lp<'a, T: Real>(data: &'a [T], batch: usize, classes: usize, n: usize) -> impl Fn(usize, usize) -> f64 + 'a {
    move |t, k| data[(t * batch + n) * classes + k].to_f64().expect("finite log-prob")
}

struct CtcOp {
    targets: Vec<LabelSeq>,
}

impl<T: Real> Backward<T> for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let lp = inputs[0];
        let (frames, batch, classes) = post_dims(lp.shape())?;
        let upstream = grad.item().to_f64().expect("finite grad");
        let mut g = vec![0.0f64; lp.numel()];
        for (n, target) in self.targets.iter().enumerate() {
            let f = item_lp(lp.data(), batch, classes, n);
            let lattice = Lattice::new(&f, frames, &target.ids);
            lattice.grad(&f, frames, -upstream / batch as f64, &mut |t, k, v| g[(t * batch + n) * classes + k] += v);
        }
        Ok(vec![Some(Tensor::new(lp.shape(), g.into_iter().map(T::lit).collect())?)])
    }
}

/// Mean over the batch of `−log p(target | posterior)`.
pub fn ctc_loss<T: Real>(g: &mut Graph<T>, log_probs: Var, targets: &[LabelSeq]) -> Result<Var> {
    let lp = g.value(log_probs);
    let (frames, batch, classes) = post_dims(lp.shape())?;
    validate(targets, frames, batch, classes)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(n, target)| -Lattice::new(&item_lp(lp.data(), batch, classes, n), frames, &target.ids).log_p)
        .sum();
    let loss = Tensor::scalar(T::lit(total / batch as f64));
    g.apply(Box::new(CtcOp { targets: targets.to_vec() }), &[log_probs], loss)
}

/// Per-item `−log p(target | posterior)` without building a graph.
pub fn ctc_nll<T: Real>(log_probs: &Tensor<T>, targets: &[LabelSeq]) -> Result<Vec<f64>> {
    let (frames, batch, classes) = post_dims(log_probs.shape())?;
    validate(targets, frames, batch, classes)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(n, target)| -Lattice::new(&item_lp(log_probs.data(), batch, classes, n), frames, &target.ids).log_p)
        .collect())
}

/// Removes adjacent repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path label ids per batch item (first maximum wins ties).
pub fn greedy_ids<T: Real>(log_probs: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    let (frames, batch, classes) = post_dims(log_probs.shape())?;
    let d = log_probs.data();
    Ok((0..batch)
        .map(|n| {
            let path: Vec<usize> = (0..frames)
                .map(|t| {
                    let row = &d[(t * batch + n) * classes..(t * batch + n + 1) * classes];
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect();
            collapse(&path)
        })
        .collect())
}

pub fn greedy_decode<T: Real>(log_probs: &Tensor<T>, vocab: &Vocabulary) -> Result<Vec<String>> {
    let (_, _, classes) = post_dims(log_probs.shape())?;
    if classes != vocab.len() + 1 {
        return Err(Error::VocabMismatch { classes, expected: vocab.len() + 1 });
    }
    greedy_ids(log_probs)?.iter().map(|ids| vocab.decode(ids)).collect()
}

/// Exact `−log p(target)` for one item by enumerating all `(C+1)^T` paths.
///
/// `log_probs` is `[T, 1, C+1]` or `[T, C+1]`. Returns `+∞` when no path
/// collapses to the target.
pub fn brute_force_likelihood<T: Real>(log_probs: &Tensor<T>, target: &LabelSeq) -> Result<f64> {
    let (frames, classes) = match *log_probs.shape() {
        [t, 1, k] | [t, k] => (t, k),
        ref s => return Err(Error::ShapeMismatch(format!("brute force expects one item, got {s:?}"))),
    };
    if frames > 8 || classes > 5 {
        return Err(Error::TooLarge { frames, classes: classes - 1 });
    }
    if target.ids.contains(&BLANK) {
        return Err(Error::BlankInTarget);
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * classes + k].to_f64().expect("finite log-prob");
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target.ids {
            total = log_add(total, (0..frames).map(|t| lp(t, path[t])).sum());
        }
        // Odometer increment over base `classes`.
        let mut i = 0;
        while i < frames {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            break;
        }
    }
    Ok(-total)
}
