//! ADADELTA, the training loop and the transfer-learning experiment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::{self, LabelSeq};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::models::{transfer_weights, Checkpoint, Model, ModelConfig, SEQ_LEN};
use crate::nn::Binder;
use crate::synthgen::{zipf_lexicon, Dataset, GlyphAtlas, GrayImage, RenderConfig, Script};
use crate::tensor::{Graph, Real, Tensor};
use crate::textcodec::Vocabulary;

pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_CLIP: f64 = 5.0;
pub const DEFAULT_LOCALIZER_LR: f64 = 0.1;
/// Env var bounding evaluation worker threads.
pub const THREADS_ENV: &str = "STR_LAB_THREADS";

/// Running averages E[g²] and E[Δx²], one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState<T: Real> {
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: Vec<Tensor<T>>,
    pub sq_delta: Vec<Tensor<T>>,
    /// Per-tensor multiplier on the applied step, 1 by default.
    pub lr: Vec<f64>,
}

impl<T: Real> AdadeltaState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self::with_hyper(params, DEFAULT_RHO, DEFAULT_EPS)
    }

    pub fn with_hyper(params: &[&Tensor<T>], rho: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { rho, eps, lr: vec![1.0; zeros.len()], sq_grad: zeros.clone(), sq_delta: zeros }
    }
}

/// One ADADELTA update:
/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δx = −√(E[Δx²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δx²] ← ρE[Δx²] + (1−ρ)Δx²`, `x ← x + lr·Δx`.
pub fn adadelta_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut AdadeltaState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.sq_grad.len() || params.len() != state.lr.len() {
        return Err(Error::ShapeMismatch(format!("{} params, {} grads, {} accumulators", params.len(), grads.len(), state.sq_grad.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.sq_grad[i].shape() {
            return Err(Error::ShapeMismatch(format!("tensor {i}: param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), state.sq_grad[i].shape())));
        }
    }
    let (rho, eps) = (T::lit(state.rho), T::lit(state.eps));
    let keep = T::one() - rho;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = T::lit(state.lr[i]);
        let sg = state.sq_grad[i].data_mut();
        let sd = state.sq_delta[i].data_mut();
        for (((x, &gi), eg), ed) in p.data_mut().iter_mut().zip(g.data()).zip(sg.iter_mut()).zip(sd.iter_mut()) {
            *eg = rho * *eg + keep * gi * gi;
            let dx = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * gi;
            *ed = rho * *ed + keep * dx * dx;
            *x += lr * dx;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip: Option<f64>,
    pub rho: f64,
    pub eps: f64,
    /// Step multiplier for the STAR-Net localizer (`loc.*`) tensors.
    pub localizer_lr: f64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Stop once an evaluation reaches this WRR (percent).
    pub target_wrr: Option<f64>,
    /// Weights to transfer into the model before the first step.
    pub source: Option<PathBuf>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 15,
            seed: 0,
            eval_every: 1,
            clip: Some(DEFAULT_CLIP),
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            localizer_lr: DEFAULT_LOCALIZER_LR,
            max_steps: None,
            target_wrr: None,
            source: None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::BadConfig(format!("batch size and epochs must be at least 1, got {} and {}", self.batch_size, self.epochs)));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 || !(self.localizer_lr >= 0.0) {
            return Err(Error::BadConfig(format!("bad ADADELTA hyperparameters rho={} eps={}", self.rho, self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub step: usize,
    pub crr: f64,
    pub wrr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    /// Model of the best evaluation (the last one without evaluations).
    pub best: Model<T>,
    /// State after the last step, resumable with [`resume`].
    pub last: Checkpoint<T>,
    /// `(step, loss)` pairs, steps counted from 1 across resumes.
    pub curve: Vec<(usize, f64)>,
    pub evals: Vec<EpochEval>,
}

impl<T: Real> TrainOutcome<T> {
    pub fn best_eval(&self) -> Option<EpochEval> {
        best_of(&self.evals)
    }

    /// First epoch whose evaluation reaches `wrr`.
    pub fn epochs_to(&self, wrr: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.wrr >= wrr).map(|e| e.epoch)
    }
}

fn best_of(evals: &[EpochEval]) -> Option<EpochEval> {
    evals.iter().copied().fold(None, |best, e| match best {
        Some(b) if b.wrr >= e.wrr => Some(b),
        _ => Some(e),
    })
}

pub fn curve_tsv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step\tloss\n");
    for (step, loss) in curve {
        writeln!(out, "{step}\t{loss:.6}").expect("write to string");
    }
    out
}

pub fn curve_hash(curve: &[(usize, f64)]) -> String {
    hex::encode(Sha256::digest(curve_tsv(curve)))
}

/// Encodes every label, failing before any training happens.
pub fn encode_labels(labels: &[String], vocab: &Vocabulary) -> Result<Vec<LabelSeq>> {
    labels
        .iter()
        .map(|l| {
            let seq = vocab.encode(l)?;
            if seq.min_frames() > SEQ_LEN {
                return Err(Error::InfeasibleTarget { label: l.clone(), frames: SEQ_LEN });
            }
            Ok(seq)
        })
        .collect()
}

/// Worker count from `STR_LAB_THREADS`, defaulting to the core count.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Greedy predictions for `images`, in chunks across a bounded pool.
pub fn predict_all<T: Real>(model: &Model<T>, images: &[GrayImage]) -> Result<Vec<String>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build().map_err(|e| Error::BadConfig(e.to_string()))?;
    let chunks: Vec<Vec<String>> = pool.install(|| images.par_chunks(32).map(|c| model.predict(c)).collect::<Result<_>>())?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate_model<T: Real>(model: &Model<T>, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_all(model, &data.images)?;
    evaluate(data.labels.iter().zip(preds))
}

struct Trainer<T: Real> {
    names: Vec<String>,
    opt: AdadeltaState<T>,
}

impl<T: Real> Trainer<T> {
    fn new(model: &Model<T>, plan: &TrainPlan) -> Self {
        let names = model.params().trainable_names();
        let refs: Vec<&Tensor<T>> = names.iter().map(|n| model.params().get(n).expect("trainable param")).collect();
        let mut opt = AdadeltaState::with_hyper(&refs, plan.rho, plan.eps);
        for (lr, name) in opt.lr.iter_mut().zip(&names) {
            if name.starts_with("loc.") {
                *lr = plan.localizer_lr;
            }
        }
        Self { opt, names }
    }

    fn from_extra(model: &Model<T>, plan: &TrainPlan, extra: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut t = Self::new(model, plan);
        for (i, name) in t.names.iter().enumerate() {
            for (slot, prefix) in [(&mut t.opt.sq_grad[i], "adadelta.sq_grad."), (&mut t.opt.sq_delta[i], "adadelta.sq_delta.")] {
                let key = format!("{prefix}{name}");
                let saved = extra.iter().find(|(n, _)| *n == key).ok_or_else(|| Error::Corrupt(format!("checkpoint lacks optimizer tensor {key}")))?;
                if saved.1.shape() != slot.shape() {
                    return Err(Error::Corrupt(format!("{key} has shape {:?}", saved.1.shape())));
                }
                *slot = saved.1.clone();
            }
        }
        Ok(t)
    }

    fn extra(&self) -> Vec<(String, Tensor<T>)> {
        let grads = self.names.iter().zip(&self.opt.sq_grad).map(|(n, t)| (format!("adadelta.sq_grad.{n}"), t.clone()));
        let deltas = self.names.iter().zip(&self.opt.sq_delta).map(|(n, t)| (format!("adadelta.sq_delta.{n}"), t.clone()));
        grads.chain(deltas).collect()
    }

    /// Forward, backward and update on one batch; returns the loss.
    fn step(&mut self, model: &mut Model<T>, images: &Tensor<T>, labels: &[LabelSeq], clip: Option<f64>) -> Result<f64> {
        let (loss, mut grads, updates) = {
            let mut g = Graph::new();
            let vars: Vec<_> = self.names.iter().map(|n| g.leaf(model.params().get(n).expect("param").clone(), true)).collect();
            let mut b = Binder::new(model.params(), true).with_overrides(&self.names, &vars);
            let x = g.constant(images.clone());
            let lp = model.forward_graph(&mut g, &mut b, x)?;
            let updates = b.take_updates();
            let loss = ctc::ctc_loss(&mut g, lp, labels)?;
            let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars
                .iter()
                .zip(&self.names)
                .map(|(&v, n)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(model.params().get(n).expect("param").shape())))
                .collect();
            (value, grads, updates)
        };
        if let Some(max) = clip {
            clip_global_norm(&mut grads, max);
        }
        let params = model.params_mut();
        let mut tensors: Vec<Tensor<T>> = self.names.iter().map(|n| params.get(n).expect("param").clone()).collect();
        {
            let mut refs: Vec<&mut Tensor<T>> = tensors.iter_mut().collect();
            let grefs: Vec<&Tensor<T>> = grads.iter().collect();
            adadelta_step(&mut refs, &grefs, &mut self.opt)?;
        }
        for (n, t) in self.names.iter().zip(tensors) {
            params.set(n, t)?;
        }
        model.apply_buffer_updates(updates)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Progress {
    epochs_done: usize,
    steps_done: usize,
    curve: Vec<(usize, f64)>,
    evals: Vec<EpochEval>,
    plan: Option<TrainPlan>,
}

/// Trains `model` on `train_set` with ADADELTA on the CTC loss.
///
/// Batches come from a per-epoch shuffle seeded by `(plan.seed, epoch)`.
/// Evaluations use `eval_set`, falling back to the training set. When `out`
/// is given the best-WRR model is written there and the resumable last
/// state next to it with a `.last` suffix.
pub fn train<T: Real>(model: Model<T>, train_set: &Dataset, eval_set: Option<&Dataset>, plan: &TrainPlan, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    let mut model = model;
    if let Some(src) = &plan.source {
        let source = Model::<T>::load(src)?;
        transfer_weights(&source, &mut model)?;
    }
    run(model, None, Progress::default(), train_set, eval_set, plan, out)
}

/// Continues from a checkpoint written by [`train`] for `plan.epochs`
/// epochs in total.
pub fn resume<T: Real>(ckpt: Checkpoint<T>, train_set: &Dataset, eval_set: Option<&Dataset>, plan: &TrainPlan, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    let progress: Progress = serde_json::from_value(ckpt.meta.clone()).map_err(|e| Error::Corrupt(format!("training progress: {e}")))?;
    let trainer = Trainer::from_extra(&ckpt.model, plan, &ckpt.extra)?;
    run(ckpt.model, Some(trainer), progress, train_set, eval_set, plan, out)
}

fn last_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".last");
    PathBuf::from(s)
}

fn run<T: Real>(
    mut model: Model<T>,
    trainer: Option<Trainer<T>>,
    mut progress: Progress,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    plan: &TrainPlan,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    plan.validate()?;
    let labels = encode_labels(&train_set.labels, model.vocab())?;
    let eval_data = eval_set.unwrap_or(train_set);
    let mut trainer = trainer.unwrap_or_else(|| Trainer::new(&model, plan));
    let mut best: Option<(EpochEval, Model<T>)> = None;
    if let Some(b) = best_of(&progress.evals) {
        best = Some((b, model.clone()));
    }
    progress.plan = Some(plan.clone());

    let snapshot = |model: &Model<T>, trainer: &Trainer<T>, progress: &Progress| -> Result<Checkpoint<T>> {
        let meta = serde_json::to_value(progress).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(Checkpoint { model: model.clone(), extra: trainer.extra(), meta })
    };

    let mut done = false;
    while progress.epochs_done < plan.epochs && !done {
        let epoch = progress.epochs_done + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        for batch in order.chunks(plan.batch_size) {
            if plan.max_steps.is_some_and(|m| progress.steps_done >= m) {
                done = true;
                break;
            }
            let images: Vec<&GrayImage> = batch.iter().map(|&i| &train_set.images[i]).collect();
            let x = model.batch_tensor(&images)?;
            let y: Vec<LabelSeq> = batch.iter().map(|&i| labels[i].clone()).collect();
            let loss = trainer.step(&mut model, &x, &y, plan.clip)?;
            progress.steps_done += 1;
            progress.curve.push((progress.steps_done, loss));
        }
        if !done {
            progress.epochs_done = epoch;
        }
        let due = plan.eval_every > 0 && (epoch % plan.eval_every == 0 || epoch == plan.epochs || done);
        if due {
            let r = evaluate_model(&model, eval_data)?;
            let e = EpochEval { epoch, step: progress.steps_done, crr: r.crr, wrr: r.wrr };
            progress.evals.push(e);
            if best.as_ref().is_none_or(|(b, _)| e.wrr > b.wrr) {
                best = Some((e, model.clone()));
                if let Some(path) = out {
                    model.save(path)?;
                }
            }
            if plan.target_wrr.is_some_and(|t| e.wrr >= t) {
                done = true;
            }
        }
        if let Some(path) = out {
            snapshot(&model, &trainer, &progress)?.save(&last_path(path))?;
        }
    }

    let last = snapshot(&model, &trainer, &progress)?;
    let best = match best {
        Some((_, m)) => m,
        None => {
            if let Some(path) = out {
                model.save(path)?;
            }
            model
        }
    };
    Ok(TrainOutcome { best, last, curve: progress.curve, evals: progress.evals })
}

/// One row of a transfer comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub condition: String,
    pub crr: f64,
    pub wrr: f64,
    pub epochs_to_threshold: Option<usize>,
    pub evals: Vec<EpochEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub threshold: f64,
    pub rows: Vec<ConditionResult>,
}

impl ExperimentReport {
    pub fn row(&self, condition: &str) -> Option<&ConditionResult> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("condition\tCRR\tWRR\tepochs_to_threshold\n");
        for r in &self.rows {
            let epochs = r.epochs_to_threshold.map_or_else(|| "-".to_string(), |e| e.to_string());
            writeln!(out, "{}\t{:.2}\t{:.2}\t{}", r.condition, r.crr, r.wrr, epochs).expect("write to string");
        }
        out
    }
}

/// Sizes and settings of [`transfer_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSizes {
    pub src_train: usize,
    pub dst_train: usize,
    pub dst_test: usize,
    pub lexicon: usize,
    pub word_len: (usize, usize),
    /// WRR (percent) for `epochs_to_threshold`.
    pub threshold: f64,
}

impl Default for ExperimentSizes {
    fn default() -> Self {
        Self { src_train: 2000, dst_train: 400, dst_test: 200, lexicon: 3000, word_len: (3, 6), threshold: 80.0 }
    }
}

/// Word-disjoint train and test sets for one script.
pub fn script_datasets(atlas: &GlyphAtlas, lexicon: usize, word_len: (usize, usize), n_train: usize, n_test: usize, render: &RenderConfig) -> Result<(Dataset, Dataset)> {
    let mut words = zipf_lexicon(atlas, lexicon, word_len, render.seed)?;
    words.shuffle(&mut ChaCha8Rng::seed_from_u64(render.seed ^ 0x7E57));
    let cut = (words.len() * 4 / 5).max(1);
    let (train_words, test_words) = words.split_at(cut);
    if test_words.is_empty() {
        return Err(Error::BadConfig("lexicon too small for a word-disjoint split".into()));
    }
    let draw = |pool: &[String], n: usize, seed: u64| -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| pool[rand::Rng::random_range(&mut rng, 0..pool.len())].clone()).collect()
    };
    let train = Dataset::render(&draw(train_words, n_train, render.seed ^ 1), atlas, &RenderConfig { seed: render.seed ^ 2, ..render.clone() })?;
    let test = Dataset::render(&draw(test_words, n_test, render.seed ^ 3), atlas, &RenderConfig { seed: render.seed ^ 4, ..render.clone() })?;
    Ok((train, test))
}

pub fn atlas_vocab(atlas: &GlyphAtlas) -> Result<Vocabulary> {
    Vocabulary::from_codepoints(atlas.codepoints())
}

/// Compares training on `dst` from scratch with fine-tuning every layer of
/// a `src`-trained model, under the same plan and data. `source` skips
/// training the source model.
#[allow(clippy::too_many_arguments)]
pub fn transfer_experiment<T: Real>(
    src: Script,
    dst: Script,
    config: &ModelConfig,
    sizes: &ExperimentSizes,
    plan: &TrainPlan,
    render: &RenderConfig,
    source: Option<&Model<T>>,
) -> Result<ExperimentReport> {
    let (src_atlas, dst_atlas) = (GlyphAtlas::builtin(src), GlyphAtlas::builtin(dst));
    let trained;
    let source = match source {
        Some(m) => m,
        None => {
            let cfg = RenderConfig { seed: render.seed ^ 0x5C, ..render.clone() };
            let (tr, te) = script_datasets(&src_atlas, sizes.lexicon, sizes.word_len, sizes.src_train, sizes.dst_test, &cfg)?;
            let m = Model::build(config.clone(), atlas_vocab(&src_atlas)?, plan.seed)?;
            trained = train(m, &tr, Some(&te), &TrainPlan { source: None, ..plan.clone() }, None)?.best;
            &trained
        }
    };
    let cfg = RenderConfig { seed: render.seed ^ 0xD5, ..render.clone() };
    let (train_set, test_set) = script_datasets(&dst_atlas, sizes.lexicon, sizes.word_len, sizes.dst_train, sizes.dst_test, &cfg)?;
    let vocab = atlas_vocab(&dst_atlas)?;
    let dst_plan = TrainPlan { source: None, ..plan.clone() };

    let scratch = Model::build(config.clone(), vocab.clone(), plan.seed.wrapping_add(1))?;
    let mut transferred = Model::build(config.clone(), vocab, plan.seed.wrapping_add(1))?;
    transfer_weights(source, &mut transferred)?;

    let mut rows = Vec::new();
    for (condition, model) in [("scratch", scratch), ("transferred", transferred)] {
        let outcome = train(model, &train_set, Some(&test_set), &dst_plan, None)?;
        let report = evaluate_model(&outcome.best, &test_set)?;
        rows.push(ConditionResult {
            condition: condition.to_string(),
            crr: report.crr,
            wrr: report.wrr,
            epochs_to_threshold: outcome.epochs_to(sizes.threshold),
            evals: outcome.evals,
        });
    }
    Ok(ExperimentReport { threshold: sizes.threshold, rows })
}
