//! CRNN and STAR-Net recognizers, the correction BiLSTM, weight transfer
//! and the `STRC1` checkpoint format.
//!
//! Every configuration keeps the reference topology and input geometry;
//! `full()` holds the reference widths, `desk()` and `tiny()` shrink the
//! channel and hidden sizes so that training and gradient checks fit a
//! single CPU core.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::error::{Error, Result};
use crate::nn::{self, affine_grid_sample, maxpool2d, BatchNorm2d, BiLstm, Binder, Conv2d, Linear, Params, SampleMode};
use crate::synthgen::GrayImage;
use crate::tensor::{DType, Graph, Real, Tensor, Var};
use crate::textcodec::Vocabulary;

/// CRNN input, height × width.
pub const CRNN_INPUT: (usize, usize) = (32, 100);
/// STAR-Net raw input, height × width.
pub const STARNET_INPUT: (usize, usize) = (18, 150);
/// Frames of every posterior.
pub const SEQ_LEN: usize = 25;

pub const MAGIC: &[u8; 5] = b"STRC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrnnConfig {
    /// Output channels of the seven conv layers.
    pub channels: [usize; 7],
    /// Hidden units per LSTM direction.
    pub hidden: usize,
    /// Width of the feature sequence each decoder block emits.
    pub features: usize,
    pub lstm_layers: usize,
}

impl CrnnConfig {
    pub fn full() -> Self {
        Self { channels: [64, 128, 256, 256, 512, 512, 256], hidden: 256, features: 256, lstm_layers: 2 }
    }

    pub fn desk() -> Self {
        Self { channels: [16, 32, 48, 48, 64, 64, 64], hidden: 64, features: 64, lstm_layers: 2 }
    }

    pub fn tiny() -> Self {
        Self { channels: [2, 3, 3, 4, 4, 4, 4], hidden: 3, features: 4, lstm_layers: 2 }
    }

    fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.hidden == 0 || self.features == 0 || self.lstm_layers == 0 {
            return Err(Error::BadConfig(format!("degenerate CRNN config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarNetConfig {
    pub localizer: [usize; 4],
    pub localizer_fc: usize,
    pub stem: usize,
    /// Channels of the four residual stages.
    pub stages: [usize; 4],
    /// Channels of the final conv, i.e. the sequence feature width.
    pub out_channels: usize,
    pub hidden: usize,
    pub features: usize,
    pub sampler: SampleMode,
}

impl StarNetConfig {
    pub fn full() -> Self {
        Self {
            localizer: [16, 32, 64, 128],
            localizer_fc: 256,
            stem: 32,
            stages: [64, 128, 256, 256],
            out_channels: 256,
            hidden: 256,
            features: 256,
            sampler: SampleMode::Bilinear,
        }
    }

    pub fn desk() -> Self {
        Self {
            localizer: [4, 8, 16, 16],
            localizer_fc: 32,
            stem: 8,
            stages: [16, 24, 32, 48],
            out_channels: 64,
            hidden: 64,
            features: 64,
            sampler: SampleMode::Bilinear,
        }
    }

    pub fn tiny() -> Self {
        Self {
            localizer: [2, 2, 2, 2],
            localizer_fc: 3,
            stem: 2,
            stages: [2, 2, 3, 3],
            out_channels: 4,
            hidden: 3,
            features: 4,
            sampler: SampleMode::Bilinear,
        }
    }

    fn validate(&self) -> Result<()> {
        let scalars = [self.localizer_fc, self.stem, self.out_channels, self.hidden, self.features];
        if self.localizer.iter().chain(&self.stages).chain(&scalars).any(|&w| w == 0) {
            return Err(Error::BadConfig(format!("degenerate STAR-Net config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Crnn(CrnnConfig),
    StarNet(StarNetConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Crnn(_) => "crnn",
            ModelConfig::StarNet(_) => "starnet",
        }
    }
}

/// Conv, optional batch norm; ReLU is applied by the caller.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(params: &mut Params<T>, name: &str, in_ch: usize, out_ch: usize, kernel: (usize, usize), padding: (usize, usize), bn: bool, rng: &mut impl Rng) -> Self {
        if bn {
            let conv = Conv2d::unbiased(params, name, in_ch, out_ch, kernel, (1, 1), padding, rng);
            Self { conv, bn: Some(BatchNorm2d::new(params, &format!("{name}.bn"), out_ch)) }
        } else {
            Self { conv: Conv2d::new(params, name, in_ch, out_ch, kernel, (1, 1), padding, rng), bn: None }
        }
    }

    fn same3<T: Real>(params: &mut Params<T>, name: &str, in_ch: usize, out_ch: usize, bn: bool, rng: &mut impl Rng) -> Self {
        Self::new(params, name, in_ch, out_ch, (3, 3), (1, 1), bn, rng)
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        match &self.bn {
            Some(bn) => bn.forward(g, b, y),
            None => Ok(y),
        }
    }

    fn relu<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(g, b, x)?;
        g.relu(y)
    }
}

/// `relu(x + unit2(relu(unit1(x))))`.
#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvUnit,
    b: ConvUnit,
}

impl ResBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let y = self.a.relu(g, b, x)?;
        let y = self.b.forward(g, b, y)?;
        let y = g.add(x, y)?;
        g.relu(y)
    }
}

#[derive(Debug, Clone)]
struct CrnnNet {
    units: Vec<ConvUnit>,
}

/// Pooling after each CRNN conv layer: (window, stride).
const CRNN_POOLS: [Option<((usize, usize), (usize, usize))>; 7] =
    [Some(((2, 2), (2, 2))), Some(((2, 2), (2, 2))), None, Some(((2, 1), (2, 1))), None, Some(((2, 1), (2, 1))), None];

impl CrnnNet {
    fn new<T: Real>(params: &mut Params<T>, cfg: &CrnnConfig, rng: &mut impl Rng) -> Self {
        let mut units = Vec::with_capacity(7);
        let mut in_ch = 1;
        for (i, &out) in cfg.channels.iter().enumerate() {
            let name = format!("cnn.conv{}", i + 1);
            let unit = if i == 6 {
                // Collapses the remaining height of 2 to 1.
                ConvUnit::new(params, &name, in_ch, out, (2, 3), (0, 1), false, rng)
            } else {
                ConvUnit::same3(params, &name, in_ch, out, i == 4 || i == 5, rng)
            };
            units.push(unit);
            in_ch = out;
        }
        Self { units }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, mut x: Var) -> Result<Var> {
        for (unit, pool) in self.units.iter().zip(CRNN_POOLS) {
            x = unit.relu(g, b, x)?;
            if let Some((window, stride)) = pool {
                x = maxpool2d(g, x, window, stride)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Localizer {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl Localizer {
    fn new<T: Real>(params: &mut Params<T>, cfg: &StarNetConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let (mut in_ch, mut h, mut w) = (1, STARNET_INPUT.0, STARNET_INPUT.1);
        for (i, &out) in cfg.localizer.iter().enumerate() {
            convs.push(Conv2d::same3(params, &format!("loc.conv{}", i + 1), in_ch, out, rng));
            in_ch = out;
            (h, w) = (h / 2, w / 2);
        }
        let fc1 = Linear::new(params, "loc.fc1", in_ch * h * w, cfg.localizer_fc, rng);
        let fc2 = Linear::new(params, "loc.fc2", cfg.localizer_fc, 6, rng);
        params.set(&fc2.weight_name(), Tensor::zeros(&[cfg.localizer_fc, 6])).expect("fc2 shape");
        params.set(&fc2.bias_name(), Tensor::from_f64(&[6], &nn::AffineParams::IDENTITY.0).expect("theta")).expect("fc2 bias shape");
        Self { convs, fc1, fc2 }
    }

    /// Affine parameters `[N, 6]` for raw inputs `[N, 1, 18, 150]`.
    fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, mut x: Var) -> Result<Var> {
        for conv in &self.convs {
            x = conv.forward(g, b, x)?;
            x = g.relu(x)?;
            x = maxpool2d(g, x, (2, 2), (2, 2))?;
        }
        let n = g.shape(x)[0];
        let x = g.reshape(x, &[n, self.fc1.in_features])?;
        let x = self.fc1.forward(g, b, x)?;
        let x = g.relu(x)?;
        self.fc2.forward(g, b, x)
    }
}

#[derive(Debug, Clone)]
struct Extractor {
    stem: ConvUnit,
    stages: Vec<(ConvUnit, Vec<ResBlock>)>,
    head: ConvUnit,
}

/// Pooling after the stem and after each residual stage.
const EXTRACTOR_POOLS: [Option<(usize, usize)>; 5] = [Some((2, 2)), Some((2, 2)), Some((2, 1)), Some((2, 1)), None];

impl Extractor {
    fn new<T: Real>(params: &mut Params<T>, cfg: &StarNetConfig, rng: &mut impl Rng) -> Self {
        let stem = ConvUnit::same3(params, "res.stem", 1, cfg.stem, true, rng);
        let mut in_ch = cfg.stem;
        let mut stages = Vec::new();
        for (s, &ch) in cfg.stages.iter().enumerate() {
            let prefix = format!("res.stage{}", s + 1);
            let transition = ConvUnit::same3(params, &format!("{prefix}.trans"), in_ch, ch, true, rng);
            let blocks = (1..=2)
                .map(|k| ResBlock {
                    a: ConvUnit::same3(params, &format!("{prefix}.block{k}.conv1"), ch, ch, true, rng),
                    b: ConvUnit::same3(params, &format!("{prefix}.block{k}.conv2"), ch, ch, true, rng),
                })
                .collect();
            stages.push((transition, blocks));
            in_ch = ch;
        }
        let head = ConvUnit::new(params, "res.head", in_ch, cfg.out_channels, (2, 3), (0, 1), true, rng);
        Self { stem, stages, head }
    }

    fn conv_count(&self) -> usize {
        2 + self.stages.iter().map(|(_, blocks)| 1 + 2 * blocks.len()).sum::<usize>()
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let pool = |g: &mut Graph<T>, x: Var, p: Option<(usize, usize)>| match p {
            Some(win) => maxpool2d(g, x, win, win),
            None => Ok(x),
        };
        let mut x = self.stem.relu(g, b, x)?;
        x = pool(g, x, EXTRACTOR_POOLS[0])?;
        for ((transition, blocks), p) in self.stages.iter().zip(&EXTRACTOR_POOLS[1..]) {
            x = transition.relu(g, b, x)?;
            for block in blocks {
                x = block.forward(g, b, x)?;
            }
            x = pool(g, x, *p)?;
        }
        self.head.relu(g, b, x)
    }
}

#[derive(Debug, Clone)]
struct StarNetNet {
    localizer: Localizer,
    extractor: Extractor,
    sampler: SampleMode,
}

#[derive(Debug, Clone)]
enum Backbone {
    Crnn(CrnnNet),
    StarNet(StarNetNet),
}

/// A BiLSTM followed by a linear map back to the feature width.
#[derive(Debug, Clone)]
struct DecoderBlock {
    lstm: BiLstm,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Correction {
    lstm: BiLstm,
    head: Linear,
}

/// Copied and freshly initialized tensors of a [`transfer_weights`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// A recognizer with its vocabulary and parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    vocab: Vocabulary,
    params: Params<T>,
    backbone: Backbone,
    decoder: Vec<DecoderBlock>,
    head: Linear,
    correction: Option<Correction>,
}

fn is_head_tensor(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("corr.head.")
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::BadConfig("empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (backbone, seq_in, hidden, features, layers) = match &config {
            ModelConfig::Crnn(c) => {
                c.validate()?;
                (Backbone::Crnn(CrnnNet::new(&mut params, c, &mut rng)), c.channels[6], c.hidden, c.features, c.lstm_layers)
            }
            ModelConfig::StarNet(c) => {
                c.validate()?;
                let localizer = Localizer::new(&mut params, c, &mut rng);
                let extractor = Extractor::new(&mut params, c, &mut rng);
                (Backbone::StarNet(StarNetNet { localizer, extractor, sampler: c.sampler }), c.out_channels, c.hidden, c.features, 1)
            }
        };
        let mut decoder = Vec::new();
        let mut width = seq_in;
        for k in 0..layers {
            let lstm = BiLstm::new(&mut params, &format!("rnn{}.lstm", k + 1), width, hidden, &mut rng);
            let proj = Linear::new(&mut params, &format!("rnn{}.proj", k + 1), 2 * hidden, features, &mut rng);
            decoder.push(DecoderBlock { lstm, proj });
            width = features;
        }
        let head = Linear::new(&mut params, "head", features, vocab.len() + 1, &mut rng);
        Ok(Self { config, vocab, params, backbone, decoder, head, correction: None })
    }

    pub fn crnn(config: CrnnConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        Self::build(ModelConfig::Crnn(config), vocab, seed)
    }

    pub fn starnet(config: StarNetConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        Self::build(ModelConfig::StarNet(config), vocab, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn has_correction(&self) -> bool {
        self.correction.is_some()
    }

    /// `C + 1`, blank included.
    pub fn num_classes(&self) -> usize {
        self.vocab.len() + 1
    }

    /// Raw input size, height × width.
    pub fn input_size(&self) -> (usize, usize) {
        match self.config {
            ModelConfig::Crnn(_) => CRNN_INPUT,
            ModelConfig::StarNet(_) => STARNET_INPUT,
        }
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn conv_layer_count(&self) -> usize {
        match &self.backbone {
            Backbone::Crnn(net) => net.units.len(),
            Backbone::StarNet(net) => net.localizer.convs.len() + net.extractor.conv_count(),
        }
    }

    fn feature_width(&self) -> usize {
        self.head.in_features
    }

    fn correction_hidden(&self) -> usize {
        match &self.config {
            ModelConfig::Crnn(c) => c.hidden,
            ModelConfig::StarNet(c) => c.hidden,
        }
    }

    /// Inserts a BiLSTM and a fresh projection between the decoder's
    /// feature sequence and the output. The previous head stays in the
    /// parameter table but no longer contributes.
    pub fn attach_correction_bilstm(&mut self, seed: u64) -> Result<()> {
        if self.correction.is_some() {
            return Err(Error::AlreadyAttached);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hidden, features, classes) = (self.correction_hidden(), self.feature_width(), self.num_classes());
        let lstm = BiLstm::new(&mut self.params, "corr.lstm", features, hidden, &mut rng);
        let head = Linear::new(&mut self.params, "corr.head", 2 * hidden, classes, &mut rng);
        self.correction = Some(Correction { lstm, head });
        Ok(())
    }

    /// Randomizes the localizer's final layer weights in `±scale`.
    pub fn perturb_localizer_head(&mut self, scale: f64, rng: &mut impl Rng) {
        if let Backbone::StarNet(net) = &self.backbone {
            let name = net.localizer.fc2.weight_name();
            let shape = self.params.get(&name).expect("localizer head").shape().to_vec();
            self.params.set(&name, nn::uniform(&shape, scale, rng)).expect("same shape");
        }
    }

    /// Log-posteriors `[T, N, C+1]` for raw inputs `[N, 1, H, W]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (h, w) = self.input_size();
        if shape.len() != 4 || shape[1] != 1 || (shape[2], shape[3]) != (h, w) {
            return Err(Error::ShapeMismatch(format!("{} expects [N, 1, {h}, {w}] input, got {shape:?}", self.config.kind())));
        }
        let maps = match &self.backbone {
            Backbone::Crnn(net) => net.forward(g, b, x)?,
            Backbone::StarNet(net) => {
                let theta = net.localizer.forward(g, b, x)?;
                let rect = affine_grid_sample(g, x, theta, CRNN_INPUT, net.sampler)?;
                net.extractor.forward(g, b, rect)?
            }
        };
        // [N, C, 1, T] → [T, N, C]
        let s = g.shape(maps).to_vec();
        debug_assert_eq!((s[2], s[3]), (1, SEQ_LEN));
        let seq = g.reshape(maps, &[s[0], s[1], s[3]])?;
        let mut seq = g.permute(seq, &[2, 0, 1])?;
        for block in &self.decoder {
            seq = block.lstm.forward(g, b, seq)?;
            seq = block.proj.forward(g, b, seq)?;
        }
        let logits = match &self.correction {
            Some(c) => {
                let y = c.lstm.forward(g, b, seq)?;
                c.head.forward(g, b, y)?
            }
            None => self.head.forward(g, b, seq)?,
        };
        g.log_softmax(logits)
    }

    /// Forward pass where the named parameters are supplied as graph
    /// variables; `train` selects batch-norm mode.
    pub fn forward_with_params(&self, g: &mut Graph<T>, names: &[String], vars: &[Var], images: &Tensor<T>, train: bool) -> Result<Var> {
        let mut b = Binder::new(&self.params, train).with_overrides(names, vars);
        let x = g.constant(images.clone());
        self.forward_graph(g, &mut b, x)
    }

    /// Eval-mode log-posteriors without gradient tracking.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let x = g.constant(images.clone());
        let y = self.forward_graph(&mut g, &mut b, x)?;
        Ok(g.value(y).clone())
    }

    /// Localizer output `[N, 6]` for raw STAR-Net inputs.
    pub fn localizer_theta(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let Backbone::StarNet(net) = &self.backbone else {
            return Err(Error::BadConfig("only STAR-Net has a localizer".into()));
        };
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let x = g.constant(images.clone());
        let theta = net.localizer.forward(&mut g, &mut b, x)?;
        Ok(g.value(theta).clone())
    }

    /// The rectified `[N, 1, 32, 100]` images STAR-Net feeds its extractor.
    pub fn rectify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let Backbone::StarNet(net) = &self.backbone else {
            return Err(Error::BadConfig("only STAR-Net rectifies its input".into()));
        };
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let x = g.constant(images.clone());
        let theta = net.localizer.forward(&mut g, &mut b, x)?;
        let rect = affine_grid_sample(&mut g, x, theta, CRNN_INPUT, net.sampler)?;
        Ok(g.value(rect).clone())
    }

    /// Stacks images into `[N, 1, H, W]`, resizing to the model input.
    pub fn batch_tensor(&self, images: &[&GrayImage]) -> Result<Tensor<T>> {
        let (h, w) = self.input_size();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            let r = img.resized(h, w)?;
            data.extend(r.pixels.iter().map(|&p| T::lit(f64::from(p))));
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }

    /// Greedy transcriptions, processed in batches of 32.
    ///
    /// Uniform images carry no ink and decode to "" without a forward pass.
    pub fn predict(&self, images: &[GrayImage]) -> Result<Vec<String>> {
        let mut out = vec![String::new(); images.len()];
        let inked: Vec<usize> = (0..images.len()).filter(|&i| !is_uniform(&images[i])).collect();
        for chunk in inked.chunks(32) {
            let refs: Vec<&GrayImage> = chunk.iter().map(|&i| &images[i]).collect();
            let lp = self.forward(&self.batch_tensor(&refs)?)?;
            for (&i, text) in chunk.iter().zip(ctc::greedy_decode(&lp, &self.vocab)?) {
                out[i] = text;
            }
        }
        Ok(out)
    }

    /// Writes first-layer conv filters as upscaled PGM images, each
    /// min–max normalized. Returns the written paths.
    pub fn dump_first_layer_filters(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let name = match &self.backbone {
            Backbone::Crnn(net) => net.units[0].conv.name.clone(),
            Backbone::StarNet(net) => net.extractor.stem.conv.name.clone(),
        };
        let w = self.params.get(&format!("{name}.weight")).expect("first conv weight");
        let [out_ch, _, kh, kw] = *w.shape() else { unreachable!("conv weights are 4-d") };
        const UP: usize = 8;
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (f, vals) in w.data().chunks(w.numel() / out_ch).enumerate() {
            let vals: Vec<f64> = vals[..kh * kw].iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let mut px = vec![0.0f32; kh * kw * UP * UP];
            for y in 0..kh * UP {
                for x in 0..kw * UP {
                    px[y * kw * UP + x] = ((vals[(y / UP) * kw + x / UP] - lo) / span) as f32;
                }
            }
            let path = dir.join(format!("filter_{f:03}.pgm"));
            GrayImage::new(kh * UP, kw * UP, px)?.save(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Applies batch-norm running-statistic updates from a training pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            self.params.set(&name, value)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { model: self.clone(), extra: Vec::new(), meta: serde_json::Value::Null }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Checkpoint::load(path)?.model)
    }
}

fn is_uniform(image: &GrayImage) -> bool {
    let first = image.pixels.first().copied().unwrap_or(0.0);
    image.pixels.iter().all(|&p| (p - first).abs() < 1e-6)
}

/// Copies every tensor of `src` into `dst` when both models share the
/// same architecture. Class-projection tensors whose shape differs (the
/// vocabularies differ in size) keep `dst`'s fresh initialization.
pub fn transfer_weights<T: Real>(src: &Model<T>, dst: &mut Model<T>) -> Result<TransferReport> {
    if src.config != dst.config {
        return Err(Error::ArchMismatch(format!("source is {} {:?}, destination is {} {:?}", src.config.kind(), src.config, dst.config.kind(), dst.config)));
    }
    if src.has_correction() != dst.has_correction() {
        return Err(Error::ArchMismatch("correction BiLSTM present in only one model".into()));
    }
    let mut report = TransferReport::default();
    let mut copies = Vec::new();
    for entry in dst.params.iter() {
        let src_value = src.params.get(&entry.name).ok_or_else(|| Error::ArchMismatch(format!("source lacks {}", entry.name)))?;
        if src_value.shape() == entry.value.shape() {
            copies.push((entry.name.clone(), src_value.clone()));
        } else if is_head_tensor(&entry.name) {
            report.reinitialized.push(entry.name.clone());
        } else {
            return Err(Error::ArchMismatch(format!("{}: {:?} vs {:?}", entry.name, src_value.shape(), entry.value.shape())));
        }
    }
    for (name, value) in copies {
        dst.params.set(&name, value)?;
        report.copied.push(name);
    }
    Ok(report)
}

/// A model plus optional named auxiliary tensors (optimizer state) and
/// JSON metadata (training progress).
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub extra: Vec<(String, Tensor<T>)>,
    pub meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    dtype: u8,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    format: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    vocab_hash: String,
    correction: bool,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

const GROUP_PARAM: &str = "param";
const GROUP_EXTRA: &str = "extra";

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl<T: Real> Checkpoint<T> {
    /// Layout: magic, u32 descriptor length, JSON descriptor, payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let all = m.params.iter().map(|e| (GROUP_PARAM, &e.name, &e.value)).chain(self.extra.iter().map(|(n, t)| (GROUP_EXTRA, n, t)));
        for (group, name, value) in all {
            tensors.push(TensorEntry { name: name.clone(), group: group.into(), dtype: T::DTYPE.code(), shape: value.shape().to_vec(), offset: payload.len() as u64 });
            for &v in value.data() {
                v.write_le(&mut payload);
            }
        }
        let desc = Descriptor {
            format: FORMAT_VERSION,
            config: m.config.clone(),
            vocab: m.vocab.clone(),
            vocab_hash: m.vocab.hash(),
            correction: m.has_correction(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&desc).map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = &bytes[MAGIC.len()..];
        let len = u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().expect("4 bytes")) as usize;
        let json = read_exact(&mut r, len)?;
        let desc: Descriptor = serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("descriptor: {e}")))?;
        if desc.format != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {}", desc.format)));
        }
        let found = desc.vocab.hash();
        if found != desc.vocab_hash {
            return Err(Error::HashMismatch { expected: desc.vocab_hash, found });
        }
        let mut model = Model::build(desc.config, desc.vocab, 0)?;
        if desc.correction {
            model.attach_correction_bilstm(0)?;
        }

        let mut offset = 0u64;
        let mut seen = std::collections::HashSet::new();
        let mut extra = Vec::new();
        for entry in desc.tensors {
            let dtype = DType::from_code(entry.dtype).ok_or_else(|| Error::Corrupt(format!("{}: unknown dtype {}", entry.name, entry.dtype)))?;
            if entry.offset != offset {
                return Err(Error::Corrupt(format!("{}: offset {} but expected {offset}", entry.name, entry.offset)));
            }
            let n: usize = entry.shape.iter().product();
            let raw = read_exact(&mut r, n * dtype.size())?;
            offset += raw.len() as u64;
            let data: Vec<T> = match dtype {
                d if d == T::DTYPE => raw.chunks(d.size()).map(T::read_le).collect(),
                DType::F32 => raw.chunks(4).map(|c| T::lit(f64::from(f32::read_le(c)))).collect(),
                DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            let tensor = Tensor::new(&entry.shape, data)?;
            if !seen.insert((entry.group.clone(), entry.name.clone())) {
                return Err(Error::Corrupt(format!("duplicate tensor {}", entry.name)));
            }
            match entry.group.as_str() {
                GROUP_PARAM => model.params.set(&entry.name, tensor).map_err(|e| Error::Corrupt(format!("{}: {e}", entry.name)))?,
                GROUP_EXTRA => extra.push((entry.name, tensor)),
                other => return Err(Error::Corrupt(format!("unknown tensor group {other}"))),
            }
        }
        if let Some(missing) = model.params.iter().find(|e| !seen.contains(&(GROUP_PARAM.to_string(), e.name.clone()))) {
            return Err(Error::Corrupt(format!("missing tensor {}", missing.name)));
        }
        if !r.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { model, extra, meta: desc.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the stored vocabulary against `vocab`.
    pub fn load_expecting(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let (expected, found) = (vocab.hash(), ckpt.model.vocab.hash());
        if expected != found {
            return Err(Error::HashMismatch { expected, found });
        }
        Ok(ckpt)
    }
}
