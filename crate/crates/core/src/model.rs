//! Two-branch encoder and classification head.
//!
//! `f` encodes intensity crops and `g` encodes phase crops. Both branches
//! share an architecture but never share parameters. The head is a
//! two-matrix MLP whose input is the concatenation `[f(x_int), g(x_phs)]` in
//! dual mode, or a single embedding otherwise.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::nn::{AvgPool, BasicBlock, BatchNorm2d, Conv2d, Exec, GlobalAvgPool, Linear, MaxPool, Module, Param, Relu};
use crate::seed;
use crate::tissue::{Modality, NUM_CLASSES};

pub const PAPER_EMBED_DIM: usize = 512;
pub const DEFAULT_HEAD_HIDDEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18Style,
    TinyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet18Style,
            embed_dim: PAPER_EMBED_DIM,
            input_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn tiny(embed_dim: usize) -> Self {
        Self {
            architecture: Architecture::TinyConv,
            embed_dim,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if self.architecture == Architecture::Resnet18Style && self.embed_dim != PAPER_EMBED_DIM {
            return Err(Error::InvalidConfig(format!(
                "resnet18_style produces {PAPER_EMBED_DIM}-d features, got embed_dim {}",
                self.embed_dim
            )));
        }
        if self.input_channels != 3 {
            return Err(Error::InvalidConfig("encoders take 3-channel input".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    Dual,
    IntensityOnly,
    PhaseOnly,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 3] = [ModalityMode::Dual, ModalityMode::IntensityOnly, ModalityMode::PhaseOnly];

    pub fn uses_intensity(self) -> bool {
        self != ModalityMode::PhaseOnly
    }

    pub fn uses_phase(self) -> bool {
        self != ModalityMode::IntensityOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityMode::Dual => "dual",
            ModalityMode::IntensityOnly => "intensity_only",
            ModalityMode::PhaseOnly => "phase_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mode: ModalityMode,
    pub hidden: usize,
}

impl HeadConfig {
    pub fn new(mode: ModalityMode) -> Self {
        Self {
            mode,
            hidden: DEFAULT_HEAD_HIDDEN,
        }
    }

    /// `[input, hidden, classes]`.
    pub fn layer_dims(&self, embed_dim: usize) -> [usize; 3] {
        let input = match self.mode {
            ModalityMode::Dual => 2 * embed_dim,
            _ => embed_dim,
        };
        [input, self.hidden, NUM_CLASSES]
    }
}

/// Encoder branch: `F` sees intensity, `G` sees phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    F,
    G,
}

impl Branch {
    pub fn modality(self) -> Modality {
        match self {
            Branch::F => Modality::Intensity,
            Branch::G => Modality::Phase,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Branch::F => "f",
            Branch::G => "g",
        }
    }
}

/// Copy a single-channel crop into three identical channels, `(H, W) -> (H, W, 3)`.
pub fn replicate_channels(crop: ArrayView2<f32>) -> Array3<f32> {
    let (h, w) = crop.dim();
    Array3::from_shape_fn((h, w, 3), |(i, j, _)| crop[[i, j]])
}

/// Stack single-channel crops into an `(N, 3, H, W)` network input.
pub fn stack_batch(crops: &[&Array2<f32>]) -> Result<Array4<f32>> {
    let (h, w) = crops.first().ok_or(Error::EmptyBatch)?.dim();
    let mut out = Array4::zeros((crops.len(), 3, h, w));
    for (i, c) in crops.iter().enumerate() {
        if c.dim() != (h, w) {
            return Err(Error::Shape(format!("crop {i} is {:?}, expected {:?}", c.dim(), (h, w))));
        }
        for ch in 0..3 {
            out.slice_mut(s![i, ch, .., ..]).assign(c);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Relu(Relu),
    AvgPool(AvgPool),
    MaxPool(MaxPool),
    Block(BasicBlock),
}

/// A convolutional trunk ending in global average pooling.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<Layer>,
    pool: GlobalAvgPool,
}

/// Channel widths of the four tiny_conv blocks before the final projection block.
const TINY_WIDTHS: [usize; 3] = [8, 16, 32];
/// Mean-pooling factor applied to the raw crop before the first tiny_conv block.
const TINY_STEM_POOL: usize = 4;

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = |i: u64| seed::derive(seed, "layer", i);
        let mut layers = Vec::new();
        match config.architecture {
            Architecture::TinyConv => {
                layers.push(Layer::AvgPool(AvgPool::new(TINY_STEM_POOL)));
                let mut in_ch = config.input_channels;
                let widths = TINY_WIDTHS.iter().copied().chain(std::iter::once(config.embed_dim));
                for (i, out_ch) in widths.enumerate() {
                    layers.push(Layer::Conv(Conv2d::new(in_ch, out_ch, 3, 2, 1, false, s(i as u64))));
                    layers.push(Layer::Bn(BatchNorm2d::new(out_ch)));
                    layers.push(Layer::Relu(Relu::default()));
                    in_ch = out_ch;
                }
            }
            Architecture::Resnet18Style => {
                layers.push(Layer::Conv(Conv2d::new(config.input_channels, 64, 7, 2, 3, false, s(0))));
                layers.push(Layer::Bn(BatchNorm2d::new(64)));
                layers.push(Layer::Relu(Relu::default()));
                layers.push(Layer::MaxPool(MaxPool::default()));
                let stages = [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
                for (k, (cin, cout, stride)) in stages.into_iter().enumerate() {
                    let k = k as u64;
                    layers.push(Layer::Block(BasicBlock::new(cin, cout, stride, s(10 + 2 * k))));
                    layers.push(Layer::Block(BasicBlock::new(cout, cout, 1, s(11 + 2 * k))));
                }
            }
        }
        if let Some(Layer::Conv(c)) = layers.iter_mut().find(|l| matches!(l, Layer::Conv(_))) {
            c.needs_input_grad = false;
        }
        Ok(Self {
            config,
            layers,
            pool: GlobalAvgPool::default(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// `(N, 3, H, W) -> (N, D)`.
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array2<f32> {
        let mut a = x.clone();
        for layer in &mut self.layers {
            a = match layer {
                Layer::Conv(l) => l.forward(&a, train),
                Layer::Bn(l) => l.forward(&a, train),
                Layer::Relu(l) => l.forward4(&a, train),
                Layer::AvgPool(l) => l.forward(&a, train),
                Layer::MaxPool(l) => l.forward(&a, train),
                Layer::Block(l) => l.forward(&a, train),
            };
        }
        self.pool.forward(&a, train)
    }

    /// Accumulate parameter gradients for `dz = dLoss/dEmbedding`.
    pub fn backward(&mut self, dz: &Array2<f32>, exec: Exec) {
        let mut d = self.pool.backward(dz);
        for layer in self.layers.iter_mut().rev() {
            d = match layer {
                Layer::Conv(l) => match l.backward(&d, exec) {
                    Some(dx) => dx,
                    None => return,
                },
                Layer::Bn(l) => l.backward(&d),
                Layer::Relu(l) => l.backward4(&d),
                Layer::AvgPool(l) => l.backward(&d),
                Layer::MaxPool(l) => l.backward(&d),
                Layer::Block(l) => l.backward(&d, exec),
            };
        }
    }
}

impl Module for Encoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = crate::nn::join(prefix, &i.to_string());
            match layer {
                Layer::Conv(l) => l.visit(&p, f),
                Layer::Bn(l) => l.visit(&p, f),
                Layer::Block(l) => l.visit(&p, f),
                _ => {}
            }
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = crate::nn::join(prefix, &i.to_string());
            match layer {
                Layer::Conv(l) => l.visit_ref(&p, f),
                Layer::Bn(l) => l.visit_ref(&p, f),
                Layer::Block(l) => l.visit_ref(&p, f),
                _ => {}
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub config: HeadConfig,
    fc1: Linear,
    relu: Relu,
    fc2: Linear,
}

impl ClassifierHead {
    pub fn new(config: HeadConfig, embed_dim: usize, seed: u64) -> Self {
        let [input, hidden, classes] = config.layer_dims(embed_dim);
        Self {
            config,
            fc1: Linear::new(input, hidden, seed::derive(seed, "fc1", 0)),
            relu: Relu::default(),
            fc2: Linear::new(hidden, classes, seed::derive(seed, "fc2", 0)),
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let h = self.fc1.forward(x, train);
        let h = self.relu.forward2(&h, train);
        self.fc2.forward(&h, train)
    }

    pub fn backward(&mut self, dlogits: &Array2<f32>) -> Array2<f32> {
        let d = self.fc2.backward(dlogits);
        let d = self.relu.backward2(&d);
        self.fc1.backward(&d)
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_dim
    }
}

impl Module for ClassifierHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit(&crate::nn::join(prefix, "fc1"), f);
        self.fc2.visit(&crate::nn::join(prefix, "fc2"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit_ref(&crate::nn::join(prefix, "fc1"), f);
        self.fc2.visit_ref(&crate::nn::join(prefix, "fc2"), f);
    }
}

/// One crop presented to an encoder, with its channel replication applied.
#[derive(Debug, Clone)]
pub struct ModalCrop {
    /// `(H, W, 3)`.
    pub data: Array3<f32>,
    pub modality: Modality,
}

impl ModalCrop {
    pub fn new(crop: ArrayView2<f32>, modality: Modality) -> Self {
        Self {
            data: replicate_channels(crop),
            modality,
        }
    }

    fn to_nchw(&self) -> Array4<f32> {
        let (h, w, c) = self.data.dim();
        let mut out = Array4::zeros((1, c, h, w));
        for ch in 0..c {
            out.slice_mut(s![0, ch, .., ..]).assign(&self.data.index_axis(Axis(2), ch));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub source_modality: Modality,
    pub time_window_index: usize,
}

/// Full classifier: both encoder branches plus the head.
#[derive(Debug, Clone)]
pub struct TissueModel {
    pub encoder_config: EncoderConfig,
    pub head_config: HeadConfig,
    pub f: Encoder,
    pub g: Encoder,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Scratch,
    GenericPretrained,
    ContrastiveCheckpoint,
}

impl InitMode {
    pub const ALL: [InitMode; 3] = [InitMode::Scratch, InitMode::GenericPretrained, InitMode::ContrastiveCheckpoint];

    pub fn name(self) -> &'static str {
        match self {
            InitMode::Scratch => "scratch",
            InitMode::GenericPretrained => "generic_pretrained",
            InitMode::ContrastiveCheckpoint => "contrastive_checkpoint",
        }
    }

    /// Row label used in rendered tables.
    pub fn display(self) -> &'static str {
        match self {
            InitMode::Scratch => "Scratch",
            InitMode::GenericPretrained => "Generic",
            InitMode::ContrastiveCheckpoint => "Pretrained",
        }
    }
}

/// Environment variable naming a locally available generic trunk checkpoint.
pub const GENERIC_WEIGHTS_ENV: &str = "OCTPAIR_GENERIC_WEIGHTS";

impl TissueModel {
    /// Seeded random initialization of all three parts.
    pub fn scratch(encoder_config: EncoderConfig, head_config: HeadConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder_config,
            head_config,
            f: Encoder::new(encoder_config, seed::derive(seed, "encoder", 0))?,
            g: Encoder::new(encoder_config, seed::derive(seed, "encoder", 1))?,
            head: ClassifierHead::new(head_config, encoder_config.embed_dim, seed::derive(seed, "head", 0)),
        })
    }

    pub fn mode(&self) -> ModalityMode {
        self.head_config.mode
    }

    pub fn encoder(&mut self, branch: Branch) -> &mut Encoder {
        match branch {
            Branch::F => &mut self.f,
            Branch::G => &mut self.g,
        }
    }

    /// Embed one crop with the given branch (inference mode).
    pub fn encode(&mut self, crop: &ModalCrop, branch: Branch, time_window_index: usize) -> Result<Embedding> {
        if crop.modality != branch.modality() {
            return Err(Error::BranchMismatch {
                branch: branch.name(),
                modality: crop.modality.name(),
            });
        }
        let z = self.encoder(branch).forward(&crop.to_nchw(), false);
        let vector = z.row(0).to_vec();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Embedding {
            vector,
            source_modality: crop.modality,
            time_window_index,
        })
    }

    /// Logits for one sample. Dual mode takes `[intensity, phase]` in that order.
    pub fn classify(&mut self, embeddings: &[Embedding]) -> Result<[f32; NUM_CLASSES]> {
        let expected: &[Modality] = match self.mode() {
            ModalityMode::Dual => &[Modality::Intensity, Modality::Phase],
            ModalityMode::IntensityOnly => &[Modality::Intensity],
            ModalityMode::PhaseOnly => &[Modality::Phase],
        };
        let got: Vec<Modality> = embeddings.iter().map(|e| e.source_modality).collect();
        if got != expected {
            return Err(Error::InvalidConfig(format!(
                "{} head expects embeddings {expected:?}, got {got:?}",
                self.mode().name()
            )));
        }
        let input: Vec<f32> = embeddings.iter().flat_map(|e| e.vector.iter().copied()).collect();
        if input.len() != self.head.input_dim() {
            return Err(Error::Shape(format!("head input {} != {}", input.len(), self.head.input_dim())));
        }
        let x = Array2::from_shape_vec((1, input.len()), input).unwrap();
        let logits = self.head.forward(&x, false);
        let mut out = [0.0; NUM_CLASSES];
        out.copy_from_slice(logits.row(0).as_slice().unwrap());
        Ok(out)
    }

    /// Batched logits; inputs for unused branches are ignored.
    pub fn forward(&mut self, intensity: Option<&Array4<f32>>, phase: Option<&Array4<f32>>, train: bool) -> Result<Array2<f32>> {
        let mode = self.mode();
        let zi = if mode.uses_intensity() {
            let x = intensity.ok_or_else(|| Error::InvalidConfig("intensity batch required".into()))?;
            Some(self.f.forward(x, train))
        } else {
            None
        };
        let zp = if mode.uses_phase() {
            let x = phase.ok_or_else(|| Error::InvalidConfig("phase batch required".into()))?;
            Some(self.g.forward(x, train))
        } else {
            None
        };
        let input = match (zi, zp) {
            (Some(a), Some(b)) => ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap(),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!(),
        };
        Ok(self.head.forward(&input, train))
    }

    pub fn backward(&mut self, dlogits: &Array2<f32>, exec: Exec) {
        let d = self.head.backward(dlogits);
        let dim = self.encoder_config.embed_dim;
        match self.mode() {
            ModalityMode::Dual => {
                self.f.backward(&d.slice(s![.., ..dim]).to_owned(), exec);
                self.g.backward(&d.slice(s![.., dim..]).to_owned(), exec);
            }
            ModalityMode::IntensityOnly => self.f.backward(&d, exec),
            ModalityMode::PhaseOnly => self.g.backward(&d, exec),
        }
    }

    /// Parameters that take part in training for the current modality mode.
    pub fn visit_active(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        let mode = self.mode();
        if mode.uses_intensity() {
            self.f.visit("f", f);
        }
        if mode.uses_phase() {
            self.g.visit("g", f);
        }
        self.head.visit("head", f);
    }

    /// Load the contrastive pretraining encoders; the head stays as initialized.
    pub fn load_encoders(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.check_encoder(&self.encoder_config)?;
        if ckpt.header.kind != CheckpointKind::Pretrain && ckpt.header.kind != CheckpointKind::Model {
            return Err(Error::Checkpoint(format!("{:?} checkpoint holds no branch encoders", ckpt.header.kind)));
        }
        ckpt.restore_into(&mut self.f, "f")?;
        ckpt.restore_into(&mut self.g, "g")
    }

    /// Build a model per `mode`.
    ///
    /// `generic_pretrained` loads a trunk checkpoint (kind `generic`) into both
    /// branches; it must exist locally at `checkpoint_path` or at the path in
    /// `OCTPAIR_GENERIC_WEIGHTS`.
    pub fn init_weights(
        mode: InitMode,
        encoder_config: EncoderConfig,
        head_config: HeadConfig,
        seed: u64,
        checkpoint_path: Option<&Path>,
    ) -> Result<Self> {
        let mut model = Self::scratch(encoder_config, head_config, seed)?;
        match mode {
            InitMode::Scratch => {}
            InitMode::ContrastiveCheckpoint => {
                let path = checkpoint_path
                    .ok_or_else(|| Error::Checkpoint("contrastive_checkpoint init needs a checkpoint path".into()))?;
                model.load_encoders(&checkpoint::load(path)?)?;
            }
            InitMode::GenericPretrained => {
                let env = std::env::var_os(GENERIC_WEIGHTS_ENV);
                let path = checkpoint_path
                    .map(Path::to_path_buf)
                    .or_else(|| env.map(Into::into))
                    .filter(|p| p.exists())
                    .ok_or_else(|| {
                        Error::Unavailable(format!(
                            "generic_pretrained init needs a local trunk checkpoint (kind `generic`, \
                             resnet18_style). Convert large-corpus classification weights with the \
                             tensor names of this crate's resnet18_style encoder and point \
                             {GENERIC_WEIGHTS_ENV} at the file"
                        ))
                    })?;
                let ckpt = checkpoint::load(&path)?;
                if ckpt.header.kind != CheckpointKind::Generic {
                    return Err(Error::Checkpoint(format!("{} is not a generic trunk checkpoint", path.display())));
                }
                ckpt.check_encoder(&encoder_config)?;
                ckpt.restore_into(&mut model.f, "trunk")?;
                ckpt.restore_into(&mut model.g, "trunk")?;
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crop(h: usize, w: usize, salt: f32) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(i, j)| ((i * 31 + j * 7) % 17) as f32 * 0.05 + salt)
    }

    #[test]
    fn replicate_channels_copies_input() {
        let c = Array2::from_elem((250, 256), 5.0f32);
        let r = replicate_channels(c.view());
        assert_eq!(r.dim(), (250, 256, 3));
        assert!(r.iter().all(|&v| v == 5.0));
        let c = crop(4, 3, 0.0);
        let r = replicate_channels(c.view());
        for ch in 0..3 {
            assert_eq!(r.index_axis(Axis(2), ch), c);
        }
    }

    #[test]
    fn tiny_encoder_dims_and_determinism() {
        let mut m = TissueModel::scratch(EncoderConfig::tiny(32), HeadConfig::new(ModalityMode::Dual), 1).unwrap();
        let c = ModalCrop::new(crop(250, 256, 0.1).view(), Modality::Intensity);
        let a = m.encode(&c, Branch::F, 3).unwrap();
        let b = m.encode(&c, Branch::F, 3).unwrap();
        assert_eq!(a.vector.len(), 32);
        assert_eq!(a, b);
        assert!(matches!(m.encode(&c, Branch::G, 3), Err(Error::BranchMismatch { .. })));
    }

    #[test]
    fn head_dims_follow_mode() {
        assert_eq!(HeadConfig::new(ModalityMode::Dual).layer_dims(512), [1024, 512, 4]);
        assert_eq!(HeadConfig::new(ModalityMode::PhaseOnly).layer_dims(512), [512, 512, 4]);
        let mut m = TissueModel::scratch(EncoderConfig::tiny(8), HeadConfig::new(ModalityMode::Dual), 2).unwrap();
        let e = |m: Modality| Embedding {
            vector: vec![0.5; 8],
            source_modality: m,
            time_window_index: 0,
        };
        let logits = m.classify(&[e(Modality::Intensity), e(Modality::Phase)]).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(m.classify(&[e(Modality::Phase), e(Modality::Intensity)]).is_err());
        assert!(m.classify(&[e(Modality::Intensity)]).is_err());

        let mut single = TissueModel::scratch(EncoderConfig::tiny(8), HeadConfig::new(ModalityMode::IntensityOnly), 2).unwrap();
        assert!(single.classify(&[e(Modality::Intensity)]).is_ok());
        assert!(single.classify(&[e(Modality::Phase)]).is_err());
    }

    #[test]
    fn zero_weight_head_returns_bias() {
        let mut m = TissueModel::scratch(EncoderConfig::tiny(4), HeadConfig::new(ModalityMode::PhaseOnly), 3).unwrap();
        m.head.visit("", &mut |name, p| {
            if name.ends_with("weight") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let mut bias = Vec::new();
        m.head.visit_ref("", &mut |name, p| {
            if name == "fc2.bias" {
                bias = p.value.clone();
            }
        });
        let e = Embedding {
            vector: vec![3.0, -1.0, 2.0, 0.5],
            source_modality: Modality::Phase,
            time_window_index: 0,
        };
        assert_eq!(m.classify(&[e]).unwrap().to_vec(), bias);
    }

    #[test]
    fn branches_never_share_parameters() {
        let m = TissueModel::scratch(EncoderConfig::tiny(16), HeadConfig::new(ModalityMode::Dual), 4).unwrap();
        assert_ne!(m.f.param_hash(), m.g.param_hash());
        let same = TissueModel::scratch(EncoderConfig::tiny(16), HeadConfig::new(ModalityMode::Dual), 4).unwrap();
        assert_eq!(m.f.param_hash(), same.f.param_hash());
        assert_eq!(m.head.param_hash(), same.head.param_hash());
    }

    #[test]
    fn resnet_config_is_pinned_to_512() {
        assert!(EncoderConfig { embed_dim: 256, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig::tiny(0).validate().is_err());
    }

    #[test]
    fn resnet_encoder_emits_512_features() {
        let mut enc = Encoder::new(EncoderConfig::default(), 5).unwrap();
        let x = stack_batch(&[&crop(250, 256, 0.2)]).unwrap();
        let z = enc.forward(&x, false);
        assert_eq!(z.dim(), (1, 512));
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn generic_init_without_weights_is_a_clear_error() {
        let err = TissueModel::init_weights(
            InitMode::GenericPretrained,
            EncoderConfig::default(),
            HeadConfig::new(ModalityMode::Dual),
            0,
            Some(Path::new("/nonexistent/trunk.ckpt")),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Unavailable(m) if m.contains(GENERIC_WEIGHTS_ENV)));
    }
}
