//! The detector: CNN backbone, per-stream transformer encoders with
//! positional encodings, stream fusion, transformer decoder over learned
//! object queries, and class/box heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::NUM_CLASSES;
use crate::nn::{Bound, Conv2d, Decoder, Embedding, Encoder, Linear, Mlp, ParamBuilder, ParamStore};
use crate::posenc::{apply_early_tpe, apply_late_tpe, spe_sinusoidal, SpeTable, TpeTable};
use crate::tensor::{Tape, Tensor, Var};

pub const RGB_CHANNELS: usize = 3;
pub const FLOW_CHANNELS: usize = 2;
/// Frames in the temporal window.
pub const WINDOW: usize = 2;
/// Spatial reduction of the backbone (three stride-2 blocks).
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One RGB frame.
    Baseline,
    /// Two RGB frames through a shared backbone and encoder, channel-halved
    /// and concatenated.
    TwoStreamRgb,
    /// Two RGB frames, TPE added before one shared encoder over both frames.
    EarlyTpe,
    /// Two RGB frames, one dedicated encoder per frame, TPE added after.
    LateTpe,
    /// One RGB frame plus a two-channel flow map, one stream each.
    RgbOf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::TwoStreamRgb,
        Variant::EarlyTpe,
        Variant::LateTpe,
        Variant::RgbOf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TwoStreamRgb => "two_stream_rgb",
            Variant::EarlyTpe => "early_tpe",
            Variant::LateTpe => "late_tpe",
            Variant::RgbOf => "rgb_of",
        }
    }

    pub fn rgb_frames(self) -> usize {
        match self {
            Variant::Baseline | Variant::RgbOf => 1,
            _ => WINDOW,
        }
    }

    pub fn uses_flow(self) -> bool {
        self == Variant::RgbOf
    }

    pub fn has_tpe(self) -> bool {
        matches!(self, Variant::EarlyTpe | Variant::LateTpe)
    }

    /// Memory blocks of `L` tokens handed to the decoder.
    pub fn memory_blocks(self) -> usize {
        match self {
            Variant::EarlyTpe | Variant::LateTpe => WINDOW,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub num_queries: usize,
    /// Output channels of the first two backbone blocks; the third emits
    /// `d_model`.
    pub backbone_channels: [usize; 2],
    /// Adds the temporal embedding in the TPE variants.
    pub use_tpe: bool,
    /// Early TPE runs its shared encoder; when off, the position-augmented
    /// CNN tokens go to the decoder directly.
    pub early_tpe_uses_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            height: 64,
            width: 64,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 128,
            num_queries: 10,
            backbone_channels: [32, 64],
            use_tpe: true,
            early_tpe_uses_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ff_dim", self.ff_dim),
            ("num_queries", self.num_queries),
            ("backbone_channels", self.backbone_channels[0].min(self.backbone_channels[1])),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("d_model", "must be even"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config("heads", format!("must divide d_model {}", self.d_model)));
        }
        for (field, v) in [("height", self.height), ("width", self.width)] {
            if v % BACKBONE_STRIDE != 0 {
                return Err(Error::config(field, format!("must be divisible by {BACKBONE_STRIDE}")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / BACKBONE_STRIDE, self.width / BACKBONE_STRIDE)
    }

    /// Tokens per frame after flattening the feature map.
    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn memory_len(&self) -> usize {
        self.variant.memory_blocks() * self.tokens_per_frame()
    }
}

/// Three 3×3 stride-2 ReLU blocks: `C_in → c0 → c1 → D`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c_in: usize, channels: [usize; 2], d: usize) -> Self {
        let mut pb = pb.sub(name);
        let plan = [c_in, channels[0], channels[1], d];
        let blocks = plan
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut pb, &format!("conv{i}"), w[0], w[1], 3, 2))
            .collect();
        Backbone { blocks }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[1] % BACKBONE_STRIDE != 0 || s[2] % BACKBONE_STRIDE != 0 {
            return Err(Error::contract(format!(
                "backbone input {s:?} must be C×H×W with H, W divisible by {BACKBONE_STRIDE}"
            )));
        }
        self.blocks
            .iter()
            .try_fold(image, |x, conv| Ok(conv.forward(p, x)?.relu()))
    }
}

/// `D×H'×W'` feature map → `(H'·W')×D` tokens in row-major pixel order.
pub fn flatten_tokens<'t>(fm: Var<'t>) -> Result<Var<'t>> {
    let s = fm.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("feature map must be rank 3, got {s:?}")));
    }
    fm.reshape(&[s[0], s[1] * s[2]])?.transpose()
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<'t>(tokens: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::shape("unflatten", &s, &[h * w]));
    }
    tokens.transpose()?.reshape(&[s[1], h, w])
}

/// Per-stream 1×1 convolutions `D → D/2`, one per stream, used to fuse two
/// token streams by channel concatenation.
#[derive(Debug, Clone)]
pub struct ChannelHalving {
    pub streams: [Conv2d; 2],
}

impl ChannelHalving {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::config("d_model", "channel halving needs an even model dim"));
        }
        let mut pb = pb.sub(name);
        Ok(ChannelHalving {
            streams: [
                Conv2d::new(&mut pb, "0", d, d / 2, 1, 1),
                Conv2d::new(&mut pb, "1", d, d / 2, 1, 1),
            ],
        })
    }
}

pub fn fuse_channel_halved<'t>(
    p: &Bound<'t>,
    f1: Var<'t>,
    f2: Var<'t>,
    halving: &ChannelHalving,
) -> Result<Var<'t>> {
    let (s1, s2) = (f1.shape(), f2.shape());
    if s1 != s2 {
        return Err(Error::shape("fuse", &s1, &s2));
    }
    if s1.len() != 2 || s1[1] % 2 != 0 {
        return Err(Error::contract(format!("fusion needs L×D tokens with even D, got {s1:?}")));
    }
    let a = halving.streams[0].forward_tokens(p, f1)?;
    let b = halving.streams[1].forward_tokens(p, f2)?;
    f1.tape().concat(&[a, b], 1)
}

/// Network inputs: RGB frames in time order, plus a flow map for
/// [`Variant::RgbOf`].
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub rgb: Vec<Tensor>,
    pub flow: Option<Tensor>,
}

/// Forward-pass result on a tape.
pub struct ModelOutput<'t> {
    /// `N_q×3` logits over moving, static, no-object.
    pub logits: Var<'t>,
    /// `N_q×4` CXCYWH boxes in (0, 1).
    pub boxes: Var<'t>,
    /// One `h×N_q×L_mem` tensor per decoder layer.
    pub cross_attention: Vec<Tensor>,
    /// Backbone feature map of every stream, in input order.
    pub features: Vec<Tensor>,
    /// Encoder output per frame/stream block (`L×D` each).
    pub encoded: Vec<Tensor>,
    pub memory_len: usize,
}

/// Fixed-size detection output, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub class_logits: Tensor,
    pub boxes: Tensor,
    /// `n_dec×h×N_q×L_mem`.
    pub cross_attention: Tensor,
}

impl ModelOutput<'_> {
    pub fn detach(&self) -> PredictionSet {
        let mut data = Vec::new();
        let mut shape = vec![self.cross_attention.len()];
        for layer in &self.cross_attention {
            data.extend_from_slice(layer.data());
        }
        shape.extend_from_slice(self.cross_attention[0].shape());
        PredictionSet {
            class_logits: self.logits.value(),
            boxes: self.boxes.value(),
            cross_attention: Tensor::new(&shape, data).expect("attention shape"),
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Backbone,
    flow_backbone: Option<Backbone>,
    encoders: Vec<Encoder>,
    tpe: Option<TpeTable>,
    halving: Option<ChannelHalving>,
    decoder: Decoder,
    queries: Embedding,
    class_head: Linear,
    box_head: Mlp,
}

impl Layout {
    fn build(cfg: &ModelConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let d = cfg.d_model;
        let encoder = |pb: &mut ParamBuilder<'_>, name: &str| {
            Encoder::new(pb, name, cfg.enc_layers, d, cfg.heads, cfg.ff_dim)
        };
        let backbone = Backbone::new(pb, "backbone", RGB_CHANNELS, cfg.backbone_channels, d);
        let flow_backbone = cfg
            .variant
            .uses_flow()
            .then(|| Backbone::new(pb, "flow_backbone", FLOW_CHANNELS, cfg.backbone_channels, d));
        let encoder_count = match cfg.variant {
            Variant::Baseline | Variant::TwoStreamRgb => 1,
            Variant::EarlyTpe => usize::from(cfg.early_tpe_uses_encoder),
            Variant::LateTpe | Variant::RgbOf => 2,
        };
        let encoders = (0..encoder_count)
            .map(|i| encoder(pb, &format!("encoders.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let tpe = (cfg.variant.has_tpe() && cfg.use_tpe).then(|| TpeTable::new(pb, "tpe", WINDOW, d));
        let halving = match cfg.variant {
            Variant::TwoStreamRgb | Variant::RgbOf => Some(ChannelHalving::new(pb, "fusion", d)?),
            _ => None,
        };
        let decoder = Decoder::new(pb, "decoder", cfg.dec_layers, d, cfg.heads, cfg.ff_dim)?;
        let queries = Embedding::new(pb, "queries", cfg.num_queries, d);
        let class_head = Linear::new(pb, "class_head", d, NUM_CLASSES);
        let box_head = Mlp::new(pb, "box_head", &[d, d, d, 4]);
        Ok(Layout {
            backbone,
            flow_backbone,
            encoders,
            tpe,
            halving,
            decoder,
            queries,
            class_head,
            box_head,
        })
    }
}

/// A configured detector and its parameters.
#[derive(Debug, Clone)]
pub struct Modetr {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    spe: SpeTable,
}

impl Modetr {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut ParamBuilder::new(&mut params, &mut rng))?;
        let spe = spe_sinusoidal(config.tokens_per_frame(), config.d_model)?;
        Ok(Modetr {
            config,
            params,
            layout,
            spe,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must
    /// match the architecture exactly.
    pub fn from_params(config: ModelConfig, stored: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if stored.names() != model.params.names() {
            return Err(Error::contract("stored parameter names do not match the architecture"));
        }
        for ((name, want), (_, got)) in model.params.iter().zip(stored.iter()) {
            if want.shape() != got.shape() {
                return Err(Error::contract(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = stored;
        Ok(model)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }

    pub fn spe(&self) -> &SpeTable {
        &self.spe
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let v = self.config.variant;
        if input.rgb.len() != v.rgb_frames() || input.flow.is_some() != v.uses_flow() {
            return Err(Error::contract(format!(
                "variant {} takes {} RGB frame(s){}; got {} frame(s){}",
                v.name(),
                v.rgb_frames(),
                if v.uses_flow() { " and a flow map" } else { "" },
                input.rgb.len(),
                if input.flow.is_some() { " and a flow map" } else { "" },
            )));
        }
        let (h, w) = (self.config.height, self.config.width);
        for frame in &input.rgb {
            if frame.shape() != [RGB_CHANNELS, h, w] {
                return Err(Error::shape("rgb input", frame.shape(), &[RGB_CHANNELS, h, w]));
            }
        }
        if let Some(flow) = &input.flow {
            if flow.shape() != [FLOW_CHANNELS, h, w] {
                return Err(Error::shape("flow input", flow.shape(), &[FLOW_CHANNELS, h, w]));
            }
        }
        Ok(())
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, input: &ModelInput) -> Result<ModelOutput<'t>> {
        self.check_input(input)?;
        let l = &self.layout;
        let tokens = self.config.tokens_per_frame();
        let spe = self.spe.on_tape(tape);
        let mut features = Vec::new();
        let mut encoded = Vec::new();

        let mut stream = |backbone: &Backbone, image: &Tensor| -> Result<Var<'t>> {
            let fm = backbone.forward(p, tape.constant(image))?;
            features.push(fm.value());
            flatten_tokens(fm)
        };

        let (memory, mem_pos) = match self.config.variant {
            Variant::Baseline => {
                let t = stream(&l.backbone, &input.rgb[0])?;
                let e = l.encoders[0].forward(p, t, spe)?;
                encoded.push(e.value());
                (e, spe)
            }
            Variant::TwoStreamRgb => {
                let mut enc = Vec::with_capacity(WINDOW);
                for frame in &input.rgb {
                    let t = stream(&l.backbone, frame)?;
                    let e = l.encoders[0].forward(p, t, spe)?;
                    encoded.push(e.value());
                    enc.push(e);
                }
                let halving = l.halving.as_ref().expect("fusion convs");
                (fuse_channel_halved(p, enc[0], enc[1], halving)?, spe)
            }
            Variant::EarlyTpe => {
                let frames = input
                    .rgb
                    .iter()
                    .map(|f| stream(&l.backbone, f))
                    .collect::<Result<Vec<_>>>()?;
                let (joint, pos) = apply_early_tpe(p, &frames, &self.spe, l.tpe.as_ref())?;
                let memory = match l.encoders.first() {
                    Some(enc) => enc.forward(p, joint, pos)?,
                    None => joint.add(pos)?,
                };
                for t in 0..WINDOW {
                    encoded.push(memory.slice(0, t * tokens, tokens)?.value());
                }
                (memory, tape.concat(&[spe; WINDOW], 0)?)
            }
            Variant::LateTpe => {
                let mut enc = Vec::with_capacity(WINDOW);
                for (frame, encoder) in input.rgb.iter().zip(&l.encoders) {
                    let t = stream(&l.backbone, frame)?;
                    let e = encoder.forward(p, t, spe)?;
                    encoded.push(e.value());
                    enc.push(e);
                }
                let enc = match &l.tpe {
                    Some(tpe) => apply_late_tpe(p, &enc, tpe)?,
                    None => enc,
                };
                (tape.concat(&enc, 0)?, tape.concat(&[spe; WINDOW], 0)?)
            }
            Variant::RgbOf => {
                let rgb = stream(&l.backbone, &input.rgb[0])?;
                let flow_backbone = l.flow_backbone.as_ref().expect("flow backbone");
                let flow = stream(flow_backbone, input.flow.as_ref().expect("checked flow"))?;
                let e_rgb = l.encoders[0].forward(p, rgb, spe)?;
                let e_flow = l.encoders[1].forward(p, flow, spe)?;
                encoded.push(e_rgb.value());
                encoded.push(e_flow.value());
                let halving = l.halving.as_ref().expect("fusion convs");
                (fuse_channel_halved(p, e_rgb, e_flow, halving)?, spe)
            }
        };

        let all_queries: Vec<usize> = (0..self.config.num_queries).collect();
        let queries = l.queries.lookup(p, &all_queries)?;
        let (hidden, cross_attention) = l.decoder.forward(p, queries, memory, queries, mem_pos)?;
        let logits = l.class_head.forward(p, hidden)?;
        let boxes = l.box_head.forward(p, hidden)?.sigmoid();
        Ok(ModelOutput {
            logits,
            boxes,
            cross_attention,
            features,
            encoded,
            memory_len: memory.shape()[0],
        })
    }

    /// Forward pass on a private tape, detached.
    pub fn predict(&self, input: &ModelInput) -> Result<PredictionSet> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        Ok(self.forward(&p, &tape, input)?.detach())
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            d_model: 32,
            heads: 4,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 64,
            num_queries: 8,
            ..ModelConfig::default()
        }
    }

    fn image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn input_for(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput {
        let (h, w) = (cfg.height, cfg.width);
        ModelInput {
            rgb: (0..cfg.variant.rgb_frames()).map(|_| image(rng, 3, h, w)).collect(),
            flow: cfg.variant.uses_flow().then(|| image(rng, 2, h, w)),
        }
    }

    #[test]
    fn every_variant_emits_fixed_slots_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in Variant::ALL {
            let cfg = small(v);
            let model = Modetr::new(cfg.clone(), 5).unwrap();
            let out = model.predict(&input_for(&cfg, &mut rng)).unwrap();
            assert_eq!(out.class_logits.shape(), &[8, 3], "{v:?}");
            assert_eq!(out.boxes.shape(), &[8, 4], "{v:?}");
            assert!(out.boxes.data().iter().all(|&b| b > 0.0 && b < 1.0));
            let l_mem = cfg.memory_len();
            assert_eq!(out.cross_attention.shape(), &[1, 4, 8, l_mem]);
            for row in out.cross_attention.data().chunks(l_mem) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_lengths_follow_fusion() {
        let base = small(Variant::Baseline);
        assert_eq!(base.tokens_per_frame(), 64);
        assert_eq!(small(Variant::EarlyTpe).memory_len(), 128);
        assert_eq!(small(Variant::LateTpe).memory_len(), 128);
        assert_eq!(small(Variant::TwoStreamRgb).memory_len(), 64);
        assert_eq!(small(Variant::RgbOf).memory_len(), 64);
    }

    #[test]
    fn wrong_arity_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small(Variant::TwoStreamRgb);
        let model = Modetr::new(cfg.clone(), 5).unwrap();
        let one = ModelInput {
            rgb: vec![image(&mut rng, 3, 64, 64)],
            flow: None,
        };
        assert!(model.predict(&one).is_err());
        let of = Modetr::new(small(Variant::RgbOf), 5).unwrap();
        assert!(of.predict(&one).is_err());
        let wrong_size = ModelInput {
            rgb: vec![image(&mut rng, 3, 32, 64)],
            flow: None,
        };
        assert!(Modetr::new(small(Variant::Baseline), 5).unwrap().predict(&wrong_size).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.d_model = 30;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.height = 60;
        assert!(c.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn backbone_shapes_zero_input_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut ParamBuilder::new(&mut store, &mut rng), "bb", 3, [32, 64], 64);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let zero = bb.forward(&p, tape.constant(&Tensor::zeros(&[3, 64, 64]))).unwrap();
        assert_eq!(zero.shape(), vec![64, 8, 8]);
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
        assert!(bb.forward(&p, tape.constant(&Tensor::zeros(&[3, 60, 64]))).is_err());

        let x = image(&mut rng, 3, 16, 16);
        let out = bb.forward(&p, tape.constant(&x)).unwrap();
        let g = tape.backward(out.sum()).unwrap();
        let first = g.tensor(p.get(bb.blocks[0].weight));
        assert!(first.data().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn flatten_round_trip_and_indexing() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let fm = Tensor::new(&[2, 2, 2], data).unwrap();
        let tokens = flatten_tokens(tape.constant(&fm)).unwrap();
        assert_eq!(tokens.shape(), vec![4, 2]);
        let tv = tokens.value();
        for i in 0..4 {
            let (y, x) = (i / 2, i % 2);
            for c in 0..2 {
                assert_eq!(tv.get(&[i, c]), fm.get(&[c, y, x]));
            }
        }
        let back = unflatten_tokens(tokens, 2, 2).unwrap().value();
        assert_eq!(back, fm);
    }

    #[test]
    fn fusion_with_selector_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let halving = ChannelHalving::new(&mut ParamBuilder::new(&mut store, &mut rng), "fusion", 4).unwrap();
        let select_first_half = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        store.assign("fusion.0.weight", select_first_half.clone()).unwrap();
        store.assign("fusion.1.weight", select_first_half).unwrap();
        let f1 = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        let f2 = Tensor::from_rows(&[vec![-1.0, -2.0, -3.0, -4.0], vec![-5.0, -6.0, -7.0, -8.0]]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (v1, v2) = (tape.param(&f1), tape.param(&f2));
        let fused = fuse_channel_halved(&p, v1, v2, &halving).unwrap();
        assert_eq!(fused.value().data(), &[1.0, 2.0, -1.0, -2.0, 5.0, 6.0, -5.0, -6.0]);
        let g = tape.backward(fused.sum()).unwrap();
        assert!(g.get(v1).unwrap().iter().any(|v| *v != 0.0));
        assert!(g.get(v2).unwrap().iter().any(|v| *v != 0.0));
        assert!(ChannelHalving::new(&mut ParamBuilder::new(&mut store, &mut rng), "odd", 5).is_err());
    }

    #[test]
    fn parameter_count_relations() {
        let count = |v: Variant| Modetr::new(small(v), 1).unwrap().count_parameters();
        let d = 32;
        let halving = 2 * (d * d / 2 + d / 2);
        assert_eq!(count(Variant::TwoStreamRgb) - count(Variant::Baseline), halving);

        let early = Modetr::new(small(Variant::EarlyTpe), 1).unwrap();
        let late = Modetr::new(small(Variant::LateTpe), 1).unwrap();
        let one_stack = late.params.count_with_prefix("encoders.1.");
        assert!(one_stack > 0);
        assert_eq!(late.count_parameters() - early.count_parameters(), one_stack);
        assert_eq!(one_stack, early.params.count_with_prefix("encoders.0."));

        let mut no_tpe = small(Variant::EarlyTpe);
        no_tpe.use_tpe = false;
        let without = Modetr::new(no_tpe, 1).unwrap().count_parameters();
        assert_eq!(early.count_parameters() - without, WINDOW * d);
        assert!(early.params.names().iter().all(|n| !n.starts_with("decoder.") || !n.contains("tpe")));
    }

    #[test]
    fn from_params_checks_layout() {
        let a = Modetr::new(small(Variant::Baseline), 1).unwrap();
        let b = Modetr::from_params(small(Variant::Baseline), a.params.clone()).unwrap();
        assert_eq!(b.params.iter().count(), a.params.iter().count());
        assert!(Modetr::from_params(small(Variant::RgbOf), a.params.clone()).is_err());
    }
}
