//! Four-stage hybrid encoder, top-down aggregation decoder and the whole
//! segmentation model.

pub mod config;

pub use config::{
    parse_config, parse_pattern, BlockKind, LrSchedule, ModelConfig, OptimizerKind, RunConfig, TrainConfig, PATTERNS,
    PRESETS, RECIPES,
};

use crate::autodiff::{Activation, Graph, Var};
use crate::blocks::{GfeBlock, LfeBlock, PatchEmbed};
use crate::error::{dim_err, Error, Result};
use crate::layers::Conv2d;
use crate::params::{Init, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub enum Block {
    Local(LfeBlock),
    Global(GfeBlock),
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub kind: BlockKind,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Stage>,
}

/// Stage outputs `s1..s4` at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutputs {
    pub stages: [Var; 4],
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let prefix = format!("enc.stage{}", s + 1);
            let cin = if s == 0 { cfg.in_channels } else { cfg.stage_widths[s - 1] };
            let c = cfg.stage_widths[s];
            let embed = PatchEmbed::new(&format!("{prefix}.embed"), cin, c, s + 1);
            let kind = cfg.pattern[s];
            let blocks = (0..cfg.stage_depths[s])
                .map(|b| {
                    let bp = format!("{prefix}.block{b}");
                    Ok(match kind {
                        BlockKind::Local => Block::Local(LfeBlock::new(&bp, c)),
                        BlockKind::Global => Block::Global(GfeBlock::new(&bp, cfg.msla_config(s)?)?),
                    })
                })
                .collect::<Result<_>>()?;
            stages.push(Stage { kind, embed, blocks });
        }
        Ok(Self { stages })
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        for st in &self.stages {
            st.embed.init(store, init);
            for b in &st.blocks {
                match b {
                    Block::Local(l) => l.init(store, init),
                    Block::Global(gb) => gb.init(store, init),
                }
            }
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<EncoderOutputs> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) || s[2] == 0 || s[3] == 0 {
            return dim_err(format!("encoder input must be B x C x H x W with H, W multiples of 32, got {s:?}"));
        }
        let mut outs = Vec::with_capacity(4);
        let mut cur = x;
        for st in &self.stages {
            let mut z = st.embed.forward(g, store, cur)?;
            match st.kind {
                BlockKind::Local => {
                    for b in &st.blocks {
                        if let Block::Local(l) = b {
                            z = l.forward(g, store, z)?;
                        }
                    }
                }
                BlockKind::Global => {
                    let (h, w) = (g.shape(z)[2], g.shape(z)[3]);
                    let mut t = g.map_to_tokens(z)?;
                    for b in &st.blocks {
                        if let Block::Global(gb) = b {
                            t = gb.forward_grid(g, store, t, h, w)?;
                        }
                    }
                    z = g.tokens_to_map(t, h, w)?;
                }
            }
            outs.push(z);
            cur = z;
        }
        Ok(EncoderOutputs { stages: [outs[0], outs[1], outs[2], outs[3]] })
    }

    pub fn macs(&self, cfg: &ModelConfig) -> u64 {
        let mut total = 0;
        let (mut h, mut w) = cfg.input_size;
        for st in &self.stages {
            total += st.embed.macs(h, w);
            h = st.embed.conv.out_extent(h);
            w = st.embed.conv.out_extent(w);
            for b in &st.blocks {
                total += match b {
                    Block::Local(l) => l.macs(h, w),
                    Block::Global(gb) => gb.macs(h, w),
                };
            }
        }
        total
    }
}

/// Aligns every stage to the stage-1 grid with channel-halving 1x1 convs and
/// 2x upsampling, sums top-down, refines each branch, concatenates and
/// projects to class logits at full resolution.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub widths: [usize; 4],
    pub num_classes: usize,
    /// `align[m - 1]` holds the `m` halving convs applied to stage `m + 1`.
    pub align: Vec<Vec<Conv2d>>,
    pub refine: Vec<[Conv2d; 2]>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(widths: [usize; 4], num_classes: usize) -> Result<Self> {
        for i in 0..3 {
            if widths[i + 1] != 2 * widths[i] {
                return Err(Error::Config(format!("decoder widths must double per stage, got {widths:?}")));
            }
        }
        let c1 = widths[0];
        let align = (1..4)
            .map(|m| {
                (0..m)
                    .map(|j| {
                        let cin = widths[m - j];
                        Conv2d::pointwise(format!("dec.align{}.{j}", m + 1), cin, cin / 2)
                    })
                    .collect()
            })
            .collect();
        let refine = (0..4)
            .map(|i| {
                [
                    Conv2d::same(format!("dec.refine{}.conv1", i + 1), c1, c1, 3, 1),
                    Conv2d::same(format!("dec.refine{}.conv2", i + 1), c1, c1, 3, 1),
                ]
            })
            .collect();
        let head = Conv2d::same("dec.head".into(), 4 * c1, num_classes, 3, 1);
        Ok(Self { widths, num_classes, align, refine, head })
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        for c in self.align.iter().flatten() {
            c.init(store, init);
        }
        for [a, b] in &self.refine {
            a.init(store, init);
            b.init(store, init);
        }
        self.head.init(store, init);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, enc: &EncoderOutputs) -> Result<Var> {
        let s1 = g.shape(enc.stages[0]).to_vec();
        if s1.len() != 4 || s1[1] != self.widths[0] {
            return dim_err(format!("decoder expects stage-1 width {}, got {s1:?}", self.widths[0]));
        }
        for (i, &v) in enc.stages.iter().enumerate() {
            let s = g.shape(v);
            let f = 1 << i;
            if s.len() != 4 || s[0] != s1[0] || s[1] != self.widths[i] || s[2] * f != s1[2] || s[3] * f != s1[3] {
                return dim_err(format!("stage {} features have shape {s:?}, inconsistent with stage 1 {s1:?}", i + 1));
            }
        }

        let mut aligned = vec![enc.stages[0]];
        for (m, convs) in self.align.iter().enumerate() {
            let mut a = enc.stages[m + 1];
            for c in convs {
                a = c.forward(g, store, a)?;
                a = g.upsample2x(a)?;
            }
            aligned.push(a);
        }
        // stages 2..3 accumulate every deeper aligned stage; stage 1 passes through
        let mut branches = aligned.clone();
        for i in (1..3).rev() {
            branches[i] = g.add(aligned[i], branches[i + 1])?;
        }

        let mut refined = Vec::with_capacity(4);
        for (b, [c1, c2]) in branches.iter().zip(&self.refine) {
            let y = c1.forward(g, store, *b)?;
            let y = g.activation(y, Activation::Gelu);
            let y = c2.forward(g, store, y)?;
            refined.push(g.upsample2x(y)?);
        }
        let cat = g.concat(&refined, 1)?;
        let logits = self.head.forward(g, store, cat)?;
        g.upsample2x(logits)
    }

    /// Multiply-accumulates given the stage-1 grid `h1 x w1`.
    pub fn macs(&self, h1: usize, w1: usize) -> u64 {
        let mut total = 0;
        for (m, convs) in self.align.iter().enumerate() {
            let (mut h, mut w) = (h1 >> (m + 1), w1 >> (m + 1));
            for c in convs {
                total += c.macs(h, w);
                h *= 2;
                w *= 2;
            }
        }
        for [a, b] in &self.refine {
            total += a.macs(h1, w1) + b.macs(h1, w1);
        }
        total + self.head.macs(2 * h1, 2 * w1)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config)?;
        let decoder = Decoder::new(config.stage_widths, config.num_classes)?;
        Ok(Self { config, encoder, decoder })
    }

    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init_params<T: Float>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        self.encoder.init(&mut store, &mut init);
        self.decoder.init(&mut store, &mut init);
        store
    }

    /// Unnormalised class scores `B x K x H x W`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied();
        if c != Some(self.config.in_channels) {
            return dim_err(format!(
                "model expects {} input channels, got shape {:?}",
                self.config.in_channels,
                g.shape(x)
            ));
        }
        let enc = self.encoder.forward(g, store, x)?;
        self.decoder.forward(g, store, &enc)
    }

    /// Multiply-accumulates of one forward pass at the configured input size.
    pub fn macs(&self) -> u64 {
        let (h, w) = self.config.input_size;
        self.encoder.macs(&self.config) + self.decoder.macs(h / 4, w / 4)
    }
}

/// Validated model plus freshly initialised parameters.
pub fn build_model<T: Float>(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
    let model = Model::new(config)?;
    let params = model.init_params(seed);
    Ok((model, params))
}
