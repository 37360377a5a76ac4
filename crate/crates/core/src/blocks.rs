//! Encoder building blocks: patch embedding, the convolutional local feature
//! extraction (LFE) block and the attention-based global feature extraction
//! (GFE) block.

use crate::attention::{Msla, MslaConfig};
use crate::autodiff::{square_side, Activation, Graph, Var};
use crate::error::{dim_err, Result};
use crate::layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::Float;

pub const FFN_EXPANSION: usize = 4;

/// Strided convolution (stride 4 for stage 1, 2 afterwards) followed by layer
/// norm over channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn stride_for_stage(stage: usize) -> usize {
        if stage == 1 {
            4
        } else {
            2
        }
    }

    pub fn new(prefix: &str, cin: usize, cout: usize, stage: usize) -> Self {
        let s = Self::stride_for_stage(stage);
        Self {
            conv: Conv2d { name: format!("{prefix}.proj"), cin, cout, k: s, stride: s, pad: 0, groups: 1, bias: true },
            norm: LayerNorm::new(format!("{prefix}.norm"), cout),
        }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.conv.init(store, init);
        self.norm.init(store);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let stride = self.conv.stride;
        if s.len() != 4 || !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
            return dim_err(format!("patch embedding with stride {stride} cannot divide input {s:?}"));
        }
        let y = self.conv.forward(g, store, x)?;
        self.norm.forward(g, store, y, 1)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}

/// LFE block on `B x C x H x W` maps:
/// positional 3x3 depth-wise conv with residual, then
/// `1x1 -> 5x5 depth-wise -> 1x1` on the batch-normed map with residual, then a
/// 1x1 conv FFN (expand 4, GELU, restore) on the batch-normed map with residual.
#[derive(Clone, Debug)]
pub struct LfeBlock {
    pub pos: Conv2d,
    pub norm1: BatchNorm2d,
    pub pw1: Conv2d,
    pub dw: Conv2d,
    pub pw2: Conv2d,
    pub norm2: BatchNorm2d,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl LfeBlock {
    pub fn new(prefix: &str, c: usize) -> Self {
        Self {
            pos: Conv2d::depthwise(format!("{prefix}.pos"), c, 3),
            norm1: BatchNorm2d::new(format!("{prefix}.norm1"), c),
            pw1: Conv2d::pointwise(format!("{prefix}.conv1"), c, c),
            dw: Conv2d::depthwise(format!("{prefix}.conv2"), c, 5),
            pw2: Conv2d::pointwise(format!("{prefix}.conv3"), c, c),
            norm2: BatchNorm2d::new(format!("{prefix}.norm2"), c),
            fc1: Conv2d::pointwise(format!("{prefix}.ffn.fc1"), c, FFN_EXPANSION * c),
            fc2: Conv2d::pointwise(format!("{prefix}.ffn.fc2"), FFN_EXPANSION * c, c),
        }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.pos.init(store, init);
        self.norm1.init(store);
        self.pw1.init(store, init);
        self.dw.init(store, init);
        self.pw2.init(store, init);
        self.norm2.init(store);
        self.fc1.init(store, init);
        self.fc2.init(store, init);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let p = self.pos.forward(g, store, z)?;
        let z1 = g.add(p, z)?;

        let n1 = self.norm1.forward(g, store, z1)?;
        let a = self.pw1.forward(g, store, n1)?;
        let a = self.dw.forward(g, store, a)?;
        let a = self.pw2.forward(g, store, a)?;
        let z2 = g.add(a, z1)?;

        let n2 = self.norm2.forward(g, store, z2)?;
        let f = self.fc1.forward(g, store, n2)?;
        let f = g.activation(f, Activation::Gelu);
        let f = self.fc2.forward(g, store, f)?;
        g.add(f, z2)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        [&self.pos, &self.pw1, &self.dw, &self.pw2, &self.fc1, &self.fc2].iter().map(|c| c.macs(h, w)).sum()
    }
}

/// GFE block on `B x N x C` tokens: positional 3x3 depth-wise conv (in map
/// form) with residual, MSLA on the layer-normed tokens with residual, then a
/// token-wise FFN (expand 4, GELU, restore) on the layer-normed tokens with
/// residual.
#[derive(Clone, Debug)]
pub struct GfeBlock {
    pub pos: Conv2d,
    pub norm1: LayerNorm,
    pub msla: Msla,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GfeBlock {
    pub fn new(prefix: &str, cfg: MslaConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            pos: Conv2d::depthwise(format!("{prefix}.pos"), c, 3),
            norm1: LayerNorm::new(format!("{prefix}.norm1"), c),
            msla: Msla::new(format!("{prefix}.msla"), cfg)?,
            norm2: LayerNorm::new(format!("{prefix}.norm2"), c),
            fc1: Linear::new(format!("{prefix}.ffn.fc1"), c, FFN_EXPANSION * c, true),
            fc2: Linear::new(format!("{prefix}.ffn.fc2"), FFN_EXPANSION * c, c, true),
        })
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.pos.init(store, init);
        self.norm1.init(store);
        self.msla.init(store, init);
        self.norm2.init(store);
        self.fc1.init(store, init);
        self.fc2.init(store, init);
    }

    /// Tokens on a square grid.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let n = g.shape(z).get(1).copied().unwrap_or(0);
        let side = square_side(n)?;
        self.forward_grid(g, store, z, side, side)
    }

    pub fn forward_grid<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let map = g.tokens_to_map(z, h, w)?;
        let p = self.pos.forward(g, store, map)?;
        let p = g.map_to_tokens(p)?;
        let z1 = g.add(p, z)?;

        let n1 = self.norm1.forward(g, store, z1, 2)?;
        let a = self.msla.forward_grid(g, store, n1, h, w)?;
        let z2 = g.add(a, z1)?;

        let n2 = self.norm2.forward(g, store, z2, 2)?;
        let f = self.fc1.forward(g, store, n2)?;
        let f = g.activation(f, Activation::Gelu);
        let f = self.fc2.forward(g, store, f)?;
        g.add(f, z2)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = h * w;
        self.pos.macs(h, w) + self.msla.macs(h, w) + self.fc1.macs(n) + self.fc2.macs(n)
    }
}
