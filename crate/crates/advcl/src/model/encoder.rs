//! Feature encoders: a three-block CNN sized for desk experiments and a
//! CIFAR-style ResNet-18 behind the same interface.

use super::layers::{Conv2d, ForwardCtx, Linear, Param, ParamInit, TriBatchNorm};
use crate::error::{Error, Result};
use crate::tensor::Var;
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyCnn,
    Resnet18,
}

/// Encoder hyperparameters; part of every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            architecture: Architecture::TinyCnn,
            feature_dim: 128,
            projection_dim: 64,
            input_channels: 3,
            input_size: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 4 || self.projection_dim < 1 {
            return Err(Error::Config("feature/projection dims too small".into()));
        }
        let divisor = match self.architecture {
            Architecture::TinyCnn => 4,
            Architecture::Resnet18 => 8,
        };
        if self.input_size % divisor != 0 {
            return Err(Error::Config(format!(
                "input size {} must be divisible by {divisor}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Three conv blocks with tri-routed norms: conv-bn-relu-pool ×2 then
/// conv-bn-relu and a global average pool to `feature_dim` channels.
pub struct TinyCnn {
    conv1: Conv2d,
    bn1: TriBatchNorm,
    conv2: Conv2d,
    bn2: TriBatchNorm,
    conv3: Conv2d,
    bn3: TriBatchNorm,
}

impl TinyCnn {
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig) -> Self {
        let c1 = (cfg.feature_dim / 4).max(1);
        let c2 = (cfg.feature_dim / 2).max(1);
        let c3 = cfg.feature_dim;
        TinyCnn {
            conv1: Conv2d::new(init, "encoder.conv1", cfg.input_channels, c1, 3, 1, 1),
            bn1: TriBatchNorm::new(init, "encoder.bn1", c1),
            conv2: Conv2d::new(init, "encoder.conv2", c1, c2, 3, 1, 1),
            bn2: TriBatchNorm::new(init, "encoder.bn2", c2),
            conv3: Conv2d::new(init, "encoder.conv3", c2, c3, 3, 1, 1),
            bn3: TriBatchNorm::new(init, "encoder.bn3", c3),
        }
    }

    fn forward(&self, ctx: &ForwardCtx, x: Var) -> Var {
        let t = ctx.tape;
        let h = t.avg_pool2(t.relu(self.bn1.forward(ctx, self.conv1.forward(ctx, x))));
        let h = t.avg_pool2(t.relu(self.bn2.forward(ctx, self.conv2.forward(ctx, h))));
        // no ReLU on the last block: an all-negative normalization state
        // would zero every feature and freeze training at the collapsed
        // contrastive optimum
        let h = self.bn3.forward(ctx, self.conv3.forward(ctx, h));
        t.global_avg_pool(h)
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: TriBatchNorm,
    conv2: Conv2d,
    bn2: TriBatchNorm,
    shortcut: Option<(Conv2d, TriBatchNorm)>,
}

impl BasicBlock {
    fn new(init: &mut ParamInit, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(init, &format!("{name}.short"), cin, cout, 1, stride, 0),
                TriBatchNorm::new(init, &format!("{name}.short_bn"), cout),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), cin, cout, 3, stride, 1),
            bn1: TriBatchNorm::new(init, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(init, &format!("{name}.conv2"), cout, cout, 3, 1, 1),
            bn2: TriBatchNorm::new(init, &format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    fn forward(&self, ctx: &ForwardCtx, x: Var) -> Var {
        let t = ctx.tape;
        let h = t.relu(self.bn1.forward(ctx, self.conv1.forward(ctx, x)));
        let h = self.bn2.forward(ctx, self.conv2.forward(ctx, h));
        let sc = match &self.shortcut {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        t.relu(t.add(h, sc))
    }
}

/// CIFAR-style ResNet-18: 3×3 stem, four stages of two basic blocks, global
/// average pool, and an optional linear map when `feature_dim != 512`.
pub struct ResNet18 {
    stem: Conv2d,
    stem_bn: TriBatchNorm,
    blocks: Vec<BasicBlock>,
    head: Option<Linear>,
}

impl ResNet18 {
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig) -> Self {
        let widths = [64usize, 128, 256, 512];
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (stage, &cout) in widths.iter().enumerate() {
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    init,
                    &format!("encoder.stage{stage}.block{b}"),
                    cin,
                    cout,
                    stride,
                ));
                cin = cout;
            }
        }
        let head = if cfg.feature_dim != 512 {
            Some(Linear::new(init, "encoder.head", 512, cfg.feature_dim))
        } else {
            None
        };
        ResNet18 {
            stem: Conv2d::new(init, "encoder.stem", cfg.input_channels, 64, 3, 1, 1),
            stem_bn: TriBatchNorm::new(init, "encoder.stem_bn", 64),
            blocks,
            head,
        }
    }

    fn forward(&self, ctx: &ForwardCtx, x: Var) -> Var {
        let t = ctx.tape;
        let mut h = t.relu(self.stem_bn.forward(ctx, self.stem.forward(ctx, x)));
        for block in &self.blocks {
            h = block.forward(ctx, h);
        }
        let pooled = t.global_avg_pool(h);
        match &self.head {
            Some(lin) => lin.forward(ctx, pooled),
            None => pooled,
        }
    }
}

pub enum Encoder {
    Tiny(TinyCnn),
    Resnet(ResNet18),
}

impl Encoder {
    pub fn new(init: &mut ParamInit, cfg: &EncoderConfig) -> Self {
        match cfg.architecture {
            Architecture::TinyCnn => Encoder::Tiny(TinyCnn::new(init, cfg)),
            Architecture::Resnet18 => Encoder::Resnet(ResNet18::new(init, cfg)),
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Var {
        match self {
            Encoder::Tiny(e) => e.forward(ctx, x),
            Encoder::Resnet(e) => e.forward(ctx, x),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Encoder::Tiny(e) => {
                let mut v = e.conv1.params();
                v.extend(e.bn1.params());
                v.extend(e.conv2.params());
                v.extend(e.bn2.params());
                v.extend(e.conv3.params());
                v.extend(e.bn3.params());
                v
            }
            Encoder::Resnet(e) => {
                let mut v = e.stem.params();
                v.extend(e.stem_bn.params());
                for b in &e.blocks {
                    v.extend(b.conv1.params());
                    v.extend(b.bn1.params());
                    v.extend(b.conv2.params());
                    v.extend(b.bn2.params());
                    if let Some((c, bn)) = &b.shortcut {
                        v.extend(c.params());
                        v.extend(bn.params());
                    }
                }
                if let Some(h) = &e.head {
                    v.extend(h.params());
                }
                v
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Encoder::Tiny(e) => {
                let mut v = e.conv1.params_mut();
                v.extend(e.bn1.params_mut());
                v.extend(e.conv2.params_mut());
                v.extend(e.bn2.params_mut());
                v.extend(e.conv3.params_mut());
                v.extend(e.bn3.params_mut());
                v
            }
            Encoder::Resnet(e) => {
                let mut v = e.stem.params_mut();
                v.extend(e.stem_bn.params_mut());
                for b in &mut e.blocks {
                    v.extend(b.conv1.params_mut());
                    v.extend(b.bn1.params_mut());
                    v.extend(b.conv2.params_mut());
                    v.extend(b.bn2.params_mut());
                    if let Some((c, bn)) = &mut b.shortcut {
                        v.extend(c.params_mut());
                        v.extend(bn.params_mut());
                    }
                }
                if let Some(h) = &mut e.head {
                    v.extend(h.params_mut());
                }
                v
            }
        }
    }

    /// Batch-norm layers in definition order, for checkpointing and the
    /// routing-isolation tests.
    pub fn bn_layers(&self) -> Vec<&TriBatchNorm> {
        match self {
            Encoder::Tiny(e) => vec![&e.bn1, &e.bn2, &e.bn3],
            Encoder::Resnet(e) => {
                let mut v = vec![&e.stem_bn];
                for b in &e.blocks {
                    v.push(&b.bn1);
                    v.push(&b.bn2);
                    if let Some((_, bn)) = &b.shortcut {
                        v.push(bn);
                    }
                }
                v
            }
        }
    }
}
