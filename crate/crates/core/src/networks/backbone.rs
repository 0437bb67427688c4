//! Residual student backbone split into a former and a latter encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::{NetworkConfig, STAGE_STRIDES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm2d, Binding, Conv2d, Init, Linear, ParamSet};

/// Channels every encoder input is brought to; IR is replicated.
pub const ENCODER_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        (in_ch, out_ch): (usize, usize),
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let he = Init::FanIn(0);
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), (in_ch, out_ch), 3, stride, false, he, rng);
        let bn1 = BatchNorm2d::new(ps, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), (out_ch, out_ch), 3, 1, false, he, rng);
        let bn2 = BatchNorm2d::new(ps, &format!("{name}.bn2"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            let c = Conv2d::new(ps, &format!("{name}.down.conv"), (in_ch, out_ch), 1, stride, false, he, rng);
            let b = BatchNorm2d::new(ps, &format!("{name}.down.bn"), out_ch);
            (c, b)
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Binding<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, b, x)?;
        let h = self.bn1.forward(g, b, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h)?;
        let h = self.bn2.forward(g, b, h)?;
        let skip = match &self.shortcut {
            Some((c, n)) => {
                let s = c.forward(g, b, x)?;
                n.forward(g, b, s)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

/// Outputs of one full student pass.
#[derive(Debug, Clone, Copy)]
pub struct StudentOutputs {
    /// Former-encoder feature map `[n, C, H/8, W/8]`.
    pub feature_map: Var,
    /// Pooled embedding `[n, D]`.
    pub embedding: Var,
    /// Identity logits `[n, classes]`.
    pub logits: Var,
}

/// ResNet-style backbone. The former encoder is the stem plus stages one to
/// three; the latter encoder is stage four and global average pooling.
#[derive(Debug, Clone)]
pub struct StudentBackbone {
    params: ParamSet,
    config: NetworkConfig,
    num_classes: usize,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    classifier: Linear,
}

impl StudentBackbone {
    pub fn new(config: &NetworkConfig, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut ps = ParamSet::new();
        let stem = Conv2d::new(
            &mut ps,
            "stem.conv",
            (ENCODER_CHANNELS, config.stem_width),
            3,
            1,
            false,
            Init::FanIn(0),
            rng,
        );
        let stem_bn = BatchNorm2d::new(&mut ps, "stem.bn", config.stem_width);
        let mut in_ch = config.stem_width;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let out_ch = config.stage_widths[s];
            let blocks = (0..config.stage_blocks[s].max(1))
                .map(|i| {
                    let stride = if i == 0 { STAGE_STRIDES[s] } else { 1 };
                    let blk = BasicBlock::new(&mut ps, &format!("layer{}.{i}", s + 1), (in_ch, out_ch), stride, rng);
                    in_ch = out_ch;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        let classifier = Linear::new(
            &mut ps,
            "classifier",
            (config.embedding_dim(), num_classes.max(1)),
            false,
            Init::TruncNormal(0.01),
            rng,
        );
        Self {
            params: ps,
            config: config.clone(),
            num_classes,
            stem,
            stem_bn,
            stages,
            classifier,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Stem and stages one to three on a 3-channel input.
    pub fn former(&self, g: &mut Graph, b: &mut Binding<'_>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != ENCODER_CHANNELS {
            return Err(Error::shape(
                "former encoder",
                format!("expected {ENCODER_CHANNELS} input channels, got {c}"),
            ));
        }
        let h = self.stem.forward(g, b, x)?;
        let h = self.stem_bn.forward(g, b, h)?;
        let mut h = g.relu(h);
        for stage in &self.stages[..3] {
            for blk in stage {
                h = blk.forward(g, b, h)?;
            }
        }
        Ok(h)
    }

    /// Stage four and global average pooling: feature map to embedding.
    pub fn latter(&self, g: &mut Graph, b: &mut Binding<'_>, feature_map: Var) -> Result<Var> {
        let mut h = feature_map;
        for blk in &self.stages[3] {
            h = blk.forward(g, b, h)?;
        }
        g.global_avg_pool(h)
    }

    pub fn classify(&self, g: &mut Graph, b: &Binding<'_>, embedding: Var) -> Result<Var> {
        self.classifier.forward(g, b, embedding)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binding<'_>, x: Var) -> Result<StudentOutputs> {
        let feature_map = self.former(g, b, x)?;
        let embedding = self.latter(g, b, feature_map)?;
        let logits = self.classify(g, b, embedding)?;
        Ok(StudentOutputs {
            feature_map,
            embedding,
            logits,
        })
    }
}

/// Bring a 1- or 3-channel image batch to encoder input.
pub fn encoder_input(g: &mut Graph, x: Var) -> Result<Var> {
    let (_, c, _, _) = g.value(x).dims4()?;
    match c {
        ENCODER_CHANNELS => Ok(x),
        1 => g.repeat_channels(x, ENCODER_CHANNELS),
        _ => Err(Error::shape("encoder_input", format!("{c} channels"))),
    }
}
