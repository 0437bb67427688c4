//! Encoder/residual/decoder image translator between modalities.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Modality;
use crate::nn::{Binding, Conv2d, Init, ParamSet};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal init of generators and
/// discriminators.
pub const GAN_INIT_STD: f64 = 0.02;

/// Translates `source`-modality images to `target`-modality images.
///
/// The output is `tanh(P·x + r(x))` where `P` is a fixed channel projection
/// (channel mean for RGB to IR, replication for IR to RGB) and `r` the
/// learned residual. The residual's last layers start at zero.
#[derive(Debug, Clone)]
pub struct Generator {
    params: ParamSet,
    source: Modality,
    target: Modality,
    conv_in: Conv2d,
    down: [Conv2d; 2],
    res: Vec<(Conv2d, Conv2d)>,
    up: [Conv2d; 2],
    conv_out: Conv2d,
    projection: Tensor,
}

impl Generator {
    pub fn new(config: &NetworkConfig, source: Modality, target: Modality, rng: &mut impl Rng) -> Self {
        let init = Init::TruncNormal(GAN_INIT_STD);
        let [w0, w1, w2] = config.generator_widths;
        let (cin, cout) = (source.channels(), target.channels());
        let mut ps = ParamSet::new();
        let conv_in = Conv2d::new(&mut ps, "conv_in", (cin, w0), 3, 1, true, init, rng);
        let down = [
            Conv2d::new(&mut ps, "down1", (w0, w1), 3, 2, true, init, rng),
            Conv2d::new(&mut ps, "down2", (w1, w2), 3, 2, true, init, rng),
        ];
        let res = (0..config.generator_res_blocks)
            .map(|i| {
                let a = Conv2d::new(&mut ps, &format!("res{i}.conv1"), (w2, w2), 3, 1, true, init, rng);
                let b = Conv2d::new(&mut ps, &format!("res{i}.conv2"), (w2, w2), 3, 1, true, Init::Zeros, rng);
                (a, b)
            })
            .collect();
        let up = [
            Conv2d::new(&mut ps, "up1", (w2, w1), 3, 1, true, init, rng),
            Conv2d::new(&mut ps, "up2", (w1, w0), 3, 1, true, init, rng),
        ];
        let conv_out = Conv2d::new(&mut ps, "conv_out", (w0, cout), 3, 1, true, Init::Zeros, rng);
        let projection = Tensor::full(&[cout, cin, 1, 1], 1.0 / cin as f64);
        Self {
            params: ps,
            source,
            target,
            conv_in,
            down,
            res,
            up,
            conv_out,
            projection,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn source(&self) -> Modality {
        self.source
    }

    pub fn target(&self) -> Modality {
        self.target
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding<'_>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.source.channels() {
            return Err(Error::ModalityMismatch {
                expected: self.source.name(),
                actual: if c == 1 { "1-channel" } else { "3-channel" },
            });
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("generator", format!("{h}x{w} not divisible by 4")));
        }
        let t = self.conv_in.forward(g, b, x)?;
        let mut t = g.relu(t);
        for d in &self.down {
            let y = d.forward(g, b, t)?;
            t = g.relu(y);
        }
        for (c1, c2) in &self.res {
            let y = c1.forward(g, b, t)?;
            let y = g.relu(y);
            let y = c2.forward(g, b, y)?;
            t = g.add(t, y)?;
        }
        for u in &self.up {
            let y = g.upsample2x(t)?;
            let y = u.forward(g, b, y)?;
            t = g.relu(y);
        }
        let residual = self.conv_out.forward(g, b, t)?;
        let p = g.constant(self.projection.clone());
        let base = g.conv2d(x, p, None, 1, 0)?;
        let y = g.add(base, residual)?;
        Ok(g.tanh(y))
    }
}
