//! Patch discriminators over IR or RGB images, optionally joined with a
//! middle-layer feature map.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::{DiscriminatorKind, NetworkConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Binding, Conv2d, Init, ParamSet};

use super::generator::GAN_INIT_STD;

const LEAK: f64 = 0.2;

/// Scores images, or (image, feature map) pairs, with a probability of being
/// real. The image branch downsamples by 8 so it lands on the feature-map
/// grid of the former encoder.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: ParamSet,
    kind: DiscriminatorKind,
    image_channels: usize,
    image: Vec<Conv2d>,
    feature: Option<Conv2d>,
    head: Conv2d,
    out: Conv2d,
}

impl Discriminator {
    /// `feature_channels` is only used by the joint kind.
    pub fn new(
        config: &NetworkConfig,
        kind: DiscriminatorKind,
        image_channels: usize,
        feature_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let init = Init::TruncNormal(GAN_INIT_STD);
        let mut ps = ParamSet::new();
        let mut in_ch = image_channels;
        let image = config
            .disc_image_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut ps, &format!("image{i}"), (in_ch, w), 3, 2, true, init, rng);
                in_ch = w;
                c
            })
            .collect();
        let feature = (kind == DiscriminatorKind::Joint).then(|| {
            Conv2d::new(
                &mut ps,
                "feature",
                (feature_channels, config.disc_feature_width),
                1,
                1,
                true,
                init,
                rng,
            )
        });
        let head_in = in_ch + feature.as_ref().map_or(0, |f| f.out_ch);
        let head = Conv2d::new(&mut ps, "head", (head_in, config.disc_head_width), 3, 1, true, init, rng);
        let out = Conv2d::new(&mut ps, "out", (config.disc_head_width, 1), 1, 1, true, Init::Zeros, rng);
        Self {
            params: ps,
            kind,
            image_channels,
            image,
            feature,
            head,
            out,
        }
    }

    pub fn joint(config: &NetworkConfig, rng: &mut impl Rng) -> Self {
        Self::new(config, DiscriminatorKind::Joint, 1, config.feature_channels(), rng)
    }

    pub fn ordinary(config: &NetworkConfig, image_channels: usize, rng: &mut impl Rng) -> Self {
        Self::new(config, DiscriminatorKind::Ordinary, image_channels, 0, rng)
    }

    pub fn kind(&self) -> DiscriminatorKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Probability `[n, 1]` that each row is real.
    pub fn forward(&self, g: &mut Graph, b: &Binding<'_>, image: Var, feature_map: Option<Var>) -> Result<Var> {
        let (_, c, _, _) = g.value(image).dims4()?;
        if c != self.image_channels {
            return Err(Error::shape(
                "discriminator",
                format!("{c} image channels, expected {}", self.image_channels),
            ));
        }
        let mut h = image;
        for conv in &self.image {
            let y = conv.forward(g, b, h)?;
            h = g.leaky_relu(y, LEAK);
        }
        h = match (&self.feature, feature_map) {
            (Some(conv), Some(f)) => {
                let y = conv.forward(g, b, f)?;
                let y = g.leaky_relu(y, LEAK);
                g.concat_channels(&[h, y])?
            }
            (None, None) => h,
            (Some(_), None) => {
                return Err(Error::Contract("joint discriminator needs a feature map".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Contract("ordinary discriminator takes no feature map".into()))
            }
        };
        let y = self.head.forward(g, b, h)?;
        let y = g.leaky_relu(y, LEAK);
        let y = self.out.forward(g, b, y)?;
        let logit = g.global_avg_pool(y)?;
        Ok(g.sigmoid(logit))
    }
}
