//! Parameter storage and the handful of layers the networks are built from.

use alloc::string::String;

use num_traits::Float;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NormStats, ObservedStats, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

/// Named trainable tensors plus named non-trainable buffers (running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    /// `(name, tensor)` for every parameter followed by every buffer.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters (buffers excluded).
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrite a parameter or buffer by name, keeping its shape.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = if let Some(i) = self.names.iter().position(|n| n == name) {
            &mut self.values[i]
        } else if let Some(i) = self.buffer_names.iter().position(|n| n == name) {
            &mut self.buffers[i]
        } else {
            return Err(Error::Validation(alloc::format!("unknown tensor {name}")));
        };
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_by_name",
                alloc::format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Copy every tensor of `other` whose name also exists here.
    pub fn copy_matching(&mut self, other: &ParamSet) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.named_tensors() {
            if self.names.iter().chain(&self.buffer_names).any(|n| n == name) {
                self.set_by_name(name, t.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Put every parameter on the graph, as gradient-tracking leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool, mode: NormMode) -> Binding<'_> {
        let vars = self
            .values
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Binding {
            vars,
            params: self,
            mode,
            updates: Vec::new(),
        }
    }

    /// Fold observed batch statistics into the running buffers.
    pub fn commit_stats(&mut self, updates: &[StatUpdate], momentum: f64) {
        for u in updates {
            for (buf, obs) in [(u.mean, &u.observed.mean), (u.var, &u.observed.var)] {
                for (r, o) in self.buffers[buf.0].data_mut().iter_mut().zip(obs) {
                    *r = (1.0 - momentum) * *r + momentum * o;
                }
            }
        }
    }
}

/// Whether batch-norm layers use batch statistics or their running buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct StatUpdate {
    mean: BufferId,
    var: BufferId,
    observed: ObservedStats,
}

/// A [`ParamSet`] placed on a graph for one forward pass.
#[derive(Debug)]
pub struct Binding<'p> {
    vars: Vec<Var>,
    params: &'p ParamSet,
    mode: NormMode,
    updates: Vec<StatUpdate>,
}

impl Binding<'_> {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    /// Gradient for every parameter, zero where none flowed.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.params.values)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Batch statistics recorded during the forward pass.
    pub fn into_updates(self) -> Vec<StatUpdate> {
        self.updates
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He normal with the given fan-in.
    FanIn(usize),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::FanIn(fan_in) => {
                let std = Float::sqrt(2.0 / fan_in.max(1) as f64);
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
            }
            Init::TruncNormal(std) => Tensor::from_fn(shape, |_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break std * z;
                }
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        (in_ch, out_ch): (usize, usize),
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let init = match init {
            Init::FanIn(_) => Init::FanIn(in_ch * kernel * kernel),
            other => other,
        };
        let weight = ps.add(
            alloc::format!("{name}.weight"),
            init.tensor(&[out_ch, in_ch, kernel, kernel], rng),
        );
        let bias = bias.then(|| ps.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding<'_>, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            b.var(self.weight),
            self.bias.map(|id| b.var(id)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(alloc::format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: ps.add(alloc::format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(
                alloc::format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
            ),
            running_var: ps.add_buffer(
                alloc::format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binding<'_>, x: Var) -> Result<Var> {
        let params = b.params;
        let stats = match b.mode {
            NormMode::Train => NormStats::Batch,
            NormMode::Eval => NormStats::Running {
                mean: params.buffer(self.running_mean).data(),
                var: params.buffer(self.running_var).data(),
            },
        };
        let (y, observed) = g.batch_norm(x, b.var(self.gamma), b.var(self.beta), stats, self.eps)?;
        if let Some(observed) = observed {
            b.updates.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                observed,
            });
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        (in_dim, out_dim): (usize, usize),
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let init = match init {
            Init::FanIn(_) => Init::FanIn(in_dim),
            other => other,
        };
        Self {
            weight: ps.add(
                alloc::format!("{name}.weight"),
                init.tensor(&[out_dim, in_dim], rng),
            ),
            bias: bias.then(|| ps.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_dim]))),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding<'_>, x: Var) -> Result<Var> {
        g.linear(x, b.var(self.weight), self.bias.map(|id| b.var(id)))
    }
}
