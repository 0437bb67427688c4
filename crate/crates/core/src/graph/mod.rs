//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough saved state to run its adjoint. [`Graph::backward`] walks
//! the tape once in reverse and returns the gradient of a scalar node with
//! respect to every node that was created with `requires_grad`, directly or
//! through its inputs. Leaves created with [`Graph::constant`] never receive
//! gradients, which is how frozen and detached sub-networks are expressed.

mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{batch_to_channel_major, channel_major_to_batch, col2im_batch, gemm, im2col_batch, ConvGeom};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics used by a batch-norm node.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a batch-norm node in [`NormStats::Batch`] mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as accumulated into running statistics.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct TripletPick {
    positive: usize,
    negative: usize,
    d_pos: f64,
    d_neg: f64,
    active: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatChannels(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    RepeatChannels {
        x: Var,
        times: usize,
    },
    MeanAll(Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    BatchHardTriplet {
        x: Var,
        picks: Vec<TripletPick>,
    },
    Mse(Var, Var),
    L1(Var, Var),
    LogClamped {
        x: Var,
        eps: f64,
    },
    Log1mClamped {
        x: Var,
        eps: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of a node's value as a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ----- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or(Error::Empty("weighted_sum"))?;
        let mut out = Tensor::zeros(self.value(first).shape());
        for &(v, w) in terms {
            same_shape("weighted_sum", &out, self.value(v))?;
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        debug_assert!(slope > 0.0);
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(Float::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// `ln(max(x, eps))`.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a).map(|x| x.max(eps).ln());
        let rg = self.rg(a);
        self.push(t, Op::LogClamped { x: a, eps }, rg)
    }

    /// `ln(max(1 - x, eps))`.
    pub fn log1m_clamped(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a).map(|x| (1.0 - x).max(eps).ln());
        let rg = self.rg(a);
        self.push(t, Op::Log1mClamped { x: a, eps }, rg)
    }

    // ----- convolutional ---------------------------------------------------

    /// 2-D cross-correlation: `x [n, c_in, h, w]`, `w [c_out, c_in, k, k]`, `b [c_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, k, k2) = self.value(w).dims4()?;
        if wc_in != c_in || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight {:?} incompatible with input {:?}",
                    self.value(w).shape(),
                    self.value(x).shape()
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape("conv2d", "bias must have shape [c_out]"));
            }
        }
        let geom = ConvGeom::new((c_in, h, wd), c_out, k, stride, pad)?;
        let (l, patch) = (geom.out_plane(), geom.patch());
        // one [c_out, patch]·[patch, n·l] product for the whole batch
        let cols = im2col_batch(self.value(x).data(), n, &geom);
        let mut prod = vec![0.0; c_out * n * l];
        gemm(c_out, patch, n * l, self.value(w).data(), (patch, 1), &cols, (n * l, 1), 0.0, &mut prod, (n * l, 1));
        if let Some(b) = b {
            for (o, &bias) in self.value(b).data().iter().enumerate() {
                for v in &mut prod[o * n * l..(o + 1) * n * l] {
                    *v += bias;
                }
            }
        }
        let out = channel_major_to_batch(&prod, n, c_out, l);
        let t = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batch normalisation over `(n, h, w)` per channel. Returns the observed
    /// batch statistics when normalising with [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<ObservedStats>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", "affine parameters must have shape [c]"));
        }
        let plane = h * w;
        let count = n * plane;
        let xv = self.value(x).data();
        let (mean, var_biased, observed) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        "batch statistics need at least two values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                            .iter()
                            .sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect();
                let observed = ObservedStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(observed))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics must have length c"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: observed.is_some(),
            },
            rg,
        );
        Ok((v, observed))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// Spatial mean per channel: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(&[n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// `x [n, d] · wᵀ [d, o] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (o, wd) = self.value(w).dims2()?;
        if wd != d {
            return Err(Error::shape(
                "linear",
                format!("input dim {d} vs weight {:?}", self.value(w).shape()),
            ));
        }
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            d,
            o,
            self.value(x).data(),
            (d, 1),
            self.value(w).data(),
            (1, d),
            0.0,
            &mut out,
            (o, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(Error::shape("linear", "bias must have shape [out]"));
            }
            for row in out.chunks_mut(o) {
                for (v, bias) in row.iter_mut().zip(bv) {
                    *v += bias;
                }
            }
        }
        let t = Tensor::new(&[n, o], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    // ----- structural ------------------------------------------------------

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_channels"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.value(p).shape(), self.value(first).shape()),
                ));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c_total * plane);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * plane;
                out.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let t = Tensor::new(&[n, c_total, h, w], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Concatenate along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_outer(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatBatch(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_outer(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceBatch { x, start }, rg))
    }

    /// Tile the channel axis `times` times (e.g. a grey image to three channels).
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let per = c * h * w;
        let mut out = Vec::with_capacity(n * per * times);
        for i in 0..n {
            let img = &self.value(x).data()[i * per..(i + 1) * per];
            for _ in 0..times {
                out.extend_from_slice(img);
            }
        }
        let t = Tensor::new(&[n, c * times, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::RepeatChannels { x, times }, rg))
    }

    // ----- reductions and losses ------------------------------------------

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("mean_all"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(x), rg))
    }

    /// Batch mean of `-Σₙ qₙ ln softmax(logits)ₙ` against soft targets `[n, classes]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.shape() != [n, k] {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("targets {:?} vs logits [{n}, {k}]", targets.shape()),
            ));
        }
        if n == 0 {
            return Err(Error::Empty("soft_cross_entropy"));
        }
        if !self.value(logits).all_finite() {
            return Err(Error::NonFinite("soft_cross_entropy logits"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..k {
                let log_p = row[j] - log_z;
                probs[i * k + j] = log_p.exp();
                loss -= targets.data()[i * k + j] * log_p;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Batch-hard triplet loss over embeddings `[n, d]`, averaged over anchors:
    /// `mean_a [m + max_p ‖xₐ-xₚ‖ - min_n ‖xₐ-xₙ‖]₊`.
    ///
    /// Every anchor needs at least one other sample of its identity and at
    /// least one sample of a different identity.
    pub fn batch_hard_triplet(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if labels.len() != n {
            return Err(Error::shape(
                "batch_hard_triplet",
                format!("{} labels for {n} embeddings", labels.len()),
            ));
        }
        let xv = self.value(x).data();
        let dist = |a: usize, b: usize| -> f64 {
            xv[a * d..(a + 1) * d]
                .iter()
                .zip(&xv[b * d..(b + 1) * d])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        };
        let mut picks = Vec::with_capacity(n);
        let mut total = 0.0;
        for a in 0..n {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let dj = dist(a, j);
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| dj > best) {
                        pos = Some((j, dj));
                    }
                } else if neg.is_none_or(|(_, best)| dj < best) {
                    neg = Some((j, dj));
                }
            }
            let (Some((p, d_pos)), Some((q, d_neg))) = (pos, neg) else {
                return Err(Error::Contract(format!(
                    "anchor {a} (identity {}) lacks a positive or a negative in the batch",
                    labels[a]
                )));
            };
            let hinge = margin + d_pos - d_neg;
            let active = hinge > 0.0;
            if active {
                total += hinge;
            }
            picks.push(TripletPick {
                positive: p,
                negative: q,
                d_pos,
                d_neg,
                active,
            });
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::BatchHardTriplet { x, picks },
            rg,
        ))
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if av.is_empty() {
            return Err(Error::Empty("mse"));
        }
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let m = s / av.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// Mean over all elements of `|a - b|`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("l1", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if av.is_empty() {
            return Err(Error::Empty("l1"));
        }
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum();
        let m = s / av.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::L1(a, b), rg))
    }

    // ----- backward --------------------------------------------------------

    /// Gradients of the single-element node `loss` with respect to every
    /// gradient-tracking node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.rg(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.map(|x| x * s));
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        accumulate(grads, v, g.map(|x| x * w));
                    }
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::LeakyRelu(a, slope) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(g, &y)| if y > 0.0 { *g } else { g * slope })
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::LogClamped { x, eps } => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > *eps { g / x } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Log1mClamped { x, eps } => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if 1.0 - x > *eps { -g / (1.0 - x) } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Conv2d { x, w, b, geom } => self.backprop_conv(*x, *w, *b, geom, g, grads)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let count = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            for j in base..base + plane {
                                dx[j] = if *batch_stats {
                                    // Σ dy·γ = γ·dβ and Σ dy·γ·x̂ = γ·dγ
                                    gam[ch] * inv_std[ch]
                                        * (gd[j] - dbeta[ch] / count - xhat[j] * dgamma[ch] / count)
                                } else {
                                    gd[j] * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut dx = Vec::with_capacity(gd.len() * plane);
                for &gv in gd {
                    dx.extend(core::iter::repeat_n(gv / plane as f64, plane));
                }
                accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = self.value(*x).dims2()?;
                let o = node.value.shape()[1];
                if self.rg(*x) {
                    // dx [n, d] = g [n, o] · w [o, d]
                    let mut dx = vec![0.0; n * d];
                    gemm(n, o, d, gd, (o, 1), self.value(*w).data(), (d, 1), 0.0, &mut dx, (d, 1));
                    accumulate(grads, *x, Tensor::new(&[n, d], dx)?);
                }
                if self.rg(*w) {
                    // dw [o, d] = gᵀ [o, n] · x [n, d]
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, gd, (1, o), self.value(*x).data(), (d, 1), 0.0, &mut dw, (d, 1));
                    accumulate(grads, *w, Tensor::new(&[o, d], dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; o];
                        for row in gd.chunks(o) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(&[o], db)?);
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, _, h, w) = node.value.dims4()?;
                let plane = h * w;
                let c_total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(n * pc * plane);
                        for i in 0..n {
                            let start = (i * c_total + offset) * plane;
                            dp.extend_from_slice(&gd[start..start + pc * plane]);
                        }
                        accumulate(grads, p, Tensor::new(self.value(p).shape(), dp)?);
                    }
                    offset += pc;
                }
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let dp = gd[offset..offset + len].to_vec();
                        accumulate(grads, p, Tensor::new(self.value(p).shape(), dp)?);
                    }
                    offset += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let src = self.value(*x);
                let inner = src.len() / src.shape()[0].max(1);
                let mut dx = vec![0.0; src.len()];
                dx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, Tensor::new(src.shape(), dx)?);
            }
            Op::RepeatChannels { x, times } => {
                let src = self.value(*x);
                let n = src.shape()[0];
                let per = src.len() / n.max(1);
                let mut dx = vec![0.0; src.len()];
                for i in 0..n {
                    for r in 0..*times {
                        let from = &gd[(i * times + r) * per..(i * times + r + 1) * per];
                        for (d, v) in dx[i * per..(i + 1) * per].iter_mut().zip(from) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(src.shape(), dx)?);
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len();
                let v = gd[0] / len as f64;
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), v));
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).shape()[0] as f64;
                let scale = gd[0] / n;
                let d = probs
                    .iter()
                    .zip(targets)
                    .map(|(p, q)| scale * (p - q))
                    .collect();
                accumulate(grads, *logits, Tensor::new(self.value(*logits).shape(), d)?);
            }
            Op::BatchHardTriplet { x, picks } => {
                let (n, d) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let scale = gd[0] / n as f64;
                let mut dx = vec![0.0; n * d];
                for (a, pick) in picks.iter().enumerate() {
                    if !pick.active {
                        continue;
                    }
                    // +∂‖xa-xp‖ and -∂‖xa-xn‖; the distance has no gradient at zero.
                    for (other, dist, sign) in [
                        (pick.positive, pick.d_pos, 1.0),
                        (pick.negative, pick.d_neg, -1.0),
                    ] {
                        if dist <= 0.0 {
                            continue;
                        }
                        let k = sign * scale / dist;
                        for j in 0..d {
                            let diff = xv[a * d + j] - xv[other * d + j];
                            dx[a * d + j] += k * diff;
                            dx[other * d + j] -= k * diff;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(&[n, d], dx)?);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / av.len() as f64;
                if self.rg(*a) {
                    let d = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                    accumulate(grads, *a, Tensor::new(self.value(*a).shape(), d)?);
                }
                if self.rg(*b) {
                    let d = av.iter().zip(bv).map(|(x, y)| -k * (x - y)).collect();
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape(), d)?);
                }
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] / av.len() as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if self.rg(*a) {
                    let d = av.iter().zip(bv).map(|(&x, &y)| k * sign(x, y)).collect();
                    accumulate(grads, *a, Tensor::new(self.value(*a).shape(), d)?);
                }
                if self.rg(*b) {
                    let d = av.iter().zip(bv).map(|(&x, &y)| -k * sign(x, y)).collect();
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape(), d)?);
                }
            }
        }
        Ok(())
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let n = g.shape()[0];
        let (l, patch, c_out) = (geom.out_plane(), geom.patch(), geom.c_out);
        let gd = g.data();
        let gm = batch_to_channel_major(gd, n, c_out, l);
        if self.rg(w) {
            let cols = im2col_batch(self.value(x).data(), n, geom);
            // dw [c_out, patch] = g [c_out, n·l] · colsᵀ [n·l, patch]
            let mut dw = vec![0.0; c_out * patch];
            gemm(c_out, n * l, patch, &gm, (n * l, 1), &cols, (1, n * l), 0.0, &mut dw, (patch, 1));
            accumulate(grads, w, Tensor::new(self.value(w).shape(), dw)?);
        }
        if self.rg(x) {
            // dcols [patch, n·l] = wᵀ [patch, c_out] · g [c_out, n·l]
            let mut dcols = vec![0.0; patch * n * l];
            gemm(patch, c_out, n * l, self.value(w).data(), (1, patch), &gm, (n * l, 1), 0.0, &mut dcols, (n * l, 1));
            let dx = col2im_batch(&dcols, n, geom);
            accumulate(grads, x, Tensor::new(self.value(x).shape(), dx)?);
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; c_out];
                for i in 0..n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        *acc += gd[(i * c_out + o) * l..(i * c_out + o + 1) * l]
                            .iter()
                            .sum::<f64>();
                    }
                }
                accumulate(grads, b, Tensor::new(&[c_out], db)?);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
