//! Reverse-mode autodiff on a flat tape of tensor operations.
//!
//! A [`Tape`] records every intermediate value of one forward pass;
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into every variable that (transitively) depends on a parameter leaf.
//! Parameters are bound by name so gradients can be collected into a
//! [`GradStore`](super::params::GradStore) after the pass.

use crate::tensor::Tensor;

use super::kernels;
use super::params::{GradStore, ParamSet};

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    /// Elementwise binary ops on equal shapes.
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// x * c and x + c for scalar constants.
    Scale(VarId, f64),
    AddScalar(VarId),
    /// Elementwise multiplication by a constant tensor.
    MulConst(VarId, Tensor),
    Sigmoid(VarId),
    Tanh(VarId),
    Relu(VarId),
    LeakyRelu(VarId, f64),
    Softplus(VarId),
    Sqrt(VarId),
    /// y = W x + b for a vector x: W `[out, in]`, b `[out]`.
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    /// Copy block `idx` of a `[G, ...]` tensor.
    SliceOuter(VarId, usize),
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        pad: usize,
        stride: usize,
        groups: usize,
    },
    Conv3d {
        x: VarId,
        w: VarId,
        b: VarId,
        pad: (usize, usize, usize),
        stride: (usize, usize, usize),
    },
    /// Mask-renormalized convolution. The validity mask, per-pixel
    /// renormalization factor and output coverage are constants.
    PartialConv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        pad: usize,
        stride: usize,
        in_mask: Tensor,
        factor: Tensor,
        cover: Tensor,
    },
    /// Fused ConvLSTM state update; input gates are `[G*4n, H, W]`
    /// (blocks i, f, g, o per group), cell is `[G*n, H, W]`, output is
    /// `[G*2n, H, W]` = per-group `[h_new, cell_new]`.
    LstmUpdate {
        gates: VarId,
        cell: VarId,
        groups: usize,
        per: usize,
    },
    /// Concatenate along axis 0 (equal trailing dims).
    Concat(Vec<VarId>),
    /// Interleave per-group channel blocks of several tensors:
    /// inputs `[G*d_i, ...]` produce `[G*sum(d_i), ...]` grouped per class.
    InterleaveGroups {
        xs: Vec<VarId>,
        groups: usize,
    },
    /// Per-group channel slice: `[G*per, ...]` -> `[G*take, ...]`.
    SliceGroups {
        x: VarId,
        groups: usize,
        per: usize,
        offset: usize,
        take: usize,
    },
    /// Reorder group blocks: out block g = in block route[g].
    PermuteGroups {
        x: VarId,
        route: Vec<usize>,
        groups: usize,
    },
    /// `[C, H, W]` -> `[C]` spatial mean.
    GlobalAvgPool(VarId),
    /// `[C]` -> `[C, H, W]` broadcast.
    BroadcastSpatial {
        x: VarId,
        h: usize,
        w: usize,
    },
    UpsampleBilinear(VarId, usize),
    UpsampleNearest(VarId, usize),
    AvgPool2(VarId),
    /// Per-pixel softmax over channels of `[C, H, W]`.
    SoftmaxChannels(VarId),
    /// Shape-only change (element count preserved).
    Reshape(VarId),
    /// Bilinear gather at constant coordinates (border clamp).
    WarpGather {
        x: VarId,
        coords: Tensor,
    },
    /// Per-pixel convex combination of per-class flows:
    /// soft `[C, H, W]`, flows `[C*2, H, W]` -> `[2, H, W]`.
    FuseFlows {
        soft: VarId,
        flows: VarId,
    },
    SumAll(VarId),
    MeanAll(VarId),
    /// sum(w * |a - b|); `w` optional.
    WeightedL1 {
        a: VarId,
        b: VarId,
        w: Option<Tensor>,
    },
    /// sum_p w(p) * -ln(probs[label(p), p] + eps) over a `[C, H, W]`
    /// probability tensor.
    WeightedCrossEntropy {
        probs: VarId,
        labels: Vec<u8>,
        weights: Tensor,
        eps: f64,
    },
    /// sum over elements of 0.5 * (u^2 + v - 1 - ln v).
    KlStdNormal {
        u: VarId,
        v: VarId,
    },
    /// mean((x - target)^2).
    MseScalarTarget(VarId, f64),
}

pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    needs_grad: Vec<bool>,
    bindings: Vec<(VarId, String)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, val: Tensor, node: Node, needs: bool) -> VarId {
        self.vals.push(val);
        self.nodes.push(node);
        self.needs_grad.push(needs);
        self.vals.len() - 1
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.needs_grad[i])
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.vals[id]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Node::Leaf, false)
    }

    /// Differentiable leaf (used by tests and the gradient checker).
    pub fn variable(&mut self, t: Tensor) -> VarId {
        self.push(t, Node::Leaf, true)
    }

    /// Bind a named parameter from a [`ParamSet`] as a differentiable leaf.
    pub fn param(&mut self, ps: &ParamSet, name: &str) -> VarId {
        let t = ps
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let id = self.push(t, Node::Leaf, true);
        self.bindings.push((id, name.to_string()));
        id
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.vals[a].shape(), self.vals[b].shape(), "add shapes");
        let v = self.vals[a].zip_map(&self.vals[b], |x, y| x + y);
        let needs = self.needs(&[a, b]);
        self.push(v, Node::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.vals[a].shape(), self.vals[b].shape(), "sub shapes");
        let v = self.vals[a].zip_map(&self.vals[b], |x, y| x - y);
        let needs = self.needs(&[a, b]);
        self.push(v, Node::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.vals[a].shape(), self.vals[b].shape(), "mul shapes");
        let v = self.vals[a].zip_map(&self.vals[b], |x, y| x * y);
        let needs = self.needs(&[a, b]);
        self.push(v, Node::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let v = self.vals[x].map(|a| a * c);
        let needs = self.needs_grad[x];
        self.push(v, Node::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> VarId {
        let v = self.vals[x].map(|a| a + c);
        let needs = self.needs_grad[x];
        self.push(v, Node::AddScalar(x), needs)
    }

    pub fn mul_const(&mut self, x: VarId, c: Tensor) -> VarId {
        assert_eq!(self.vals[x].shape(), c.shape(), "mul_const shapes");
        let v = self.vals[x].zip_map(&c, |a, b| a * b);
        let needs = self.needs_grad[x];
        self.push(v, Node::MulConst(x, c), needs)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = self.vals[x].map(sigmoid);
        let needs = self.needs_grad[x];
        self.push(v, Node::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let v = self.vals[x].map(f64::tanh);
        let needs = self.needs_grad[x];
        self.push(v, Node::Tanh(x), needs)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.vals[x].map(|a| a.max(0.0));
        let needs = self.needs_grad[x];
        self.push(v, Node::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let v = self.vals[x].map(|a| if a >= 0.0 { a } else { slope * a });
        let needs = self.needs_grad[x];
        self.push(v, Node::LeakyRelu(x, slope), needs)
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        let v = self.vals[x].map(softplus);
        let needs = self.needs_grad[x];
        self.push(v, Node::Softplus(x), needs)
    }

    pub fn sqrt(&mut self, x: VarId) -> VarId {
        let v = self.vals[x].map(f64::sqrt);
        let needs = self.needs_grad[x];
        self.push(v, Node::Sqrt(x), needs)
    }

    // ── linear & conv ────────────────────────────────────────────────────

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (xin, wt, bt) = (&self.vals[x], &self.vals[w], &self.vals[b]);
        let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xin.numel(), in_dim, "linear input size");
        assert_eq!(bt.numel(), out_dim, "linear bias size");
        let mut y = Tensor::zeros(&[out_dim]);
        for o in 0..out_dim {
            let row = &wt.data()[o * in_dim..(o + 1) * in_dim];
            let dot: f64 = row.iter().zip(xin.data()).map(|(a, b)| a * b).sum();
            y.data_mut()[o] = dot + bt.data()[o];
        }
        let needs = self.needs(&[x, w, b]);
        self.push(y, Node::Linear { x, w, b }, needs)
    }

    pub fn slice_outer(&mut self, x: VarId, idx: usize) -> VarId {
        let xt = &self.vals[x];
        let g = xt.shape()[0];
        assert!(idx < g);
        let inner: usize = xt.shape()[1..].iter().product();
        let v = Tensor::from_vec(
            &xt.shape()[1..],
            xt.data()[idx * inner..(idx + 1) * inner].to_vec(),
        );
        let needs = self.needs_grad[x];
        self.push(v, Node::SliceOuter(x, idx), needs)
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        pad: usize,
        stride: usize,
        groups: usize,
    ) -> VarId {
        let v = kernels::conv2d(&self.vals[x], &self.vals[w], &self.vals[b], pad, stride, groups);
        let needs = self.needs(&[x, w, b]);
        self.push(
            v,
            Node::Conv2d {
                x,
                w,
                b,
                pad,
                stride,
                groups,
            },
            needs,
        )
    }

    pub fn conv3d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        pad: (usize, usize, usize),
        stride: (usize, usize, usize),
    ) -> VarId {
        let v = kernels::conv3d(&self.vals[x], &self.vals[w], &self.vals[b], pad, stride);
        let needs = self.needs(&[x, w, b]);
        self.push(v, Node::Conv3d { x, w, b, pad, stride }, needs)
    }

    /// Partial convolution with precomputed mask constants; see
    /// [`super::partial::mask_update`] for the mask chain.
    pub fn partial_conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        pad: usize,
        stride: usize,
        in_mask: Tensor,
        factor: Tensor,
        cover: Tensor,
    ) -> VarId {
        let v = partial_conv_forward(
            &self.vals[x],
            &self.vals[w],
            &self.vals[b],
            pad,
            stride,
            &in_mask,
            &factor,
            &cover,
        );
        let needs = self.needs(&[x, w, b]);
        self.push(
            v,
            Node::PartialConv2d {
                x,
                w,
                b,
                pad,
                stride,
                in_mask,
                factor,
                cover,
            },
            needs,
        )
    }

    pub fn lstm_update(&mut self, gates: VarId, cell: VarId, groups: usize, per: usize) -> VarId {
        let gt = &self.vals[gates];
        let ct = &self.vals[cell];
        assert_eq!(gt.shape()[0], groups * 4 * per, "lstm gate channels");
        assert_eq!(ct.shape()[0], groups * per, "lstm cell channels");
        let (h, w) = (gt.shape()[1], gt.shape()[2]);
        let hw = h * w;
        let mut out = Tensor::zeros(&[groups * 2 * per, h, w]);
        for g in 0..groups {
            for j in 0..per {
                let gi = (g * 4 * per + j) * hw;
                let gf = (g * 4 * per + per + j) * hw;
                let gg = (g * 4 * per + 2 * per + j) * hw;
                let go = (g * 4 * per + 3 * per + j) * hw;
                let cprev = (g * per + j) * hw;
                let oh = (g * 2 * per + j) * hw;
                let oc = (g * 2 * per + per + j) * hw;
                for p in 0..hw {
                    let i = sigmoid(gt.data()[gi + p]);
                    let f = sigmoid(gt.data()[gf + p]);
                    let gg_ = gt.data()[gg + p].tanh();
                    let o = sigmoid(gt.data()[go + p]);
                    let c_new = f * ct.data()[cprev + p] + i * gg_;
                    out.data_mut()[oh + p] = o * c_new.tanh();
                    out.data_mut()[oc + p] = c_new;
                }
            }
        }
        let needs = self.needs(&[gates, cell]);
        self.push(
            out,
            Node::LstmUpdate {
                gates,
                cell,
                groups,
                per,
            },
            needs,
        )
    }

    // ── layout ───────────────────────────────────────────────────────────

    pub fn concat(&mut self, xs: &[VarId]) -> VarId {
        let inner: usize = self.vals[xs[0]].shape()[1..].iter().product();
        let mut total = 0;
        for &x in xs {
            assert_eq!(
                self.vals[x].shape()[1..].iter().product::<usize>(),
                inner,
                "concat trailing dims"
            );
            total += self.vals[x].shape()[0];
        }
        let mut shape = self.vals[xs[0]].shape().to_vec();
        shape[0] = total;
        let mut data = Vec::with_capacity(total * inner);
        for &x in xs {
            data.extend_from_slice(self.vals[x].data());
        }
        let needs = self.needs(xs);
        self.push(Tensor::from_vec(&shape, data), Node::Concat(xs.to_vec()), needs)
    }

    pub fn interleave_groups(&mut self, xs: &[VarId], groups: usize) -> VarId {
        let inner: usize = self.vals[xs[0]].shape()[1..].iter().product();
        let blocks: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let c = self.vals[x].shape()[0];
                assert_eq!(c % groups, 0, "interleave channels not divisible by groups");
                c / groups
            })
            .collect();
        let per_out: usize = blocks.iter().sum();
        let mut shape = self.vals[xs[0]].shape().to_vec();
        shape[0] = groups * per_out;
        let mut out = Tensor::zeros(&shape);
        for g in 0..groups {
            let mut off = 0;
            for (xi, &x) in xs.iter().enumerate() {
                let d = blocks[xi];
                let src = &self.vals[x].data()[g * d * inner..(g + 1) * d * inner];
                let dst0 = (g * per_out + off) * inner;
                out.data_mut()[dst0..dst0 + d * inner].copy_from_slice(src);
                off += d;
            }
        }
        let needs = self.needs(xs);
        self.push(
            out,
            Node::InterleaveGroups {
                xs: xs.to_vec(),
                groups,
            },
            needs,
        )
    }

    pub fn slice_groups(
        &mut self,
        x: VarId,
        groups: usize,
        per: usize,
        offset: usize,
        take: usize,
    ) -> VarId {
        let xt = &self.vals[x];
        assert_eq!(xt.shape()[0], groups * per, "slice_groups channels");
        assert!(offset + take <= per);
        let inner: usize = xt.shape()[1..].iter().product();
        let mut shape = xt.shape().to_vec();
        shape[0] = groups * take;
        let mut out = Tensor::zeros(&shape);
        for g in 0..groups {
            let src0 = (g * per + offset) * inner;
            let dst0 = g * take * inner;
            out.data_mut()[dst0..dst0 + take * inner]
                .copy_from_slice(&xt.data()[src0..src0 + take * inner]);
        }
        let needs = self.needs_grad[x];
        self.push(
            out,
            Node::SliceGroups {
                x,
                groups,
                per,
                offset,
                take,
            },
            needs,
        )
    }

    pub fn permute_groups(&mut self, x: VarId, route: &[usize], groups: usize) -> VarId {
        let xt = &self.vals[x];
        assert_eq!(route.len(), groups);
        assert_eq!(xt.shape()[0] % groups, 0);
        let per = xt.shape()[0] / groups;
        let inner: usize = xt.shape()[1..].iter().product();
        let mut out = Tensor::zeros(xt.shape());
        for g in 0..groups {
            let src0 = route[g] * per * inner;
            let dst0 = g * per * inner;
            out.data_mut()[dst0..dst0 + per * inner]
                .copy_from_slice(&xt.data()[src0..src0 + per * inner]);
        }
        let needs = self.needs_grad[x];
        self.push(
            out,
            Node::PermuteGroups {
                x,
                route: route.to_vec(),
                groups,
            },
            needs,
        )
    }

    // ── spatial ──────────────────────────────────────────────────────────

    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        let xt = &self.vals[x];
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut out = Tensor::zeros(&[c]);
        for k in 0..c {
            out.data_mut()[k] = xt.plane(k).iter().sum::<f64>() / (h * w) as f64;
        }
        let needs = self.needs_grad[x];
        self.push(out, Node::GlobalAvgPool(x), needs)
    }

    pub fn broadcast_spatial(&mut self, x: VarId, h: usize, w: usize) -> VarId {
        let xt = &self.vals[x];
        let c = xt.numel();
        let mut out = Tensor::zeros(&[c, h, w]);
        for k in 0..c {
            out.plane_mut(k).fill(xt.data()[k]);
        }
        let needs = self.needs_grad[x];
        self.push(out, Node::BroadcastSpatial { x, h, w }, needs)
    }

    pub fn upsample_bilinear(&mut self, x: VarId, factor: usize) -> VarId {
        let v = kernels::upsample_bilinear(&self.vals[x], factor);
        let needs = self.needs_grad[x];
        self.push(v, Node::UpsampleBilinear(x, factor), needs)
    }

    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> VarId {
        let v = kernels::upsample_nearest(&self.vals[x], factor);
        let needs = self.needs_grad[x];
        self.push(v, Node::UpsampleNearest(x, factor), needs)
    }

    pub fn avg_pool2(&mut self, x: VarId) -> VarId {
        let v = kernels::avg_pool2(&self.vals[x]);
        let needs = self.needs_grad[x];
        self.push(v, Node::AvgPool2(x), needs)
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let v = self.vals[x].clone().reshape(shape);
        let needs = self.needs_grad[x];
        self.push(v, Node::Reshape(x), needs)
    }

    pub fn softmax_channels(&mut self, x: VarId) -> VarId {
        let xt = &self.vals[x];
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let hw = h * w;
        let mut out = Tensor::zeros(xt.shape());
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(xt.data()[k * hw + p]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (xt.data()[k * hw + p] - mx).exp();
                out.data_mut()[k * hw + p] = e;
                sum += e;
            }
            for k in 0..c {
                out.data_mut()[k * hw + p] /= sum;
            }
        }
        let needs = self.needs_grad[x];
        self.push(out, Node::SoftmaxChannels(x), needs)
    }

    /// Bilinear gather of `x` (`[D, H, W]`) at constant absolute
    /// coordinates (`[2, H', W']`, border clamp). Gradients flow to `x`.
    pub fn warp_gather(&mut self, x: VarId, coords: Tensor) -> VarId {
        let v = crate::scene::bilinear_sample(&self.vals[x], &coords)
            .expect("warp_gather: invalid coords");
        let needs = self.needs_grad[x];
        self.push(v, Node::WarpGather { x, coords }, needs)
    }

    /// Per-pixel convex combination of per-class flows weighted by the
    /// soft map: out(ch, p) = sum_c soft(c, p) * flows(c*2+ch, p).
    pub fn fuse_flows(&mut self, soft: VarId, flows: VarId) -> VarId {
        let (st, ft) = (&self.vals[soft], &self.vals[flows]);
        let (c, h, w) = (st.shape()[0], st.shape()[1], st.shape()[2]);
        assert_eq!(ft.shape(), &[c * 2, h, w], "fuse_flows shapes");
        let hw = h * w;
        let mut out = Tensor::zeros(&[2, h, w]);
        for k in 0..c {
            for ch in 0..2 {
                for p in 0..hw {
                    out.data_mut()[ch * hw + p] +=
                        st.data()[k * hw + p] * ft.data()[(k * 2 + ch) * hw + p];
                }
            }
        }
        let needs = self.needs(&[soft, flows]);
        self.push(out, Node::FuseFlows { soft, flows }, needs)
    }

    // ── reductions & losses ──────────────────────────────────────────────

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let v = Tensor::scalar(self.vals[x].sum());
        let needs = self.needs_grad[x];
        self.push(v, Node::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.vals[x].numel() as f64;
        let v = Tensor::scalar(self.vals[x].sum() / n);
        let needs = self.needs_grad[x];
        self.push(v, Node::MeanAll(x), needs)
    }

    pub fn weighted_l1(&mut self, a: VarId, b: VarId, w: Option<Tensor>) -> VarId {
        let (at, bt) = (&self.vals[a], &self.vals[b]);
        assert_eq!(at.shape(), bt.shape(), "weighted_l1 shapes");
        if let Some(wt) = &w {
            assert_eq!(wt.shape(), at.shape(), "weighted_l1 weight shape");
        }
        let mut acc = 0.0;
        for i in 0..at.numel() {
            let d = (at.data()[i] - bt.data()[i]).abs();
            acc += match &w {
                Some(wt) => wt.data()[i] * d,
                None => d,
            };
        }
        let needs = self.needs(&[a, b]);
        self.push(Tensor::scalar(acc), Node::WeightedL1 { a, b, w }, needs)
    }

    pub fn weighted_cross_entropy(
        &mut self,
        probs: VarId,
        labels: &[u8],
        weights: Tensor,
        eps: f64,
    ) -> VarId {
        let pt = &self.vals[probs];
        let (c, h, w) = (pt.shape()[0], pt.shape()[1], pt.shape()[2]);
        let hw = h * w;
        assert_eq!(labels.len(), hw, "cross entropy label count");
        assert_eq!(weights.numel(), hw, "cross entropy weight count");
        let mut acc = 0.0;
        for p in 0..hw {
            let l = labels[p] as usize;
            assert!(l < c);
            acc -= weights.data()[p] * (pt.data()[l * hw + p] + eps).ln();
        }
        let needs = self.needs_grad[probs];
        self.push(
            Tensor::scalar(acc),
            Node::WeightedCrossEntropy {
                probs,
                labels: labels.to_vec(),
                weights,
                eps,
            },
            needs,
        )
    }

    pub fn kl_std_normal(&mut self, u: VarId, v: VarId) -> VarId {
        let (ut, vt) = (&self.vals[u], &self.vals[v]);
        assert_eq!(ut.shape(), vt.shape(), "kl shapes");
        let mut acc = 0.0;
        for i in 0..ut.numel() {
            let (m, var) = (ut.data()[i], vt.data()[i]);
            acc += 0.5 * (m * m + var - 1.0 - var.ln());
        }
        let needs = self.needs(&[u, v]);
        self.push(Tensor::scalar(acc), Node::KlStdNormal { u, v }, needs)
    }

    pub fn mse_scalar_target(&mut self, x: VarId, target: f64) -> VarId {
        let xt = &self.vals[x];
        let n = xt.numel() as f64;
        let acc: f64 = xt.data().iter().map(|&a| (a - target) * (a - target)).sum();
        let needs = self.needs_grad[x];
        self.push(
            Tensor::scalar(acc / n),
            Node::MseScalarTarget(x, target),
            needs,
        )
    }

    /// Sum a list of scalars.
    pub fn add_all(&mut self, xs: &[VarId]) -> VarId {
        assert!(!xs.is_empty());
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-accumulate d(root)/d(var) for every variable that needs a
    /// gradient. `root` must be a scalar.
    pub fn backward(&self, root: VarId) -> Vec<Option<Tensor>> {
        assert_eq!(self.vals[root].numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.needs_grad[id] {
                continue;
            }
            self.step_backward(id, &g, &mut grads);
            // keep the gradient for leaves and for later collection
            grads[id] = Some(g);
        }
        grads
    }

    fn accum(&self, grads: &mut Vec<Option<Tensor>>, id: VarId, g: Tensor) {
        if !self.needs_grad[id] {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&self, id: VarId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id] {
            Node::Leaf => {}
            Node::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Node::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Node::Mul(a, b) => {
                let ga = g.zip_map(&self.vals[*b], |x, y| x * y);
                let gb = g.zip_map(&self.vals[*a], |x, y| x * y);
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Node::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, g.map(|v| v * c));
            }
            Node::AddScalar(x) => self.accum(grads, *x, g.clone()),
            Node::MulConst(x, c) => self.accum(grads, *x, g.zip_map(c, |a, b| a * b)),
            Node::Sigmoid(x) => {
                let gx = g.zip_map(&self.vals[id], |gv, s| gv * s * (1.0 - s));
                self.accum(grads, *x, gx);
            }
            Node::Tanh(x) => {
                let gx = g.zip_map(&self.vals[id], |gv, t| gv * (1.0 - t * t));
                self.accum(grads, *x, gx);
            }
            Node::Relu(x) => {
                let gx = g.zip_map(&self.vals[*x], |gv, a| if a > 0.0 { gv } else { 0.0 });
                self.accum(grads, *x, gx);
            }
            Node::LeakyRelu(x, slope) => {
                let slope = *slope;
                let gx = g.zip_map(&self.vals[*x], |gv, a| if a >= 0.0 { gv } else { slope * gv });
                self.accum(grads, *x, gx);
            }
            Node::Softplus(x) => {
                let gx = g.zip_map(&self.vals[*x], |gv, a| gv * sigmoid(a));
                self.accum(grads, *x, gx);
            }
            Node::Sqrt(x) => {
                let gx = g.zip_map(&self.vals[id], |gv, s| gv * 0.5 / s.max(1e-12));
                self.accum(grads, *x, gx);
            }
            Node::Linear { x, w, b } => {
                let (xt, wt) = (&self.vals[*x], &self.vals[*w]);
                let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
                let mut gx = Tensor::zeros(&[in_dim]);
                let mut gw = Tensor::zeros(wt.shape());
                for o in 0..out_dim {
                    let go = g.data()[o];
                    for i in 0..in_dim {
                        gx.data_mut()[i] += go * wt.data()[o * in_dim + i];
                        gw.data_mut()[o * in_dim + i] += go * xt.data()[i];
                    }
                }
                self.accum(grads, *x, gx.reshape(self.vals[*x].shape()));
                self.accum(grads, *w, gw);
                self.accum(grads, *b, g.clone().reshape(self.vals[*b].shape()));
            }
            Node::SliceOuter(x, idx) => {
                let xt = &self.vals[*x];
                let inner: usize = xt.shape()[1..].iter().product();
                let mut gx = Tensor::zeros(xt.shape());
                gx.data_mut()[idx * inner..(idx + 1) * inner].copy_from_slice(g.data());
                self.accum(grads, *x, gx);
            }
            Node::Conv2d {
                x,
                w,
                b,
                pad,
                stride,
                groups,
            } => {
                let need_gx = self.needs_grad[*x];
                let (gx, gw, gb) = kernels::conv2d_backward(
                    &self.vals[*x],
                    &self.vals[*w],
                    g,
                    *pad,
                    *stride,
                    *groups,
                    need_gx,
                );
                if let Some(gx) = gx {
                    self.accum(grads, *x, gx);
                }
                self.accum(grads, *w, gw);
                self.accum(grads, *b, gb);
            }
            Node::Conv3d { x, w, b, pad, stride } => {
                let need_gx = self.needs_grad[*x];
                let (gx, gw, gb) = kernels::conv3d_backward(
                    &self.vals[*x],
                    &self.vals[*w],
                    g,
                    *pad,
                    *stride,
                    need_gx,
                );
                if let Some(gx) = gx {
                    self.accum(grads, *x, gx);
                }
                self.accum(grads, *w, gw);
                self.accum(grads, *b, gb);
            }
            Node::PartialConv2d {
                x,
                w,
                b,
                pad,
                stride,
                in_mask,
                factor,
                cover,
            } => {
                let (gx, gw, gb) = partial_conv_backward(
                    &self.vals[*x],
                    &self.vals[*w],
                    g,
                    *pad,
                    *stride,
                    in_mask,
                    factor,
                    cover,
                    self.needs_grad[*x],
                );
                if let Some(gx) = gx {
                    self.accum(grads, *x, gx);
                }
                self.accum(grads, *w, gw);
                self.accum(grads, *b, gb);
            }
            Node::LstmUpdate {
                gates,
                cell,
                groups,
                per,
            } => {
                let gt = &self.vals[*gates];
                let ct = &self.vals[*cell];
                let out = &self.vals[id];
                let hw = gt.shape()[1] * gt.shape()[2];
                let mut ggates = Tensor::zeros(gt.shape());
                let mut gcell = Tensor::zeros(ct.shape());
                for gr in 0..*groups {
                    for j in 0..*per {
                        let gi = (gr * 4 * per + j) * hw;
                        let gf = (gr * 4 * per + per + j) * hw;
                        let gg = (gr * 4 * per + 2 * per + j) * hw;
                        let go = (gr * 4 * per + 3 * per + j) * hw;
                        let cprev = (gr * per + j) * hw;
                        let oh = (gr * 2 * per + j) * hw;
                        let oc = (gr * 2 * per + per + j) * hw;
                        for p in 0..hw {
                            let i = sigmoid(gt.data()[gi + p]);
                            let f = sigmoid(gt.data()[gf + p]);
                            let gg_ = gt.data()[gg + p].tanh();
                            let o = sigmoid(gt.data()[go + p]);
                            let c_new = out.data()[oc + p];
                            let tc = c_new.tanh();
                            let gh = g.data()[oh + p];
                            let gc_out = g.data()[oc + p];
                            let dc = gc_out + gh * o * (1.0 - tc * tc);
                            ggates.data_mut()[go + p] = gh * tc * o * (1.0 - o);
                            ggates.data_mut()[gi + p] = dc * gg_ * i * (1.0 - i);
                            ggates.data_mut()[gf + p] = dc * ct.data()[cprev + p] * f * (1.0 - f);
                            ggates.data_mut()[gg + p] = dc * i * (1.0 - gg_ * gg_);
                            gcell.data_mut()[cprev + p] = dc * f;
                        }
                    }
                }
                self.accum(grads, *gates, ggates);
                self.accum(grads, *cell, gcell);
            }
            Node::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.vals[x].numel();
                    let gx = Tensor::from_vec(self.vals[x].shape(), g.data()[off..off + n].to_vec());
                    self.accum(grads, x, gx);
                    off += n;
                }
            }
            Node::InterleaveGroups { xs, groups } => {
                let inner: usize = self.vals[xs[0]].shape()[1..].iter().product();
                let blocks: Vec<usize> =
                    xs.iter().map(|&x| self.vals[x].shape()[0] / groups).collect();
                let per_out: usize = blocks.iter().sum();
                for (xi, &x) in xs.iter().enumerate() {
                    if !self.needs_grad[x] {
                        continue;
                    }
                    let d = blocks[xi];
                    let off: usize = blocks[..xi].iter().sum();
                    let mut gx = Tensor::zeros(self.vals[x].shape());
                    for gr in 0..*groups {
                        let src0 = (gr * per_out + off) * inner;
                        let dst0 = gr * d * inner;
                        gx.data_mut()[dst0..dst0 + d * inner]
                            .copy_from_slice(&g.data()[src0..src0 + d * inner]);
                    }
                    self.accum(grads, x, gx);
                }
            }
            Node::SliceGroups {
                x,
                groups,
                per,
                offset,
                take,
            } => {
                let xt = &self.vals[*x];
                let inner: usize = xt.shape()[1..].iter().product();
                let mut gx = Tensor::zeros(xt.shape());
                for gr in 0..*groups {
                    let dst0 = (gr * per + offset) * inner;
                    let src0 = gr * take * inner;
                    gx.data_mut()[dst0..dst0 + take * inner]
                        .copy_from_slice(&g.data()[src0..src0 + take * inner]);
                }
                self.accum(grads, *x, gx);
            }
            Node::PermuteGroups { x, route, groups } => {
                let xt = &self.vals[*x];
                let per = xt.shape()[0] / groups;
                let inner: usize = xt.shape()[1..].iter().product();
                let mut gx = Tensor::zeros(xt.shape());
                for gr in 0..*groups {
                    let dst0 = route[gr] * per * inner;
                    let src0 = gr * per * inner;
                    for i in 0..per * inner {
                        gx.data_mut()[dst0 + i] += g.data()[src0 + i];
                    }
                }
                self.accum(grads, *x, gx);
            }
            Node::GlobalAvgPool(x) => {
                let xt = &self.vals[*x];
                let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let mut gx = Tensor::zeros(xt.shape());
                let norm = 1.0 / (h * w) as f64;
                for k in 0..c {
                    let gv = g.data()[k] * norm;
                    gx.plane_mut(k).fill(gv);
                }
                self.accum(grads, *x, gx);
            }
            Node::BroadcastSpatial { x, h, w } => {
                let c = self.vals[*x].numel();
                let mut gx = Tensor::zeros(self.vals[*x].shape());
                for k in 0..c {
                    let base = k * h * w;
                    gx.data_mut()[k] = g.data()[base..base + h * w].iter().sum();
                }
                self.accum(grads, *x, gx);
            }
            Node::UpsampleBilinear(x, factor) => {
                let gx = kernels::upsample_bilinear_backward(g, *factor, self.vals[*x].shape());
                self.accum(grads, *x, gx);
            }
            Node::UpsampleNearest(x, factor) => {
                let gx = kernels::upsample_nearest_backward(g, *factor, self.vals[*x].shape());
                self.accum(grads, *x, gx);
            }
            Node::AvgPool2(x) => {
                let gx = kernels::avg_pool2_backward(g, self.vals[*x].shape());
                self.accum(grads, *x, gx);
            }
            Node::Reshape(x) => {
                let gx = g.clone().reshape(self.vals[*x].shape());
                self.accum(grads, *x, gx);
            }
            Node::SoftmaxChannels(x) => {
                let p = &self.vals[id];
                let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
                let hw = h * w;
                let mut gx = Tensor::zeros(p.shape());
                for pix in 0..hw {
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += g.data()[k * hw + pix] * p.data()[k * hw + pix];
                    }
                    for k in 0..c {
                        gx.data_mut()[k * hw + pix] =
                            p.data()[k * hw + pix] * (g.data()[k * hw + pix] - dot);
                    }
                }
                self.accum(grads, *x, gx);
            }
            Node::WarpGather { x, coords } => {
                let xt = &self.vals[*x];
                let (d, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let (oh, ow) = (coords.shape()[1], coords.shape()[2]);
                let mut gx = Tensor::zeros(xt.shape());
                for y in 0..oh {
                    for x_ in 0..ow {
                        let sx = coords.at3(0, y, x_).clamp(0.0, (w - 1) as f64);
                        let sy = coords.at3(1, y, x_).clamp(0.0, (h - 1) as f64);
                        let x0 = sx.floor() as usize;
                        let y0 = sy.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let fx = sx - x0 as f64;
                        let fy = sy - y0 as f64;
                        for k in 0..d {
                            let gv = g.at3(k, y, x_);
                            *gx.at3_mut(k, y0, x0) += gv * (1.0 - fx) * (1.0 - fy);
                            *gx.at3_mut(k, y0, x1) += gv * fx * (1.0 - fy);
                            *gx.at3_mut(k, y1, x0) += gv * (1.0 - fx) * fy;
                            *gx.at3_mut(k, y1, x1) += gv * fx * fy;
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Node::FuseFlows { soft, flows } => {
                let (st, ft) = (&self.vals[*soft], &self.vals[*flows]);
                let (c, h, w) = (st.shape()[0], st.shape()[1], st.shape()[2]);
                let hw = h * w;
                let mut gs = Tensor::zeros(st.shape());
                let mut gf = Tensor::zeros(ft.shape());
                for k in 0..c {
                    for ch in 0..2 {
                        for p in 0..hw {
                            let gv = g.data()[ch * hw + p];
                            gs.data_mut()[k * hw + p] += gv * ft.data()[(k * 2 + ch) * hw + p];
                            gf.data_mut()[(k * 2 + ch) * hw + p] += gv * st.data()[k * hw + p];
                        }
                    }
                }
                self.accum(grads, *soft, gs);
                self.accum(grads, *flows, gf);
            }
            Node::SumAll(x) => {
                let gv = g.item();
                self.accum(grads, *x, Tensor::full(self.vals[*x].shape(), gv));
            }
            Node::MeanAll(x) => {
                let gv = g.item() / self.vals[*x].numel() as f64;
                self.accum(grads, *x, Tensor::full(self.vals[*x].shape(), gv));
            }
            Node::WeightedL1 { a, b, w } => {
                let gv = g.item();
                let (at, bt) = (&self.vals[*a], &self.vals[*b]);
                let mut ga = Tensor::zeros(at.shape());
                for i in 0..at.numel() {
                    let s = (at.data()[i] - bt.data()[i]).signum();
                    let wt = w.as_ref().map_or(1.0, |wt| wt.data()[i]);
                    ga.data_mut()[i] = gv * wt * s;
                }
                if self.needs_grad[*b] {
                    self.accum(grads, *b, ga.map(|v| -v));
                }
                self.accum(grads, *a, ga);
            }
            Node::WeightedCrossEntropy {
                probs,
                labels,
                weights,
                eps,
            } => {
                let gv = g.item();
                let pt = &self.vals[*probs];
                let hw = pt.shape()[1] * pt.shape()[2];
                let mut gp = Tensor::zeros(pt.shape());
                for p in 0..hw {
                    let l = labels[p] as usize;
                    gp.data_mut()[l * hw + p] =
                        -gv * weights.data()[p] / (pt.data()[l * hw + p] + eps);
                }
                self.accum(grads, *probs, gp);
            }
            Node::KlStdNormal { u, v } => {
                let gv = g.item();
                let gu = self.vals[*u].map(|m| gv * m);
                let gvr = self.vals[*v].map(|var| gv * 0.5 * (1.0 - 1.0 / var));
                self.accum(grads, *u, gu);
                self.accum(grads, *v, gvr);
            }
            Node::MseScalarTarget(x, target) => {
                let gv = g.item();
                let n = self.vals[*x].numel() as f64;
                let t = *target;
                let gx = self.vals[*x].map(|a| gv * 2.0 * (a - t) / n);
                self.accum(grads, *x, gx);
            }
        }
    }

    /// After [`Tape::backward`], fold per-leaf gradients of bound
    /// parameters into a [`GradStore`].
    pub fn collect_param_grads(&self, grads: &[Option<Tensor>], store: &mut GradStore) {
        for (id, name) in &self.bindings {
            if let Some(g) = &grads[*id] {
                store.accumulate(name, g);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn partial_conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    pad: usize,
    stride: usize,
    in_mask: &Tensor,
    factor: &Tensor,
    cover: &Tensor,
) -> Tensor {
    // y = conv(x * mask) * factor + b * cover
    let masked = apply_mask(x, in_mask);
    let zero_bias = Tensor::zeros(&[w.shape()[0]]);
    let mut y = kernels::conv2d(&masked, w, &zero_bias, pad, stride, 1);
    let (cout, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    for oc in 0..cout {
        for p in 0..oh * ow {
            let i = oc * oh * ow + p;
            y.data_mut()[i] = y.data()[i] * factor.data()[p] + b.data()[oc] * cover.data()[p];
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn partial_conv_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    pad: usize,
    stride: usize,
    in_mask: &Tensor,
    factor: &Tensor,
    cover: &Tensor,
    need_gx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (cout, oh, ow) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
    // d/d(conv out) = gout * factor ; d/db = sum(gout * cover)
    let mut gconv = Tensor::zeros(gout.shape());
    let mut gb = Tensor::zeros(&[cout]);
    for oc in 0..cout {
        let mut acc = 0.0;
        for p in 0..oh * ow {
            let i = oc * oh * ow + p;
            gconv.data_mut()[i] = gout.data()[i] * factor.data()[p];
            acc += gout.data()[i] * cover.data()[p];
        }
        gb.data_mut()[oc] = acc;
    }
    let masked = apply_mask(x, in_mask);
    let (gmasked, gw, _) = kernels::conv2d_backward(&masked, w, &gconv, pad, stride, 1, need_gx);
    let gx = gmasked.map(|gm| apply_mask(&gm, in_mask));
    (gx, gw, gb)
}

fn apply_mask(x: &Tensor, mask: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert_eq!(mask.numel(), h * w);
    let mut out = x.clone();
    for k in 0..c {
        for p in 0..h * w {
            out.data_mut()[k * h * w + p] *= mask.data()[p];
        }
    }
    out
}
