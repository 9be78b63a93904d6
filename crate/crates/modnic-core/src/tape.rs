//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends one node holding its forward value; nodes refer
//! to their inputs by [`TensorId`]. Backward walks the tape once in strict
//! reverse order and accumulates gradients with the same index order every
//! run, so gradients for a given graph are bit-identical across calls and
//! platforms.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels;
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: TensorId, kernel: TensorId, bias: TensorId, stride: usize, pad: usize },
    ConvT2d { input: TensorId, kernel: TensorId, bias: TensorId, stride: usize, pad: usize, out_pad: usize },
    Dense { input: TensorId, weight: TensorId, bias: TensorId },
    Relu { input: TensorId },
    Sigmoid { input: TensorId },
    Tanh { input: TensorId },
    Softplus { input: TensorId },
    Ln { input: TensorId },
    Add { lhs: TensorId, rhs: TensorId },
    Sub { lhs: TensorId, rhs: TensorId },
    Mul { lhs: TensorId, rhs: TensorId },
    AddScalar { input: TensorId },
    MulScalar { input: TensorId, value: f64 },
    ClampMin { input: TensorId, floor: f64 },
    BroadcastSpatial { input: TensorId },
    Sum { input: TensorId },
    Mean { input: TensorId },
    Reshape { input: TensorId },
    DensityAffine { input: TensorId, hhat: TensorId, bias: TensorId },
    DensityGate { input: TensorId, gate: TensorId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to the given node, if the
    /// node required grad and was reached.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a leaf. `requires_grad` marks it as a trainable parameter.
    pub fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, value.shape().to_vec(), value.data().to_vec(), requires_grad)
    }

    /// Leaf that never receives a gradient (inputs, noise, frozen weights).
    pub fn constant(&mut self, value: &Tensor) -> TensorId {
        self.leaf(value, false)
    }

    /// Leaf that accumulates a gradient during [`Tape::backward`].
    pub fn param(&mut self, value: &Tensor) -> TensorId {
        self.leaf(value, true)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copy a node's forward value out as a [`Tensor`].
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape values are well formed")
    }

    /// Forward value of a scalar node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "node {:?} is not scalar", id);
        n.data[0]
    }

    fn dims4(&self, id: TensorId, what: &str) -> (usize, usize, usize, usize) {
        let s = self.shape(id);
        assert_eq!(s.len(), 4, "{what} must be 4-d [B,C,H,W], got {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    fn assert_distinct(ids: &[TensorId], what: &str) {
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                assert_ne!(ids[i], ids[j], "{what} operands must be distinct nodes");
            }
        }
    }

    /// Cross-correlation with kernel [Cout,Cin,k,k] and bias [Cout].
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, bias: TensorId, stride: usize, pad: usize) -> TensorId {
        Self::assert_distinct(&[input, kernel, bias], "conv2d");
        assert!(stride >= 1, "stride must be at least 1");
        let (b, cin, h, w) = self.dims4(input, "conv2d input");
        let ks = self.shape(kernel).to_vec();
        assert_eq!(ks.len(), 4, "conv2d kernel must be [Cout,Cin,k,k], got {ks:?}");
        assert_eq!(ks[1], cin, "conv2d kernel expects {} input channels, input has {cin}", ks[1]);
        assert_eq!(ks[2], ks[3], "conv2d kernel must be square, got {ks:?}");
        let (cout, k) = (ks[0], ks[2]);
        assert_eq!(self.shape(bias), &[cout], "conv2d bias must be [Cout]");
        let oh = kernels::conv_out_dim(h, k, stride, pad)
            .unwrap_or_else(|| panic!("conv2d: {h}x{w} too small for k={k} pad={pad}"));
        let ow = kernels::conv_out_dim(w, k, stride, pad)
            .unwrap_or_else(|| panic!("conv2d: {h}x{w} too small for k={k} pad={pad}"));
        let data = kernels::conv2d_forward(
            self.value(input), self.value(kernel), self.value(bias),
            b, cin, h, w, cout, k, stride, pad,
        );
        let rq = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        self.push(Op::Conv2d { input, kernel, bias, stride, pad }, vec![b, cout, oh, ow], data, rq)
    }

    /// Transposed convolution with kernel [Cin,Cout,k,k] and bias [Cout].
    pub fn tconv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> TensorId {
        Self::assert_distinct(&[input, kernel, bias], "tconv2d");
        assert!(stride >= 1, "stride must be at least 1");
        assert!(out_pad < stride, "out_pad {out_pad} must be smaller than stride {stride}");
        let (b, cin, h, w) = self.dims4(input, "tconv2d input");
        let ks = self.shape(kernel).to_vec();
        assert_eq!(ks.len(), 4, "tconv2d kernel must be [Cin,Cout,k,k], got {ks:?}");
        assert_eq!(ks[0], cin, "tconv2d kernel expects {} input channels, input has {cin}", ks[0]);
        assert_eq!(ks[2], ks[3], "tconv2d kernel must be square, got {ks:?}");
        let (cout, k) = (ks[1], ks[2]);
        assert_eq!(self.shape(bias), &[cout], "tconv2d bias must be [Cout]");
        let oh = kernels::tconv_out_dim(h, k, stride, pad, out_pad)
            .unwrap_or_else(|| panic!("tconv2d: bad geometry h={h} k={k} stride={stride} pad={pad}"));
        let ow = kernels::tconv_out_dim(w, k, stride, pad, out_pad)
            .unwrap_or_else(|| panic!("tconv2d: bad geometry w={w} k={k} stride={stride} pad={pad}"));
        let data = kernels::tconv2d_forward(
            self.value(input), self.value(kernel), self.value(bias),
            b, cin, h, w, cout, k, stride, pad, out_pad,
        );
        let rq = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        self.push(Op::ConvT2d { input, kernel, bias, stride, pad, out_pad }, vec![b, cout, oh, ow], data, rq)
    }

    /// Affine map with input [B,n], weight [m,n], bias [m].
    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> TensorId {
        Self::assert_distinct(&[input, weight, bias], "dense");
        let is = self.shape(input).to_vec();
        assert_eq!(is.len(), 2, "dense input must be [B,n], got {is:?}");
        let ws = self.shape(weight).to_vec();
        assert_eq!(ws.len(), 2, "dense weight must be [m,n], got {ws:?}");
        assert_eq!(ws[1], is[1], "dense weight expects {} inputs, got {}", ws[1], is[1]);
        let (b, n, m) = (is[0], is[1], ws[0]);
        assert_eq!(self.shape(bias), &[m], "dense bias must be [m]");
        let data = kernels::dense_forward(self.value(input), self.value(weight), self.value(bias), b, n, m);
        let rq = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        self.push(Op::Dense { input, weight, bias }, vec![b, m], data, rq)
    }

    fn unary(&mut self, input: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let data: Vec<f64> = self.value(input).iter().map(|&v| f(v)).collect();
        let shape = self.shape(input).to_vec();
        let rq = self.requires_grad(input);
        self.push(op, shape, data, rq)
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Relu { input }, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Sigmoid { input }, math::sigmoid)
    }

    pub fn tanh(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Tanh { input }, math::tanh)
    }

    pub fn softplus(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Softplus { input }, math::softplus)
    }

    /// Natural log. Inputs must be strictly positive; clamp first.
    pub fn ln(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Ln { input }, math::ln)
    }

    pub fn add_scalar(&mut self, input: TensorId, value: f64) -> TensorId {
        self.unary(input, Op::AddScalar { input }, |v| v + value)
    }

    pub fn mul_scalar(&mut self, input: TensorId, value: f64) -> TensorId {
        self.unary(input, Op::MulScalar { input, value }, |v| v * value)
    }

    pub fn clamp_min(&mut self, input: TensorId, floor: f64) -> TensorId {
        self.unary(input, Op::ClampMin { input, floor }, |v| if v < floor { floor } else { v })
    }

    fn binary(&mut self, lhs: TensorId, rhs: TensorId, op: Op, f: impl Fn(f64, f64) -> f64) -> TensorId {
        assert_eq!(
            self.shape(lhs),
            self.shape(rhs),
            "elementwise op needs matching shapes, got {:?} vs {:?}",
            self.shape(lhs),
            self.shape(rhs)
        );
        let data: Vec<f64> = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(&a, &b)| f(a, b))
            .collect();
        let shape = self.shape(lhs).to_vec();
        let rq = self.requires_grad(lhs) || self.requires_grad(rhs);
        self.push(op, shape, data, rq)
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> TensorId {
        self.binary(lhs, rhs, Op::Add { lhs, rhs }, |a, b| a + b)
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> TensorId {
        self.binary(lhs, rhs, Op::Sub { lhs, rhs }, |a, b| a - b)
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> TensorId {
        self.binary(lhs, rhs, Op::Mul { lhs, rhs }, |a, b| a * b)
    }

    /// Replicate a [B,C] map over an HxW grid, producing [B,C,H,W].
    pub fn broadcast_spatial(&mut self, input: TensorId, h: usize, w: usize) -> TensorId {
        let is = self.shape(input).to_vec();
        assert_eq!(is.len(), 2, "broadcast_spatial input must be [B,C], got {is:?}");
        let (b, c) = (is[0], is[1]);
        let src = self.value(input);
        let mut data = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let v = src[bi * c + ci];
                let base = (bi * c + ci) * h * w;
                for i in 0..h * w {
                    data[base + i] = v;
                }
            }
        }
        let rq = self.requires_grad(input);
        self.push(Op::BroadcastSpatial { input }, vec![b, c, h, w], data, rq)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let total: f64 = self.value(input).iter().sum();
        let rq = self.requires_grad(input);
        self.push(Op::Sum { input }, vec![1], vec![total], rq)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, input: TensorId) -> TensorId {
        let n = self.value(input).len();
        let total: f64 = self.value(input).iter().sum();
        let rq = self.requires_grad(input);
        self.push(Op::Mean { input }, vec![1], vec![total / n as f64], rq)
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> TensorId {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.value(input).len(),
            "reshape to {:?} does not preserve element count {}",
            shape,
            self.value(input).len()
        );
        let data = self.value(input).to_vec();
        let rq = self.requires_grad(input);
        self.push(Op::Reshape { input }, shape.to_vec(), data, rq)
    }

    /// Per-channel affine stage of the density model. Input is
    /// [B,C,H,W,r_in]; `hhat` holds raw weights [C,r_out,r_in] passed through
    /// softplus to keep them positive; `bias` is [C,r_out]. Output is
    /// [B,C,H,W,r_out].
    pub fn density_affine(&mut self, input: TensorId, hhat: TensorId, bias: TensorId) -> TensorId {
        Self::assert_distinct(&[input, hhat, bias], "density_affine");
        let is = self.shape(input).to_vec();
        assert_eq!(is.len(), 5, "density_affine input must be [B,C,H,W,r], got {is:?}");
        let (b, c, h, w, rin) = (is[0], is[1], is[2], is[3], is[4]);
        let hs = self.shape(hhat).to_vec();
        assert_eq!(hs.len(), 3, "density_affine hhat must be [C,r_out,r_in], got {hs:?}");
        assert_eq!(hs[0], c, "density_affine hhat channel count {} != input {c}", hs[0]);
        assert_eq!(hs[2], rin, "density_affine hhat expects r_in {}, input has {rin}", hs[2]);
        let rout = hs[1];
        assert_eq!(self.shape(bias), &[c, rout], "density_affine bias must be [C,r_out]");
        let src = self.value(input);
        let hv = self.value(hhat);
        let bv = self.value(bias);
        let mut data = vec![0.0; b * c * h * w * rout];
        for bi in 0..b {
            for ci in 0..c {
                for pix in 0..h * w {
                    let ibase = ((bi * c + ci) * h * w + pix) * rin;
                    let obase = ((bi * c + ci) * h * w + pix) * rout;
                    for j in 0..rout {
                        let mut acc = bv[ci * rout + j];
                        for i in 0..rin {
                            let wgt = math::softplus(hv[(ci * rout + j) * rin + i]);
                            acc += wgt * src[ibase + i];
                        }
                        data[obase + j] = acc;
                    }
                }
            }
        }
        let rq = self.requires_grad(input) || self.requires_grad(hhat) || self.requires_grad(bias);
        self.push(Op::DensityAffine { input, hhat, bias }, vec![b, c, h, w, rout], data, rq)
    }

    /// Per-channel gated nonlinearity v + tanh(a)*tanh(v) of the density
    /// model. Input is [B,C,H,W,r]; `gate` holds raw parameters [C,r].
    pub fn density_gate(&mut self, input: TensorId, gate: TensorId) -> TensorId {
        Self::assert_distinct(&[input, gate], "density_gate");
        let is = self.shape(input).to_vec();
        assert_eq!(is.len(), 5, "density_gate input must be [B,C,H,W,r], got {is:?}");
        let (b, c, h, w, r) = (is[0], is[1], is[2], is[3], is[4]);
        assert_eq!(self.shape(gate), &[c, r], "density_gate gate must be [C,r]");
        let src = self.value(input);
        let gv = self.value(gate);
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for pix in 0..h * w {
                    let base = ((bi * c + ci) * h * w + pix) * r;
                    for i in 0..r {
                        let v = src[base + i];
                        data[base + i] = v + math::tanh(gv[ci * r + i]) * math::tanh(v);
                    }
                }
            }
        }
        let rq = self.requires_grad(input) || self.requires_grad(gate);
        self.push(Op::DensityGate { input, gate }, vec![b, c, h, w, r], data, rq)
    }

    /// Reverse pass from a scalar root. Returns per-node gradient buffers for
    /// every reached node with `requires_grad`.
    pub fn backward(&self, root: TensorId) -> Gradients {
        let root_node = &self.nodes[root.0];
        assert_eq!(root_node.data.len(), 1, "backward root must be scalar");
        assert!(root_node.requires_grad, "backward root does not depend on any parameter");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn want(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn ensure<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: TensorId) -> &'a mut [f64] {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].data.len()]);
        }
        slot.as_deref_mut().expect("just filled")
    }

    /// Pull a gradient buffer out of its slot so several can be borrowed at
    /// once; callers put the buffers back when done. Operand ids of
    /// multi-input ops are pairwise distinct (asserted at construction), so
    /// no accumulation is lost.
    fn take_or_zeros(&self, grads: &mut [Option<Vec<f64>>], id: TensorId) -> Vec<f64> {
        grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[id.0].data.len()])
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                let (b, cin, h, w) = self.dims4(input, "conv2d input");
                let ks = self.shape(kernel);
                let (cout, k) = (ks[0], ks[2]);
                let (want_i, want_k, want_b) = (self.want(input), self.want(kernel), self.want(bias));
                let mut gi = if want_i { Some(self.take_or_zeros(grads, input)) } else { None };
                let mut gk = if want_k { Some(self.take_or_zeros(grads, kernel)) } else { None };
                let mut gb = if want_b { Some(self.take_or_zeros(grads, bias)) } else { None };
                kernels::conv2d_backward(
                    g, self.value(input), self.value(kernel),
                    b, cin, h, w, cout, k, stride, pad,
                    gi.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut(),
                );
                if let Some(v) = gi { grads[input.0] = Some(v); }
                if let Some(v) = gk { grads[kernel.0] = Some(v); }
                if let Some(v) = gb { grads[bias.0] = Some(v); }
            }
            Op::ConvT2d { input, kernel, bias, stride, pad, out_pad } => {
                let (b, cin, h, w) = self.dims4(input, "tconv2d input");
                let ks = self.shape(kernel);
                let (cout, k) = (ks[1], ks[2]);
                let (want_i, want_k, want_b) = (self.want(input), self.want(kernel), self.want(bias));
                let mut gi = if want_i { Some(self.take_or_zeros(grads, input)) } else { None };
                let mut gk = if want_k { Some(self.take_or_zeros(grads, kernel)) } else { None };
                let mut gb = if want_b { Some(self.take_or_zeros(grads, bias)) } else { None };
                kernels::tconv2d_backward(
                    g, self.value(input), self.value(kernel),
                    b, cin, h, w, cout, k, stride, pad, out_pad,
                    gi.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut(),
                );
                if let Some(v) = gi { grads[input.0] = Some(v); }
                if let Some(v) = gk { grads[kernel.0] = Some(v); }
                if let Some(v) = gb { grads[bias.0] = Some(v); }
            }
            Op::Dense { input, weight, bias } => {
                let is = self.shape(input);
                let (b, n) = (is[0], is[1]);
                let m = self.shape(weight)[0];
                let (want_i, want_w, want_b) = (self.want(input), self.want(weight), self.want(bias));
                let mut gi = if want_i { Some(self.take_or_zeros(grads, input)) } else { None };
                let mut gw = if want_w { Some(self.take_or_zeros(grads, weight)) } else { None };
                let mut gb = if want_b { Some(self.take_or_zeros(grads, bias)) } else { None };
                kernels::dense_backward(
                    g, self.value(input), self.value(weight), b, n, m,
                    gi.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(),
                );
                if let Some(v) = gi { grads[input.0] = Some(v); }
                if let Some(v) = gw { grads[weight.0] = Some(v); }
                if let Some(v) = gb { grads[bias.0] = Some(v); }
            }
            Op::Relu { input } => {
                if self.want(input) {
                    let src = self.value(input);
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        if src[i] > 0.0 {
                            gi[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                if self.want(input) {
                    let out = &node.data;
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        gi[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Tanh { input } => {
                if self.want(input) {
                    let out = &node.data;
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        gi[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Softplus { input } => {
                if self.want(input) {
                    let src = self.value(input);
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        gi[i] += g[i] * math::sigmoid(src[i]);
                    }
                }
            }
            Op::Ln { input } => {
                if self.want(input) {
                    let src = self.value(input);
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        gi[i] += g[i] / src[i];
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                if self.want(lhs) {
                    let gl = self.ensure(grads, lhs);
                    for i in 0..g.len() {
                        gl[i] += g[i];
                    }
                }
                if self.want(rhs) {
                    let gr = self.ensure(grads, rhs);
                    for i in 0..g.len() {
                        gr[i] += g[i];
                    }
                }
            }
            Op::Sub { lhs, rhs } => {
                if self.want(lhs) {
                    let gl = self.ensure(grads, lhs);
                    for i in 0..g.len() {
                        gl[i] += g[i];
                    }
                }
                if self.want(rhs) {
                    let gr = self.ensure(grads, rhs);
                    for i in 0..g.len() {
                        gr[i] -= g[i];
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.want(lhs) {
                    let rv = self.value(rhs).to_vec();
                    let gl = self.ensure(grads, lhs);
                    for i in 0..g.len() {
                        gl[i] += g[i] * rv[i];
                    }
                }
                if self.want(rhs) {
                    let lv = self.value(lhs).to_vec();
                    let gr = self.ensure(grads, rhs);
                    for i in 0..g.len() {
                        gr[i] += g[i] * lv[i];
                    }
                }
            }
            Op::AddScalar { input } => {
                if self.want(input) {
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        gi[i] += g[i];
                    }
                }
            }
            Op::MulScalar { input, value } => {
                if self.want(input) {
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        gi[i] += g[i] * value;
                    }
                }
            }
            Op::ClampMin { input, floor } => {
                if self.want(input) {
                    let src = self.value(input);
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        if src[i] >= floor {
                            gi[i] += g[i];
                        }
                    }
                }
            }
            Op::BroadcastSpatial { input } => {
                if self.want(input) {
                    let is = self.shape(input);
                    let (b, c) = (is[0], is[1]);
                    let hw = node.data.len() / (b * c);
                    let gi = self.ensure(grads, input);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut acc = 0.0;
                            for i in 0..hw {
                                acc += g[base + i];
                            }
                            gi[bi * c + ci] += acc;
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if self.want(input) {
                    let gi = self.ensure(grads, input);
                    for slot in gi.iter_mut() {
                        *slot += g[0];
                    }
                }
            }
            Op::Mean { input } => {
                if self.want(input) {
                    let gi = self.ensure(grads, input);
                    let scale = g[0] / gi.len() as f64;
                    for slot in gi.iter_mut() {
                        *slot += scale;
                    }
                }
            }
            Op::Reshape { input } => {
                if self.want(input) {
                    let gi = self.ensure(grads, input);
                    for i in 0..g.len() {
                        gi[i] += g[i];
                    }
                }
            }
            Op::DensityAffine { input, hhat, bias } => {
                let is = self.shape(input);
                let (b, c, h, w, rin) = (is[0], is[1], is[2], is[3], is[4]);
                let rout = self.shape(hhat)[1];
                let src = self.value(input).to_vec();
                let hv = self.value(hhat).to_vec();
                let (want_i, want_h, want_b) = (self.want(input), self.want(hhat), self.want(bias));
                let mut gi = if want_i { Some(self.take_or_zeros(grads, input)) } else { None };
                let mut gh = if want_h { Some(self.take_or_zeros(grads, hhat)) } else { None };
                let mut gb = if want_b { Some(self.take_or_zeros(grads, bias)) } else { None };
                for bi in 0..b {
                    for ci in 0..c {
                        for pix in 0..h * w {
                            let ibase = ((bi * c + ci) * h * w + pix) * rin;
                            let obase = ((bi * c + ci) * h * w + pix) * rout;
                            for j in 0..rout {
                                let go = g[obase + j];
                                if let Some(gbv) = gb.as_deref_mut() {
                                    gbv[ci * rout + j] += go;
                                }
                                for i in 0..rin {
                                    let raw = hv[(ci * rout + j) * rin + i];
                                    let wgt = math::softplus(raw);
                                    if let Some(giv) = gi.as_deref_mut() {
                                        giv[ibase + i] += go * wgt;
                                    }
                                    if let Some(ghv) = gh.as_deref_mut() {
                                        ghv[(ci * rout + j) * rin + i] += go * src[ibase + i] * math::sigmoid(raw);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(v) = gi { grads[input.0] = Some(v); }
                if let Some(v) = gh { grads[hhat.0] = Some(v); }
                if let Some(v) = gb { grads[bias.0] = Some(v); }
            }
            Op::DensityGate { input, gate } => {
                let is = self.shape(input);
                let (b, c, h, w, r) = (is[0], is[1], is[2], is[3], is[4]);
                let src = self.value(input).to_vec();
                let gv = self.value(gate).to_vec();
                let (want_i, want_g) = (self.want(input), self.want(gate));
                let mut gi = if want_i { Some(self.take_or_zeros(grads, input)) } else { None };
                let mut gg = if want_g { Some(self.take_or_zeros(grads, gate)) } else { None };
                for bi in 0..b {
                    for ci in 0..c {
                        for pix in 0..h * w {
                            let base = ((bi * c + ci) * h * w + pix) * r;
                            for i in 0..r {
                                let go = g[base + i];
                                let ta = math::tanh(gv[ci * r + i]);
                                let tv = math::tanh(src[base + i]);
                                if let Some(giv) = gi.as_deref_mut() {
                                    giv[base + i] += go * (1.0 + ta * (1.0 - tv * tv));
                                }
                                if let Some(ggv) = gg.as_deref_mut() {
                                    ggv[ci * r + i] += go * tv * (1.0 - ta * ta);
                                }
                            }
                        }
                    }
                }
                if let Some(v) = gi { grads[input.0] = Some(v); }
                if let Some(v) = gg { grads[gate.0] = Some(v); }
            }
        }
    }
}
