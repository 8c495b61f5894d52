//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation as a node. Forward values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse. A graph built with
//! [`Graph::inference`] keeps values only, so the exact same forward code runs
//! with or without gradient bookkeeping and produces bit-identical results.

use std::collections::HashMap;

use crate::boxes::giou_with_grad;
use crate::params::{ParamId, ParamStore};
use crate::roi::{roi_samples, RoiSample};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, s: f64 },
    Relu(Var),
    Sigmoid(Var),
    Squash { x: Var, limit: f64 },
    Logit { x: Var, eps: f64 },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRowGroups { x: Var, group: usize },
    Reshape(Var),
    Transpose(Var),
    RoiAlign {
        fmap: Var,
        boxes: Var,
        samples: Vec<RoiSample>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        weight_sum: f64,
    },
    MatchedL1 {
        boxes: Var,
        pairs: Vec<(usize, [f64; 4])>,
        norm: f64,
    },
    MatchedGiou {
        boxes: Var,
        pairs: Vec<(usize, [f64; 4])>,
        norm: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    /// A graph that records operations for backpropagation.
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            bound: HashMap::new(),
        }
    }

    /// A value-only graph.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::training()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (never differentiated).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients are computed for (when the graph records).
    pub fn variable(&mut self, value: Tensor) -> Var {
        let requires_grad = self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a model parameter as a differentiable leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads.wrt(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = (av.rows(), av.cols());
        let (br, bc) = (bv.rows(), bv.cols());
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = vec![0.0; m * n];
        gemm(av.data(), ar, ac, ta, bv.data(), br, bc, tb, &mut out, false);
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        assert_eq!(bv.numel(), n, "bias width mismatch");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::AddRowBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|v| v * s);
        self.push(v, Op::Scale { x, s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Logistic of the input clamped to `[-limit, limit]`, so the output stays
    /// strictly inside `(0, 1)` even where `sigmoid` rounds to 0 or 1.
    pub fn squash(&mut self, x: Var, limit: f64) -> Var {
        let v = self.value(x).map(|v| sigmoid(v.clamp(-limit, limit)));
        self.push(v, Op::Squash { x, limit }, &[x])
    }

    /// Inverse of [`Graph::sigmoid`], with inputs clamped to `[eps, 1 - eps]`.
    pub fn logit(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x).map(|p| logit(p.clamp(eps, 1.0 - eps)));
        self.push(v, Op::Logit { x, eps }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..n {
                let h = (row[c] - mean) * istd;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// 2-D convolution of a single `[C, H, W]` image with weights `[O, C·k·k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let cols = im2col(self.value(x).data(), &geom);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let kk = geom.in_ch * geom.kernel * geom.kernel;
        let mut out = vec![0.0; geom.out_ch * ho * wo];
        gemm(
            self.value(w).data(),
            geom.out_ch,
            kk,
            false,
            &cols,
            kk,
            ho * wo,
            false,
            &mut out,
            false,
        );
        let bias = self.value(b).data();
        for (o, plane) in out.chunks_mut(ho * wo).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[o]);
        }
        let value = Tensor::new(vec![geom.out_ch, ho, wo], out).expect("conv shape");
        let cols = if self.record { cols } else { Vec::new() };
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![xv.rows(), len], data).expect("slice shape");
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let c = pv.cols();
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(pv.row(r));
            }
            offset += c;
        }
        let value = Tensor::new(vec![rows, total], data).expect("concat shape");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Averages consecutive groups of `group` rows: `[m·group, n] -> [m, n]`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let m = xv.rows() / group;
        let mut data = vec![0.0; m * n];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let dst = &mut data[(r / group) * n..(r / group + 1) * n];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![m, n], data).expect("pool shape");
        self.push(value, Op::MeanRowGroups { x, group }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape).expect("reshape");
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = transpose2(xv);
        self.push(value, Op::Transpose(x), &[x])
    }

    /// ROI-Align of `boxes [n, 4]` over `fmap [C, H, W]`: output `[n·p·p, C]`.
    pub fn roi_align(&mut self, fmap: Var, boxes: Var, beta: f64, pool: usize) -> Var {
        let (fv, bv) = (self.value(fmap), self.value(boxes));
        let (ch, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        let plane = h * w;
        let samples = roi_samples(bv, beta, pool, h, w);
        let mut out = vec![0.0; samples.len() * ch];
        for (t, s) in samples.iter().enumerate() {
            let dst = &mut out[t * ch..(t + 1) * ch];
            for (c, d) in dst.iter_mut().enumerate() {
                let base = &fv.data()[c * plane..(c + 1) * plane];
                *d = s.weights[0] * base[s.idx[0]]
                    + s.weights[1] * base[s.idx[1]]
                    + s.weights[2] * base[s.idx[2]]
                    + s.weights[3] * base[s.idx[3]];
            }
        }
        let value = Tensor::new(vec![samples.len(), ch], out).expect("roi shape");
        let samples = if self.record { samples } else { Vec::new() };
        self.push(value, Op::RoiAlign { fmap, boxes, samples }, &[fmap, boxes])
    }

    /// Weighted mean cross-entropy of `logits [n, k]` against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let k = lv.cols();
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            softmax_in_place(row);
            let lse = log_sum_exp(lv.row(r));
            total += weights[r] * (lse - lv.row(r)[targets[r]]);
            weight_sum += weights[r];
        }
        let loss = if weight_sum > 0.0 { total / weight_sum } else { 0.0 };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum,
            },
            &[logits],
        )
    }

    /// `Σ |boxes[q] - gt| / norm` over matched `(query, gt box)` pairs.
    pub fn matched_l1(&mut self, boxes: Var, pairs: &[(usize, [f64; 4])], norm: f64) -> Var {
        let bv = self.value(boxes);
        let mut total = 0.0;
        for (q, gt) in pairs {
            for k in 0..4 {
                total += (bv.get2(*q, k) - gt[k]).abs();
            }
        }
        self.push(
            Tensor::scalar(total / norm),
            Op::MatchedL1 {
                boxes,
                pairs: pairs.to_vec(),
                norm,
            },
            &[boxes],
        )
    }

    /// `Σ (1 - GIoU(boxes[q], gt)) / norm` over matched pairs.
    pub fn matched_giou(&mut self, boxes: Var, pairs: &[(usize, [f64; 4])], norm: f64) -> Var {
        let bv = self.value(boxes);
        let mut total = 0.0;
        for (q, gt) in pairs {
            let b = [bv.get2(*q, 0), bv.get2(*q, 1), bv.get2(*q, 2), bv.get2(*q, 3)];
            total += 1.0 - giou_with_grad(&b, gt).0;
        }
        self.push(
            Tensor::scalar(total / norm),
            Op::MatchedGiou {
                boxes,
                pairs: pairs.to_vec(),
                norm,
            },
            &[boxes],
        )
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (ar, ac, br, bc) = (av.rows(), av.cols(), bv.rows(), bv.cols());
                let (m, n) = (g.rows(), g.cols());
                if self.needs(a) {
                    let mut da = vec![0.0; av.numel()];
                    if ta {
                        // stored A is op(A)ᵀ, so dA = op(B) · dCᵀ
                        gemm(bv.data(), br, bc, tb, g.data(), m, n, true, &mut da, false);
                    } else {
                        gemm(g.data(), m, n, false, bv.data(), br, bc, !tb, &mut da, false);
                    }
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.needs(b) {
                    let mut db = vec![0.0; bv.numel()];
                    if tb {
                        gemm(g.data(), m, n, true, av.data(), ar, ac, ta, &mut db, false);
                    } else {
                        gemm(av.data(), ar, ac, !ta, g.data(), m, n, false, &mut db, false);
                    }
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.needs(b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, b, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            &Op::AddRowBias { x, bias } => {
                self.accumulate(grads, x, g.clone());
                if self.needs(bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(bias).shape().to_vec();
                    self.accumulate(grads, bias, Tensor::new(shape, db).unwrap());
                }
            }
            &Op::Scale { x, s } => self.accumulate(grads, x, g.map(|v| v * s)),
            &Op::Relu(x) => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            &Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            &Op::Squash { x, limit } => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(xv.data())
                    .map(|((&gv, &s), &v)| if v.abs() > limit { 0.0 } else { gv * s * (1.0 - s) })
                    .collect();
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            &Op::Logit { x, eps } => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &p)| {
                        if p < eps || p > 1.0 - eps {
                            0.0
                        } else {
                            gv / (p * (1.0 - p))
                        }
                    })
                    .collect();
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            &Op::SoftmaxRows(x) => {
                let n = g.cols();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..g.rows() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gam = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut d = vec![0.0; g.numel()];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            d[r * n + c] = inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for c in 0..n {
                            dg[c] += g.row(r)[c] * xhat[r * n + c];
                            db[c] += g.row(r)[c];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(gs, dg).unwrap());
                    self.accumulate(grads, *beta, Tensor::new(bs, db).unwrap());
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (ho, wo) = (geom.out_height(), geom.out_width());
                let plane = ho * wo;
                let kk = geom.in_ch * geom.kernel * geom.kernel;
                if self.needs(*w) {
                    let mut dw = vec![0.0; geom.out_ch * kk];
                    gemm(g.data(), geom.out_ch, plane, false, cols, kk, plane, true, &mut dw, false);
                    let s = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::new(s, dw).unwrap());
                }
                if self.needs(*b) {
                    let db = g.data().chunks(plane).map(|p| p.iter().sum()).collect();
                    let s = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(s, db).unwrap());
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; kk * plane];
                    let wv = self.value(*w).data();
                    gemm(wv, geom.out_ch, kk, true, g.data(), geom.out_ch, plane, false, &mut dcols, false);
                    let dx = col2im(&dcols, geom);
                    let s = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(s, dx).unwrap());
                }
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let (n, len) = (xv.cols(), g.cols());
                let mut d = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    d[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(pv.numel());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    }
                    offset += c;
                }
            }
            &Op::MeanRowGroups { x, group } => {
                let xv = self.value(x);
                let n = xv.cols();
                let inv = 1.0 / group as f64;
                let mut d = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    for c in 0..n {
                        d[r * n + c] = g.row(r / group)[c] * inv;
                    }
                }
                self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            &Op::Reshape(x) => {
                let s = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.clone().reshaped(&s).unwrap());
            }
            &Op::Transpose(x) => self.accumulate(grads, x, transpose2(g)),
            Op::RoiAlign {
                fmap,
                boxes,
                samples,
            } => {
                let fv = self.value(*fmap);
                let (ch, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
                let plane = h * w;
                if self.needs(*fmap) {
                    let mut d = vec![0.0; fv.numel()];
                    for (t, s) in samples.iter().enumerate() {
                        let gr = g.row(t);
                        for c in 0..ch {
                            let dst = &mut d[c * plane..(c + 1) * plane];
                            for k in 0..4 {
                                dst[s.idx[k]] += s.weights[k] * gr[c];
                            }
                        }
                    }
                    self.accumulate(grads, *fmap, Tensor::new(fv.shape().to_vec(), d).unwrap());
                }
                if self.needs(*boxes) {
                    let bshape = self.value(*boxes).shape().to_vec();
                    let mut d = vec![0.0; self.value(*boxes).numel()];
                    for (t, s) in samples.iter().enumerate() {
                        let gr = g.row(t);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for c in 0..ch {
                            let base = &fv.data()[c * plane..(c + 1) * plane];
                            let mut vx = 0.0;
                            let mut vy = 0.0;
                            for k in 0..4 {
                                vx += s.dweights_dx[k] * base[s.idx[k]];
                                vy += s.dweights_dy[k] * base[s.idx[k]];
                            }
                            gx += gr[c] * vx;
                            gy += gr[c] * vy;
                        }
                        for k in 0..4 {
                            d[s.box_index * 4 + k] += gx * s.dx_dbox[k] + gy * s.dy_dbox[k];
                        }
                    }
                    self.accumulate(grads, *boxes, Tensor::new(bshape, d).unwrap());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                weight_sum,
            } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let scale = if *weight_sum > 0.0 { g.data()[0] / weight_sum } else { 0.0 };
                let mut d = probs.clone();
                for r in 0..lv.rows() {
                    let row = &mut d[r * k..(r + 1) * k];
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= weights[r] * scale);
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d).unwrap());
            }
            Op::MatchedL1 { boxes, pairs, norm } => {
                let bv = self.value(*boxes);
                let mut d = vec![0.0; bv.numel()];
                let s = g.data()[0] / norm;
                for (q, gt) in pairs {
                    for k in 0..4 {
                        let diff = bv.get2(*q, k) - gt[k];
                        d[q * 4 + k] += s * sign(diff);
                    }
                }
                self.accumulate(grads, *boxes, Tensor::new(bv.shape().to_vec(), d).unwrap());
            }
            Op::MatchedGiou { boxes, pairs, norm } => {
                let bv = self.value(*boxes);
                let mut d = vec![0.0; bv.numel()];
                let s = g.data()[0] / norm;
                for (q, gt) in pairs {
                    let b = [bv.get2(*q, 0), bv.get2(*q, 1), bv.get2(*q, 2), bv.get2(*q, 3)];
                    let (_, gb) = giou_with_grad(&b, gt);
                    for k in 0..4 {
                        d[q * 4 + k] -= s * gb[k];
                    }
                }
                self.accumulate(grads, *boxes, Tensor::new(bv.shape().to_vec(), d).unwrap());
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose shape")
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = vec![0.0; g.in_ch * k * k * ho * wo];
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(c * g.height + iy as usize) * g.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut x = vec![0.0; g.in_ch * g.height * g.width];
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        x[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}
