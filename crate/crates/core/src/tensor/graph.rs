use super::kernels::{adaptive_window, dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{shape_err, Tensor, TensorError};
use statrs::function::erf::erf;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulBt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2d {
        x: Var,
        k: usize,
        stride: usize,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    CcLoss {
        pred: Var,
        a: Vec<f64>,
        b: Vec<f64>,
        saa: f64,
        sbb: f64,
        r: f64,
        degenerate: bool,
    },
    WeightedCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Dot {
        x: Var,
        c: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Nodes are appended in evaluation order, so the node list
/// is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every leaf that required one, keyed by its [`Var`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_var: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_var.get(&v).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &[f64])> {
        self.by_var.iter().map(|(v, g)| (*v, g.as_slice()))
    }
}

fn dims2(dims: &[usize], op: &'static str) -> Result<(usize, usize), TensorError> {
    match dims {
        [n, d] => Ok((*n, *d)),
        other => Err(shape_err(op, format!("expected 2-D input, got {other:?}"))),
    }
}

fn dims3(dims: &[usize], op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match dims {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(shape_err(op, format!("expected 3-D input, got {other:?}"))),
    }
}

/// Lazily materialized gradient buffer for an input that needs one.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (ov, &xv) in o.iter_mut().zip(row) {
            *ov = (xv - max).exp();
            sum += *ov;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; it receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            dims: t.dims().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, dims: &[usize], data: Vec<f64>) -> Result<Var, TensorError> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(shape_err("constant", format!("dims {dims:?} vs {} values", data.len())));
        }
        self.nodes.push(Node {
            dims: dims.to_vec(),
            value: data,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    /// True if `v` is a CC loss whose prediction was constant.
    pub fn is_degenerate(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::CcLoss { degenerate: true, .. })
    }

    /// `x[n,d_in] · w[d_in,d_out] + b[d_out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (n, din) = dims2(self.dims(x), "linear")?;
        let (win, dout) = dims2(self.dims(w), "linear")?;
        if win != din || self.dims(b) != [dout] {
            return Err(shape_err(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", self.dims(x), self.dims(w), self.dims(b)),
            ));
        }
        let bias = self.value(b);
        let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        matmul_acc(self.value(x), self.value(w), &mut out, n, din, dout);
        Ok(self.push(vec![n, dout], out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// `a[n,k] · b[k,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = dims2(self.dims(a), "matmul")?;
        let (k2, m) = dims2(self.dims(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.dims(a), self.dims(b))));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a), self.value(b), &mut out, n, k, m);
        Ok(self.push(vec![n, m], out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a[n,k] · b[m,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = dims2(self.dims(a), "matmul_bt")?;
        let (m, k2) = dims2(self.dims(b), "matmul_bt")?;
        if k != k2 {
            return Err(shape_err(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", self.dims(a), self.dims(b)),
            ));
        }
        let mut out = vec![0.0; n * m];
        matmul_bt_acc(self.value(a), self.value(b), &mut out, n, k, m);
        Ok(self.push(vec![n, m], out, Op::MatMulBt { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.dims(a), self.dims(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.dims(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.dims(x).to_vec(), out, Op::Scale { x, s }, &[x])
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (n, d) = dims2(self.dims(x), "layer_norm")?;
        if d < 2 || self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.dims(x),
                    self.dims(gamma),
                    self.dims(beta)
                ),
            ));
        }
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for (i, row) in self.value(x).chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + bt[j];
            }
        }
        Ok(self.push(
            vec![n, d],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let k = *self.dims(x).last().expect("tensors have at least one dim");
        let out = softmax_rows(self.value(x), k);
        self.push(self.dims(x).to_vec(), out, Op::Softmax { x }, &[x])
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.dims(x).to_vec(), out, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.dims(x).to_vec(), out, Op::Relu { x }, &[x])
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (n, d) = dims2(self.dims(x), "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(shape_err("slice_cols", format!("{start}..{} of {d}", start + len)));
        }
        let out = self
            .value(x)
            .chunks_exact(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![n, len], out, Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (n, _) = dims2(self.dims(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pd) = dims2(self.dims(*p), "concat_cols")?;
            if pn != n {
                return Err(shape_err("concat_cols", format!("row counts {n} vs {pn}")));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![n, total], out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.dims(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            let d = self.dims(*p);
            if d[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{d:?} vs trailing {tail:?}")));
            }
            lead += d[0];
            out.extend_from_slice(self.value(*p));
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        Ok(self.push(dims, out, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, TensorError> {
        if dims.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {dims:?}", self.dims(x))));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(dims.to_vec(), out, Op::Reshape { x }, &[x]))
    }

    /// Per-pixel channel mixing: `x[c_in,h,w]`, `w[c_in,c_out]`, `b[c_out]` → `[c_out,h,w]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (cin, h, wd) = dims3(self.dims(x), "conv1x1")?;
        let (win, cout) = dims2(self.dims(w), "conv1x1")?;
        if win != cin || self.dims(b) != [cout] {
            return Err(shape_err(
                "conv1x1",
                format!("x {:?}, w {:?}, b {:?}", self.dims(x), self.dims(w), self.dims(b)),
            ));
        }
        let p = h * wd;
        let mut out = vec![0.0; cout * p];
        for (o, chunk) in out.chunks_exact_mut(p).enumerate() {
            chunk.fill(self.value(b)[o]);
        }
        // out[cout,p] += wᵀ[cout,cin] · x[cin,p]
        matmul_at_acc(self.value(w), self.value(x), &mut out, cin, cout, p);
        Ok(self.push(vec![cout, h, wd], out, Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    /// Window means over `[c,h,w]`; output is `⌊(h−k)/stride⌋+1` per axis.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let (c, h, w) = dims3(self.dims(x), "avg_pool2d")?;
        if h < k || w < k || k == 0 || stride == 0 {
            return Err(TensorError::InputTooSmall { h, w, k });
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xv = self.value(x);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..k {
                        let row = &plane[(i * stride + di) * w + j * stride..];
                        s += row[..k].iter().sum::<f64>();
                    }
                    out[(ch * oh + i) * ow + j] = s * inv;
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::AvgPool2d { x, k, stride }, &[x]))
    }

    /// Adaptive average pooling of `[c,h,w]` to `[c,out_h,out_w]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        let (c, h, w) = dims3(self.dims(x), "adaptive_avg_pool")?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("adaptive_avg_pool", "output must be at least 1x1"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for i in 0..out_h {
                let (r0, r1) = adaptive_window(i, h, out_h);
                for j in 0..out_w {
                    let (c0, c1) = adaptive_window(j, w, out_w);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    out[(ch * out_h + i) * out_w + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        Ok(self.push(vec![c, out_h, out_w], out, Op::AdaptiveAvgPool { x }, &[x]))
    }

    /// `1 − Pearson(pred, gt)` as a scalar. A constant prediction yields a
    /// loss of exactly 1 with zero gradient; see [`Graph::is_degenerate`].
    pub fn cc_loss(&mut self, pred: Var, gt: &[f64]) -> Result<Var, TensorError> {
        let pv = self.value(pred);
        if pv.len() != gt.len() {
            return Err(shape_err(
                "cc_loss",
                format!("{} predictions vs {} targets", pv.len(), gt.len()),
            ));
        }
        let n = gt.len() as f64;
        let mp = pv.iter().sum::<f64>() / n;
        let mg = gt.iter().sum::<f64>() / n;
        let a: Vec<f64> = pv.iter().map(|v| v - mp).collect();
        let b: Vec<f64> = gt.iter().map(|v| v - mg).collect();
        let sbb = b.iter().map(|v| v * v).sum::<f64>();
        if !(sbb > 0.0) {
            return Err(TensorError::DegenerateTarget);
        }
        let saa = a.iter().map(|v| v * v).sum::<f64>();
        let degenerate = !(saa > 0.0);
        let r = if degenerate {
            0.0
        } else {
            dot(&a, &b) / (saa.sqrt() * sbb.sqrt())
        };
        Ok(self.push(
            vec![1],
            vec![1.0 - r],
            Op::CcLoss {
                pred,
                a,
                b,
                saa,
                sbb,
                r,
                degenerate,
            },
            &[pred],
        ))
    }

    /// `−Σ w_{y_i} log softmax(logits_i)[y_i] / Σ w_{y_i}` over rows of `logits[n,k]`.
    pub fn weighted_ce_loss(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Var, TensorError> {
        let (n, k) = dims2(self.dims(logits), "weighted_ce_loss")?;
        if labels.len() != n || class_weights.len() != k {
            return Err(shape_err(
                "weighted_ce_loss",
                format!(
                    "{n} rows, {} labels, {k} classes, {} weights",
                    labels.len(),
                    class_weights.len()
                ),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let probs = softmax_rows(self.value(logits), k);
        let lv = self.value(logits);
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = class_weights[y];
            num += w * (lse - row[y]);
            den += w;
        }
        let weights: Vec<f64> = labels.iter().map(|&y| class_weights[y] / den).collect();
        Ok(self.push(
            vec![1],
            vec![num / den],
            Op::WeightedCe {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            &[logits],
        ))
    }

    /// `Σ x_i c_i` for a fixed coefficient vector; handy for scalarizing outputs.
    pub fn dot_const(&mut self, x: Var, c: &[f64]) -> Result<Var, TensorError> {
        if self.value(x).len() != c.len() {
            return Err(shape_err(
                "dot_const",
                format!("{} vs {}", self.value(x).len(), c.len()),
            ));
        }
        let v = dot(self.value(x), c);
        Ok(self.push(vec![1], vec![v], Op::Dot { x, c: c.to_vec() }, &[x]))
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to
    /// every leaf that requires one. The graph is not consumed, so calling
    /// this twice yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.dims(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let by_var = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.needs_grad)
            .map(|(i, n)| (Var(i), grads[i].take().unwrap_or_else(|| vec![0.0; n.value.len()])))
            .collect();
        Ok(Gradients { by_var })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = (nodes[x.0].dims[0], nodes[x.0].dims[1]);
                let dout = nodes[w.0].dims[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    matmul_bt_acc(g, &nodes[w.0].value, gx, n, dout, din);
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    matmul_at_acc(&nodes[x.0].value, g, gw, n, din, dout);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                let m = nodes[b.0].dims[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_bt_acc(g, &nodes[b.0].value, ga, n, m, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_acc(&nodes[a.0].value, g, gb, n, k, m);
                }
            }
            Op::MatMulBt { a, b } => {
                let (n, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                let m = nodes[b.0].dims[0];
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_acc(g, &nodes[b.0].value, ga, n, m, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // gb[m,k] += gᵀ[m,n] · a[n,k]
                    matmul_at_acc(g, &nodes[a.0].value, gb, n, m, k);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[x.0].dims[1];
                let gv = &nodes[gamma.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (i, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for grow in g.chunks_exact(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Softmax { x } => {
                let k = *node.dims.last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((grow, yrow), out) in g
                        .chunks_exact(k)
                        .zip(node.value.chunks_exact(k))
                        .zip(gx.chunks_exact_mut(k))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..k {
                            out[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let d = nodes[x.0].dims[1];
                let len = node.dims[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (grow, xrow) in g.chunks_exact(len).zip(gx.chunks_exact_mut(d)) {
                        xrow[*start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let (n, total) = (node.dims[0], node.dims[1]);
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].dims[1];
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for i in 0..n {
                            let src = &g[i * total + offset..i * total + offset + w];
                            gp[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let (cin, h, wd) = (nodes[x.0].dims[0], nodes[x.0].dims[1], nodes[x.0].dims[2]);
                let cout = nodes[w.0].dims[1];
                let p = h * wd;
                if let Some(gx) = slot(nodes, grads, *x) {
                    // gx[cin,p] += w[cin,cout] · g[cout,p]
                    matmul_acc(&nodes[w.0].value, g, gx, cin, cout, p);
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    // gw[cin,cout] += x[cin,p] · g[cout,p]ᵀ
                    matmul_bt_acc(&nodes[x.0].value, g, gw, cin, p, cout);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (o, chunk) in g.chunks_exact(p).enumerate() {
                        gb[o] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::AvgPool2d { x, k, stride } => {
                let (c, h, w) = (nodes[x.0].dims[0], nodes[x.0].dims[1], nodes[x.0].dims[2]);
                let (oh, ow) = (node.dims[1], node.dims[2]);
                let inv = 1.0 / (k * k) as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g[(ch * oh + i) * ow + j] * inv;
                                for di in 0..*k {
                                    let base = ch * h * w + (i * stride + di) * w + j * stride;
                                    gx[base..base + k].iter_mut().for_each(|v| *v += gv);
                                }
                            }
                        }
                    }
                }
            }
            Op::AdaptiveAvgPool { x } => {
                let (c, h, w) = (nodes[x.0].dims[0], nodes[x.0].dims[1], nodes[x.0].dims[2]);
                let (oh, ow) = (node.dims[1], node.dims[2]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        for i in 0..oh {
                            let (r0, r1) = adaptive_window(i, h, oh);
                            for j in 0..ow {
                                let (c0, c1) = adaptive_window(j, w, ow);
                                let gv = g[(ch * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    let base = ch * h * w + r * w;
                                    gx[base + c0..base + c1].iter_mut().for_each(|v| *v += gv);
                                }
                            }
                        }
                    }
                }
            }
            Op::CcLoss {
                pred,
                a,
                b,
                saa,
                sbb,
                r,
                degenerate,
            } => {
                if *degenerate {
                    return;
                }
                if let Some(gp) = slot(nodes, grads, *pred) {
                    let norm = 1.0 / (saa.sqrt() * sbb.sqrt());
                    for ((o, ai), bi) in gp.iter_mut().zip(a).zip(b) {
                        // d(1 − r)/dp_i
                        *o -= g[0] * (bi * norm - r * ai / saa);
                    }
                }
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = nodes[logits.0].dims[1];
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        for j in 0..k {
                            let target = if j == y { 1.0 } else { 0.0 };
                            gl[i * k + j] += g[0] * w * (probs[i * k + j] - target);
                        }
                    }
                }
            }
            Op::Dot { x, c } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(c).for_each(|(a, b)| *a += g[0] * b);
                }
            }
        }
    }
}
