//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so node order is a
//! topological order and `backward` is a single reverse sweep. A tape lives for
//! one training step and is dropped afterwards.

use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Interpolation used by [`Tape::resample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

/// Gather/scatter pairs for one sparse convolution, grouped by kernel tap.
#[derive(Clone, Debug)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    pub kernel_size: usize,
    /// `pairs[kh * k + kw]` lists `(input_row, output_row)` contributions.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

#[derive(Clone, Debug)]
struct AxisInterp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<Real>,
    w_hi: Vec<Real>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Resample {
        x: Var,
        rows: AxisInterp,
        cols: AxisInterp,
    },
    Concat {
        parts: Vec<Var>,
    },
    Select {
        x: Var,
        index: usize,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Densify {
        x: Var,
        sites: Rc<Vec<usize>>,
    },
    SparseConv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        rules: Rc<Rulebook>,
    },
    /// Fused loss whose per-element derivative was computed in the forward pass.
    FusedLoss {
        x: Var,
        dloss: Vec<Real>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed ops for one computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const FOCAL_EPS: Real = 1e-4;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    fn rg_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.rg(v))
    }

    // ---------------------------------------------------------------- dense ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(
                op,
                format!("{:?} does not expand to {:?}", sb, sa),
            ));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may have a trailing sub-shape of `a` and is repeated over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let data: Vec<Real> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Elementwise product with the same expansion rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let data: Vec<Real> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > 0.0 { e } else { 0.0 });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(Real::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(Real::ln);
        let rg = self.rg(x);
        self.push(v, Op::Log(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {} out of range for {:?}", axis, shape),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| src[at(j)]).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as Real)
    }

    /// 2-D convolution of `x: [C_in, H, W]` with `kernel: [C_out, C_in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?}", xs, ks),
            ));
        }
        let k = ks[2];
        if k % 2 == 0 || stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel size {} must be odd and stride {} positive", k, stride),
            ));
        }
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {}x{} larger than padded input {:?} (pad {})", k, k, xs, pad),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ks[0]),
                ));
            }
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[0], k, stride, pad);
        let mut out = vec![0.0; geom.co * geom.ho * geom.wo];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (co, chunk) in out.chunks_mut(geom.ho * geom.wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[co]);
            }
        }
        geom.forward(self.value(x).data(), self.value(kernel).data(), &mut out);
        let mut ins = vec![x, kernel];
        ins.extend(bias);
        let rg = self.rg_any(&ins);
        let shape = vec![geom.co, geom.ho, geom.wo];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Max pooling over `[C, H, W]`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || kernel == 0 || stride == 0 || xs[1] + 2 * pad < kernel || xs[2] + 2 * pad < kernel {
            return Err(Error::dim(
                "max_pool2d",
                format!("input {:?} with kernel {} stride {} pad {}", xs, kernel, stride, pad),
            ));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (ch * h + iy as usize) * w + ix as usize;
                            if src[i] > best || best_i == usize::MAX {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![c, ho, wo], out)?,
            Op::MaxPool2d { x, argmax },
            rg,
        ))
    }

    /// Resample `[C, H, W]` onto an `out_h x out_w` grid covering the same extent.
    ///
    /// Sample positions are cell centers (half-pixel convention), so integer
    /// factors give block replication (nearest) or the usual bilinear upsample.
    pub fn resample(&mut self, x: Var, out_h: usize, out_w: usize, mode: UpsampleMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 || xs[2] == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "resample",
                format!("cannot resample {:?} to {}x{}", xs, out_h, out_w),
            ));
        }
        let rows = AxisInterp::new(xs[1], out_h, mode);
        let cols = AxisInterp::new(xs[2], out_w, mode);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1, wy0, wy1) = (rows.lo[oy], rows.hi[oy], rows.w_lo[oy], rows.w_hi[oy]);
                for ox in 0..out_w {
                    let (x0, x1, wx0, wx1) = (cols.lo[ox], cols.hi[ox], cols.w_lo[ox], cols.w_hi[ox]);
                    let top = wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1];
                    let bot = wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1];
                    out[(ch * out_h + oy) * out_w + ox] = wy0 * top + wy1 * bot;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![c, out_h, out_w], out)?,
            Op::Resample { x, rows, cols },
            rg,
        ))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::dim("upsample_bilinear", format!("{:?} by {}", s, factor)));
        }
        self.resample(x, s[1] * factor, s[2] * factor, UpsampleMode::Bilinear)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::dim("upsample_nearest", format!("{:?} by {}", s, factor)));
        }
        self.resample(x, s[1] * factor, s[2] * factor, UpsampleMode::Nearest)
    }

    /// Concatenate along axis 0; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} does not stack with trailing dims {:?}", s, tail),
                ));
            }
            lead += s[0];
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg_any(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `index` out of axis 0, dropping that axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(Error::dim("select", format!("index {} of {:?}", index, s)));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(s[1..].to_vec(), data)?,
            Op::Select { x, index },
            rg,
        ))
    }

    /// Per-segment elementwise max of the rows of `x: [N, E]`.
    ///
    /// `offsets` is a CSR row pointer of length `P + 1`; every segment must be nonempty.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || offsets.first() != Some(&0) || offsets.last() != Some(&s[0]) {
            return Err(Error::dim(
                "segment_max",
                format!("offsets do not cover input {:?}", s),
            ));
        }
        let e = s[1];
        let p = offsets.len() - 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; p * e];
        let mut argmax = vec![0usize; p * e];
        for seg in 0..p {
            let (lo, hi) = (offsets[seg], offsets[seg + 1]);
            if hi <= lo {
                return Err(Error::Contract(format!("segment {} is empty", seg)));
            }
            for j in 0..e {
                let mut best = src[lo * e + j];
                let mut best_row = lo;
                for r in lo + 1..hi {
                    let v = src[r * e + j];
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                out[seg * e + j] = best;
                argmax[seg * e + j] = best_row * e + j;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![p, e], out)?,
            Op::SegmentMax { x, argmax },
            rg,
        ))
    }

    /// Scatter rows of `x: [n, C]` to flat sites of an `H x W` grid, producing `[C, H, W]`.
    pub fn densify(&mut self, x: Var, sites: Rc<Vec<usize>>, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != sites.len() {
            return Err(Error::dim(
                "densify",
                format!("{} sites for features {:?}", sites.len(), s),
            ));
        }
        let c = s[1];
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * hw];
        for (row, &site) in sites.iter().enumerate() {
            if site >= hw {
                return Err(Error::dim("densify", format!("site {} outside {}x{}", site, h, w)));
            }
            for ch in 0..c {
                out[ch * hw + site] = src[row * c + ch];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::Densify { x, sites }, rg))
    }

    /// Sparse convolution of site features `x: [n_in, C_in]` along a precomputed rulebook.
    pub fn sparse_conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        rules: Rc<Rulebook>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let k = rules.kernel_size;
        if xs.len() != 2 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != k || ks[3] != k || xs[0] != rules.n_in {
            return Err(Error::dim(
                "sparse_conv",
                format!("features {:?}, kernel {:?}, rulebook k={} n_in={}", xs, ks, k, rules.n_in),
            ));
        }
        let (co, ci) = (ks[0], ks[1]);
        let mut out = vec![0.0; rules.n_out * co];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            if bv.len() != co {
                return Err(Error::dim("sparse_conv", format!("bias of {} for {} channels", bv.len(), co)));
            }
            for row in out.chunks_mut(co) {
                row.copy_from_slice(bv);
            }
        }
        let src = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut tap_w = vec![0.0; co * ci];
        for (tap, pairs) in rules.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            extract_tap(kv, co, ci, k, tap, &mut tap_w);
            for &(i, o) in pairs {
                let xin = &src[i as usize * ci..(i as usize + 1) * ci];
                let dst = &mut out[o as usize * co..(o as usize + 1) * co];
                for (c_out, d) in dst.iter_mut().enumerate() {
                    let wrow = &tap_w[c_out * ci..(c_out + 1) * ci];
                    *d += wrow.iter().zip(xin).map(|(a, b)| a * b).sum::<Real>();
                }
            }
        }
        let mut ins = vec![x, kernel];
        ins.extend(bias);
        let rg = self.rg_any(&ins);
        Ok(self.push(
            Tensor::new(vec![rules.n_out, co], out)?,
            Op::SparseConv {
                x,
                kernel,
                bias,
                rules,
            },
            rg,
        ))
    }

    /// Penalty-reduced focal loss on heatmap logits.
    ///
    /// Probabilities are `sigmoid(logits)` clamped to `[1e-4, 1 - 1e-4]`; cells whose
    /// target equals 1 are positives; the sum is normalized by `max(1, positives)`.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor, alpha: Real, beta: Real) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::dim(
                "focal_loss",
                format!("logits {:?} vs target {:?}", self.shape(logits), target.shape()),
            ));
        }
        let x = self.value(logits).data();
        let t = target.data();
        let npos = t.iter().filter(|&&v| v == 1.0).count();
        let norm = 1.0 / (npos.max(1) as Real);
        let mut total = 0.0;
        let mut dloss = vec![0.0; x.len()];
        for i in 0..x.len() {
            let p_raw = sigmoid(x[i]);
            let p = p_raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            let inside = p_raw > FOCAL_EPS && p_raw < 1.0 - FOCAL_EPS;
            let (l, dl_dp) = focal_term(p, t[i], alpha, beta);
            total += l;
            if inside {
                dloss[i] = dl_dp * p_raw * (1.0 - p_raw) * norm;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total * norm),
            Op::FusedLoss { x: logits, dloss },
            rg,
        ))
    }

    /// Masked L1: `sum(mask * |pred - target|) / max(1, sum(mask))`.
    ///
    /// `pred`/`target` are `[R, H, W]`; `mask` is `[H, W]` and is shared across channels.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps != target.shape() || ps.len() != 3 || mask.shape() != &ps[1..] {
            return Err(Error::dim(
                "masked_l1",
                format!("pred {:?}, target {:?}, mask {:?}", ps, target.shape(), mask.shape()),
            ));
        }
        let hw = ps[1] * ps[2];
        let m = mask.data();
        let npos: Real = m.iter().sum();
        let norm = 1.0 / npos.max(1.0);
        let p = self.value(pred).data();
        let t = target.data();
        let mut total = 0.0;
        let mut dloss = vec![0.0; p.len()];
        for i in 0..p.len() {
            let w = m[i % hw];
            if w == 0.0 {
                continue;
            }
            let d = p[i] - t[i];
            total += w * d.abs();
            dloss[i] = w * norm * sign(d);
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total * norm),
            Op::FusedLoss { x: pred, dloss },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Populate gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<Real>>], v: Var) -> Option<&'g mut Vec<Real>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..k {
                            let brow = &bv[j * n..(j + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + j] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<Real>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for j in 0..k {
                            let a_ij = av[i * k + j];
                            if a_ij == 0.0 {
                                continue;
                            }
                            for (dst, gv) in gb[j * n..(j + 1) * n].iter_mut().zip(grow) {
                                *dst += a_ij * gv;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(gb) = self.acc(grads, b) {
                    let n = gb.len().max(1);
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let n = bv.len().max(1);
                if let Some(ga) = self.acc(grads, a) {
                    for (i, v) in g.iter().enumerate() {
                        ga[i] += v * bv[i % n];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v * av[i];
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            &Op::Exp(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i];
                    }
                }
            }
            &Op::Log(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xv[i];
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                if let Some(gx) = self.acc(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: Real = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let xs = self.shape(x);
                let ks = self.shape(kernel);
                let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[0], ks[2], stride, pad);
                if let Some(b) = bias {
                    if let Some(gb) = self.acc(grads, b) {
                        for (co, chunk) in g.chunks(geom.ho * geom.wo).enumerate() {
                            gb[co] += chunk.iter().sum::<Real>();
                        }
                    }
                }
                if let Some(gk) = self.acc(grads, kernel) {
                    geom.backward_kernel(self.value(x).data(), g, gk);
                }
                if let Some(gx) = self.acc(grads, x) {
                    geom.backward_input(self.value(kernel).data(), g, gx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::Resample { x, rows, cols } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                if let Some(gx) = self.acc(grads, *x) {
                    for ch in 0..c {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, wy0, wy1) = (rows.lo[oy], rows.hi[oy], rows.w_lo[oy], rows.w_hi[oy]);
                            for ox in 0..ow {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                let (x0, x1, wx0, wx1) = (cols.lo[ox], cols.hi[ox], cols.w_lo[ox], cols.w_hi[ox]);
                                plane[y0 * w + x0] += gv * wy0 * wx0;
                                plane[y0 * w + x1] += gv * wy0 * wx1;
                                plane[y1 * w + x0] += gv * wy1 * wx0;
                                plane[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, v)| *d += v);
                    }
                    offset += n;
                }
            }
            &Op::Select { x, index } => {
                let inner = g.len();
                if let Some(gx) = self.acc(grads, x) {
                    gx[index * inner..(index + 1) * inner]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::SegmentMax { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::Densify { x, sites } => {
                let c = node.value.shape()[0];
                let hw = node.value.len() / c.max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (row, &site) in sites.iter().enumerate() {
                        for ch in 0..c {
                            gx[row * c + ch] += g[ch * hw + site];
                        }
                    }
                }
            }
            Op::SparseConv {
                x,
                kernel,
                bias,
                rules,
            } => {
                let ks = self.shape(*kernel);
                let (co, ci, k) = (ks[0], ks[1], ks[2]);
                if let Some(b) = *bias {
                    if let Some(gb) = self.acc(grads, b) {
                        for row in g.chunks(co) {
                            gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                let xv = self.value(*x).data();
                if let Some(gk) = self.acc(grads, *kernel) {
                    let mut tap_g = vec![0.0; co * ci];
                    for (tap, pairs) in rules.pairs.iter().enumerate() {
                        if pairs.is_empty() {
                            continue;
                        }
                        tap_g.iter_mut().for_each(|v| *v = 0.0);
                        for &(i, o) in pairs {
                            let xin = &xv[i as usize * ci..(i as usize + 1) * ci];
                            let go = &g[o as usize * co..(o as usize + 1) * co];
                            for (c_out, &gv) in go.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                for (d, xvv) in tap_g[c_out * ci..(c_out + 1) * ci].iter_mut().zip(xin) {
                                    *d += gv * xvv;
                                }
                            }
                        }
                        let (kh, kw) = (tap / k, tap % k);
                        for c_out in 0..co {
                            for c_in in 0..ci {
                                gk[((c_out * ci + c_in) * k + kh) * k + kw] += tap_g[c_out * ci + c_in];
                            }
                        }
                    }
                }
                let kv = self.value(*kernel).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut tap_w = vec![0.0; co * ci];
                    for (tap, pairs) in rules.pairs.iter().enumerate() {
                        if pairs.is_empty() {
                            continue;
                        }
                        extract_tap(kv, co, ci, k, tap, &mut tap_w);
                        for &(i, o) in pairs {
                            let go = &g[o as usize * co..(o as usize + 1) * co];
                            let dst = &mut gx[i as usize * ci..(i as usize + 1) * ci];
                            for (c_out, &gv) in go.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                for (d, wv) in dst.iter_mut().zip(&tap_w[c_out * ci..(c_out + 1) * ci]) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
            Op::FusedLoss { x, dloss } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(dloss).for_each(|(d, v)| *d += g[0] * v);
                }
            }
        }
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Focal-loss term for one cell and its derivative with respect to `p`.
pub(crate) fn focal_term(p: Real, target: Real, alpha: Real, beta: Real) -> (Real, Real) {
    if target == 1.0 {
        let q = 1.0 - p;
        let l = -q.powf(alpha) * p.ln();
        let d = alpha * q.powf(alpha - 1.0) * p.ln() - q.powf(alpha) / p;
        (l, d)
    } else {
        let w = (1.0 - target).powf(beta);
        let l = -w * p.powf(alpha) * (1.0 - p).ln();
        let d = w * (-alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() + p.powf(alpha) / (1.0 - p));
        (l, d)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..k {
            let a_ij = a[i * k + j];
            if a_ij == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                *o += a_ij * bv;
            }
        }
    }
    out
}

fn extract_tap(kernel: &[Real], co: usize, ci: usize, k: usize, tap: usize, dst: &mut [Real]) {
    let (kh, kw) = (tap / k, tap % k);
    for c_out in 0..co {
        for c_in in 0..ci {
            dst[c_out * ci + c_in] = kernel[((c_out * ci + c_in) * k + kh) * k + kw];
        }
    }
}

impl AxisInterp {
    fn new(n_in: usize, n_out: usize, mode: UpsampleMode) -> Self {
        let mut s = AxisInterp {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            w_lo: Vec::with_capacity(n_out),
            w_hi: Vec::with_capacity(n_out),
        };
        for o in 0..n_out {
            match mode {
                UpsampleMode::Nearest => {
                    let i = (o * n_in / n_out).min(n_in - 1);
                    s.lo.push(i);
                    s.hi.push(i);
                    s.w_lo.push(1.0);
                    s.w_hi.push(0.0);
                }
                UpsampleMode::Bilinear => {
                    let src = ((o as Real + 0.5) * n_in as Real / n_out as Real - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    let frac = if i1 == i0 { 0.0 } else { src - i0 as Real };
                    s.lo.push(i0);
                    s.hi.push(i1);
                    s.w_lo.push(1.0 - frac);
                    s.w_hi.push(frac);
                }
            }
        }
        s
    }
}

/// Loop bounds shared by dense convolution forward and backward.
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(ci: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Output positions `o` in `0..n_out` whose input index `o*stride + tap - pad` lies in `0..n_in`.
    fn valid(&self, tap: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= n_in - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (n_in as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, n_out as isize);
        (lo.min(n_out as isize) as usize, hi.max(lo.min(n_out as isize)) as usize)
    }

    fn forward(&self, x: &[Real], kernel: &[Real], out: &mut [Real]) {
        let (k, s) = (self.k, self.stride);
        for co in 0..self.co {
            for ci in 0..self.ci {
                let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for kh in 0..k {
                    let (oy0, oy1) = self.valid(kh, self.h, self.ho);
                    for kw in 0..k {
                        let wv = kernel[((co * self.ci + ci) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = self.valid(kw, self.w, self.wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + kh - self.pad;
                            let irow = &xin[iy * self.w..(iy + 1) * self.w];
                            let orow = &mut out[(co * self.ho + oy) * self.wo..(co * self.ho + oy + 1) * self.wo];
                            if s == 1 {
                                let ix0 = ox0 + kw - self.pad;
                                for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * s + kw - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, kernel: &[Real], g: &[Real], gx: &mut [Real]) {
        let (k, s) = (self.k, self.stride);
        for co in 0..self.co {
            for ci in 0..self.ci {
                for kh in 0..k {
                    let (oy0, oy1) = self.valid(kh, self.h, self.ho);
                    for kw in 0..k {
                        let wv = kernel[((co * self.ci + ci) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = self.valid(kw, self.w, self.wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + kh - self.pad;
                            let grow = &g[(co * self.ho + oy) * self.wo..(co * self.ho + oy + 1) * self.wo];
                            let base = (ci * self.h + iy) * self.w;
                            if s == 1 {
                                let ix0 = ox0 + kw - self.pad;
                                for (d, gv) in gx[base + ix0..base + ix0 + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    gx[base + ox * s + kw - self.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_kernel(&self, x: &[Real], g: &[Real], gk: &mut [Real]) {
        let (k, s) = (self.k, self.stride);
        for co in 0..self.co {
            for ci in 0..self.ci {
                let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for kh in 0..k {
                    let (oy0, oy1) = self.valid(kh, self.h, self.ho);
                    for kw in 0..k {
                        let (ox0, ox1) = self.valid(kw, self.w, self.wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + kh - self.pad;
                            let irow = &xin[iy * self.w..(iy + 1) * self.w];
                            let grow = &g[(co * self.ho + oy) * self.wo..(co * self.ho + oy + 1) * self.wo];
                            if s == 1 {
                                let ix0 = ox0 + kw - self.pad;
                                acc += grow[ox0..ox1]
                                    .iter()
                                    .zip(&irow[ix0..ix0 + (ox1 - ox0)])
                                    .map(|(a, b)| a * b)
                                    .sum::<Real>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * irow[ox * s + kw - self.pad];
                                }
                            }
                        }
                        gk[((co * self.ci + ci) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
}
