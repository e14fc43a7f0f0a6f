//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] records every value produced during one forward pass. Calling
//! [`Tape::backward`] walks the tape in reverse and returns the gradient of a
//! scalar loss with respect to every node that requires one. Tapes built with
//! [`Tape::no_grad`] skip all bookkeeping needed for the backward pass.

use rand::Rng;

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention visibility pattern over a sequence of length `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every position attends to every position.
    Full,
    /// The last position is a query: it attends to everything, while all
    /// earlier positions attend only among themselves.
    QueryLast,
}

impl AttentionMask {
    /// Exclusive upper bound of the key positions visible from `pos`.
    #[inline]
    pub fn visible(self, pos: usize, len: usize) -> usize {
        match self {
            AttentionMask::Full => len,
            AttentionMask::QueryLast => {
                if pos + 1 == len {
                    len
                } else {
                    len - 1
                }
            }
        }
    }
}

/// Convolution geometry for NHWC inputs and `[kh, kw, cin, cout]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        (in_h, in_w, in_c): (usize, usize, usize),
        kernel: usize,
        stride: usize,
        pad: usize,
        out_c: usize,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        assert!(
            in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel,
            "conv kernel larger than padded input"
        );
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
            out_c,
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn out_pixels(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// One rectangular copy inside a [`Tape::stitch`] output.
#[derive(Clone, Copy, Debug)]
pub struct Piece {
    pub src: Var,
    pub src_row: usize,
    pub rows: usize,
    pub dst_row: usize,
    pub dst_col: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Relu(Var),
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        pixels: usize,
        channels: usize,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MeanGroups {
        x: Var,
        groups: usize,
        per: usize,
        cols: usize,
    },
    Attention {
        qkv: Var,
        seqs: usize,
        len: usize,
        heads: usize,
        mask: AttentionMask,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Stitch {
        pieces: Vec<Piece>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
    Triplet {
        emb: Var,
        triplets: Vec<(usize, usize, usize)>,
        active: Vec<bool>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation recorder for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_slot<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> &'g mut [T] {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
    }
    slot.as_mut().expect("slot initialised").data_mut()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input value. `requires_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.numel(), vb.numel(), "add: size mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `x + b` where `b` is tiled over `x`; `b.numel()` must divide `x.numel()`.
    /// With `b` of length `cols` this is a per-row bias.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let bn = vb.numel();
        assert!(bn > 0 && vx.numel() % bn == 0, "add_broadcast: incompatible sizes");
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(bn) {
            for (d, &bv) in chunk.iter_mut().zip(vb.data()) {
                *d += bv;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddBroadcast(x, b), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.nodes[x.0].value.clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// `x @ w (+ b)` where `x` is viewed as `[rows, in]` and `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        assert_eq!(vw.shape().len(), 2, "linear: weight must be 2-D");
        let (in_dim, out_dim) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.cols(), in_dim, "linear: input width mismatch");
        let rows = vx.rows();
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let vb = &self.nodes[b.0].value;
            assert_eq!(vb.numel(), out_dim, "linear: bias size mismatch");
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(vb.data());
            }
        }
        gemm(rows, in_dim, out_dim, vx.data(), false, vw.data(), false, &mut out, b.is_some());
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = out_dim;
        let rg = self.rg(&[x, w]) || b.map(|b| self.rg(&[b])).unwrap_or(false);
        self.push(
            Tensor::new(shape, out),
            Op::Linear {
                x,
                w,
                b,
                rows,
                in_dim,
                out_dim,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout. A rate of zero records an identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let vx = &self.nodes[x.0].value;
        let mask: Vec<T> = (0..vx.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Group normalisation of an NHWC tensor viewed as `[batch, pixels, channels]`
    /// with per-channel affine parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        groups: usize,
        eps: f64,
    ) -> Var {
        let vx = &self.nodes[x.0].value;
        let channels = vx.cols();
        assert!(groups >= 1 && channels % groups == 0, "group_norm: bad group count");
        assert_eq!(vx.numel() % (batch * channels), 0, "group_norm: bad batch size");
        let pixels = vx.numel() / (batch * channels);
        let (g_val, b_val) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        assert_eq!(g_val.numel(), channels);
        assert_eq!(b_val.numel(), channels);
        let cpg = channels / groups;
        let count = T::from_f64((pixels * cpg) as f64);
        let eps = T::from_f64(eps);
        let xd = vx.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); batch * groups];
        let mut out = vec![T::zero(); xd.len()];
        for n in 0..batch {
            let base = n * pixels * channels;
            for g in 0..groups {
                let c0 = g * cpg;
                let mut mean = T::zero();
                for p in 0..pixels {
                    let row = base + p * channels + c0;
                    for &v in &xd[row..row + cpg] {
                        mean += v;
                    }
                }
                mean /= count;
                let mut var = T::zero();
                for p in 0..pixels {
                    let row = base + p * channels + c0;
                    for &v in &xd[row..row + cpg] {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                var /= count;
                let r = T::one() / (var + eps).sqrt();
                rstd[n * groups + g] = r;
                for p in 0..pixels {
                    let row = base + p * channels + c0;
                    for c in 0..cpg {
                        let h = (xd[row + c] - mean) * r;
                        xhat[row + c] = h;
                        out[row + c] = h * g_val.data()[c0 + c] + b_val.data()[c0 + c];
                    }
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                batch,
                pixels,
                channels,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let rows = self.nodes[x.0].value.rows();
        self.group_norm(x, gamma, beta, rows, 1, eps)
    }

    /// 2-D convolution on an NHWC tensor via an explicit patch matrix.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        assert_eq!(vx.shape().len(), 4, "conv2d: input must be NHWC");
        assert_eq!(vw.shape().len(), 4, "conv2d: weight must be [k, k, cin, cout]");
        let s = vx.shape();
        let ws = vw.shape();
        assert_eq!(ws[0], ws[1], "conv2d: square kernels only");
        assert_eq!(ws[2], s[3], "conv2d: channel mismatch");
        let geom = ConvGeom::new(s[0], (s[1], s[2], s[3]), ws[0], stride, pad, ws[3]);
        let cols = im2col(vx.data(), &geom);
        let rows = geom.out_pixels();
        let mut out = vec![T::zero(); rows * geom.out_c];
        if let Some(b) = b {
            let vb = &self.nodes[b.0].value;
            assert_eq!(vb.numel(), geom.out_c);
            for r in 0..rows {
                out[r * geom.out_c..(r + 1) * geom.out_c].copy_from_slice(vb.data());
            }
        }
        gemm(
            rows,
            geom.patch_len(),
            geom.out_c,
            &cols,
            false,
            vw.data(),
            false,
            &mut out,
            b.is_some(),
        );
        let shape = vec![geom.batch, geom.out_h, geom.out_w, geom.out_c];
        let rg = self.rg(&[x, w]) || b.map(|b| self.rg(&[b])).unwrap_or(false);
        let cols = if rg { cols } else { Vec::new() };
        self.push(
            Tensor::new(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Mean over consecutive blocks of `per` rows: `[groups * per, C] -> [groups, C]`.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let cols = vx.cols();
        let rows = vx.rows();
        assert!(groups > 0 && rows % groups == 0, "mean_groups: bad group count");
        let per = rows / groups;
        let inv = T::one() / T::from_f64(per as f64);
        let mut out = vec![T::zero(); groups * cols];
        for g in 0..groups {
            let dst = &mut out[g * cols..(g + 1) * cols];
            for r in 0..per {
                for (d, &v) in dst.iter_mut().zip(vx.row(g * per + r)) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![groups, cols], out),
            Op::MeanGroups {
                x,
                groups,
                per,
                cols,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[seqs * len, 3 * dim]` with query, key and value blocks laid
    /// out side by side; the result is `[seqs * len, dim]`. Each output row is
    /// reduced only over the key positions its mask allows.
    pub fn attention(
        &mut self,
        qkv: Var,
        seqs: usize,
        len: usize,
        heads: usize,
        mask: AttentionMask,
    ) -> Var {
        let v = &self.nodes[qkv.0].value;
        assert_eq!(v.rows(), seqs * len, "attention: row count mismatch");
        assert_eq!(v.cols() % 3, 0, "attention: qkv width must be 3*dim");
        let dim = v.cols() / 3;
        assert_eq!(dim % heads, 0, "attention: dim not divisible by heads");
        let hd = dim / heads;
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let qkv_d = v.data();
        let width = 3 * dim;
        let mut probs = vec![T::zero(); seqs * heads * len * len];
        let mut out = vec![T::zero(); seqs * len * dim];
        let mut scores = vec![T::zero(); len];
        for s in 0..seqs {
            for h in 0..heads {
                let qo = h * hd;
                let ko = dim + h * hd;
                let vo = 2 * dim + h * hd;
                for i in 0..len {
                    let lim = mask.visible(i, len);
                    let qi = &qkv_d[(s * len + i) * width + qo..][..hd];
                    let mut mx = T::neg_infinity();
                    for j in 0..lim {
                        let kj = &qkv_d[(s * len + j) * width + ko..][..hd];
                        let mut dot = T::zero();
                        for t in 0..hd {
                            dot += qi[t] * kj[t];
                        }
                        let sc = dot * scale;
                        scores[j] = sc;
                        if sc > mx {
                            mx = sc;
                        }
                    }
                    let mut z = T::zero();
                    for sc in scores.iter_mut().take(lim) {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    let prow = &mut probs[((s * heads + h) * len + i) * len..][..len];
                    let orow = &mut out[(s * len + i) * dim + h * hd..][..hd];
                    for j in 0..lim {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &qkv_d[(s * len + j) * width + vo..][..hd];
                        for t in 0..hd {
                            orow[t] += p * vj[t];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[qkv]);
        let probs = if rg { probs } else { Vec::new() };
        self.push(
            Tensor::new(vec![seqs * len, dim], out),
            Op::Attention {
                qkv,
                seqs,
                len,
                heads,
                mask,
                probs,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let cols = vx.cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < vx.rows(), "gather_rows: index {i} out of range");
            out.extend_from_slice(vx.row(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![idx.len(), cols], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Assembles a `[rows, cols]` matrix from row blocks of other values.
    /// Cells not covered by any piece are zero.
    pub fn stitch(&mut self, rows: usize, cols: usize, pieces: Vec<Piece>) -> Var {
        let mut out = vec![T::zero(); rows * cols];
        for p in &pieces {
            let src = &self.nodes[p.src.0].value;
            let w = src.cols();
            assert!(p.src_row + p.rows <= src.rows(), "stitch: source rows out of range");
            assert!(p.dst_row + p.rows <= rows, "stitch: destination rows out of range");
            assert!(p.dst_col + w <= cols, "stitch: destination cols out of range");
            for r in 0..p.rows {
                let d = (p.dst_row + r) * cols + p.dst_col;
                out[d..d + w].copy_from_slice(src.row(p.src_row + r));
            }
        }
        let srcs: Vec<Var> = pieces.iter().map(|p| p.src).collect();
        let rg = self.rg(&srcs);
        self.push(Tensor::new(vec![rows, cols], out), Op::Stitch { pieces }, rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let cols = vx.cols();
        let rows = vx.rows();
        let tiny = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for r in 0..rows {
            let row = vx.row(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![rows, cols], out),
            Op::L2Normalize { x, norms },
            rg,
        )
    }

    /// Mean label-smoothed cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Var {
        let vl = &self.nodes[logits.0].value;
        let classes = vl.cols();
        let rows = vl.rows();
        assert_eq!(rows, targets.len(), "cross_entropy: target count mismatch");
        let eps = T::from_f64(smoothing);
        let mut probs = Vec::with_capacity(vl.numel());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < classes, "cross_entropy: target out of range");
            let row = vl.row(r);
            let (loss, p) = smoothed_ce_row(row, t, eps);
            total += loss;
            probs.extend(p);
        }
        let out = Tensor::scalar(total / T::from_f64(rows as f64));
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                probs,
            },
            rg,
        )
    }

    /// Mean of `max(0, |a-p|^2 - |a-n|^2 + margin)` over the given index
    /// triplets of the rows of `emb`. An empty triplet list yields zero.
    pub fn triplet(&mut self, emb: Var, triplets: &[(usize, usize, usize)], margin: f64) -> Var {
        let ve = &self.nodes[emb.0].value;
        let margin = T::from_f64(margin);
        let mut total = T::zero();
        let mut active = Vec::with_capacity(triplets.len());
        for &(a, p, n) in triplets {
            let l = sq_dist(ve.row(a), ve.row(p)) - sq_dist(ve.row(a), ve.row(n)) + margin;
            if l > T::zero() {
                total += l;
                active.push(true);
            } else {
                active.push(false);
            }
        }
        let mean = if triplets.is_empty() {
            T::zero()
        } else {
            total / T::from_f64(triplets.len() as f64)
        };
        let rg = self.rg(&[emb]);
        self.push(
            Tensor::scalar(mean),
            Op::Triplet {
                emb,
                triplets: triplets.to_vec(),
                active,
            },
            rg,
        )
    }

    /// `sum(x * weights)` with constant weights; a convenient scalar probe.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.numel(), weights.len(), "weighted_sum: size mismatch");
        let s = vx.data().iter().zip(weights).map(|(&a, &b)| a * b).sum::<T>();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward: loss must be a scalar");
        if !nodes[loss.0].requires_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let gd = g.data();
            let needs = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if needs(v) {
                            let buf = grad_slot(&mut grads, nodes, v);
                            for (d, &x) in buf.iter_mut().zip(gd) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if needs(*a) {
                        let buf = grad_slot(&mut grads, nodes, *a);
                        for (d, &x) in buf.iter_mut().zip(gd) {
                            *d += x * *s;
                        }
                    }
                }
                Op::AddBroadcast(x, b) => {
                    if needs(*x) {
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for (d, &v) in buf.iter_mut().zip(gd) {
                            *d += v;
                        }
                    }
                    if needs(*b) {
                        let buf = grad_slot(&mut grads, nodes, *b);
                        let bn = buf.len();
                        for chunk in gd.chunks(bn) {
                            for (d, &v) in buf.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if needs(*x) {
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for (d, &v) in buf.iter_mut().zip(gd) {
                            *d += v;
                        }
                    }
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    in_dim,
                    out_dim,
                } => {
                    let (rows, in_dim, out_dim) = (*rows, *in_dim, *out_dim);
                    if needs(*x) {
                        let wv = nodes[w.0].value.data();
                        let buf = grad_slot(&mut grads, nodes, *x);
                        gemm(rows, out_dim, in_dim, gd, false, wv, true, buf, true);
                    }
                    if needs(*w) {
                        let xv = nodes[x.0].value.data();
                        let buf = grad_slot(&mut grads, nodes, *w);
                        gemm(in_dim, rows, out_dim, xv, true, gd, false, buf, true);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let buf = grad_slot(&mut grads, nodes, *b);
                            for r in 0..rows {
                                for (d, &v) in buf.iter_mut().zip(&gd[r * out_dim..(r + 1) * out_dim]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    if needs(*x) {
                        let xv = nodes[x.0].value.data();
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for ((d, &gv), &xv) in buf.iter_mut().zip(gd).zip(xv) {
                            if xv > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if needs(*x) {
                        let xv = nodes[x.0].value.data();
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for ((d, &gv), &xv) in buf.iter_mut().zip(gd).zip(xv) {
                            *d += gv * gelu_grad(xv);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if needs(*x) {
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for ((d, &gv), &m) in buf.iter_mut().zip(gd).zip(mask) {
                            *d += gv * m;
                        }
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    batch,
                    pixels,
                    channels,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let (batch, pixels, channels, groups) = (*batch, *pixels, *channels, *groups);
                    let cpg = channels / groups;
                    let gam = nodes[gamma.0].value.data();
                    if needs(*gamma) {
                        let buf = grad_slot(&mut grads, nodes, *gamma);
                        for (idx, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                            buf[idx % channels] += gv * h;
                        }
                    }
                    if needs(*beta) {
                        let buf = grad_slot(&mut grads, nodes, *beta);
                        for (idx, &gv) in gd.iter().enumerate() {
                            buf[idx % channels] += gv;
                        }
                    }
                    if needs(*x) {
                        let count = T::from_f64((pixels * cpg) as f64);
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for n in 0..batch {
                            let base = n * pixels * channels;
                            for gi in 0..groups {
                                let c0 = gi * cpg;
                                let mut s1 = T::zero();
                                let mut s2 = T::zero();
                                for p in 0..pixels {
                                    let row = base + p * channels + c0;
                                    for c in 0..cpg {
                                        let dh = gd[row + c] * gam[c0 + c];
                                        s1 += dh;
                                        s2 += dh * xhat[row + c];
                                    }
                                }
                                let r = rstd[n * groups + gi];
                                let m1 = s1 / count;
                                let m2 = s2 / count;
                                for p in 0..pixels {
                                    let row = base + p * channels + c0;
                                    for c in 0..cpg {
                                        let dh = gd[row + c] * gam[c0 + c];
                                        buf[row + c] += r * (dh - m1 - xhat[row + c] * m2);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let rows = geom.out_pixels();
                    let k = geom.patch_len();
                    let oc = geom.out_c;
                    if needs(*w) {
                        let buf = grad_slot(&mut grads, nodes, *w);
                        gemm(k, rows, oc, cols, true, gd, false, buf, true);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let buf = grad_slot(&mut grads, nodes, *b);
                            for r in 0..rows {
                                for (d, &v) in buf.iter_mut().zip(&gd[r * oc..(r + 1) * oc]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    if needs(*x) {
                        let wv = nodes[w.0].value.data();
                        let mut dcols = vec![T::zero(); rows * k];
                        gemm(rows, oc, k, gd, false, wv, true, &mut dcols, false);
                        let buf = grad_slot(&mut grads, nodes, *x);
                        col2im_add(&dcols, geom, buf);
                    }
                }
                Op::MeanGroups {
                    x,
                    groups,
                    per,
                    cols,
                } => {
                    if needs(*x) {
                        let inv = T::one() / T::from_f64(*per as f64);
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for gi in 0..*groups {
                            let src = &gd[gi * cols..(gi + 1) * cols];
                            for r in 0..*per {
                                let dst = &mut buf[(gi * per + r) * cols..][..*cols];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += v * inv;
                                }
                            }
                        }
                    }
                }
                Op::Attention {
                    qkv,
                    seqs,
                    len,
                    heads,
                    mask,
                    probs,
                } => {
                    if needs(*qkv) {
                        let qv = nodes[qkv.0].value.data();
                        let buf = grad_slot(&mut grads, nodes, *qkv);
                        attention_backward(qv, gd, probs, *seqs, *len, *heads, *mask, buf);
                    }
                }
                Op::GatherRows { x, idx } => {
                    if needs(*x) {
                        let cols = nodes[x.0].value.cols();
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for (r, &src) in idx.iter().enumerate() {
                            let dst = &mut buf[src * cols..(src + 1) * cols];
                            for (d, &v) in dst.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Stitch { pieces } => {
                    let out_cols = g.cols();
                    for p in pieces {
                        if !needs(p.src) {
                            continue;
                        }
                        let w = nodes[p.src.0].value.cols();
                        let buf = grad_slot(&mut grads, nodes, p.src);
                        for r in 0..p.rows {
                            let s = (p.dst_row + r) * out_cols + p.dst_col;
                            let dst = &mut buf[(p.src_row + r) * w..][..w];
                            for (d, &v) in dst.iter_mut().zip(&gd[s..s + w]) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::L2Normalize { x, norms } => {
                    if needs(*x) {
                        let y = node.value.data();
                        let cols = node.value.cols();
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for (r, &n) in norms.iter().enumerate() {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &gd[r * cols..(r + 1) * cols];
                            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            for c in 0..cols {
                                buf[r * cols + c] += (gr[c] - yr[c] * dot) / n;
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                    probs,
                } => {
                    if needs(*logits) {
                        let classes = nodes[logits.0].value.cols();
                        let rows = targets.len();
                        let scale = gd[0] / T::from_f64(rows as f64);
                        let off = *smoothing / T::from_f64(classes as f64);
                        let on = T::one() - *smoothing + off;
                        let buf = grad_slot(&mut grads, nodes, *logits);
                        for (r, &t) in targets.iter().enumerate() {
                            for c in 0..classes {
                                let q = if c == t { on } else { off };
                                buf[r * classes + c] += (probs[r * classes + c] - q) * scale;
                            }
                        }
                    }
                }
                Op::Triplet {
                    emb,
                    triplets,
                    active,
                } => {
                    if needs(*emb) && !triplets.is_empty() {
                        let ev = &nodes[emb.0].value;
                        let cols = ev.cols();
                        let two = T::from_f64(2.0);
                        let scale = gd[0] / T::from_f64(triplets.len() as f64);
                        let evd = ev.data().to_vec();
                        let buf = grad_slot(&mut grads, nodes, *emb);
                        for (&(a, p, n), &on) in triplets.iter().zip(active) {
                            if !on {
                                continue;
                            }
                            for c in 0..cols {
                                let av = evd[a * cols + c];
                                let pv = evd[p * cols + c];
                                let nv = evd[n * cols + c];
                                buf[a * cols + c] += two * (nv - pv) * scale;
                                buf[p * cols + c] -= two * (av - pv) * scale;
                                buf[n * cols + c] += two * (av - nv) * scale;
                            }
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    if needs(*x) {
                        let buf = grad_slot(&mut grads, nodes, *x);
                        for (d, &wv) in buf.iter_mut().zip(weights) {
                            *d += wv * gd[0];
                        }
                    }
                }
            }
        }
        Grads { grads }
    }
}

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Loss and softmax probabilities for one row of label-smoothed cross-entropy.
pub(crate) fn smoothed_ce_row<T: Scalar>(row: &[T], target: usize, eps: T) -> (T, Vec<T>) {
    let classes = T::from_f64(row.len() as f64);
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
    let log_z = z.ln() + mx;
    let off = eps / classes;
    let on = T::one() - eps + off;
    let mut loss = T::zero();
    let mut probs = Vec::with_capacity(row.len());
    for (c, &v) in row.iter().enumerate() {
        let logp = v - log_z;
        let q = if c == target { on } else { off };
        loss -= q * logp;
        probs.push(logp.exp());
    }
    (loss, probs)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch_len();
    let mut cols = vec![T::zero(); g.out_pixels() * k];
    let mut r = 0;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut cols[r * k..(r + 1) * k];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((n * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let dst = (ky * g.kernel + kx) * g.in_c;
                        row[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let k = g.patch_len();
    let mut r = 0;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &cols[r * k..(r + 1) * k];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((n * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let src = (ky * g.kernel + kx) * g.in_c;
                        for c in 0..g.in_c {
                            dx[dst + c] += row[src + c];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    qkv: &[T],
    dout: &[T],
    probs: &[T],
    seqs: usize,
    len: usize,
    heads: usize,
    mask: AttentionMask,
    dqkv: &mut [T],
) {
    let width = qkv.len() / (seqs * len);
    let dim = width / 3;
    let hd = dim / heads;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let mut dp = vec![T::zero(); len];
    for s in 0..seqs {
        for h in 0..heads {
            let qo = h * hd;
            let ko = dim + h * hd;
            let vo = 2 * dim + h * hd;
            for i in 0..len {
                let lim = mask.visible(i, len);
                let prow = &probs[((s * heads + h) * len + i) * len..][..len];
                let di = &dout[(s * len + i) * dim + h * hd..][..hd];
                let mut weighted = T::zero();
                for j in 0..lim {
                    let vj = &qkv[(s * len + j) * width + vo..][..hd];
                    let mut dot = T::zero();
                    for t in 0..hd {
                        dot += di[t] * vj[t];
                    }
                    dp[j] = dot;
                    weighted += prow[j] * dot;
                }
                let qrow = (s * len + i) * width;
                for j in 0..lim {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let krow = (s * len + j) * width;
                    for t in 0..hd {
                        let kv = qkv[krow + ko + t];
                        let qv = qkv[qrow + qo + t];
                        dqkv[qrow + qo + t] += ds * kv;
                        dqkv[krow + ko + t] += ds * qv;
                        dqkv[krow + vo + t] += prow[j] * di[t];
                    }
                }
            }
        }
    }
}
