use crate::conv::{col2im, from_channel_major, im2col, to_channel_major, ConvGeom};
use crate::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: Conv,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: Conv,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    AddSpatial {
        x: Var,
        v: Var,
    },
    TileSpatial(Var),
    MeanSpatial(Var),
    Stack(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Vec<bool>,
        probs: Tensor<T>,
    },
    SumAll(Var),
    SumExact(Vec<Var>),
    GaussianNll {
        pred: Var,
        target: Tensor<T>,
        sigma: T,
    },
    KlDiag {
        q_mean: Var,
        q_logvar: Var,
        p_mean: Var,
        p_logvar: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so reverse
/// index order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Attention probabilities `[batch, heads, n, n]` saved by [`Graph::attention`].
    pub fn attention_probs(&self, var: Var) -> Option<&Tensor<T>> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            Op::Relu(a),
            |x| if x > T::zero() { x } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// `x [.., in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), in_f, "linear input width mismatch");
        let rows = self.value(x).len() / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), out_f, "linear bias length");
            for r in 0..rows {
                out[r * out_f..(r + 1) * out_f].copy_from_slice(bias);
            }
        }
        T::gemm(
            false,
            true,
            rows,
            out_f,
            in_f,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, &parents)
    }

    fn conv_geom(&self, x: Var, kernel: (usize, usize), conv: Conv) -> (usize, ConvGeom) {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "conv input must be NCHW");
        let geom = ConvGeom {
            channels: s[1],
            height: s[2],
            width: s[3],
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride: conv.stride,
            pad: conv.pad,
        };
        (s[0], geom)
    }

    /// 2-D cross-correlation. `x [B, Ci, H, W]`, `w [Co, Ci, kh, kw]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let conv = Conv { stride, pad };
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, kh, kw]");
        let (batch, geom) = self.conv_geom(x, (ws[2], ws[3]), conv);
        assert_eq!(ws[1], geom.channels, "conv2d input channel mismatch");
        let co = ws[0];
        let cols = im2col(self.value(x).data(), batch, &geom);
        let n = batch * geom.positions();
        let mut mat = vec![T::zero(); co * n];
        T::gemm(
            false,
            false,
            co,
            n,
            geom.patch_len(),
            T::one(),
            self.value(w).data(),
            &cols,
            T::zero(),
            &mut mat,
        );
        let mut out = from_channel_major(&mat, batch, co, geom.positions());
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), batch, co, geom.positions());
        }
        let shape = [batch, co, geom.out_h(), geom.out_w()];
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::new(&shape, out),
            Op::Conv2d { x, w, b, conv },
            &parents,
        )
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`] in its input).
    /// `x [B, Ci, H, W]`, `w [Ci, Co, kh, kw]`, `b [Co]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let conv = Conv { stride, pad };
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(
            ws.len(),
            4,
            "conv_transpose2d weight must be [Ci, Co, kh, kw]"
        );
        assert_eq!(ws[0], xs[1], "conv_transpose2d input channel mismatch");
        let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        let out_h = (h - 1) * stride + ws[2] - 2 * pad;
        let out_w = (wd - 1) * stride + ws[3] - 2 * pad;
        let geom = ConvGeom {
            channels: co,
            height: out_h,
            width: out_w,
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        assert_eq!(
            (geom.out_h(), geom.out_w()),
            (h, wd),
            "conv_transpose2d geometry is not invertible"
        );
        let x_cm = to_channel_major(self.value(x).data(), batch, ci, h * wd);
        let n = batch * h * wd;
        let mut cols = vec![T::zero(); geom.patch_len() * n];
        T::gemm(
            true,
            false,
            geom.patch_len(),
            n,
            ci,
            T::one(),
            self.value(w).data(),
            &x_cm,
            T::zero(),
            &mut cols,
        );
        let mut out = vec![T::zero(); batch * co * out_h * out_w];
        col2im(&cols, batch, &geom, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), batch, co, out_h * out_w);
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::new(&[batch, co, out_h, out_w], out),
            Op::ConvTranspose2d { x, w, b, conv },
            &parents,
        )
    }

    /// Concatenate along axis 1; all parts share axis 0 and trailing axes.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[0], batch, "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat trailing shape mismatch");
            total += s[1];
        }
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.dim(1) * inner;
                out.extend_from_slice(&v.data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        self.push(Tensor::new(&shape, out), Op::Concat(parts.to_vec()), parts)
    }

    /// `x[:, start..start+len, ...]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[1], "slice out of range");
        let inner: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(s[0] * len * inner);
        let data = self.value(x).data();
        for b in 0..s[0] {
            let base = (b * s[1] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        self.push(Tensor::new(&shape, out), Op::Slice { x, start, len }, &[x])
    }

    /// `x [B, C, H, W] + v [B, C]` broadcast over spatial positions.
    pub fn add_spatial(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &s[..2], "add_spatial vector shape");
        let p = s[2] * s[3];
        let mut out = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for (bc, &val) in vd.iter().enumerate() {
            for o in &mut out[bc * p..(bc + 1) * p] {
                *o += val;
            }
        }
        self.push(Tensor::new(&s, out), Op::AddSpatial { x, v }, &[x, v])
    }

    /// Broadcast `v [B, C]` to `[B, C, h, w]`.
    pub fn tile_spatial(&mut self, v: Var, h: usize, w: usize) -> Var {
        let s = self.shape(v).to_vec();
        assert_eq!(s.len(), 2, "tile_spatial expects [B, C]");
        let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
        for &val in self.value(v).data() {
            out.extend(std::iter::repeat_n(val, h * w));
        }
        self.push(
            Tensor::new(&[s[0], s[1], h, w], out),
            Op::TileSpatial(v),
            &[v],
        )
    }

    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let p = s[2] * s[3];
        let inv = T::one() / T::from_usize(p).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(p)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(&s[..2], out), Op::MeanSpatial(x), &[x])
    }

    /// Stack `[B, ...]` parts into `[B, N, ...]`.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let s = self.shape(parts[0]).to_vec();
        for &p in parts {
            assert_eq!(self.shape(p), &s[..], "stack shape mismatch");
        }
        let inner: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(s[0] * parts.len() * inner);
        for b in 0..s[0] {
            for &p in parts {
                out.extend_from_slice(&self.value(p).data()[b * inner..(b + 1) * inner]);
            }
        }
        let mut shape = vec![s[0], parts.len()];
        shape.extend_from_slice(&s[1..]);
        self.push(Tensor::new(&shape, out), Op::Stack(parts.to_vec()), parts)
    }

    /// `x[:, index]` for `x [B, N, ...]`.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(index < s[1], "select out of range");
        let inner: usize = s[2..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * inner);
        for b in 0..s[0] {
            let base = (b * s[1] + index) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
        let mut shape = vec![s[0]];
        shape.extend_from_slice(&s[2..]);
        self.push(Tensor::new(&shape, out), Op::Select { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        assert_eq!(self.value(gain).len(), d, "layer_norm gain width");
        assert_eq!(self.value(bias).len(), d, "layer_norm bias width");
        let dn = T::from_usize(d).unwrap();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = self.value(x).len() / d;
        let mut out = vec![T::zero(); rows * d];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (r, row) in self.value(x).data().chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(
            Tensor::new(&xs, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Multi-head scaled dot-product attention over `[B, N, d]` projections.
    /// `mask[i * n + j] == false` excludes key `j` from query row `i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Var {
        let s = self.shape(q).to_vec();
        assert_eq!(s.len(), 3, "attention expects [B, N, d]");
        assert_eq!(self.shape(k), &s[..], "attention key shape");
        assert_eq!(self.shape(v), &s[..], "attention value shape");
        let (batch, n, d) = (s[0], s[1], s[2]);
        assert!(
            heads > 0 && d % heads == 0,
            "model width {d} not divisible by {heads} heads"
        );
        assert_eq!(mask.len(), n * n, "attention mask size");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = vec![T::zero(); batch * n * d];
        let mut logits = vec![T::zero(); n];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let qi = &qd[(b * n + i) * d + h * dh..(b * n + i) * d + (h + 1) * dh];
                    for j in 0..n {
                        let kj = &kd[(b * n + j) * d + h * dh..(b * n + j) * d + (h + 1) * dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum();
                        logits[j] = dot * scale
                            + if mask[i * n + j] {
                                T::zero()
                            } else {
                                T::MASK_FILL
                            };
                    }
                    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                    let row = &mut probs
                        [((b * heads + h) * n + i) * n..((b * heads + h) * n + i + 1) * n];
                    let mut total = T::zero();
                    for j in 0..n {
                        row[j] = (logits[j] - max).exp();
                        total += row[j];
                    }
                    for p in row.iter_mut() {
                        *p = *p / total;
                    }
                    let oi = &mut out[(b * n + i) * d + h * dh..(b * n + i) * d + (h + 1) * dh];
                    for j in 0..n {
                        if !mask[i * n + j] {
                            continue;
                        }
                        let vj = &vd[(b * n + j) * d + h * dh..(b * n + j) * d + (h + 1) * dh];
                        for (o, &val) in oi.iter_mut().zip(vj) {
                            *o += row[j] * val;
                        }
                    }
                }
            }
        }
        let probs = Tensor::new(&[batch, heads, n, n], probs);
        self.push(
            Tensor::new(&s, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask: mask.to_vec(),
                probs,
            },
            &[q, k, v],
        )
    }

    /// Element-wise sum of same-shaped parts, correctly rounded, so the
    /// result is bit-identical under any permutation of `parts`.
    pub fn sum_exact(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            assert_eq!(self.shape(p), &shape[..], "sum_exact shape mismatch");
        }
        let len = self.value(parts[0]).len();
        let mut terms = Vec::with_capacity(parts.len());
        let out: Vec<T> = (0..len)
            .map(|i| {
                terms.clear();
                terms.extend(
                    parts
                        .iter()
                        .map(|&p| self.value(p).data()[i].to_f64_lossy()),
                );
                T::from_f64_lossy(exact_sum(&terms))
            })
            .collect();
        self.push(
            Tensor::new(&shape, out),
            Op::SumExact(parts.to_vec()),
            parts,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    /// Batch mean of the per-example Gaussian negative log-likelihood of
    /// `target` under `N(pred, sigma^2)`, summed over all non-batch axes.
    pub fn gaussian_nll(&mut self, pred: Var, target: &Tensor<T>, sigma: T) -> Var {
        assert_eq!(
            self.shape(pred),
            target.shape(),
            "gaussian_nll shape mismatch"
        );
        assert!(sigma > T::zero(), "gaussian_nll needs sigma > 0");
        let batch = T::from_usize(target.dim(0)).unwrap();
        let half = T::from_f64_lossy(0.5);
        let log_norm = sigma.ln() + half * T::from_f64_lossy((2.0 * std::f64::consts::PI).ln());
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let r = (t - p) / sigma;
                half * r * r + log_norm
            })
            .sum();
        self.push(
            Tensor::scalar(total / batch),
            Op::GaussianNll {
                pred,
                target: target.clone(),
                sigma,
            },
            &[pred],
        )
    }

    /// Batch mean of KL(q || p) between diagonal Gaussians given by means
    /// and log-variances `[B, ...]`, summed over non-batch axes.
    pub fn kl_diag(&mut self, q_mean: Var, q_logvar: Var, p_mean: Var, p_logvar: Var) -> Var {
        let s = self.shape(q_mean).to_vec();
        for v in [q_logvar, p_mean, p_logvar] {
            assert_eq!(self.shape(v), &s[..], "kl_diag shape mismatch");
        }
        let half = T::from_f64_lossy(0.5);
        let (qm, qv) = (self.value(q_mean).data(), self.value(q_logvar).data());
        let (pm, pv) = (self.value(p_mean).data(), self.value(p_logvar).data());
        let mut total = T::zero();
        for i in 0..qm.len() {
            let diff = qm[i] - pm[i];
            total +=
                half * (pv[i] - qv[i] + ((qv[i]).exp() + diff * diff) / pv[i].exp() - T::one());
        }
        let batch = T::from_usize(s[0]).unwrap();
        self.push(
            Tensor::scalar(total / batch),
            Op::KlDiag {
                q_mean,
                q_logvar,
                p_mean,
                p_logvar,
            },
            &[q_mean, q_logvar, p_mean, p_logvar],
        )
    }

    /// Reverse-mode sweep from a scalar `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn propagate(&self, idx: usize, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, grad.clone());
                self.acc(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, grad.clone());
                self.acc(grads, *b, grad.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, grad.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, grad.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, grad.map(|g| g * s));
            }
            Op::Relu(a) => {
                self.acc(
                    grads,
                    *a,
                    grad.zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() }),
                );
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, grad.zip_map(out, |g, y| g * y * (T::one() - y)));
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, grad.zip_map(out, |g, y| g * (T::one() - y * y)));
            }
            Op::Exp(a) => {
                self.acc(grads, *a, grad.zip_map(out, |g, y| g * y));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let pass = self.value(*a).map(|x| {
                    if x >= lo && x <= hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *a, grad.zip_map(&pass, |g, m| g * m));
            }
            Op::Linear { x, w, b } => self.linear_backward(grad, *x, *w, *b, grads),
            Op::Conv2d { x, w, b, conv } => self.conv2d_backward(grad, *x, *w, *b, *conv, grads),
            Op::ConvTranspose2d { x, w, b, conv } => {
                self.conv_t_backward(grad, *x, *w, *b, *conv, grads)
            }
            Op::Concat(parts) => {
                let batch = grad.dim(0);
                let inner: usize = grad.shape()[2..].iter().product();
                let total = grad.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let c = shape[1];
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(batch * c * inner);
                        for bi in 0..batch {
                            let base = (bi * total + offset) * inner;
                            g.extend_from_slice(&grad.data()[base..base + c * inner]);
                        }
                        self.acc(grads, p, Tensor::new(&shape, g));
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start, len } => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[2..].iter().product();
                let mut g = vec![T::zero(); shape.iter().product()];
                for bi in 0..shape[0] {
                    let dst = (bi * shape[1] + start) * inner;
                    g[dst..dst + len * inner]
                        .copy_from_slice(&grad.data()[bi * len * inner..(bi + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::new(&shape, g));
            }
            Op::AddSpatial { x, v } => {
                self.acc(grads, *x, grad.clone());
                if self.needs(*v) {
                    let s = grad.shape();
                    let p = s[2] * s[3];
                    let g: Vec<T> = grad
                        .data()
                        .chunks(p)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    self.acc(grads, *v, Tensor::new(&s[..2], g));
                }
            }
            Op::TileSpatial(v) => {
                let s = grad.shape();
                let p = s[2] * s[3];
                let g: Vec<T> = grad
                    .data()
                    .chunks(p)
                    .map(|c| c.iter().copied().sum())
                    .collect();
                self.acc(grads, *v, Tensor::new(&s[..2], g));
            }
            Op::MeanSpatial(x) => {
                let shape = self.shape(*x).to_vec();
                let p = shape[2] * shape[3];
                let inv = T::one() / T::from_usize(p).unwrap();
                let mut g = Vec::with_capacity(shape.iter().product());
                for &gv in grad.data() {
                    g.extend(std::iter::repeat_n(gv * inv, p));
                }
                self.acc(grads, *x, Tensor::new(&shape, g));
            }
            Op::Stack(parts) => {
                let n = parts.len();
                let batch = grad.dim(0);
                let inner: usize = grad.shape()[2..].iter().product();
                for (i, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let mut g = Vec::with_capacity(batch * inner);
                    for bi in 0..batch {
                        let base = (bi * n + i) * inner;
                        g.extend_from_slice(&grad.data()[base..base + inner]);
                    }
                    self.acc(grads, p, Tensor::new(self.shape(p), g));
                }
            }
            Op::Select { x, index } => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[2..].iter().product();
                let mut g = vec![T::zero(); shape.iter().product()];
                for bi in 0..shape[0] {
                    let base = (bi * shape[1] + index) * inner;
                    g[base..base + inner]
                        .copy_from_slice(&grad.data()[bi * inner..(bi + 1) * inner]);
                }
                self.acc(grads, *x, Tensor::new(&shape, g));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, grad.clone().reshaped(self.shape(*x)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = *grad.shape().last().unwrap();
                let dn = T::from_usize(d).unwrap();
                let g = self.value(*gain).data();
                let xd = self.value(*x).data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, gy) in grad.data().chunks(d).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let row = &xd[r * d..(r + 1) * d];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        dxhat[j] = gy[j] * g[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                        dg[j] += gy[j] * xhat;
                        db[j] += gy[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        dx[r * d + j] =
                            rs * (dxhat[j] - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx));
                self.acc(grads, *gain, Tensor::new(&[d], dg));
                self.acc(grads, *bias, Tensor::new(&[d], db));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.attention_backward(grad, (*q, *k, *v), *heads, mask, probs, grads),
            Op::SumExact(parts) => {
                for &p in parts {
                    self.acc(grads, p, grad.clone());
                }
            }
            Op::SumAll(x) => {
                let g = grad.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::GaussianNll {
                pred,
                target,
                sigma,
            } => {
                let batch = T::from_usize(target.dim(0)).unwrap();
                let c = grad.item() / (*sigma * *sigma * batch);
                let g = self.value(*pred).zip_map(target, |p, t| (p - t) * c);
                self.acc(grads, *pred, g);
            }
            Op::KlDiag {
                q_mean,
                q_logvar,
                p_mean,
                p_logvar,
            } => {
                let s = self.shape(*q_mean).to_vec();
                let half = T::from_f64_lossy(0.5);
                let c = grad.item() / T::from_usize(s[0]).unwrap();
                let (qm, qv) = (self.value(*q_mean).data(), self.value(*q_logvar).data());
                let (pm, pv) = (self.value(*p_mean).data(), self.value(*p_logvar).data());
                let len = qm.len();
                let (mut gqm, mut gqv, mut gpm, mut gpv) = (
                    vec![T::zero(); len],
                    vec![T::zero(); len],
                    vec![T::zero(); len],
                    vec![T::zero(); len],
                );
                for i in 0..len {
                    let inv_pvar = (-pv[i]).exp();
                    let diff = qm[i] - pm[i];
                    let qvar = qv[i].exp();
                    gqm[i] = c * diff * inv_pvar;
                    gpm[i] = -gqm[i];
                    gqv[i] = c * half * (qvar * inv_pvar - T::one());
                    gpv[i] = c * half * (T::one() - (qvar + diff * diff) * inv_pvar);
                }
                self.acc(grads, *q_mean, Tensor::new(&s, gqm));
                self.acc(grads, *q_logvar, Tensor::new(&s, gqv));
                self.acc(grads, *p_mean, Tensor::new(&s, gpm));
                self.acc(grads, *p_logvar, Tensor::new(&s, gpv));
            }
        }
    }

    fn linear_backward(
        &self,
        grad: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let ws = self.shape(w);
        let (out_f, in_f) = (ws[0], ws[1]);
        let rows = grad.len() / out_f;
        if self.needs(x) {
            let mut dx = vec![T::zero(); rows * in_f];
            T::gemm(
                false,
                false,
                rows,
                in_f,
                out_f,
                T::one(),
                grad.data(),
                self.value(w).data(),
                T::zero(),
                &mut dx,
            );
            self.acc(grads, x, Tensor::new(self.shape(x), dx));
        }
        if self.needs(w) {
            let mut dw = vec![T::zero(); out_f * in_f];
            T::gemm(
                true,
                false,
                out_f,
                in_f,
                rows,
                T::one(),
                grad.data(),
                self.value(x).data(),
                T::zero(),
                &mut dw,
            );
            self.acc(grads, w, Tensor::new(&[out_f, in_f], dw));
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![T::zero(); out_f];
                for row in grad.data().chunks(out_f) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                self.acc(grads, b, Tensor::new(&[out_f], db));
            }
        }
    }

    fn conv2d_backward(
        &self,
        grad: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: Conv,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let ws = self.shape(w).to_vec();
        let (batch, geom) = self.conv_geom(x, (ws[2], ws[3]), conv);
        let co = ws[0];
        let positions = geom.positions();
        let n = batch * positions;
        let gmat = to_channel_major(grad.data(), batch, co, positions);
        if self.needs(w) {
            let cols = im2col(self.value(x).data(), batch, &geom);
            let mut dw = vec![T::zero(); co * geom.patch_len()];
            T::gemm(
                false,
                true,
                co,
                geom.patch_len(),
                n,
                T::one(),
                &gmat,
                &cols,
                T::zero(),
                &mut dw,
            );
            self.acc(grads, w, Tensor::new(&ws, dw));
        }
        if let Some(b) = b {
            if self.needs(b) {
                let db: Vec<T> = gmat.chunks(n).map(|c| c.iter().copied().sum()).collect();
                self.acc(grads, b, Tensor::new(&[co], db));
            }
        }
        if self.needs(x) {
            let mut dcols = vec![T::zero(); geom.patch_len() * n];
            T::gemm(
                true,
                false,
                geom.patch_len(),
                n,
                co,
                T::one(),
                self.value(w).data(),
                &gmat,
                T::zero(),
                &mut dcols,
            );
            let mut dx = vec![T::zero(); self.value(x).len()];
            col2im(&dcols, batch, &geom, &mut dx);
            self.acc(grads, x, Tensor::new(self.shape(x), dx));
        }
    }

    fn conv_t_backward(
        &self,
        grad: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: Conv,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let gs = grad.shape();
        let geom = ConvGeom {
            channels: ws[1],
            height: gs[2],
            width: gs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride: conv.stride,
            pad: conv.pad,
        };
        let n = batch * h * wd;
        // Lowered output gradient: [Co*kh*kw, B*H*W].
        let gcols = im2col(grad.data(), batch, &geom);
        if self.needs(x) {
            let mut dx = vec![T::zero(); ci * n];
            T::gemm(
                false,
                false,
                ci,
                n,
                geom.patch_len(),
                T::one(),
                self.value(w).data(),
                &gcols,
                T::zero(),
                &mut dx,
            );
            self.acc(
                grads,
                x,
                Tensor::new(&xs, from_channel_major(&dx, batch, ci, h * wd)),
            );
        }
        if self.needs(w) {
            let x_cm = to_channel_major(self.value(x).data(), batch, ci, h * wd);
            let mut dw = vec![T::zero(); ci * geom.patch_len()];
            T::gemm(
                false,
                true,
                ci,
                geom.patch_len(),
                n,
                T::one(),
                &x_cm,
                &gcols,
                T::zero(),
                &mut dw,
            );
            self.acc(grads, w, Tensor::new(&ws, dw));
        }
        if let Some(b) = b {
            if self.needs(b) {
                let p = gs[2] * gs[3];
                let co = ws[1];
                let mut db = vec![T::zero(); co];
                for (i, chunk) in grad.data().chunks(p).enumerate() {
                    db[i % co] += chunk.iter().copied().sum::<T>();
                }
                self.acc(grads, b, Tensor::new(&[co], db));
            }
        }
    }

    fn attention_backward(
        &self,
        grad: &Tensor<T>,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        mask: &[bool],
        probs: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = self.shape(q).to_vec();
        let (batch, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let gd = grad.data();
        let pd = probs.data();
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); n];
        let at = |b: usize, i: usize, h: usize| (b * n + i) * d + h * dh;
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let prow =
                        &pd[((b * heads + h) * n + i) * n..((b * heads + h) * n + i + 1) * n];
                    let go = &gd[at(b, i, h)..at(b, i, h) + dh];
                    let mut weighted = T::zero();
                    for j in 0..n {
                        if !mask[i * n + j] {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vd[at(b, j, h)..at(b, j, h) + dh];
                        dp[j] = go.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                        weighted += dp[j] * prow[j];
                        let dvj = &mut dv[at(b, j, h)..at(b, j, h) + dh];
                        for (o, &g) in dvj.iter_mut().zip(go) {
                            *o += prow[j] * g;
                        }
                    }
                    for j in 0..n {
                        if !mask[i * n + j] {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        for t in 0..dh {
                            dq[at(b, i, h) + t] += ds * kd[at(b, j, h) + t];
                            dk[at(b, j, h) + t] += ds * qd[at(b, i, h) + t];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, Tensor::new(&s, dq));
        self.acc(grads, k, Tensor::new(&s, dk));
        self.acc(grads, v, Tensor::new(&s, dv));
    }
}

/// Correctly rounded sum of `values` (Shewchuk partials with a
/// round-half-even fix-up), independent of input order.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if lo != 0.0 {
        if let Some(&next) = partials.last() {
            if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
                let y = lo * 2.0;
                let x = hi + y;
                if y == x - hi {
                    hi = x;
                }
            }
        }
    }
    hi
}

fn add_channel_bias<T: Real>(
    out: &mut [T],
    bias: &[T],
    batch: usize,
    channels: usize,
    positions: usize,
) {
    assert_eq!(bias.len(), channels, "bias length");
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            for o in &mut out[(b * channels + c) * positions..(b * channels + c + 1) * positions] {
                *o += bv;
            }
        }
    }
}
