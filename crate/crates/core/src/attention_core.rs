//! Multi-view self-attention over per-view representation tokens.

use crate::autograd::{Real, Tensor, Var};
use crate::error::{Result, TgqnError};
use crate::params::{LayerNormLayer, LinearLayer, ParamBuilder, ParamStore, Session};

/// `n x n` visibility matrix, row-major; entry `(i, j)` is true when view
/// `j` may be attended from row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    entries: Vec<bool>,
}

impl MaskMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.entries[row * self.n + col]
    }

    pub fn entries(&self) -> &[bool] {
        &self.entries
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.entries
            .chunks(self.n)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }
}

/// Lower-triangular (diagonal included) when `masked`, all ones otherwise.
pub fn build_attention_mask(n_views: usize, masked: bool) -> Result<MaskMatrix> {
    if n_views < 1 {
        return Err(TgqnError::contract(
            "attention mask needs at least one view",
        ));
    }
    let entries = (0..n_views * n_views)
        .map(|i| !masked || i % n_views <= i / n_views)
        .collect();
    Ok(MaskMatrix {
        n: n_views,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(TgqnError::config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.layers == 0 || self.ff == 0 {
            return Err(TgqnError::config(
                "transformer needs at least one layer and a positive feed-forward width",
            ));
        }
        Ok(())
    }
}

/// Post-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub heads: usize,
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    o: LinearLayer,
    norm1: LayerNormLayer,
    ff1: LinearLayer,
    ff2: LinearLayer,
    norm2: LayerNormLayer,
}

impl AttentionLayer {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        d: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self> {
        Ok(AttentionLayer {
            heads,
            q: LinearLayer::new(pb, "q", d, d)?,
            k: LinearLayer::new(pb, "k", d, d)?,
            v: LinearLayer::new(pb, "v", d, d)?,
            o: LinearLayer::new(pb, "o", d, d)?,
            norm1: LayerNormLayer::new(pb, "norm1", d)?,
            ff1: LinearLayer::new(pb, "ff1", d, ff)?,
            ff2: LinearLayer::new(pb, "ff2", ff, d)?,
            norm2: LayerNormLayer::new(pb, "norm2", d)?,
        })
    }
}

/// Applies one block to `tokens [B, N, d]`. Returns the new tokens and the
/// attention node, whose saved probabilities are `[B, H, N, N]`.
pub fn attend_layer<T: Real>(
    s: &mut Session<'_, T>,
    tokens: Var,
    mask: &MaskMatrix,
    layer: &AttentionLayer,
) -> Result<(Var, Var)> {
    let shape = s.graph.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != mask.n() {
        return Err(TgqnError::contract(format!(
            "{} tokens do not match a {}-view mask",
            shape.get(1).unwrap_or(&0),
            mask.n()
        )));
    }
    if layer.heads == 0 || !shape[2].is_multiple_of(layer.heads) {
        return Err(TgqnError::config(format!(
            "d = {} is not divisible by {} heads",
            shape[2], layer.heads
        )));
    }
    let q = layer.q.forward(s, tokens);
    let k = layer.k.forward(s, tokens);
    let v = layer.v.forward(s, tokens);
    let att = s.graph.attention(q, k, v, layer.heads, mask.entries());
    let o = layer.o.forward(s, att);
    let res = s.graph.add(tokens, o);
    let x1 = layer.norm1.forward(s, res);
    let h = layer.ff1.forward(s, x1);
    let h = s.graph.relu(h);
    let f = layer.ff2.forward(s, h);
    let res = s.graph.add(x1, f);
    Ok((layer.norm2.forward(s, res), att))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub layers: Vec<AttentionLayer>,
}

impl Transformer {
    pub fn new<T: Real>(cfg: TransformerConfig, pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                AttentionLayer::new(
                    &mut pb.scope(&format!("layer{l}")),
                    cfg.d,
                    cfg.heads,
                    cfg.ff,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Transformer { cfg, layers })
    }

    /// Runs the stack over `tokens [B, N, d]`; no positional information is
    /// added. Returns attended tokens and the per-layer attention nodes.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        tokens: Var,
        mask: &MaskMatrix,
    ) -> Result<(Var, Vec<Var>)> {
        let mut x = tokens;
        let mut atts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, att) = attend_layer(s, x, mask, layer)?;
            x = next;
            atts.push(att);
        }
        Ok((x, atts))
    }
}

/// Scores `[layers][heads][n][n]` for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub scores: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTensor {
    /// Reads batch item `b` out of the per-layer `[B, H, N, N]` probabilities.
    pub fn from_probs<T: Real>(probs: &[&Tensor<T>], b: usize) -> Self {
        let scores = probs
            .iter()
            .map(|p| {
                let (h, n) = (p.dim(1), p.dim(2));
                let data = p.data();
                (0..h)
                    .map(|hh| {
                        (0..n)
                            .map(|i| {
                                (0..n)
                                    .map(|j| data[((b * h + hh) * n + i) * n + j].to_f64_lossy())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        AttentionTensor { scores }
    }

    pub fn layers(&self) -> usize {
        self.scores.len()
    }

    /// Final layer averaged over heads.
    pub fn mean_last_layer(&self) -> Vec<Vec<f64>> {
        let last = self.scores.last().expect("attention tensor has no layers");
        let n = last[0].len();
        let heads = last.len() as f64;
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| last.iter().map(|h| h[i][j]).sum::<f64>() / heads)
                    .collect()
            })
            .collect()
    }
}

/// Attended tokens `r*_1..r*_N` and the scores that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendedSequence<T> {
    pub reps: Vec<Tensor<T>>,
    pub attention: AttentionTensor,
}

/// Value-level attention over the representations of one example.
pub fn multi_view_attention<T: Real>(
    reps: &[Tensor<T>],
    masked: bool,
    transformer: &Transformer,
    params: &ParamStore<T>,
) -> Result<AttendedSequence<T>> {
    let mask = build_attention_mask(reps.len(), masked)?;
    let d = transformer.cfg.d;
    if reps.iter().any(|r| r.len() != d) {
        return Err(TgqnError::config(format!(
            "representations must have width {d}"
        )));
    }
    let mut s = Session::inference(params);
    let flat: Vec<T> = reps.iter().flat_map(|r| r.data().iter().copied()).collect();
    let tokens = s.input(Tensor::new(&[1, reps.len(), d], flat));
    let (out, atts) = transformer.forward(&mut s, tokens, &mask)?;
    let probs: Vec<&Tensor<T>> = atts
        .iter()
        .map(|&a| s.graph.attention_probs(a).expect("attention node"))
        .collect();
    let attention = AttentionTensor::from_probs(&probs, 0);
    let out = s.value(out);
    let reps = out
        .data()
        .chunks(d)
        .map(|c| Tensor::new(&[d], c.to_vec()))
        .collect();
    Ok(AttendedSequence { reps, attention })
}
