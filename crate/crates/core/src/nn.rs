//! Neural layers on top of the autodiff graph: linear, layer norm, masked
//! multi-head attention, transformer encoder layers, and the sinusoidal
//! position encoding.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, NodeId, Parameter};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use crate::SeedRng;

pub use crate::graph::MASK_PENALTY;

/// Uniform init in `[-bound, bound]`, drawn in f64 for cross-precision
/// reproducibility of the draw sequence.
pub fn uniform_init<T: Scalar>(dims: &[usize], bound: f64, rng: &mut SeedRng) -> Tensor<T> {
    let mut t = Tensor::zeros(dims);
    for v in t.data_mut() {
        *v = sc::<T>(rng.gen_range(-bound..=bound));
    }
    t
}

/// Fully connected layer. `weight` is `out x in`; forward computes
/// `x . weight^T + bias` for a row-major batch `x` of shape `L x in`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(name: &str, out_dim: usize, in_dim: usize, rng: &mut SeedRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                uniform_init(&[out_dim, in_dim], bound, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.in_dim() {
            return Err(Error::shape(
                format!("linear {}", self.weight.name),
                format!("input dim {}", self.in_dim()),
                format!("{}", g.value(x).cols()),
            ));
        }
        let w = g.param(&self.weight);
        let wt = g.transpose(w);
        let y = g.matmul(x, wt)?;
        let b = g.param(&self.bias);
        g.add_row(y, b)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}

/// Learnable per-feature gain and bias around per-row normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gain: Parameter<T>,
    pub bias: Parameter<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Parameter::new(format!("{name}.gain"), Tensor::full(&[1, dim], T::one())),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
            eps: sc::<T>(1e-5),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        [&self.gain, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        [&mut self.gain, &mut self.bias].into_iter()
    }
}

/// Multi-head self-attention under a binary mask.
///
/// Token `i` may attend to token `j` only where `mask[i][j] = 1`; the mask
/// is applied additively to the logits (disallowed entries get `-1e9`, whose
/// softmax weight underflows to exactly zero), so outputs at `i` are
/// bit-identical under any perturbation of disallowed inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut SeedRng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "model dim {dim} must be divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, rng),
            heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        mask: &Arc<Mask>,
        train: bool,
        attn_dropout: f64,
        rng: &mut SeedRng,
    ) -> Result<NodeId> {
        let len = g.value(x).rows();
        let dim = g.value(x).cols();
        if mask.size() != len {
            return Err(Error::shape(
                "attention mask",
                format!("{len} x {len}"),
                format!("{0} x {0}", mask.size()),
            ));
        }
        mask.validate_for_attention()?;

        let head_dim = dim / self.heads;
        let scale = sc::<T>(1.0 / (head_dim as f64).sqrt());

        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt)?;
            let scaled = g.affine(logits, scale, T::zero());
            let masked = g.mask_penalty(scaled, mask)?;
            let attn = g.softmax_rows(masked);
            let attn = g.dropout(attn, attn_dropout, train, rng)?;
            head_outputs.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat_cols(&head_outputs)?;
        self.wo.forward(g, ctx)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.wq
            .params()
            .chain(self.wk.params())
            .chain(self.wv.params())
            .chain(self.wo.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.wq
            .params_mut()
            .chain(self.wk.params_mut())
            .chain(self.wv.params_mut())
            .chain(self.wo.params_mut())
    }
}

/// Post-norm transformer encoder layer:
/// attention -> add -> norm -> feed-forward (4x width, GELU) -> add -> norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer<T> {
    pub attn: MultiHeadAttention<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub ln1: LayerNorm<T>,
    pub ln2: LayerNorm<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng)?,
            ffn1: Linear::new(&format!("{name}.ffn1"), 4 * dim, dim, rng),
            ffn2: Linear::new(&format!("{name}.ffn2"), dim, 4 * dim, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        mask: &Arc<Mask>,
        train: bool,
        attn_dropout: f64,
        rng: &mut SeedRng,
    ) -> Result<NodeId> {
        let a = self.attn.forward(g, x, mask, train, attn_dropout, rng)?;
        let x1 = g.add(x, a)?;
        let x1 = self.ln1.forward(g, x1)?;
        let h = self.ffn1.forward(g, x1)?;
        let h = g.gelu(h);
        let f = self.ffn2.forward(g, h)?;
        let x2 = g.add(x1, f)?;
        self.ln2.forward(g, x2)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.attn
            .params()
            .chain(self.ffn1.params())
            .chain(self.ffn2.params())
            .chain(self.ln1.params())
            .chain(self.ln2.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.attn
            .params_mut()
            .chain(self.ffn1.params_mut())
            .chain(self.ffn2.params_mut())
            .chain(self.ln1.params_mut())
            .chain(self.ln2.params_mut())
    }
}

/// Sinusoidal position table: row `p`, column `2i` holds
/// `sin(p / 10000^(2i/d))` and column `2i+1` the matching cosine.
pub fn sinusoidal_encoding<T: Scalar>(num_positions: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "sinusoidal encoding needs an even dimension, got {d}"
        )));
    }
    if num_positions == 0 || d == 0 {
        return Err(Error::invalid("sinusoidal encoding needs positive dims"));
    }
    let mut t = Tensor::zeros(&[num_positions, d]);
    for p in 0..num_positions {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 * freq;
            t.data_mut()[p * d + 2 * i] = sc::<T>(angle.sin());
            t.data_mut()[p * d + 2 * i + 1] = sc::<T>(angle.cos());
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn rand_tensor(dims: &[usize], rng: &mut SeedRng) -> Tensor<f64> {
        let mut t = Tensor::zeros(dims);
        for v in t.data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        t
    }

    #[test]
    fn sinusoidal_row_zero_alternates() {
        let t = sinusoidal_encoding::<f64>(4, 6).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinusoidal_entries_in_range_and_rows_distinct() {
        let t = sinusoidal_encoding::<f64>(64, 16).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for p in 0..64 {
            for q in (p + 1)..64 {
                assert_ne!(t.row(p), t.row(q), "rows {p} and {q} collide");
            }
        }
    }

    #[test]
    fn sinusoidal_rejects_odd_dim() {
        assert!(sinusoidal_encoding::<f64>(4, 5).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ln = LayerNorm::<f64>::new("ln", 4);

        // Constant vector collapses to the bias (zero here).
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.7));
        let y = ln.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-3));

        // [1, -1] is already normalized under population variance.
        let ln2 = LayerNorm::<f64>::new("ln2", 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = ln2.forward(&mut g, x).unwrap();
        let out = g.value(y).data().to_vec();
        assert!((out[0] - 1.0).abs() < 1e-2 && (out[1] + 1.0).abs() < 1e-2);

        // Random input: zero mean, unit variance before the affine part.
        let mut rng = rng_from_seed(3);
        let ln3 = LayerNorm::<f64>::new("ln3", 64);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[5, 64], &mut rng));
        let y = ln3.forward(&mut g, x).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 64.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn attention_single_token_is_projected_value() {
        let mut rng = rng_from_seed(4);
        let mha = MultiHeadAttention::<f64>::new("mha", 8, 2, &mut rng).unwrap();
        let x = rand_tensor(&[1, 8], &mut rng);

        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let mask = Arc::new(Mask::full(1));
        let out = mha
            .forward(&mut g, xid, &mask, false, 0.0, &mut rng)
            .unwrap();

        // One token: softmax over itself is 1, so out = wo(wv(x)).
        let mut g2 = Graph::new();
        let xid2 = g2.constant(x);
        let v = mha.wv.forward(&mut g2, xid2).unwrap();
        let expect = mha.wo.forward(&mut g2, v).unwrap();
        let (a, b) = (g.value(out).data(), g2.value(expect).data());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identity_mask_isolates_tokens() {
        let mut rng = rng_from_seed(5);
        let mha = MultiHeadAttention::<f64>::new("mha", 8, 2, &mut rng).unwrap();
        let mask = Arc::new(Mask::identity(4));

        let base = rand_tensor(&[4, 8], &mut rng);
        let mut g = Graph::new();
        let xid = g.constant(base.clone());
        let out = mha
            .forward(&mut g, xid, &mask, false, 0.0, &mut rng)
            .unwrap();

        // Perturb token 2; tokens 0, 1, 3 must be bit-identical.
        let mut pert = base.clone();
        for j in 0..8 {
            pert.data_mut()[2 * 8 + j] += 0.5;
        }
        let mut g2 = Graph::new();
        let xid2 = g2.constant(pert);
        let out2 = mha
            .forward(&mut g2, xid2, &mask, false, 0.0, &mut rng)
            .unwrap();

        for t in [0usize, 1, 3] {
            assert_eq!(g.value(out).row(t), g2.value(out2).row(t), "token {t}");
        }
        assert_ne!(g.value(out).row(2), g2.value(out2).row(2));
    }

    #[test]
    fn attention_block_mask_bit_exact_independence() {
        let mut rng = rng_from_seed(6);
        let mha = MultiHeadAttention::<f64>::new("mha", 8, 1, &mut rng).unwrap();
        // Blocks {0,1} and {2,3}.
        let mask = Arc::new(Mask::from_fn(4, |i, j| (i < 2) == (j < 2)));

        let base = rand_tensor(&[4, 8], &mut rng);
        let mut pert = base.clone();
        for j in 0..8 {
            pert.data_mut()[3 * 8 + j] = rng.gen::<f64>() * 10.0 - 5.0;
        }

        let run = |input: Tensor<f64>| {
            let mut rng = rng_from_seed(0);
            let mut g = Graph::new();
            let xid = g.constant(input);
            let out = mha
                .forward(&mut g, xid, &mask, false, 0.0, &mut rng)
                .unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(base), run(pert));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn attention_rejects_empty_mask_row() {
        let mut rng = rng_from_seed(7);
        let mha = MultiHeadAttention::<f64>::new("mha", 4, 1, &mut rng).unwrap();
        let mask = Arc::new(Mask::from_fn(2, |i, j| i == 0 && j == 0));
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[2, 4], &mut rng));
        let err = mha
            .forward(&mut g, x, &mask, false, 0.0, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyMaskRow { row: 1 }));
    }

    #[test]
    fn attention_softmax_rows_sum_to_one_over_allowed() {
        let mut rng = rng_from_seed(8);
        let dim = 8;
        let heads = 2;
        let len = 6;
        let mha = MultiHeadAttention::<f64>::new("mha", dim, heads, &mut rng).unwrap();
        let mask = Arc::new(Mask::from_fn(len, |i, j| (i < 3) == (j < 3)));
        let x = rand_tensor(&[len, dim], &mut rng);

        // Recompute one head's attention weights by hand.
        let mut g = Graph::new();
        let xid = g.constant(x);
        let q = mha.wq.forward(&mut g, xid).unwrap();
        let k = mha.wk.forward(&mut g, xid).unwrap();
        let hd = dim / heads;
        let qh = g.slice_cols(q, 0, hd).unwrap();
        let kh = g.slice_cols(k, 0, hd).unwrap();
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt).unwrap();
        let scaled = g.affine(logits, 1.0 / (hd as f64).sqrt(), 0.0);
        let masked = g.mask_penalty(scaled, &mask).unwrap();
        let attn = g.softmax_rows(masked);
        let w = g.value(attn);
        for i in 0..len {
            let allowed: f64 = (0..len)
                .filter(|&j| mask.allowed(i, j))
                .map(|j| w.at(i, j))
                .sum();
            assert!((allowed - 1.0).abs() < 1e-6);
            for j in 0..len {
                if !mask.allowed(i, j) {
                    assert_eq!(w.at(i, j), 0.0, "disallowed weight must underflow to zero");
                }
            }
        }
    }
}
