//! Pieces shared by both language-model arms: the [`LanguageModel`] trait the
//! trainer and checkpointing work against, layer normalisation, causal
//! token-token attention and embedding lookup.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Which architecture a model or checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Tokenformer,
    Transformer,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Tokenformer => "tokenformer",
            Arm::Transformer => "transformer",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokenformer" => Ok(Arm::Tokenformer),
            "transformer" => Ok(Arm::Transformer),
            other => Err(Error::Config(format!("unknown arm {other:?} (expected tokenformer or transformer)"))),
        }
    }
}

/// A parameter tensor with its stable name and whether weight decay applies.
#[derive(Debug)]
pub struct NamedParam<'a, F: Scalar> {
    pub name: String,
    pub tensor: &'a Tensor<F>,
    pub decay: bool,
}

/// Leaf nodes for every parameter of a model, in [`LanguageModel::parameters`] order.
pub type ParamVars = Vec<Var>;

pub trait LanguageModel<F: Scalar> {
    fn arm(&self) -> Arm;
    fn n_vocab(&self) -> usize;
    fn max_seq(&self) -> usize;

    /// All learnable tensors in a fixed order.
    fn parameters(&self) -> Vec<NamedParam<'_, F>>;

    /// Same tensors and order as [`LanguageModel::parameters`], mutably.
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>>;

    /// Records the forward pass for a batch of equal-length sequences.
    /// Returns logits with one row per token (sequence-major) and the
    /// parameter leaves.
    fn forward_batch(&self, tape: &mut Tape<F>, batch: &[Vec<usize>]) -> Result<(Var, ParamVars)>;

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.len()).sum()
    }

    /// Logits (`T × n_vocab`) for a single sequence.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward_batch(&mut tape, &[tokens.to_vec()])?;
        Ok(tape.value(logits).clone())
    }
}

/// Mean next-token cross-entropy of `model` on `inputs`, with `targets[b][t]`
/// the token that should follow `inputs[b][..=t]`.
pub fn loss_value<F: Scalar, M: LanguageModel<F> + ?Sized>(
    model: &M,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> Result<f64> {
    let flat = flat_targets(inputs, targets, model.n_vocab())?;
    let mut tape = Tape::new();
    let (logits, _) = model.forward_batch(&mut tape, inputs)?;
    Ok(crate::autodiff::cross_entropy_value(tape.value(logits), &flat)?.f64())
}

/// Loss and its gradient with respect to every parameter, in
/// [`LanguageModel::parameters`] order.
pub fn loss_and_grads<F: Scalar, M: LanguageModel<F> + ?Sized>(
    model: &M,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> Result<(f64, Vec<Tensor<F>>)> {
    let flat = flat_targets(inputs, targets, model.n_vocab())?;
    let mut tape = Tape::new();
    let (logits, params) = model.forward_batch(&mut tape, inputs)?;
    let loss = tape.cross_entropy(logits, &flat)?;
    let value = tape.value(loss).data()[0].f64();
    let mut grads = tape.backward(loss)?;
    Ok((value, params.into_iter().map(|v| grads.take(v)).collect()))
}

fn flat_targets(inputs: &[Vec<usize>], targets: &[Vec<usize>], n_vocab: usize) -> Result<Vec<usize>> {
    if inputs.len() != targets.len() || inputs.iter().zip(targets).any(|(i, t)| i.len() != t.len()) {
        return Err(Error::Contract("targets must match inputs in shape".into()));
    }
    let flat: Vec<usize> = targets.iter().flatten().copied().collect();
    if let Some(&id) = flat.iter().find(|&&id| id >= n_vocab) {
        return Err(Error::Vocabulary { id, vocab: n_vocab });
    }
    Ok(flat)
}

/// Redraws every parameter from N(0, std²), leaving taus alone.
pub fn randomize_parameters<F: Scalar, M: LanguageModel<F> + ?Sized>(
    model: &mut M,
    rng: &mut crate::rng::Rng,
    std: f64,
) {
    for t in model.parameters_mut() {
        *t = crate::rng::randn(rng, t.shape(), 0.0, std);
    }
}

/// Checks [`loss_and_grads`] against central differences over every
/// parameter coordinate of `model`.
pub fn model_grad_check<F: Scalar, M: LanguageModel<F> + Clone>(
    model: &M,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Contract("finite differences need h > 0".into()));
    }
    let (_, grads) = loss_and_grads(model, inputs, targets)?;
    let mut probe = model.clone();
    let mut report: Option<GradCheckReport> = None;
    for (p, grad) in grads.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let orig = probe.parameters_mut()[p].data()[i];
            probe.parameters_mut()[p].data_mut()[i] = F::of(orig.f64() + h);
            let plus = loss_value(&probe, inputs, targets)?;
            probe.parameters_mut()[p].data_mut()[i] = F::of(orig.f64() - h);
            let minus = loss_value(&probe, inputs, targets)?;
            probe.parameters_mut()[p].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let r = GradCheckReport::compare(&grad.to_f64_vec(), &numeric);
        report = Some(match report {
            Some(acc) => acc.merge(r),
            None => r,
        });
    }
    report.ok_or_else(|| Error::Contract("model has no parameters".into()))
}

/// Checks a batch against the vocabulary and context size; returns the sequence length.
pub fn check_batch(batch: &[Vec<usize>], n_vocab: usize, max_seq: usize) -> Result<usize> {
    let seq = batch.first().map(Vec::len).ok_or_else(|| Error::Contract("empty batch".into()))?;
    if seq == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if batch.iter().any(|s| s.len() != seq) {
        return Err(Error::Contract("sequences in a batch must share a length".into()));
    }
    if seq > max_seq {
        return Err(Error::ContextLength { len: seq, max: max_seq });
    }
    if let Some(&id) = batch.iter().flatten().find(|&&id| id >= n_vocab) {
        return Err(Error::Vocabulary { id, vocab: n_vocab });
    }
    Ok(seq)
}

/// Per-row `(x − mean) / √(var + eps)` on plain tensors, no affine terms.
pub fn layer_norm_nonparam<F: Scalar>(x: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
    if !(eps > 0.0) {
        return Err(Error::Contract("layer norm needs eps > 0".into()));
    }
    let d = x.cols();
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(eps);
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let denom = (var + eps).sqrt();
        data.extend(row.iter().map(|&v| (v - mean) / denom));
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Layer norm on a tape; `affine` holds `(gamma, beta)` rows when enabled.
pub fn layer_norm_on_tape<F: Scalar>(tape: &mut Tape<F>, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
    let inv_d = 1.0 / tape.value(x).cols() as f64;
    let sum = tape.row_sum(x)?;
    let mean = tape.scale(sum, inv_d)?;
    let centered = tape.sub_col(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let sq_sum = tape.row_sum(sq)?;
    let var = tape.scale(sq_sum, inv_d)?;
    let var = tape.add_scalar(var, LN_EPS)?;
    let denom = tape.sqrt(var)?;
    let normed = tape.div_col(centered, denom)?;
    match affine {
        Some((gamma, beta)) => {
            let scaled = tape.mul_row(normed, gamma)?;
            tape.add_row(scaled, beta)
        }
        None => Ok(normed),
    }
}

/// Multi-head causal scaled dot-product attention over `batch` sequences of
/// `seq` rows each, stacked in `q`, `k`, `v` (`(batch·seq) × d`). Heads split
/// the feature axis into `n_head` equal slices; scores are scaled by
/// `1/√(d/n_head)`.
pub fn causal_self_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    n_head: usize,
) -> Result<Var> {
    let d = tape.value(q).cols();
    if n_head == 0 || !d.is_multiple_of(n_head) {
        return Err(Error::Config(format!("d_model {d} not divisible by n_head {n_head}")));
    }
    let head_dim = d / n_head;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(batch);
    for b in 0..batch {
        let (qb, kb, vb) = if batch == 1 {
            (q, k, v)
        } else {
            (tape.slice_rows(q, b * seq, seq)?, tape.slice_rows(k, b * seq, seq)?, tape.slice_rows(v, b * seq, seq)?)
        };
        let mut heads = Vec::with_capacity(n_head);
        for h in 0..n_head {
            let (qh, kh, vh) = if n_head == 1 {
                (qb, kb, vb)
            } else {
                (
                    tape.slice_cols(qb, h * head_dim, head_dim)?,
                    tape.slice_cols(kb, h * head_dim, head_dim)?,
                    tape.slice_cols(vb, h * head_dim, head_dim)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        outputs.push(if n_head == 1 { heads[0] } else { tape.concat_cols(&heads)? });
    }
    if batch == 1 {
        Ok(outputs[0])
    } else {
        tape.concat_rows(&outputs)
    }
}

/// Token plus learned absolute position embeddings for a batch.
pub fn embed<F: Scalar>(tape: &mut Tape<F>, tok: Var, pos: Var, batch: &[Vec<usize>]) -> Result<Var> {
    let seq = batch[0].len();
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
    let te = tape.gather(tok, &ids)?;
    let pe = tape.gather(pos, &positions)?;
    tape.add(te, pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::full(&[1, 4], 3.7);
        assert_eq!(layer_norm_nonparam(&x, LN_EPS).unwrap(), Tensor::zeros(&[1, 4]));
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let x: Tensor<f64> = randn(&mut Rng::new(5), &[3, 32], 2.0, 3.0);
        let y = layer_norm_nonparam(&x, LN_EPS).unwrap();
        for r in 0..3 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 32.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn tape_layer_norm_matches_plain_and_identity_affine() {
        let x: Tensor<f64> = randn(&mut Rng::new(6), &[4, 8], 0.0, 1.0);
        let plain = layer_norm_nonparam(&x, LN_EPS).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let a = layer_norm_on_tape(&mut tape, xv, None).unwrap();
        let g = tape.leaf(Tensor::full(&[1, 8], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1, 8]));
        let c = layer_norm_on_tape(&mut tape, xv, Some((g, b))).unwrap();
        assert!(tape.value(a).max_abs_diff(&plain).unwrap() < 1e-14);
        assert_eq!(tape.value(a), tape.value(c));
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let mut rng = Rng::new(7);
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(randn(&mut rng, &[1, 8], 0.0, 1.0));
        let k = tape.leaf(randn(&mut rng, &[1, 8], 0.0, 1.0));
        let vt = randn(&mut rng, &[1, 8], 0.0, 1.0);
        let v = tape.leaf(vt.clone());
        let out = causal_self_attention(&mut tape, q, k, v, 1, 1, 2).unwrap();
        assert_eq!(tape.value(out), &vt);
    }

    #[test]
    fn batch_check_errors() {
        assert!(matches!(check_batch(&[vec![1, 300]], 257, 8), Err(Error::Vocabulary { id: 300, .. })));
        assert!(matches!(check_batch(&[vec![0; 9]], 257, 8), Err(Error::ContextLength { len: 9, max: 8 })));
        assert_eq!(check_batch(&[vec![1, 2], vec![3, 4]], 257, 8).unwrap(), 2);
        assert!(check_batch(&[vec![1, 2], vec![3]], 257, 8).is_err());
    }
}
