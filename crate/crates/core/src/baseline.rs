//! The linear-projection Transformer used as the comparison arm, and
//! Net2Net-style width expansion of its weights.
//!
//! Blocks share the Tokenformer wiring (pre-norm residuals, learned absolute
//! positions, tied de-embedding, non-parametric final norm) so the two arms
//! differ only in how projections are computed. There are no biases.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{self, Arm, LanguageModel, NamedParam, ParamVars};
use crate::model::INIT_STD;
use crate::rng::{randn, InitPolicy, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layer: usize,
    pub d_model: usize,
    pub n_head: usize,
    pub n_vocab: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub ln_affine: bool,
}

impl TransformerConfig {
    pub fn new(n_layer: usize, d_model: usize, n_head: usize, n_vocab: usize, max_seq: usize) -> Self {
        TransformerConfig { n_layer, d_model, n_head, n_vocab, max_seq, ln_affine: false }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("n_vocab", self.n_vocab),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::Config(format!("d_model {} not divisible by n_head {}", self.d_model, self.n_head)));
        }
        Ok(())
    }

    /// `12·n_layer·d_model²` block weights (plus `4·d_model` per layer with
    /// affine norms) and `(n_vocab + max_seq)·d_model` embeddings.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ln = if self.ln_affine { 4 * d } else { 0 };
        self.n_layer * (12 * d * d + ln) + (self.n_vocab + self.max_seq) * d
    }
}

pub(crate) const WEIGHTS: [&str; 6] = ["w_q", "w_k", "w_v", "w_o", "w_1", "w_2"];

/// Projection weights of one block, applied as `X·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBlockWeights<F: Scalar = f64> {
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    /// `d × 4d`, followed by GeLU.
    pub w_1: Tensor<F>,
    /// `4d × d`.
    pub w_2: Tensor<F>,
    pub ln1: Option<(Tensor<F>, Tensor<F>)>,
    pub ln2: Option<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> LinearBlockWeights<F> {
    pub fn init(rng: &mut Rng, d: usize, ln_affine: bool) -> Self {
        let ln = || ln_affine.then(|| (Tensor::full(&[1, d], F::one()), Tensor::zeros(&[1, d])));
        LinearBlockWeights {
            w_q: randn(rng, &[d, d], 0.0, INIT_STD),
            w_k: randn(rng, &[d, d], 0.0, INIT_STD),
            w_v: randn(rng, &[d, d], 0.0, INIT_STD),
            w_o: randn(rng, &[d, d], 0.0, INIT_STD),
            w_1: randn(rng, &[d, 4 * d], 0.0, INIT_STD),
            w_2: randn(rng, &[4 * d, d], 0.0, INIT_STD),
            ln1: ln(),
            ln2: ln(),
        }
    }

    pub fn zeros(d: usize) -> Self {
        LinearBlockWeights {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            w_1: Tensor::zeros(&[d, 4 * d]),
            w_2: Tensor::zeros(&[4 * d, d]),
            ln1: None,
            ln2: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn weights(&self) -> [&Tensor<F>; 6] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.w_2]
    }

    fn check(&self) -> Result<()> {
        let d = self.d_model();
        let want = [[d, d], [d, d], [d, d], [d, d], [d, 4 * d], [4 * d, d]];
        for ((name, w), shape) in WEIGHTS.iter().zip(self.weights()).zip(want) {
            if w.shape() != shape {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", w.shape())));
            }
        }
        for (name, pair) in [("ln1", &self.ln1), ("ln2", &self.ln2)] {
            if let Some((g, b)) = pair {
                if g.shape() != [1, d] || b.shape() != [1, d] {
                    return Err(Error::Format(format!("{name}: affine terms must be 1 × {d}")));
                }
            }
        }
        Ok(())
    }
}

struct BlockVars {
    w: [Var; 6],
    ln1: Option<(Var, Var)>,
    ln2: Option<(Var, Var)>,
}

fn register_block<F: Scalar>(tape: &mut Tape<F>, w: &LinearBlockWeights<F>, flat: &mut Vec<Var>) -> BlockVars {
    let mut leaf = |tape: &mut Tape<F>, t: &Tensor<F>| {
        let v = tape.leaf(t.clone());
        flat.push(v);
        v
    };
    let vars = w.weights().map(|t| leaf(tape, t));
    let ln1 = w.ln1.as_ref().map(|(g, b)| (leaf(tape, g), leaf(tape, b)));
    let ln2 = w.ln2.as_ref().map(|(g, b)| (leaf(tape, g), leaf(tape, b)));
    BlockVars { w: vars, ln1, ln2 }
}

fn block_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    b: &BlockVars,
    batch: usize,
    seq: usize,
    n_head: usize,
) -> Result<Var> {
    let [w_q, w_k, w_v, w_o, w_1, w_2] = b.w;
    let h = lm::layer_norm_on_tape(tape, x, b.ln1)?;
    let q = tape.matmul(h, w_q)?;
    let k = tape.matmul(h, w_k)?;
    let v = tape.matmul(h, w_v)?;
    let att = lm::causal_self_attention(tape, q, k, v, batch, seq, n_head)?;
    let att = tape.matmul(att, w_o)?;
    let inter = tape.add(x, att)?;
    let h = lm::layer_norm_on_tape(tape, inter, b.ln2)?;
    let up = tape.matmul(h, w_1)?;
    let up = tape.gelu(up)?;
    let down = tape.matmul(up, w_2)?;
    tape.add(inter, down)
}

/// One pre-norm Transformer block on a single sequence `x` (`T × d`).
pub fn linear_block_forward<F: Scalar>(x: &Tensor<F>, w: &LinearBlockWeights<F>, n_head: usize) -> Result<Tensor<F>> {
    w.check()?;
    if x.cols() != w.d_model() {
        return Err(Error::dim("linear_block_forward", x.shape(), &[x.rows(), w.d_model()]));
    }
    let mut tape = Tape::new();
    let mut flat = Vec::new();
    let vars = register_block(&mut tape, w, &mut flat);
    let xv = tape.leaf(x.clone());
    let out = block_on_tape(&mut tape, xv, &vars, 1, x.rows(), n_head)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLM<F: Scalar = f64> {
    config: TransformerConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub blocks: Vec<LinearBlockWeights<F>>,
}

impl<F: Scalar> TransformerLM<F> {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = randn(rng, &[config.n_vocab, d], 0.0, INIT_STD);
        let position_embedding = randn(rng, &[config.max_seq, d], 0.0, INIT_STD);
        let blocks = (0..config.n_layer).map(|_| LinearBlockWeights::init(rng, d, config.ln_affine)).collect();
        Ok(TransformerLM { config, token_embedding, position_embedding, blocks })
    }

    pub fn from_parts(
        config: TransformerConfig,
        token_embedding: Tensor<F>,
        position_embedding: Tensor<F>,
        blocks: Vec<LinearBlockWeights<F>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if token_embedding.shape() != [config.n_vocab, d] || position_embedding.shape() != [config.max_seq, d] {
            return Err(Error::Format("embedding shapes disagree with config".into()));
        }
        if blocks.len() != config.n_layer {
            return Err(Error::Format(format!("{} blocks for n_layer {}", blocks.len(), config.n_layer)));
        }
        for (i, b) in blocks.iter().enumerate() {
            b.check().map_err(|e| Error::Format(format!("blocks.{i}: {e}")))?;
            if b.d_model() != d || b.ln1.is_some() != config.ln_affine || b.ln2.is_some() != config.ln_affine {
                return Err(Error::Format(format!("blocks.{i} disagrees with config")));
            }
        }
        Ok(TransformerLM { config, token_embedding, position_embedding, blocks })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Block `layer` on hidden states `x` (`T × d`).
    pub fn block_forward(&self, layer: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        let w = self.blocks.get(layer).ok_or_else(|| Error::Contract(format!("layer {layer} out of range")))?;
        if x.rows() > self.config.max_seq {
            return Err(Error::ContextLength { len: x.rows(), max: self.config.max_seq });
        }
        linear_block_forward(x, w, self.config.n_head)
    }
}

impl<F: Scalar> LanguageModel<F> for TransformerLM<F> {
    fn arm(&self) -> Arm {
        Arm::Transformer
    }

    fn n_vocab(&self) -> usize {
        self.config.n_vocab
    }

    fn max_seq(&self) -> usize {
        self.config.max_seq
    }

    fn parameters(&self) -> Vec<NamedParam<'_, F>> {
        let mut out = vec![
            NamedParam { name: "token_embedding".into(), tensor: &self.token_embedding, decay: false },
            NamedParam { name: "position_embedding".into(), tensor: &self.position_embedding, decay: false },
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, w) in WEIGHTS.iter().zip(b.weights()) {
                out.push(NamedParam { name: format!("blocks.{i}.{name}"), tensor: w, decay: true });
            }
            for (ln, pair) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                if let Some((g, bias)) = pair {
                    out.push(NamedParam { name: format!("blocks.{i}.{ln}.gamma"), tensor: g, decay: false });
                    out.push(NamedParam { name: format!("blocks.{i}.{ln}.beta"), tensor: bias, decay: false });
                }
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend([&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o, &mut b.w_1, &mut b.w_2]);
            for (g, bias) in [&mut b.ln1, &mut b.ln2].into_iter().flatten() {
                out.push(g);
                out.push(bias);
            }
        }
        out
    }

    fn forward_batch(&self, tape: &mut Tape<F>, batch: &[Vec<usize>]) -> Result<(Var, ParamVars)> {
        let seq = lm::check_batch(batch, self.config.n_vocab, self.config.max_seq)?;
        let mut flat = Vec::new();
        let tok = tape.leaf(self.token_embedding.clone());
        let pos = tape.leaf(self.position_embedding.clone());
        flat.extend([tok, pos]);
        let blocks: Vec<BlockVars> = self.blocks.iter().map(|b| register_block(tape, b, &mut flat)).collect();
        let mut x = lm::embed(tape, tok, pos, batch)?;
        for b in &blocks {
            x = block_on_tape(tape, x, b, batch.len(), seq, self.config.n_head)?;
        }
        let h = lm::layer_norm_on_tape(tape, x, None)?;
        let logits = tape.matmul_nt(h, tok)?;
        Ok((logits, flat))
    }
}

/// Widens a square `d_s × d_s` weight to `d_l × d_l`:
/// `W_l = [[W_s, A], [B, C]]` with `A`, `B`, `C` drawn from `policy`.
pub fn net2net_expand<F: Scalar>(w_s: &Tensor<F>, d_l: usize, policy: InitPolicy, rng: &mut Rng) -> Result<Tensor<F>> {
    if w_s.shape().len() != 2 || w_s.rows() != w_s.cols() {
        return Err(Error::Expansion(format!("expected a square matrix, got {:?}", w_s.shape())));
    }
    if d_l <= w_s.rows() {
        return Err(Error::Expansion(format!("target width {d_l} must exceed {}", w_s.rows())));
    }
    net2net_expand_rect(w_s, d_l, d_l, policy, rng)
}

/// Block-extends each axis of a rectangular weight; the original occupies
/// the top-left corner and everything else comes from `policy`.
pub fn net2net_expand_rect<F: Scalar>(
    w: &Tensor<F>,
    rows_l: usize,
    cols_l: usize,
    policy: InitPolicy,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if w.shape().len() != 2 {
        return Err(Error::Expansion(format!("expected a matrix, got {:?}", w.shape())));
    }
    let (r, c) = (w.rows(), w.cols());
    if rows_l < r || cols_l < c || (rows_l == r && cols_l == c) {
        return Err(Error::Expansion(format!("cannot expand {r}×{c} to {rows_l}×{cols_l}")));
    }
    let mut out: Tensor<F> = policy.sample(rng, &[rows_l, cols_l]);
    let data = out.data_mut();
    for i in 0..r {
        data[i * cols_l..i * cols_l + c].copy_from_slice(w.row(i));
    }
    Ok(out)
}

fn pad_cols<F: Scalar>(t: &Tensor<F>, cols: usize, fill: F) -> Tensor<F> {
    let mut data = Vec::with_capacity(t.rows() * cols);
    for i in 0..t.rows() {
        data.extend_from_slice(t.row(i));
        data.extend(std::iter::repeat_n(fill, cols - t.cols()));
    }
    Tensor::from_parts(vec![t.rows(), cols], data)
}

/// Widens every block of `model` to `d_l`, keeping the head width fixed (so
/// `n_head` grows with `d_l`). Embedding tables keep their rows and gain
/// zero columns; affine norms gain `gamma = 1`, `beta = 0`.
pub fn expand_transformer<F: Scalar>(
    model: &TransformerLM<F>,
    d_l: usize,
    policy: InitPolicy,
    rng: &mut Rng,
) -> Result<TransformerLM<F>> {
    let cfg = model.config();
    let d_s = cfg.d_model;
    if d_l <= d_s {
        return Err(Error::Expansion(format!("target width {d_l} must exceed {d_s}")));
    }
    let head_dim = d_s / cfg.n_head;
    if !d_l.is_multiple_of(head_dim) {
        return Err(Error::Expansion(format!("width {d_l} is not a multiple of head width {head_dim}")));
    }
    let config = TransformerConfig { d_model: d_l, n_head: d_l / head_dim, ..cfg.clone() };
    let grow_ln = |pair: &Option<(Tensor<F>, Tensor<F>)>| {
        pair.as_ref().map(|(g, b)| (pad_cols(g, d_l, F::one()), pad_cols(b, d_l, F::zero())))
    };
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        blocks.push(LinearBlockWeights {
            w_q: net2net_expand(&b.w_q, d_l, policy, rng)?,
            w_k: net2net_expand(&b.w_k, d_l, policy, rng)?,
            w_v: net2net_expand(&b.w_v, d_l, policy, rng)?,
            w_o: net2net_expand(&b.w_o, d_l, policy, rng)?,
            w_1: net2net_expand_rect(&b.w_1, d_l, 4 * d_l, policy, rng)?,
            w_2: net2net_expand_rect(&b.w_2, 4 * d_l, d_l, policy, rng)?,
            ln1: grow_ln(&b.ln1),
            ln2: grow_ln(&b.ln2),
        });
    }
    TransformerLM::from_parts(
        config,
        pad_cols(&model.token_embedding, d_l, F::zero()),
        pad_cols(&model.position_embedding, d_l, F::zero()),
        blocks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{model_grad_check, randomize_parameters};
    use crate::tensor::matmul;

    #[test]
    fn zero_weights_give_identity_block() {
        let x: Tensor<f64> = randn(&mut Rng::new(1), &[5, 8], 0.0, 1.0);
        assert_eq!(linear_block_forward(&x, &LinearBlockWeights::zeros(8), 2).unwrap(), x);
    }

    #[test]
    fn single_token_attention_is_value_row() {
        // With W_O = I and the FFN off, the block adds V = LN(x)·W_V to x.
        let mut rng = Rng::new(2);
        let mut w = LinearBlockWeights::<f64>::init(&mut rng, 8, false);
        w.w_o = Tensor::identity(8);
        w.w_1 = Tensor::zeros(&[8, 32]);
        let x: Tensor<f64> = randn(&mut rng, &[1, 8], 0.0, 1.0);
        let out = linear_block_forward(&x, &w, 2).unwrap();
        let v = matmul(&lm::layer_norm_nonparam(&x, lm::LN_EPS).unwrap(), &w.w_v).unwrap();
        assert!(out.sub(&x).unwrap().max_abs_diff(&v).unwrap() < 1e-14);
    }

    #[test]
    fn param_count_matches_tensors() {
        for ln_affine in [false, true] {
            let mut cfg = TransformerConfig::new(2, 16, 4, 30, 8);
            cfg.ln_affine = ln_affine;
            let m = TransformerLM::<f64>::new(cfg.clone(), &mut Rng::new(3)).unwrap();
            assert_eq!(m.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = TransformerLM::<f64>::new(TransformerConfig::new(1, 8, 2, 11, 4), &mut Rng::new(4)).unwrap();
        randomize_parameters(&mut m, &mut Rng::new(40), 0.5);
        let r = model_grad_check(&m, &[vec![3, 1, 4, 1]], &[vec![1, 4, 1, 5]], 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn expand_two_to_three_keeps_corner() {
        let w = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let l = net2net_expand(&w, 3, InitPolicy::Zeros, &mut Rng::new(5)).unwrap();
        assert_eq!(l, Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![3.0, 4.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let g = net2net_expand(&w, 4, InitPolicy::default(), &mut Rng::new(5)).unwrap();
        assert_eq!(g.slice_rows(0, 2).unwrap().slice_cols(0, 2).unwrap(), w);
    }

    #[test]
    fn zeros_policy_preserves_old_subspace() {
        let mut rng = Rng::new(6);
        let w: Tensor<f64> = randn(&mut rng, &[4, 4], 0.0, 1.0);
        let x: Tensor<f64> = randn(&mut rng, &[3, 4], 0.0, 1.0);
        let wl = net2net_expand(&w, 6, InitPolicy::Zeros, &mut rng).unwrap();
        let xl = crate::tensor::concat_cols(&[&x, &Tensor::zeros(&[3, 2])]).unwrap();
        let yl = matmul(&xl, &wl).unwrap();
        assert_eq!(yl.slice_cols(0, 4).unwrap(), matmul(&x, &w).unwrap());
        assert_eq!(yl.slice_cols(4, 2).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn gaussian_policy_changes_outputs() {
        let mut rng = Rng::new(7);
        let w: Tensor<f64> = randn(&mut rng, &[4, 4], 0.0, 1.0);
        let wl = net2net_expand(&w, 6, InitPolicy::default(), &mut rng).unwrap();
        let xl: Tensor<f64> = randn(&mut rng, &[3, 6], 0.0, 1.0);
        let small = matmul(&xl.slice_cols(0, 4).unwrap(), &w).unwrap();
        let large = matmul(&xl, &wl).unwrap().slice_cols(0, 4).unwrap();
        assert!(large.max_abs_diff(&small).unwrap() > 0.0);
    }

    #[test]
    fn expansion_errors() {
        let w = Tensor::<f64>::zeros(&[4, 4]);
        assert!(matches!(net2net_expand(&w, 4, InitPolicy::Zeros, &mut Rng::new(8)), Err(Error::Expansion(_))));
        assert!(matches!(net2net_expand(&w, 2, InitPolicy::Zeros, &mut Rng::new(8)), Err(Error::Expansion(_))));
        let r = Tensor::<f64>::zeros(&[4, 8]);
        assert!(net2net_expand(&r, 9, InitPolicy::Zeros, &mut Rng::new(8)).is_err());
        assert_eq!(net2net_expand_rect(&r, 6, 24, InitPolicy::Zeros, &mut Rng::new(8)).unwrap().shape(), &[6, 24]);
    }

    #[test]
    fn expanded_model_is_consistent() {
        let mut cfg = TransformerConfig::new(2, 8, 2, 13, 6);
        cfg.ln_affine = true;
        let m = TransformerLM::<f64>::new(cfg, &mut Rng::new(9)).unwrap();
        let l = expand_transformer(&m, 16, InitPolicy::default(), &mut Rng::new(10)).unwrap();
        assert_eq!(l.config().n_head, 4);
        assert_eq!(l.param_count(), l.config().param_count());
        assert!(l.logits(&[1, 2, 3]).is_ok());
        assert!(expand_transformer(&m, 10, InitPolicy::Zeros, &mut Rng::new(10)).is_err());
    }
}
