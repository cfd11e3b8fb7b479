//! The Tokenformer language model.
//!
//! Every block is pre-norm: `X' = X + MHA(LN(X))`, `Y = X' + FFN(LN(X'))`.
//! The Q, K, V and output projections of MHA are Pattention layers over
//! full-width features; heads only exist inside token-token attention. The
//! FFN is a single Pattention layer. Layer norm carries no learnable terms
//! unless `ln_affine` is set, and logits come from the token embedding
//! (tied de-embedding).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{self, Arm, LanguageModel, NamedParam, ParamVars};
use crate::pattention::{pattention_on_tape, ParamTokens, ScoreVariant};
use crate::rng::{randn, Rng};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub d_model: usize,
    pub n_head: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub n_v: usize,
    pub n_o: usize,
    pub n_ffn: usize,
    pub n_vocab: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub ln_affine: bool,
    #[serde(default)]
    pub variant: ScoreVariant,
}

impl ModelConfig {
    /// Attention projections get `d_model` pairs each, the FFN `4·d_model`.
    pub fn with_default_pairs(n_layer: usize, d_model: usize, n_head: usize, n_vocab: usize, max_seq: usize) -> Self {
        ModelConfig {
            n_layer,
            d_model,
            n_head,
            n_q: d_model,
            n_k: d_model,
            n_v: d_model,
            n_o: d_model,
            n_ffn: 4 * d_model,
            n_vocab,
            max_seq,
            ln_affine: false,
            variant: ScoreVariant::GeluL2,
        }
    }

    /// Two layers of width 64 over the byte vocabulary.
    pub fn desk() -> Self {
        Self::with_default_pairs(2, 64, 4, 257, 64)
    }

    /// Same config with every attention projection at `attn` pairs and the FFN at `ffn`.
    pub fn with_pairs(mut self, attn: usize, ffn: usize) -> Self {
        self.n_q = attn;
        self.n_k = attn;
        self.n_v = attn;
        self.n_o = attn;
        self.n_ffn = ffn;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("n_q", self.n_q),
            ("n_k", self.n_k),
            ("n_v", self.n_v),
            ("n_o", self.n_o),
            ("n_ffn", self.n_ffn),
            ("n_vocab", self.n_vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::Config(format!("d_model {} not divisible by n_head {}", self.d_model, self.n_head)));
        }
        Ok(())
    }

    pub fn pair_counts(&self) -> [usize; 5] {
        [self.n_q, self.n_k, self.n_v, self.n_o, self.n_ffn]
    }
}

/// Parameter totals of an instantiated model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub non_embedding: usize,
    pub embedding: usize,
    pub total: usize,
}

/// Parameters a model built from `cfg` holds. Each key-value pair carries a
/// key row and a value row of width `d_model`, so a layer holds
/// `2·d_model·(n_q + n_k + n_v + n_o + n_ffn)` token parameters, plus
/// `4·d_model` layer-norm terms when `ln_affine` is on.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let pairs: usize = cfg.pair_counts().iter().sum();
    let ln = if cfg.ln_affine { 4 * cfg.d_model } else { 0 };
    let non_embedding = cfg.n_layer * (2 * cfg.d_model * pairs + ln);
    let embedding = (cfg.n_vocab + cfg.max_seq) * cfg.d_model;
    ParamCount { non_embedding, embedding, total: non_embedding + embedding }
}

pub(crate) const PROJECTIONS: [&str; 5] = ["q", "k", "v", "o", "ffn"];

#[derive(Clone, Debug, PartialEq)]
pub struct TokenformerBlock<F: Scalar = f64> {
    pub q: ParamTokens<F>,
    pub k: ParamTokens<F>,
    pub v: ParamTokens<F>,
    pub o: ParamTokens<F>,
    pub ffn: ParamTokens<F>,
    /// `(gamma, beta)` rows for the two layer norms when `ln_affine` is on.
    pub ln1: Option<(Tensor<F>, Tensor<F>)>,
    pub ln2: Option<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> TokenformerBlock<F> {
    pub fn projections(&self) -> [&ParamTokens<F>; 5] {
        [&self.q, &self.k, &self.v, &self.o, &self.ffn]
    }

    pub fn projections_mut(&mut self) -> [&mut ParamTokens<F>; 5] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.ffn]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenformerLM<F: Scalar = f64> {
    config: ModelConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub blocks: Vec<TokenformerBlock<F>>,
}

#[derive(Clone, Copy)]
struct PVars {
    key: Var,
    value: Var,
    tau: f64,
    variant: ScoreVariant,
}

struct BlockVars {
    proj: [PVars; 5],
    ln1: Option<(Var, Var)>,
    ln2: Option<(Var, Var)>,
}

impl<F: Scalar> TokenformerLM<F> {
    /// Fresh model: embeddings and parameter tokens drawn from N(0, 0.02²).
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = randn(rng, &[config.n_vocab, d], 0.0, INIT_STD);
        let position_embedding = randn(rng, &[config.max_seq, d], 0.0, INIT_STD);
        let ln = || config.ln_affine.then(|| (Tensor::full(&[1, d], F::one()), Tensor::zeros(&[1, d])));
        let blocks = (0..config.n_layer)
            .map(|_| {
                let mut make = |n| ParamTokens::init(rng, n, d, d, INIT_STD, config.variant);
                TokenformerBlock {
                    q: make(config.n_q),
                    k: make(config.n_k),
                    v: make(config.n_v),
                    o: make(config.n_o),
                    ffn: make(config.n_ffn),
                    ln1: ln(),
                    ln2: ln(),
                }
            })
            .collect();
        Ok(TokenformerLM { config, token_embedding, position_embedding, blocks })
    }

    /// Assembles a model from parts, checking every shape against `config`.
    pub fn from_parts(
        config: ModelConfig,
        token_embedding: Tensor<F>,
        position_embedding: Tensor<F>,
        blocks: Vec<TokenformerBlock<F>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let expect = |name: &str, t: &Tensor<F>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Format(format!("{name}: shape {:?}, config wants {shape:?}", t.shape())));
            }
            Ok(())
        };
        expect("token_embedding", &token_embedding, &[config.n_vocab, d])?;
        expect("position_embedding", &position_embedding, &[config.max_seq, d])?;
        if blocks.len() != config.n_layer {
            return Err(Error::Format(format!("{} blocks for n_layer {}", blocks.len(), config.n_layer)));
        }
        for (i, b) in blocks.iter().enumerate() {
            for ((name, p), n) in PROJECTIONS.iter().zip(b.projections()).zip(config.pair_counts()) {
                expect(&format!("blocks.{i}.{name}.key"), p.keys(), &[n, d])?;
                expect(&format!("blocks.{i}.{name}.value"), p.values(), &[n, d])?;
            }
            if b.ln1.is_some() != config.ln_affine || b.ln2.is_some() != config.ln_affine {
                return Err(Error::Format(format!("blocks.{i}: layer-norm terms disagree with ln_affine")));
            }
        }
        Ok(TokenformerLM { config, token_embedding, position_embedding, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Frozen Pattention scales, per layer in Q, K, V, O, FFN order.
    pub fn taus(&self) -> Vec<[f64; 5]> {
        self.blocks
            .iter()
            .map(|b| {
                let p = b.projections();
                [p[0].tau(), p[1].tau(), p[2].tau(), p[3].tau(), p[4].tau()]
            })
            .collect()
    }

    pub fn set_variant(&mut self, variant: ScoreVariant) {
        self.config.variant = variant;
        for b in &mut self.blocks {
            for p in b.projections_mut() {
                p.set_variant(variant);
            }
        }
    }

    fn register(&self, tape: &mut Tape<F>) -> (Var, Var, Vec<BlockVars>, ParamVars) {
        let mut flat = Vec::new();
        let mut leaf = |tape: &mut Tape<F>, t: &Tensor<F>| {
            let v = tape.leaf(t.clone());
            flat.push(v);
            v
        };
        let tok = leaf(tape, &self.token_embedding);
        let pos = leaf(tape, &self.position_embedding);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let proj = b.projections().map(|p| PVars {
                key: leaf(tape, p.keys()),
                value: leaf(tape, p.values()),
                tau: p.tau(),
                variant: p.variant(),
            });
            let mut ln =
                |pair: &Option<(Tensor<F>, Tensor<F>)>| pair.as_ref().map(|(g, b)| (leaf(tape, g), leaf(tape, b)));
            let ln1 = ln(&b.ln1);
            let ln2 = ln(&b.ln2);
            blocks.push(BlockVars { proj, ln1, ln2 });
        }
        (tok, pos, blocks, flat)
    }

    fn pattention(tape: &mut Tape<F>, x: Var, p: PVars) -> Result<Var> {
        pattention_on_tape(tape, x, p.key, p.value, p.tau, p.variant)
    }

    fn mha_on_tape(&self, tape: &mut Tape<F>, x: Var, b: &BlockVars, batch: usize, seq: usize) -> Result<Var> {
        let q = Self::pattention(tape, x, b.proj[0])?;
        let k = Self::pattention(tape, x, b.proj[1])?;
        let v = Self::pattention(tape, x, b.proj[2])?;
        let att = lm::causal_self_attention(tape, q, k, v, batch, seq, self.config.n_head)?;
        Self::pattention(tape, att, b.proj[3])
    }

    fn block_on_tape(&self, tape: &mut Tape<F>, x: Var, b: &BlockVars, batch: usize, seq: usize) -> Result<Var> {
        let h = lm::layer_norm_on_tape(tape, x, b.ln1)?;
        let att = self.mha_on_tape(tape, h, b, batch, seq)?;
        let inter = tape.add(x, att)?;
        let h = lm::layer_norm_on_tape(tape, inter, b.ln2)?;
        let ffn = Self::pattention(tape, h, b.proj[4])?;
        tape.add(inter, ffn)
    }

    fn check_hidden(&self, x: &Tensor<F>) -> Result<usize> {
        if x.cols() != self.config.d_model {
            return Err(Error::dim("block input", x.shape(), &[x.rows(), self.config.d_model]));
        }
        if x.rows() > self.config.max_seq {
            return Err(Error::ContextLength { len: x.rows(), max: self.config.max_seq });
        }
        Ok(x.rows())
    }

    fn run_layer(&self, layer: usize, x: &Tensor<F>, stage: Stage) -> Result<Tensor<F>> {
        let seq = self.check_hidden(x)?;
        if layer >= self.blocks.len() {
            return Err(Error::Contract(format!("layer {layer} out of range")));
        }
        let mut tape = Tape::new();
        let (_, _, vars, _) = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let b = &vars[layer];
        let out = match stage {
            Stage::Mha => self.mha_on_tape(&mut tape, xv, b, 1, seq)?,
            Stage::Ffn => Self::pattention(&mut tape, xv, b.proj[4])?,
            Stage::Block => self.block_on_tape(&mut tape, xv, b, 1, seq)?,
        };
        Ok(tape.value(out).clone())
    }

    /// Attention sub-layer of block `layer` on hidden states `x` (`T × d`), without norm or residual.
    pub fn mha_forward(&self, layer: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.run_layer(layer, x, Stage::Mha)
    }

    /// FFN sub-layer of block `layer`: a single Pattention, no norm or residual.
    pub fn ffn_forward(&self, layer: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.run_layer(layer, x, Stage::Ffn)
    }

    /// Full pre-norm residual block `layer`.
    pub fn block_forward(&self, layer: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.run_layer(layer, x, Stage::Block)
    }

    /// Logits (`T × n_vocab`) for one token sequence.
    pub fn lm_forward(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        self.logits(tokens)
    }

    /// Records the model on `tape` with the block input `x` supplied as a
    /// node, for gradient checks through a single block.
    pub fn block_on_tape_with_input(&self, tape: &mut Tape<F>, layer: usize, x: Var) -> Result<Var> {
        let seq = tape.value(x).rows();
        let (_, _, vars, _) = self.register(tape);
        self.block_on_tape(tape, x, &vars[layer], 1, seq)
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Mha,
    Ffn,
    Block,
}

impl<F: Scalar> LanguageModel<F> for TokenformerLM<F> {
    fn arm(&self) -> Arm {
        Arm::Tokenformer
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
            for (name, p) in PROJECTIONS.iter().zip(b.projections()) {
                out.push(NamedParam { name: format!("blocks.{i}.{name}.key"), tensor: p.keys(), decay: true });
                out.push(NamedParam { name: format!("blocks.{i}.{name}.value"), tensor: p.values(), decay: true });
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
            for p in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.ffn] {
                let (k, v) = p.tensors_mut();
                out.push(k);
                out.push(v);
            }
            for (g, bias) in [&mut b.ln1, &mut b.ln2].into_iter().flatten() {
                out.push(g);
                out.push(bias);
            }
        }
        out
    }

    fn forward_batch(&self, tape: &mut Tape<F>, batch: &[Vec<usize>]) -> Result<(Var, ParamVars)> {
        let seq = lm::check_batch(batch, self.config.n_vocab, self.config.max_seq)?;
        let (tok, pos, blocks, flat) = self.register(tape);
        let mut x = lm::embed(tape, tok, pos, batch)?;
        for b in &blocks {
            x = self.block_on_tape(tape, x, b, batch.len(), seq)?;
        }
        let h = lm::layer_norm_on_tape(tape, x, None)?;
        let logits = tape.matmul_nt(h, tok)?;
        Ok((logits, flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{loss_and_grads, model_grad_check, randomize_parameters};

    fn tiny(seed: u64) -> TokenformerLM {
        let cfg = ModelConfig::with_default_pairs(1, 8, 2, 11, 4);
        TokenformerLM::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn count_matches_instantiated_tensors() {
        for ln_affine in [false, true] {
            let mut cfg = ModelConfig::with_default_pairs(2, 16, 4, 30, 8).with_pairs(12, 40);
            cfg.ln_affine = ln_affine;
            let m = TokenformerLM::<f64>::new(cfg.clone(), &mut Rng::new(1)).unwrap();
            assert_eq!(count_params(&cfg).total, m.param_count());
        }
    }

    #[test]
    fn taus_are_root_of_pair_counts() {
        let m = TokenformerLM::<f64>::new(ModelConfig::desk().with_pairs(64, 256), &mut Rng::new(2)).unwrap();
        assert_eq!(m.taus()[1], [8.0, 8.0, 8.0, 8.0, 16.0]);
    }

    #[test]
    fn logits_are_causal() {
        let m = tiny(3);
        let a = m.lm_forward(&[1, 2, 3, 4]).unwrap();
        let b = m.lm_forward(&[1, 2, 9, 0]).unwrap();
        for r in 0..2 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn zero_values_make_blocks_identity() {
        let mut m = tiny(4);
        for p in m.blocks[0].projections_mut() {
            *p.values_mut() = Tensor::zeros(p.values().shape());
        }
        let x: Tensor<f64> = randn(&mut Rng::new(5), &[3, 8], 0.0, 1.0);
        assert_eq!(m.block_forward(0, &x).unwrap(), x);
    }

    #[test]
    fn batched_forward_matches_single_sequences() {
        let m = tiny(6);
        let seqs = vec![vec![1, 2, 3], vec![4, 5, 6]];
        let mut tape = Tape::new();
        let (logits, _) = m.forward_batch(&mut tape, &seqs).unwrap();
        let joint = tape.value(logits).clone();
        for (b, s) in seqs.iter().enumerate() {
            let single = m.lm_forward(s).unwrap();
            assert_eq!(joint.slice_rows(b * 3, 3).unwrap(), single);
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // At the 0.02 init scale a step of 1e-5 is a sizeable fraction of each
        // parameter and central differences lose accuracy, so parameters are redrawn at unit scale.
        let mut m = tiny(7);
        randomize_parameters(&mut m, &mut Rng::new(70), 1.0);
        let r = model_grad_check(&m, &[vec![3, 1, 4, 1]], &[vec![1, 4, 1, 5]], 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn affine_norm_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::with_default_pairs(1, 4, 2, 7, 3).with_pairs(3, 5);
        cfg.ln_affine = true;
        let mut m = TokenformerLM::<f64>::new(cfg, &mut Rng::new(8)).unwrap();
        randomize_parameters(&mut m, &mut Rng::new(80), 0.5);
        let r = model_grad_check(&m, &[vec![0, 6, 2], vec![5, 5, 1]], &[vec![6, 2, 3], vec![5, 1, 0]], 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = tiny(9);
        let (_, grads) = loss_and_grads(&m, &[vec![1, 2, 3, 4]], &[vec![2, 3, 4, 5]]).unwrap();
        for (p, g) in m.parameters().iter().zip(&grads) {
            if p.name != "position_embedding" {
                assert!(g.max_abs() > 0.0, "{} has no gradient", p.name);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let m = tiny(10);
        assert!(matches!(m.lm_forward(&[1, 2, 3, 4, 5]), Err(Error::ContextLength { len: 5, max: 4 })));
        assert!(matches!(m.lm_forward(&[11]), Err(Error::Vocabulary { id: 11, vocab: 11 })));
        let mut cfg = ModelConfig::desk();
        cfg.n_head = 3;
        assert!(cfg.validate().is_err());
        cfg.n_head = 4;
        cfg.n_ffn = 0;
        assert!(cfg.validate().is_err());
        let bad = TokenformerLM::from_parts(
            m.config().clone(),
            Tensor::zeros(&[10, 8]),
            m.position_embedding.clone(),
            m.blocks.clone(),
        );
        assert!(matches!(bad, Err(Error::Format(_))));
    }

    #[test]
    fn config_json_round_trips_with_defaults() {
        let cfg = ModelConfig::desk();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
        let minimal = r#"{"n_layer":1,"d_model":8,"n_head":2,"n_q":8,"n_k":8,"n_v":8,"n_o":8,"n_ffn":32,"n_vocab":11,"max_seq":4}"#;
        let parsed: ModelConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(parsed.variant, ScoreVariant::GeluL2);
        assert!(!parsed.ln_affine);
    }
}
