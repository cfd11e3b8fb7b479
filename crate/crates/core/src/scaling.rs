//! Progressive growth of a Tokenformer by appending parameter tokens.
//!
//! New keys are zero, so each new slot scores exactly zero against every
//! input; with `GeLU(0) = 0` (and the L2 norm of a row unchanged by zero
//! entries) the new values contribute nothing until training moves the keys.

use log::warn;

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::model::{ModelConfig, TokenformerBlock, TokenformerLM};
use crate::pattention::ParamTokens;
use crate::rng::{InitPolicy, Rng};
use crate::tensor::{concat_rows, Scalar, Tensor};

/// Appends `m` pairs: zero keys, values from `value_init`. τ stays as it was.
pub fn scale_pattention<F: Scalar>(
    p: ParamTokens<F>,
    m: usize,
    value_init: InitPolicy,
    rng: &mut Rng,
) -> Result<ParamTokens<F>> {
    if m == 0 {
        return Ok(p);
    }
    let (d_in, d_out) = (p.d_in(), p.d_out());
    let (keys, values, tau, variant) = p.into_parts();
    let keys = concat_rows(&keys, &Tensor::zeros(&[m, d_in]))?;
    let new_values: Tensor<F> = value_init.sample(rng, &[m, d_out]);
    let values = concat_rows(&values, &new_values)?;
    ParamTokens::new(keys, values, tau, variant)
}

/// Grows every Pattention layer of `model` to the pair counts of `target`.
/// Only pair counts may differ, and none may shrink.
pub fn scale_model<F: Scalar>(
    model: &TokenformerLM<F>,
    target: &ModelConfig,
    value_init: InitPolicy,
    rng: &mut Rng,
) -> Result<TokenformerLM<F>> {
    target.validate()?;
    let src = model.config();
    let fixed = [
        ("n_layer", src.n_layer, target.n_layer),
        ("d_model", src.d_model, target.d_model),
        ("n_head", src.n_head, target.n_head),
        ("n_vocab", src.n_vocab, target.n_vocab),
        ("max_seq", src.max_seq, target.max_seq),
    ];
    for (name, a, b) in fixed {
        if a != b {
            return Err(Error::IncompatibleConfig(format!("{name} differs: source {a}, target {b}")));
        }
    }
    if src.ln_affine != target.ln_affine {
        return Err(Error::IncompatibleConfig("ln_affine differs".into()));
    }
    let names = ["n_q", "n_k", "n_v", "n_o", "n_ffn"];
    let growth: Vec<usize> = names
        .iter()
        .zip(src.pair_counts().into_iter().zip(target.pair_counts()))
        .map(|(name, (a, b))| {
            b.checked_sub(a).ok_or_else(|| Error::Unsupported(format!("shrinking {name} from {a} to {b}")))
        })
        .collect::<Result<_>>()?;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let grow = |p: &ParamTokens<F>, m: usize, rng: &mut Rng| scale_pattention(p.clone(), m, value_init, rng);
        blocks.push(TokenformerBlock {
            q: grow(&b.q, growth[0], rng)?,
            k: grow(&b.k, growth[1], rng)?,
            v: grow(&b.v, growth[2], rng)?,
            o: grow(&b.o, growth[3], rng)?,
            ffn: grow(&b.ffn, growth[4], rng)?,
            ln1: b.ln1.clone(),
            ln2: b.ln2.clone(),
        });
    }
    let mut config = target.clone();
    // The variant lives on each layer; keep the source's.
    config.variant = src.variant;
    TokenformerLM::from_parts(config, model.token_embedding.clone(), model.position_embedding.clone(), blocks)
}

/// Largest absolute logit difference between two models over `probe_count`
/// random full-length sequences.
pub fn verify_invariance<F, A, B>(before: &A, after: &B, probe_count: usize, rng: &mut Rng) -> Result<f64>
where
    F: Scalar,
    A: LanguageModel<F> + ?Sized,
    B: LanguageModel<F> + ?Sized,
{
    if before.n_vocab() != after.n_vocab() || before.max_seq() != after.max_seq() {
        return Err(Error::IncompatibleConfig("models disagree on n_vocab or max_seq".into()));
    }
    if probe_count == 0 {
        warn!("verify_invariance called with no probes; reporting 0");
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for _ in 0..probe_count {
        let tokens: Vec<usize> = (0..before.max_seq()).map(|_| rng.below(before.n_vocab())).collect();
        let a = before.logits(&tokens)?;
        let b = after.logits(&tokens)?;
        worst = worst.max(a.max_abs_diff(&b)?.f64());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_params;
    use crate::pattention::{pattention_forward, ScoreVariant};
    use crate::rng::randn;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn small() -> (ModelConfig, TokenformerLM) {
        let cfg = ModelConfig::with_default_pairs(2, 16, 2, 20, 8).with_pairs(8, 32);
        let m = TokenformerLM::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        (cfg, m)
    }

    #[test]
    fn zero_growth_is_identity() {
        let p = ParamTokens::<f64>::init(&mut Rng::new(2), 4, 3, 5, 0.02, ScoreVariant::GeluL2);
        assert_eq!(scale_pattention(p.clone(), 0, InitPolicy::default(), &mut Rng::new(3)).unwrap(), p);
        let (cfg, m) = small();
        assert_eq!(scale_model(&m, &cfg, InitPolicy::default(), &mut Rng::new(3)).unwrap(), m);
    }

    #[test]
    fn doubling_pairs_doubles_layer_params() {
        let p = ParamTokens::<f64>::init(&mut Rng::new(4), 64, 16, 16, 0.02, ScoreVariant::GeluL2);
        let q = scale_pattention(p.clone(), 64, InitPolicy::default(), &mut Rng::new(5)).unwrap();
        assert_eq!(q.param_count(), 2 * p.param_count());
        assert_eq!(q.tau(), p.tau());
        assert_eq!(q.keys().slice_rows(0, 64).unwrap(), *p.keys());
        assert_eq!(q.values().slice_rows(0, 64).unwrap(), *p.values());
    }

    #[test]
    fn scaled_model_matches_target_count_and_logits() {
        let (cfg, m) = small();
        let target = cfg.clone().with_pairs(16, 64);
        let s = scale_model(&m, &target, InitPolicy::default(), &mut Rng::new(6)).unwrap();
        assert_eq!(s.param_count(), count_params(&target).total);
        assert!(s.param_count() > m.param_count());
        let diff = verify_invariance(&m, &s, 8, &mut Rng::new(7)).unwrap();
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn perturbed_key_is_detected() {
        let (_, m) = small();
        let mut p = m.clone();
        let k = p.blocks[0].q.keys_mut();
        k.data_mut()[0] += 1e-3;
        assert!(verify_invariance(&m, &p, 2, &mut Rng::new(8)).unwrap() > 0.0);
        assert_eq!(verify_invariance(&m, &p, 0, &mut Rng::new(8)).unwrap(), 0.0);
    }

    #[test]
    fn incompatible_targets_are_refused() {
        let (cfg, m) = small();
        let mut wider = cfg.clone();
        wider.d_model = 32;
        assert!(matches!(
            scale_model(&m, &wider, InitPolicy::Zeros, &mut Rng::new(9)),
            Err(Error::IncompatibleConfig(_))
        ));
        let shrink = cfg.clone().with_pairs(4, 32);
        assert!(matches!(scale_model(&m, &shrink, InitPolicy::Zeros, &mut Rng::new(9)), Err(Error::Unsupported(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn growth_never_changes_pattention(seed in 0u64..1000, n in 1usize..12, m in 0usize..12, zeros in proptest::bool::ANY) {
            let mut rng = Rng::new(seed);
            // exp(0) = 1, so softmax scores move when slots are added; only the GeLU forms are invariant.
            let variant = [ScoreVariant::GeluL2, ScoreVariant::GeluL1][seed as usize % 2];
            let p = ParamTokens::<f64>::init(&mut rng, n, 5, 3, 1.0, variant);
            let init = if zeros { InitPolicy::Zeros } else { InitPolicy::Gaussian { std: 1.0 } };
            let q = scale_pattention(p.clone(), m, init, &mut rng).unwrap();
            prop_assert_eq!(q.n(), n + m);
            let x: Tensor<f64> = randn(&mut rng, &[4, 5], 0.0, 2.0);
            let before = pattention_forward(&x, &p).unwrap();
            let after = pattention_forward(&x, &q).unwrap();
            prop_assert!(after.max_abs_diff(&before).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn softmax_scores_are_not_growth_invariant() {
        let mut rng = Rng::new(10);
        let p = ParamTokens::<f64>::init(&mut rng, 4, 5, 3, 1.0, ScoreVariant::ExpL1);
        let q = scale_pattention(p.clone(), 4, InitPolicy::Gaussian { std: 1.0 }, &mut rng).unwrap();
        let x: Tensor<f64> = randn(&mut rng, &[2, 5], 0.0, 1.0);
        let diff = pattention_forward(&x, &q).unwrap().max_abs_diff(&pattention_forward(&x, &p).unwrap()).unwrap();
        assert!(diff > 1e-3);
    }
}
