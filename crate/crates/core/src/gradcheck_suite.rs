//! Gradient checks at three scopes: single tape operations, one Tokenformer
//! block, and a whole language model. Plus the closed-form Pattention
//! backward and the softmax reference Jacobian against their oracles.

use crate::autodiff::{finite_difference_grad, grad_check, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::lm::{causal_self_attention, layer_norm_on_tape, model_grad_check, randomize_parameters};
use crate::model::{ModelConfig, TokenformerLM};
use crate::pattention::{
    modified_softmax_on_tape, pattention_grad_analytic, pattention_on_tape, softmax_grad_reference, ParamTokens,
    PattentionGrads, ScoreVariant,
};
use crate::rng::{randn, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub component: String,
    pub report: GradCheckReport,
}

impl ComponentReport {
    fn new(component: impl Into<String>, report: GradCheckReport) -> Self {
        ComponentReport { component: component.into(), report }
    }
}

/// `Σ op(x) ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn weighted<F: Scalar>(
    w: Tensor<F>,
    op: impl Fn(&mut Tape<F>, Var) -> Result<Var>,
) -> impl Fn(&mut Tape<F>, Var) -> Result<Var> {
    move |tape, x| {
        let y = op(tape, x)?;
        let w = tape.leaf(w.clone());
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }
}

/// Every differentiable building block of the models, one report each.
pub fn op_checks<F: Scalar>(seed: u64, h: f64) -> Result<Vec<ComponentReport>> {
    let mut rng = Rng::new(seed);
    let (rows, cols) = (3, 5);
    let x: Tensor<F> = randn(&mut rng, &[rows, cols], 0.0, 1.0);
    let w: Tensor<F> = randn(&mut rng, &[rows, cols], 0.0, 1.0);
    let m: Tensor<F> = randn(&mut rng, &[cols, 4], 0.0, 1.0);
    let w4: Tensor<F> = randn(&mut rng, &[rows, 4], 0.0, 1.0);
    let mut out = Vec::new();

    out.push(ComponentReport::new("gelu", grad_check(weighted(w.clone(), |t, x| t.gelu(x)), &x, h)?));
    for variant in ScoreVariant::ALL {
        let f = weighted(w.clone(), move |t, a| modified_softmax_on_tape(t, a, 5f64.sqrt(), variant));
        out.push(ComponentReport::new(format!("modified_softmax/{variant}"), grad_check(f, &x, h)?));
    }
    out.push(ComponentReport::new("softmax", grad_check(weighted(w.clone(), |t, x| t.softmax_rows(x)), &x, h)?));
    out.push(ComponentReport::new(
        "layer_norm",
        grad_check(weighted(w.clone(), |t, x| layer_norm_on_tape(t, x, None)), &x, h)?,
    ));
    let mm = m.clone();
    out.push(ComponentReport::new(
        "matmul",
        grad_check(
            weighted(w4, move |t, x| {
                let b = t.leaf(mm.clone());
                t.matmul(x, b)
            }),
            &x,
            h,
        )?,
    ));

    // Causal attention over one sequence of 4 tokens, d = 4, 2 heads; x feeds q, k and v.
    let xa: Tensor<F> = randn(&mut rng, &[4, 4], 0.0, 1.0);
    let wa: Tensor<F> = randn(&mut rng, &[4, 4], 0.0, 1.0);
    out.push(ComponentReport::new(
        "causal_attention",
        grad_check(weighted(wa, |t, x| causal_self_attention(t, x, x, x, 1, 4, 2)), &xa, h)?,
    ));

    let targets = vec![1, 0, 4];
    out.push(ComponentReport::new(
        "cross_entropy",
        grad_check(move |t: &mut Tape<F>, x| t.cross_entropy(x, &targets), &x, h)?,
    ));

    for variant in ScoreVariant::ALL {
        let p = ParamTokens::<F>::init(&mut rng, 6, cols, 3, 1.0, variant);
        let wp: Tensor<F> = randn(&mut rng, &[rows, 3], 0.0, 1.0);
        let f = weighted(wp, move |t, x| {
            let (k, v) = (t.leaf(p.keys().clone()), t.leaf(p.values().clone()));
            pattention_on_tape(t, x, k, v, p.tau(), p.variant())
        });
        out.push(ComponentReport::new(format!("pattention/{variant}"), grad_check(f, &x, h)?));
    }
    Ok(out)
}

/// Input gradient of each Tokenformer block in a small two-layer model, one
/// report per score variant. Parameters are drawn at unit scale.
pub fn layer_checks<F: Scalar>(seed: u64, h: f64) -> Result<Vec<ComponentReport>> {
    let mut out = Vec::new();
    for variant in ScoreVariant::ALL {
        let mut cfg = ModelConfig::with_default_pairs(2, 8, 2, 11, 4);
        cfg.variant = variant;
        let mut rng = Rng::new(seed);
        let mut model = TokenformerLM::<F>::new(cfg, &mut rng)?;
        randomize_parameters(&mut model, &mut rng, 1.0);
        let x: Tensor<F> = randn(&mut rng, &[4, 8], 0.0, 1.0);
        let w: Tensor<F> = randn(&mut rng, &[4, 8], 0.0, 1.0);
        for layer in 0..2 {
            let m = model.clone();
            let f = weighted(w.clone(), move |t, x| m.block_on_tape_with_input(t, layer, x));
            out.push(ComponentReport::new(format!("block{layer}/{variant}"), grad_check(f, &x, h)?));
        }
    }
    Ok(out)
}

/// Every parameter of a one-layer model against central differences of the
/// training loss. Parameters are drawn at unit scale; at the 0.02 init scale
/// a step of `h` is a large fraction of each weight.
pub fn model_check<F: Scalar>(seed: u64, h: f64, ln_affine: bool) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::with_default_pairs(1, 8, 2, 11, 4);
    cfg.ln_affine = ln_affine;
    let mut rng = Rng::new(seed);
    let mut model = TokenformerLM::<F>::new(cfg, &mut rng)?;
    randomize_parameters(&mut model, &mut rng, 1.0);
    let inputs: Vec<Vec<usize>> = (0..2).map(|_| (0..4).map(|_| rng.below(11)).collect()).collect();
    let targets: Vec<Vec<usize>> = (0..2).map(|_| (0..4).map(|_| rng.below(11)).collect()).collect();
    model_grad_check(&model, &inputs, &targets, h)
}

fn tape_pattention_grads<F: Scalar>(x: &Tensor<F>, p: &ParamTokens<F>, up: &Tensor<F>) -> Result<PattentionGrads<F>> {
    let mut tape = Tape::new();
    let (xv, k, v) = (tape.leaf(x.clone()), tape.leaf(p.keys().clone()), tape.leaf(p.values().clone()));
    let o = pattention_on_tape(&mut tape, xv, k, v, p.tau(), p.variant())?;
    let u = tape.leaf(up.clone());
    let prod = tape.mul(o, u)?;
    let loss = tape.sum(prod)?;
    let g = tape.backward(loss)?;
    Ok(PattentionGrads { input: g.get(xv), keys: g.get(k), values: g.get(v) })
}

/// Closed-form `gelu_l2` Pattention backward against the tape on
/// `instances` random layers of varying size. Inputs have at least two
/// features: with one, the normalised scores ignore the input's magnitude,
/// its gradient is identically zero and only round-off is left to compare.
pub fn pattention_analytic_check<F: Scalar>(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut report: Option<GradCheckReport> = None;
    for _ in 0..instances {
        let (n, d_in, d_out, rows) = (2 + rng.below(7), 2 + rng.below(5), 1 + rng.below(6), 1 + rng.below(5));
        let p = ParamTokens::<F>::init(&mut rng, n, d_in, d_out, 1.0, ScoreVariant::GeluL2);
        let x = randn(&mut rng, &[rows, d_in], 0.0, 1.0);
        let up = randn(&mut rng, &[rows, d_out], 0.0, 1.0);
        let a = pattention_grad_analytic(&x, &p, &up)?;
        let b = tape_pattention_grads(&x, &p, &up)?;
        let r = GradCheckReport::compare(&a.input.to_f64_vec(), &b.input.to_f64_vec())
            .merge(GradCheckReport::compare(&a.keys.to_f64_vec(), &b.keys.to_f64_vec()))
            .merge(GradCheckReport::compare(&a.values.to_f64_vec(), &b.values.to_f64_vec()));
        report = Some(report.map_or(r, |acc| acc.merge(r)));
    }
    Ok(report.unwrap_or(GradCheckReport::compare(&[], &[])))
}

/// The reference softmax Jacobian against central differences of
/// `softmax(a / √d_ref)`, over several random rows.
pub fn softmax_reference_check<F: Scalar>(seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut report: Option<GradCheckReport> = None;
    for _ in 0..10 {
        let n = 2 + rng.below(7);
        let d_ref = 1.0 + 15.0 * rng.uniform();
        let a: Tensor<F> = randn(&mut rng, &[1, n], 0.0, 1.5);
        let j = softmax_grad_reference(&a, d_ref)?;
        let mut analytic = Vec::with_capacity(n * n);
        let mut numeric = Vec::with_capacity(n * n);
        // Row i of the Jacobian is the gradient of output i.
        for i in 0..n {
            let f = move |t: &mut Tape<F>, x: Var| -> Result<Var> {
                let s = t.scale(x, 1.0 / d_ref.sqrt())?;
                let s = t.softmax_rows(s)?;
                t.slice_cols(s, i, 1)
            };
            numeric.extend(finite_difference_grad(&f, &a, h)?);
            analytic.extend((0..n).map(|k| j.get(i, k).f64()));
        }
        let r = GradCheckReport::compare(&analytic, &numeric);
        report = Some(report.map_or(r, |acc| acc.merge(r)));
    }
    Ok(report.expect("ten rows checked"))
}

/// Convenience for callers that only want the worst case.
pub fn worst(reports: &[ComponentReport]) -> GradCheckReport {
    reports.iter().map(|c| c.report).reduce(GradCheckReport::merge).unwrap_or(GradCheckReport::compare(&[], &[]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_at_f64() {
        for c in op_checks::<f64>(1, 1e-5).unwrap() {
            assert!(c.report.max_rel_err <= 1e-5, "{}: {:?}", c.component, c.report);
        }
    }

    #[test]
    fn layers_pass_at_f64() {
        for c in layer_checks::<f64>(2, 1e-5).unwrap() {
            assert!(c.report.max_rel_err <= 1e-5, "{}: {:?}", c.component, c.report);
        }
    }

    #[test]
    fn model_passes_at_f64() {
        let r = model_check::<f64>(3, 1e-5, false).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn analytic_and_reference_pass() {
        assert!(pattention_analytic_check::<f64>(100, 4).unwrap().max_rel_err <= 1e-10);
        assert!(softmax_reference_check::<f64>(5, 1e-6).unwrap().max_rel_err <= 1e-6);
    }
}
