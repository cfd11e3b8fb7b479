//! Token-parameter attention.
//!
//! Input tokens act as queries against a learnable set of key tokens; the
//! resulting scores weight a matching set of value tokens:
//!
//! ```text
//! A = X · K_Pᵀ                  (T × n)
//! S = score(A)                  (T × n)
//! O = S · V_P                   (T × d_out)
//! ```
//!
//! The default score function L2-normalises each row of `A`, multiplies by a
//! frozen scale `tau` and applies GeLU. Because an all-zero key produces an
//! all-zero score column, and `GeLU(0) = 0`, appending zero keys leaves the
//! output untouched whatever the matching values are. That is the property
//! progressive scaling relies on, and it only holds while `tau` stays fixed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{randn, Rng};
use crate::tensor::{self, gelu_prime_scalar, Scalar, Tensor};

/// How raw scores `A` are turned into attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// `GeLU(tau · A_ij / ‖A_i‖₂)`.
    #[default]
    GeluL2,
    /// `GeLU(A_ij) / Σ_k |GeLU(A_ik)|`.
    GeluL1,
    /// `softmax(A_i / tau)`.
    ExpL1,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 3] = [ScoreVariant::GeluL2, ScoreVariant::GeluL1, ScoreVariant::ExpL1];

    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::GeluL2 => "gelu_l2",
            ScoreVariant::GeluL1 => "gelu_l1",
            ScoreVariant::ExpL1 => "exp_l1",
        }
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown score variant {s:?} (expected gelu_l2, gelu_l1 or exp_l1)")))
    }
}

/// One Pattention layer's learnable state: `n` key tokens, `n` value tokens
/// and the scale fixed when the layer was created.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTokens<F: Scalar = f64> {
    keys: Tensor<F>,
    values: Tensor<F>,
    tau: f64,
    variant: ScoreVariant,
}

impl<F: Scalar> ParamTokens<F> {
    pub fn new(keys: Tensor<F>, values: Tensor<F>, tau: f64, variant: ScoreVariant) -> Result<Self> {
        if keys.shape().len() != 2 || values.shape().len() != 2 || keys.rows() != values.rows() {
            return Err(Error::dim("ParamTokens", keys.shape(), values.shape()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(ParamTokens { keys, values, tau, variant })
    }

    /// Fresh layer with Gaussian keys and values; `tau = √n`.
    pub fn init(rng: &mut Rng, n: usize, d_in: usize, d_out: usize, std: f64, variant: ScoreVariant) -> Self {
        let keys = randn(rng, &[n, d_in], 0.0, std);
        let values = randn(rng, &[n, d_out], 0.0, std);
        ParamTokens { keys, values, tau: (n as f64).sqrt(), variant }
    }

    pub fn n(&self) -> usize {
        self.keys.rows()
    }

    pub fn d_in(&self) -> usize {
        self.keys.cols()
    }

    pub fn d_out(&self) -> usize {
        self.values.cols()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn variant(&self) -> ScoreVariant {
        self.variant
    }

    pub fn set_variant(&mut self, variant: ScoreVariant) {
        self.variant = variant;
    }

    pub fn keys(&self) -> &Tensor<F> {
        &self.keys
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn keys_mut(&mut self) -> &mut Tensor<F> {
        &mut self.keys
    }

    pub fn values_mut(&mut self) -> &mut Tensor<F> {
        &mut self.values
    }

    /// Keys and values borrowed mutably together.
    pub fn tensors_mut(&mut self) -> (&mut Tensor<F>, &mut Tensor<F>) {
        (&mut self.keys, &mut self.values)
    }

    pub fn param_count(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    pub(crate) fn into_parts(self) -> (Tensor<F>, Tensor<F>, f64, ScoreVariant) {
        (self.keys, self.values, self.tau, self.variant)
    }
}

/// Row-wise score function applied to raw scores `a` (`T × n`).
pub fn modified_softmax<F: Scalar>(a: &Tensor<F>, tau: f64, variant: ScoreVariant, eps: F) -> Result<Tensor<F>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    match variant {
        ScoreVariant::GeluL2 => {
            let z = tensor::row_l2_normalize(a, eps)?.scale(F::of(tau))?;
            tensor::gelu(&z)
        }
        ScoreVariant::GeluL1 => {
            let g = tensor::gelu(a)?;
            let c = g.cols();
            let mut data = Vec::with_capacity(g.len());
            for row in g.data().chunks(c) {
                let l1 = row.iter().fold(F::zero(), |acc, v| acc + v.abs()).max(eps);
                data.extend(row.iter().map(|&v| v / l1));
            }
            Tensor::new(g.shape().to_vec(), data)
        }
        ScoreVariant::ExpL1 => tensor::softmax_rows(&a.scale(F::of(1.0 / tau))?),
    }
}

fn check_input<F: Scalar>(x: &Tensor<F>, p: &ParamTokens<F>) -> Result<()> {
    if x.cols() != p.d_in() {
        return Err(Error::dim("pattention (X vs K_P)", x.shape(), p.keys.shape()));
    }
    Ok(())
}

/// `score(X · K_Pᵀ) · V_P`, evaluated directly on tensors.
pub fn pattention_forward<F: Scalar>(x: &Tensor<F>, p: &ParamTokens<F>) -> Result<Tensor<F>> {
    check_input(x, p)?;
    let a = tensor::matmul_nt(x, &p.keys)?;
    let s = modified_softmax(&a, p.tau, p.variant, F::of(F::NORM_EPS))?;
    tensor::matmul(&s, &p.values)
}

/// Records the score function on a tape, built from elementary ops so that
/// its gradient comes from the generic chain rule.
pub fn modified_softmax_on_tape<F: Scalar>(tape: &mut Tape<F>, a: Var, tau: f64, variant: ScoreVariant) -> Result<Var> {
    let eps = F::NORM_EPS;
    match variant {
        ScoreVariant::GeluL2 => {
            let sq = tape.mul(a, a)?;
            let ss = tape.row_sum(sq)?;
            // sqrt(max(Σa², eps²)) == max(‖a‖, eps)
            let ss = tape.clamp_min(ss, eps * eps)?;
            let norm = tape.sqrt(ss)?;
            let unit = tape.div_col(a, norm)?;
            let z = tape.scale(unit, tau)?;
            tape.gelu(z)
        }
        ScoreVariant::GeluL1 => {
            let g = tape.gelu(a)?;
            let mag = tape.abs(g)?;
            let l1 = tape.row_sum(mag)?;
            let l1 = tape.clamp_min(l1, eps)?;
            tape.div_col(g, l1)
        }
        ScoreVariant::ExpL1 => {
            let scaled = tape.scale(a, 1.0 / tau)?;
            tape.softmax_rows(scaled)
        }
    }
}

/// Pattention on a tape, with keys and values supplied as tape nodes.
pub fn pattention_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    keys: Var,
    values: Var,
    tau: f64,
    variant: ScoreVariant,
) -> Result<Var> {
    if tape.value(x).cols() != tape.value(keys).cols() {
        return Err(Error::dim("pattention (X vs K_P)", tape.value(x).shape(), tape.value(keys).shape()));
    }
    let a = tape.matmul_nt(x, keys)?;
    let s = modified_softmax_on_tape(tape, a, tau, variant)?;
    tape.matmul(s, values)
}

/// Gradients of `⟨upstream, pattention_forward(X, p)⟩` with respect to the
/// input, the keys and the values.
#[derive(Clone, Debug, PartialEq)]
pub struct PattentionGrads<F: Scalar> {
    pub input: Tensor<F>,
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
}

/// Closed-form backward pass for the `gelu_l2` score function.
///
/// With `z_i = tau · A_i / ‖A_i‖` per row, the score Jacobian is
/// `∂S_j/∂A_k = f′(z_j) · (tau/‖A_i‖) · (δ_jk − z_j z_k / tau²)`.
/// Rows whose norm falls under the guard contribute no gradient.
pub fn pattention_grad_analytic<F: Scalar>(
    x: &Tensor<F>,
    p: &ParamTokens<F>,
    upstream: &Tensor<F>,
) -> Result<PattentionGrads<F>> {
    if p.variant != ScoreVariant::GeluL2 {
        return Err(Error::Config(format!(
            "closed-form gradient is defined for gelu_l2 only, layer uses {}",
            p.variant
        )));
    }
    check_input(x, p)?;
    if upstream.rows() != x.rows() || upstream.cols() != p.d_out() {
        return Err(Error::dim("pattention_grad_analytic (upstream)", upstream.shape(), &[x.rows(), p.d_out()]));
    }
    let eps = F::of(F::NORM_EPS);
    let tau = F::of(p.tau);
    let tau_sq = tau * tau;

    let a = tensor::matmul_nt(x, &p.keys)?;
    let s = modified_softmax(&a, p.tau, ScoreVariant::GeluL2, eps)?;
    let grad_values = tensor::matmul_tn(&s, upstream)?;
    let grad_scores = tensor::matmul_nt(upstream, &p.values)?;

    let n = p.n();
    let mut grad_a = Vec::with_capacity(a.len());
    for (a_row, gs_row) in a.data().chunks(n).zip(grad_scores.data().chunks(n)) {
        let norm = a_row.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt();
        if norm <= eps {
            grad_a.extend(std::iter::repeat_n(F::zero(), n));
            continue;
        }
        let z: Vec<F> = a_row.iter().map(|&v| tau * v / norm).collect();
        let gz: Vec<F> = gs_row.iter().zip(&z).map(|(&g, &zj)| g * gelu_prime_scalar(zj)).collect();
        let proj = gz.iter().zip(&z).fold(F::zero(), |acc, (&g, &zj)| acc + g * zj) / tau_sq;
        let coef = tau / norm;
        grad_a.extend(gz.iter().zip(&z).map(|(&g, &zk)| coef * (g - zk * proj)));
    }
    let grad_a = Tensor::new(a.shape().to_vec(), grad_a)?;

    Ok(PattentionGrads {
        input: tensor::matmul(&grad_a, &p.keys)?,
        keys: tensor::matmul_tn(&grad_a, x)?,
        values: grad_values,
    })
}

/// Jacobian `∂S_j/∂A_k` of the `gelu_l2` scores for a single row `a` (`1 × n`).
pub fn gelu_l2_jacobian<F: Scalar>(a: &Tensor<F>, tau: f64) -> Result<Tensor<F>> {
    let n = a.len();
    let tau = F::of(tau);
    let norm = a.data().iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt();
    if norm <= F::of(F::NORM_EPS) {
        return Ok(Tensor::zeros(&[n, n]));
    }
    let z: Vec<F> = a.data().iter().map(|&v| tau * v / norm).collect();
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        let fp = gelu_prime_scalar(z[j]);
        for k in 0..n {
            let delta = if j == k { F::one() } else { F::zero() };
            out.push(fp * (tau / norm) * (delta - z[j] * z[k] / (tau * tau)));
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Jacobian of `softmax(a / √d_ref)` for one row: `(1/√d_ref) · S_i (δ_ij − S_j)`.
/// Reference point for comparing gradient magnitudes against [`gelu_l2_jacobian`].
pub fn softmax_grad_reference<F: Scalar>(a: &Tensor<F>, d_ref: f64) -> Result<Tensor<F>> {
    if !(d_ref > 0.0) {
        return Err(Error::Contract("d_ref must be positive".into()));
    }
    let n = a.len();
    let inv = F::of(1.0 / d_ref.sqrt());
    let s = tensor::softmax_rows(&a.reshape(&[1, n])?.scale(inv)?)?;
    let s = s.data();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { F::one() } else { F::zero() };
            out.push(inv * s[i] * (delta - s[j]));
        }
    }
    Tensor::new(vec![n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_grad, GradCheckReport};
    use crate::rng::Rng;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    const PHI_1: f64 = 0.841_344_746_068_542_9;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn random_layer(seed: u64, n: usize, d_in: usize, d_out: usize) -> (Tensor<f64>, ParamTokens<f64>) {
        let mut rng = Rng::new(seed);
        let p = ParamTokens::init(&mut rng, n, d_in, d_out, 1.0, ScoreVariant::GeluL2);
        let x = randn(&mut rng, &[5, d_in], 0.0, 1.0);
        (x, p)
    }

    #[test]
    fn zero_scores_give_zero_weights() {
        let s = modified_softmax(&Tensor::<f64>::zeros(&[3, 4]), 2.0, ScoreVariant::GeluL2, 1e-12).unwrap();
        assert_eq!(s, Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn two_score_row_hand_value() {
        let s = modified_softmax(&t(&[vec![1.0, -1.0]]), 2f64.sqrt(), ScoreVariant::GeluL2, 1e-12).unwrap();
        assert!((s.data()[0] - PHI_1).abs() < 1e-12);
        assert!((s.data()[1] + (1.0 - PHI_1)).abs() < 1e-12);
        // Not a distribution: negative entry, row sum != 1.
        assert!(s.data()[1] < 0.0);
        assert!((s.sum() - 1.0).abs() > 0.1);
    }

    #[test]
    fn l2_scores_are_scale_invariant() {
        let a = t(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, -0.5]]);
        let s1 = modified_softmax(&a, 1.7, ScoreVariant::GeluL2, 1e-12).unwrap();
        let s2 = modified_softmax(&a.scale(3.5).unwrap(), 1.7, ScoreVariant::GeluL2, 1e-12).unwrap();
        assert!(s1.max_abs_diff(&s2).unwrap() < 1e-15);
    }

    #[test]
    fn other_variants() {
        let a = t(&[vec![0.5, -0.2, 1.0]]);
        let l1 = modified_softmax(&a, 1.0, ScoreVariant::GeluL1, 1e-12).unwrap();
        let abs_sum: f64 = l1.data().iter().map(|v| v.abs()).sum();
        assert!((abs_sum - 1.0).abs() < 1e-14);
        let e = modified_softmax(&a, 2.0, ScoreVariant::ExpL1, 1e-12).unwrap();
        let reference = tensor::softmax_rows(&a.scale(0.5).unwrap()).unwrap();
        assert_eq!(e, reference);
        assert!("softmax".parse::<ScoreVariant>().is_err());
        assert_eq!("exp_l1".parse::<ScoreVariant>().unwrap(), ScoreVariant::ExpL1);
    }

    #[test]
    fn forward_hand_examples() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let mut rng = Rng::new(1);
        let p = ParamTokens::init(&mut rng, 4, 3, 2, 1.0, ScoreVariant::GeluL2);
        assert_eq!(pattention_forward(&x, &p).unwrap(), Tensor::zeros(&[2, 2]));

        let p = ParamTokens::new(
            t(&[vec![1.0], vec![-1.0]]),
            t(&[vec![2.0], vec![4.0]]),
            2f64.sqrt(),
            ScoreVariant::GeluL2,
        )
        .unwrap();
        let o = pattention_forward(&t(&[vec![1.0]]), &p).unwrap();
        // 2·Φ(1)·1 + 4·(−1)·Φ(−1)
        let expected = 2.0 * PHI_1 - 4.0 * (1.0 - PHI_1);
        assert!((o.data()[0] - expected).abs() < 1e-12);
        assert!((o.data()[0] - 1.048_068_5).abs() < 1e-7);

        let p = ParamTokens::new(t(&[vec![0.7]]), t(&[vec![3.0, -2.0]]), 1.0, ScoreVariant::GeluL2).unwrap();
        let o = pattention_forward(&t(&[vec![2.0]]), &p).unwrap();
        assert!((o.data()[0] - 3.0 * PHI_1).abs() < 1e-12);
        assert!((o.data()[1] + 2.0 * PHI_1).abs() < 1e-12);
    }

    #[test]
    fn forward_dimension_error_names_shapes() {
        let (_, p) = random_layer(2, 4, 3, 2);
        let err = pattention_forward(&Tensor::<f64>::zeros(&[2, 5]), &p).unwrap_err();
        assert!(err.to_string().contains("[2, 5]") && err.to_string().contains("[4, 3]"), "{err}");
    }

    #[test]
    fn tape_forward_matches_direct_forward() {
        for variant in ScoreVariant::ALL {
            let (x, mut p) = random_layer(3, 6, 4, 3);
            p.set_variant(variant);
            let direct = pattention_forward(&x, &p).unwrap();
            let mut tape = Tape::new();
            let (xv, k, v) = (tape.leaf(x.clone()), tape.leaf(p.keys.clone()), tape.leaf(p.values.clone()));
            let o = pattention_on_tape(&mut tape, xv, k, v, p.tau, variant).unwrap();
            assert!(tape.value(o).max_abs_diff(&direct).unwrap() < 1e-14, "{variant}");
        }
    }

    fn autodiff_grads(x: &Tensor<f64>, p: &ParamTokens<f64>, up: &Tensor<f64>) -> PattentionGrads<f64> {
        let mut tape = Tape::new();
        let (xv, k, v) = (tape.leaf(x.clone()), tape.leaf(p.keys.clone()), tape.leaf(p.values.clone()));
        let o = pattention_on_tape(&mut tape, xv, k, v, p.tau, p.variant).unwrap();
        let u = tape.leaf(up.clone());
        let prod = tape.mul(o, u).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        PattentionGrads { input: g.get(xv), keys: g.get(k), values: g.get(v) }
    }

    fn compare(a: &PattentionGrads<f64>, b: &PattentionGrads<f64>) -> GradCheckReport {
        GradCheckReport::compare(&a.input.to_f64_vec(), &b.input.to_f64_vec())
            .merge(GradCheckReport::compare(&a.keys.to_f64_vec(), &b.keys.to_f64_vec()))
            .merge(GradCheckReport::compare(&a.values.to_f64_vec(), &b.values.to_f64_vec()))
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (x, p) = random_layer(4, 4, 3, 3);
        let g = pattention_grad_analytic(&x, &p, &Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.keys.max_abs(), 0.0);
        assert_eq!(g.values.max_abs(), 0.0);
    }

    #[test]
    fn analytic_gradient_matches_autodiff_on_100_instances() {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let (x, p) = random_layer(1000 + seed, 4, 3, 3);
            let up = randn(&mut Rng::new(seed), &[5, 3], 0.0, 1.0);
            let r = compare(&pattention_grad_analytic(&x, &p, &up).unwrap(), &autodiff_grads(&x, &p, &up));
            worst = worst.max(r.max_rel_err);
        }
        assert!(worst <= 1e-10, "worst rel err {worst:e}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (x, p) = random_layer(7, 4, 3, 3);
        let up = randn(&mut Rng::new(8), &[5, 3], 0.0, 1.0);
        let analytic = pattention_grad_analytic(&x, &p, &up).unwrap();
        let objective = |which: usize| {
            let (x, p, up) = (x.clone(), p.clone(), up.clone());
            move |tape: &mut Tape<f64>, leaf: Var| -> Result<Var> {
                let mut inputs = [tape.leaf(x.clone()), tape.leaf(p.keys.clone()), tape.leaf(p.values.clone())];
                inputs[which] = leaf;
                let o = pattention_on_tape(tape, inputs[0], inputs[1], inputs[2], p.tau, p.variant)?;
                let u = tape.leaf(up.clone());
                let prod = tape.mul(o, u)?;
                tape.sum(prod)
            }
        };
        let h = 1e-5;
        let r = GradCheckReport::compare(
            &analytic.input.to_f64_vec(),
            &finite_difference_grad(&objective(0), &x, h).unwrap(),
        )
        .merge(GradCheckReport::compare(
            &analytic.keys.to_f64_vec(),
            &finite_difference_grad(&objective(1), &p.keys, h).unwrap(),
        ))
        .merge(GradCheckReport::compare(
            &analytic.values.to_f64_vec(),
            &finite_difference_grad(&objective(2), &p.values, h).unwrap(),
        ));
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn analytic_gradient_rejects_other_variants() {
        let (x, mut p) = random_layer(9, 4, 3, 3);
        p.set_variant(ScoreVariant::ExpL1);
        assert!(matches!(pattention_grad_analytic(&x, &p, &Tensor::zeros(&[5, 3])), Err(Error::Config(_))));
    }

    #[test]
    fn jacobian_matches_finite_differences_of_scores() {
        let a = randn::<f64>(&mut Rng::new(10), &[1, 6], 0.0, 1.0);
        let tau = 6f64.sqrt();
        let j = gelu_l2_jacobian(&a, tau).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut plus = a.clone();
            plus.data_mut()[k] += h;
            let mut minus = a.clone();
            minus.data_mut()[k] -= h;
            let sp = modified_softmax(&plus, tau, ScoreVariant::GeluL2, 1e-12).unwrap();
            let sm = modified_softmax(&minus, tau, ScoreVariant::GeluL2, 1e-12).unwrap();
            for jj in 0..6 {
                let fd = (sp.data()[jj] - sm.data()[jj]) / (2.0 * h);
                assert!((fd - j.get(jj, k)).abs() < 1e-8, "({jj},{k})");
            }
        }
    }

    #[test]
    fn softmax_reference_cases() {
        let n = 4;
        let d_ref = 16.0;
        let j = softmax_grad_reference(&Tensor::<f64>::full(&[1, n], 0.3), d_ref).unwrap();
        let expected = 0.25 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64);
        assert!((j.get(2, 2) - expected).abs() < 1e-15);

        let j = softmax_grad_reference(&Tensor::<f64>::from_f64(&[1, 3], &[200.0, 0.0, 1.0]).unwrap(), 1.0).unwrap();
        assert!(j.get(0, 1).abs() < 1e-80 && j.get(1, 2).abs() < 1e-80);
        assert!(j.max_abs() < 1e-80);
    }

    #[test]
    fn softmax_reference_matches_finite_differences() {
        let a = randn::<f64>(&mut Rng::new(12), &[1, 5], 0.0, 1.5);
        let d_ref = 3.0;
        let j = softmax_grad_reference(&a, d_ref).unwrap();
        let h = 1e-6;
        let s = |v: &Tensor<f64>| tensor::softmax_rows(&v.scale(1.0 / d_ref.sqrt()).unwrap()).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for jj in 0..5 {
            let mut plus = a.clone();
            plus.data_mut()[jj] += h;
            let mut minus = a.clone();
            minus.data_mut()[jj] -= h;
            let (sp, sm) = (s(&plus), s(&minus));
            for i in 0..5 {
                numeric.push((sp.data()[i] - sm.data()[i]) / (2.0 * h));
                analytic.push(j.get(i, jj));
            }
        }
        let r = GradCheckReport::compare(&analytic, &numeric);
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Appending zero keys with arbitrary values never changes the output.
        #[test]
        fn zero_keys_leave_output_unchanged(seed in any::<u64>(), n in 1usize..8, m in 0usize..8, d in 1usize..6, value_std in 0.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let p = ParamTokens::<f64>::init(&mut rng, n, d, d, 1.0, ScoreVariant::GeluL2);
            let x = randn(&mut rng, &[3, d], 0.0, 2.0);
            let keys = tensor::concat_rows(p.keys(), &Tensor::zeros(&[m, d])).unwrap();
            let values = tensor::concat_rows(p.values(), &randn(&mut rng, &[m, d], 0.0, value_std)).unwrap();
            let scaled = ParamTokens::new(keys, values, p.tau(), p.variant()).unwrap();
            let before = pattention_forward(&x, &p).unwrap();
            let after = pattention_forward(&x, &scaled).unwrap();
            prop_assert!(before.max_abs_diff(&after).unwrap() <= 1e-12);
        }
    }
}
