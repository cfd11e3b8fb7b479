//! Next-token training and evaluation for either arm.

use std::io::Write;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::cross_entropy_value;
use crate::data::{batch_sample, byte_tokenize, Corpus};
use crate::error::{Error, Result};
use crate::lm::{loss_and_grads, Arm, LanguageModel};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arm: Arm,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(flatten)]
    pub adamw: AdamWConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Evaluate (and fire the checkpoint hook) every this many steps; 0 means only at the end.
    pub eval_interval: usize,
    /// Upper bound on validation windows per evaluation.
    pub eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arm: Arm::Tokenformer,
            base_lr: 6e-4,
            warmup_steps: 100,
            total_steps: 500,
            batch_size: 8,
            seq_len: 64,
            adamw: AdamWConfig::default(),
            grad_clip: Some(1.0),
            seed: 0,
            eval_interval: 100,
            eval_windows: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return bad("total_steps, batch_size and seq_len must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.base_lr));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
            || !(a.weight_decay >= 0.0)
        {
            return bad("AdamW betas must lie in [0, 1), eps > 0, weight_decay >= 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return cfg.base_lr * step as f64 / w as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean next-token NLL of `logits` (`T × V`) against `targets`.
pub fn cross_entropy_loss<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy_value(logits, targets)?.f64())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    pub nll: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Mean NLL over non-overlapping windows of `seq_len` predictions (at most
/// `max_windows` of them, taken from the start).
pub fn eval_perplexity<F: Scalar, M: LanguageModel<F> + ?Sized>(
    model: &M,
    bytes: &[u8],
    seq_len: usize,
    max_windows: usize,
) -> Result<Perplexity> {
    if bytes.len() < 2 {
        return Err(Error::Data("evaluation needs at least two bytes".into()));
    }
    if seq_len == 0 || max_windows == 0 {
        return Err(Error::Config("seq_len and max_windows must be positive".into()));
    }
    let t = seq_len.min(bytes.len() - 1);
    let n_windows = ((bytes.len() - 1) / t).min(max_windows);
    const GROUP: usize = 16;
    let mut total = 0.0;
    let mut tokens = 0;
    let starts: Vec<usize> = (0..n_windows).map(|w| w * t).collect();
    for group in starts.chunks(GROUP) {
        let inputs: Vec<Vec<usize>> = group.iter().map(|&s| byte_tokenize(&bytes[s..s + t])).collect();
        let targets: Vec<usize> = group.iter().flat_map(|&s| byte_tokenize(&bytes[s + 1..s + t + 1])).collect();
        let mut tape = crate::autodiff::Tape::new();
        let (logits, _) = model.forward_batch(&mut tape, &inputs)?;
        total += cross_entropy_loss(tape.value(logits), &targets)? * targets.len() as f64;
        tokens += targets.len();
    }
    let nll = total / tokens as f64;
    Ok(Perplexity { nll, perplexity: nll.exp(), tokens })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Loss of the batch consumed by this step, before the update.
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "step,train_loss,eval_loss,lr";

pub fn write_history_csv<W: Write>(out: &mut W, rows: &[HistoryRow]) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, opt(r.train_loss), opt(r.eval_loss), r.lr)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F: Scalar = f64> {
    pub history: Vec<HistoryRow>,
    pub optimizer: AdamWState<F>,
}

impl<F: Scalar> TrainOutcome<F> {
    pub fn train_losses(&self) -> Vec<f64> {
        self.history.iter().filter_map(|r| r.train_loss).collect()
    }

    pub fn final_eval_loss(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.eval_loss)
    }
}

/// Called at every evaluation point with the step count, model and optimizer.
pub type EvalHook<'a, M, F> = dyn FnMut(usize, &M, &AdamWState<F>) -> Result<()> + 'a;

/// Runs `cfg.total_steps` of sample, forward, backward, clip, AdamW.
///
/// Batches come from a stream seeded with `cfg.seed + 1` (the model's own
/// initialisation is expected to use `cfg.seed`). Step `s` uses
/// `lr_at_step(s + 1)`. The history holds one row per step plus a final row
/// for step `total_steps` carrying only the closing evaluation. `hook` runs
/// after each evaluation, including the final one.
pub fn train_loop<F, M>(
    model: &mut M,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hook: &mut EvalHook<'_, M, F>,
) -> Result<TrainOutcome<F>>
where
    F: Scalar,
    M: LanguageModel<F>,
{
    train_resume(model, corpus, cfg, None, hook)
}

/// Where an interrupted run left off: the number of completed steps and the
/// optimizer state at that point.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState<F: Scalar> {
    pub step: usize,
    pub optimizer: AdamWState<F>,
}

/// Continues a run from `resume`, or starts fresh when it is `None`.
///
/// The batch stream is replayed up to `resume.step`, so a resumed run sees
/// exactly the batches and learning rates of an uninterrupted one. History
/// rows start at the resume step.
pub fn train_resume<F, M>(
    model: &mut M,
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<ResumeState<F>>,
    hook: &mut EvalHook<'_, M, F>,
) -> Result<TrainOutcome<F>>
where
    F: Scalar,
    M: LanguageModel<F>,
{
    cfg.validate()?;
    if cfg.seq_len > model.max_seq() {
        return Err(Error::ContextLength { len: cfg.seq_len, max: model.max_seq() });
    }
    let decay: Vec<bool> = model.parameters().iter().map(|p| p.decay).collect();
    let mut rng = Rng::new(cfg.seed.wrapping_add(1));
    let (start, mut opt) = match resume {
        None => (0, AdamWState::new(model.parameters().iter().map(|p| p.tensor.shape()))),
        Some(r) => {
            if r.step > cfg.total_steps {
                return Err(Error::Config(format!("resume step {} is past total_steps {}", r.step, cfg.total_steps)));
            }
            let shapes: Vec<&[usize]> = model.parameters().iter().map(|p| p.tensor.shape()).collect();
            if r.optimizer.m.len() != shapes.len() || r.optimizer.m.iter().zip(&shapes).any(|(m, s)| m.shape() != *s) {
                return Err(Error::Config("optimizer state does not match the model parameters".into()));
            }
            for _ in 0..r.step {
                batch_sample(corpus, &mut rng, cfg.batch_size, cfg.seq_len)?;
            }
            (r.step, r.optimizer)
        }
    };
    let can_eval = corpus.validation().len() >= 2;
    if !can_eval {
        warn!("corpus has no validation bytes; evaluation skipped");
    }
    let evaluate = |model: &M| -> Result<Option<f64>> {
        if can_eval {
            Ok(Some(eval_perplexity(model, corpus.validation(), cfg.seq_len, cfg.eval_windows)?.nll))
        } else {
            Ok(None)
        }
    };
    let mut history = Vec::with_capacity(cfg.total_steps - start + 1);
    for step in start..cfg.total_steps {
        let eval_loss = if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            let e = evaluate(model)?;
            hook(step, model, &opt)?;
            e
        } else {
            None
        };
        let batch = batch_sample(corpus, &mut rng, cfg.batch_size, cfg.seq_len)?;
        let lr = lr_at_step(step + 1, cfg);
        let (loss, mut grads) = loss_and_grads(model, &batch.inputs, &batch.targets)?;
        let norm = grads.iter().flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64())).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Numerical { step, loss, lr, grad_norm: norm });
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let s = clip / norm;
                for g in &mut grads {
                    *g = g.scale(F::of(s))?;
                }
            }
        }
        opt.step(model.parameters_mut(), &grads, &decay, lr, &cfg.adamw)?;
        debug!("step {step} loss {loss:.4} lr {lr:.3e} grad norm {norm:.3e}");
        if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            info!("step {step}: train {loss:.4}, eval {}", eval_loss.map_or("-".into(), |e| format!("{e:.4}")));
        }
        history.push(HistoryRow { step, train_loss: Some(loss), eval_loss, lr });
    }
    let final_eval = evaluate(model)?;
    hook(cfg.total_steps, model, &opt)?;
    history.push(HistoryRow {
        step: cfg.total_steps,
        train_loss: None,
        eval_loss: final_eval,
        lr: lr_at_step(cfg.total_steps, cfg),
    });
    Ok(TrainOutcome { history, optimizer: opt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TokenformerLM};
    use crate::rng::randn;

    fn cfg(warmup: usize, total: usize) -> TrainConfig {
        TrainConfig { warmup_steps: warmup, total_steps: total, base_lr: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg(100, 500);
        assert_eq!(lr_at_step(0, &c), 0.0);
        assert_eq!(lr_at_step(100, &c), 1e-3);
        assert!((lr_at_step(300, &c) - 5e-4).abs() < 1e-15);
        assert!(lr_at_step(500, &c).abs() < 1e-18);
        assert!((lr_at_step(50, &c) - 5e-4).abs() < 1e-15);
        // Continuity at the junction.
        assert!((lr_at_step(99, &c) - lr_at_step(101, &c)).abs() < 2e-5);
        let flat = cfg(0, 10);
        assert_eq!(lr_at_step(0, &flat), 1e-3);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::<f64>::zeros(&[3, 256]);
        assert!((cross_entropy_loss(&uniform, &[0, 5, 255]).unwrap() - 256f64.ln()).abs() < 1e-12);
        let mut sharp = Tensor::<f64>::zeros(&[1, 4]);
        sharp.data_mut()[2] = 1000.0;
        assert!(cross_entropy_loss(&sharp, &[2]).unwrap() < 1e-12);
        assert!(matches!(cross_entropy_loss(&uniform, &[0, 1, 256]), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn cross_entropy_matches_naive_formula() {
        let logits: Tensor<f64> = randn(&mut Rng::new(1), &[3, 5], 0.0, 2.0);
        let targets = [4, 0, 2];
        let naive: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = logits.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[t].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((cross_entropy_loss(&logits, &targets).unwrap() - naive).abs() <= 1e-10);
    }

    #[test]
    fn uniform_model_has_byte_perplexity() {
        let mut m =
            TokenformerLM::<f64>::new(ModelConfig::with_default_pairs(1, 8, 2, 256, 16), &mut Rng::new(2)).unwrap();
        m.token_embedding = Tensor::zeros(&[256, 8]);
        let p = eval_perplexity(&m, &Corpus::synthetic_text(1, 200), 16, 4).unwrap();
        assert!((p.perplexity - 256.0).abs() < 1e-9);
        assert_eq!(p.tokens, 64);
        assert_eq!(p.perplexity, p.nll.exp());
        assert!(eval_perplexity(&m, b"a", 16, 4).is_err());
    }

    fn tiny_run(lr: f64, seed: u64) -> (TokenformerLM, TrainOutcome) {
        let mut m = TokenformerLM::new(
            ModelConfig::with_default_pairs(1, 16, 2, 257, 16).with_pairs(16, 32),
            &mut Rng::new(seed),
        )
        .unwrap();
        let corpus = Corpus::synthetic(seed, 20_000, 0.1).unwrap();
        let c = TrainConfig {
            base_lr: lr,
            warmup_steps: 2,
            total_steps: 6,
            batch_size: 2,
            seq_len: 16,
            eval_interval: 2,
            eval_windows: 4,
            seed,
            ..TrainConfig::default()
        };
        let mut hooks = 0;
        let out = train_loop(&mut m, &corpus, &c, &mut |_, _, _| {
            hooks += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(hooks, 4);
        (m, out)
    }

    #[test]
    fn zero_lr_leaves_eval_loss_unchanged() {
        let (_, out) = tiny_run(0.0, 3);
        let evals: Vec<f64> = out.history.iter().filter_map(|r| r.eval_loss).collect();
        assert_eq!(evals.len(), 4);
        assert!(evals.iter().all(|&e| e == evals[0]));
        assert_eq!(out.history.len(), 7);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (ma, a) = tiny_run(1e-3, 4);
        let (mb, b) = tiny_run(1e-3, 4);
        assert_eq!(a.history, b.history);
        assert_eq!(ma, mb);
        let (_, c) = tiny_run(1e-3, 5);
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn history_csv_layout() {
        let rows = [
            HistoryRow { step: 0, train_loss: Some(5.5), eval_loss: Some(5.25), lr: 0.0 },
            HistoryRow { step: 1, train_loss: None, eval_loss: None, lr: 1e-3 },
        ];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,train_loss,eval_loss,lr\n0,5.5,5.25,0\n1,,,0.001\n");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(cfg(600, 500).validate().is_err());
        let mut c = cfg(10, 20);
        c.base_lr = f64::NAN;
        assert!(c.validate().is_err());
        let mut c = cfg(10, 20);
        c.grad_clip = Some(0.0);
        assert!(c.validate().is_err());
    }
}
