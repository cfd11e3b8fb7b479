//! Grow-then-continue runs for both arms: train a small model, widen it,
//! train on. The Tokenformer grows by zero-key parameter tokens, the
//! Transformer by Net2Net expansion.

use std::io::Write;

use log::info;

use crate::baseline::{expand_transformer, TransformerLM};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::lm::{Arm, LanguageModel};
use crate::model::TokenformerLM;
use crate::preset::Preset;
use crate::rng::{InitPolicy, Rng};
use crate::scaling::scale_model;
use crate::tensor::Scalar;
use crate::train::{eval_perplexity, train_loop, HistoryRow, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthConfig {
    pub small_preset: String,
    pub large_preset: String,
    pub steps_before: usize,
    pub steps_after: usize,
    /// New V_P rows for the Tokenformer, new weights for Net2Net.
    pub init: InitPolicy,
    pub train: TrainConfig,
}

impl GrowthConfig {
    /// Desk presets for `arm`, d 64 → 128 for the Transformer and
    /// 64 → 128 attention / 256 → 512 FFN pairs for the Tokenformer.
    pub fn desk(arm: Arm, steps_before: usize, steps_after: usize, seed: u64) -> Self {
        let (small, large) = match arm {
            Arm::Tokenformer => ("tokenformer-desk", "tokenformer-desk-128"),
            Arm::Transformer => ("transformer-desk", "transformer-desk-128"),
        };
        GrowthConfig {
            small_preset: small.into(),
            large_preset: large.into(),
            steps_before,
            steps_after,
            init: InitPolicy::default(),
            train: TrainConfig { arm, seed, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Small,
    Large,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Small => "small",
            Phase::Large => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthRun {
    pub arm: Arm,
    /// Steps of the large phase continue the small phase's numbering.
    pub history: Vec<(Phase, HistoryRow)>,
    pub eval_before_growth: f64,
    pub eval_after_growth: f64,
    pub eval_final: f64,
}

fn phase_config(base: &TrainConfig, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { total_steps: steps, warmup_steps: base.warmup_steps.min(steps / 5), seed, ..base.clone() }
}

fn eval<F: Scalar, M: LanguageModel<F>>(model: &M, corpus: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    Ok(eval_perplexity(model, corpus.validation(), cfg.seq_len, cfg.eval_windows)?.nll)
}

#[allow(clippy::too_many_arguments)]
fn train_phase<F: Scalar, M: LanguageModel<F>>(
    model: &mut M,
    corpus: &Corpus,
    cfg: &GrowthConfig,
    steps: usize,
    seed: u64,
    phase: Phase,
    offset: usize,
    history: &mut Vec<(Phase, HistoryRow)>,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let tc = phase_config(&cfg.train, steps, seed);
    let out = train_loop(model, corpus, &tc, &mut |_, _, _| Ok(()))?;
    history.extend(out.history.into_iter().map(|mut r| {
        r.step += offset;
        (phase, r)
    }));
    Ok(())
}

/// Runs the small phase, grows, evaluates, runs the large phase. The large
/// phase starts a fresh optimizer and draws batches from `seed + 1`.
pub fn growth_run<F: Scalar>(corpus: &Corpus, cfg: &GrowthConfig) -> Result<GrowthRun> {
    let small = Preset::resolve(&cfg.small_preset)?;
    let large = Preset::resolve(&cfg.large_preset)?;
    if small.arch.arm() != cfg.train.arm || large.arch.arm() != cfg.train.arm {
        return Err(Error::Config(format!(
            "presets {} and {} must both be {} presets",
            small.name, large.name, cfg.train.arm
        )));
    }
    let seed = cfg.train.seed;
    let mut rng = Rng::new(seed);
    let mut history = Vec::new();
    let (before, after, last) = match cfg.train.arm {
        Arm::Tokenformer => {
            let mut m = TokenformerLM::<F>::new(small.arch.tokenformer()?.clone(), &mut rng)?;
            train_phase(&mut m, corpus, cfg, cfg.steps_before, seed, Phase::Small, 0, &mut history)?;
            let before = eval(&m, corpus, &cfg.train)?;
            let mut g = scale_model(&m, large.arch.tokenformer()?, cfg.init, &mut rng)?;
            let after = eval(&g, corpus, &cfg.train)?;
            train_phase(
                &mut g,
                corpus,
                cfg,
                cfg.steps_after,
                seed.wrapping_add(1),
                Phase::Large,
                cfg.steps_before,
                &mut history,
            )?;
            (before, after, eval(&g, corpus, &cfg.train)?)
        }
        Arm::Transformer => {
            let mut m = TransformerLM::<F>::new(small.arch.transformer()?.clone(), &mut rng)?;
            train_phase(&mut m, corpus, cfg, cfg.steps_before, seed, Phase::Small, 0, &mut history)?;
            let before = eval(&m, corpus, &cfg.train)?;
            let target = large.arch.transformer()?;
            let mut g = expand_transformer(&m, target.d_model, cfg.init, &mut rng)?;
            if g.config() != target {
                return Err(Error::Config(format!(
                    "expanding {} gives {:?}, which differs from preset {}",
                    small.name,
                    g.config(),
                    large.name
                )));
            }
            let after = eval(&g, corpus, &cfg.train)?;
            train_phase(
                &mut g,
                corpus,
                cfg,
                cfg.steps_after,
                seed.wrapping_add(1),
                Phase::Large,
                cfg.steps_before,
                &mut history,
            )?;
            (before, after, eval(&g, corpus, &cfg.train)?)
        }
    };
    info!("{}: eval {before:.4} before growth, {after:.4} right after, {last:.4} at the end", cfg.train.arm);
    Ok(GrowthRun {
        arm: cfg.train.arm,
        history,
        eval_before_growth: before,
        eval_after_growth: after,
        eval_final: last,
    })
}

pub const GROWTH_HEADER: &str = "phase,step,train_loss,eval_loss,lr";

pub fn write_growth_csv<W: Write>(out: &mut W, run: &GrowthRun) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(out, "{GROWTH_HEADER}")?;
    for (phase, r) in &run.history {
        writeln!(out, "{},{},{},{},{}", phase.name(), r.step, opt(r.train_loss), opt(r.eval_loss), r.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(arm: Arm, init: InitPolicy) -> GrowthRun {
        let corpus = Corpus::synthetic(1, 40_000, 0.1).unwrap();
        let mut cfg = GrowthConfig::desk(arm, 5, 3, 2);
        cfg.init = init;
        cfg.train.batch_size = 2;
        cfg.train.seq_len = 16;
        cfg.train.eval_windows = 4;
        cfg.train.eval_interval = 0;
        growth_run::<f64>(&corpus, &cfg).unwrap()
    }

    #[test]
    fn tokenformer_growth_preserves_eval_loss() {
        let run = quick(Arm::Tokenformer, InitPolicy::default());
        let rel = (run.eval_after_growth - run.eval_before_growth).abs() / run.eval_before_growth;
        assert!(rel <= 1e-12, "{run:?}");
        assert_eq!(run.history.len(), 5 + 1 + 3 + 1);
        assert_eq!(run.history[6].1.step, 5);
        assert_eq!(run.history.last().unwrap().1.step, 8);
    }

    #[test]
    fn transformer_growth_changes_eval_loss() {
        let run = quick(Arm::Transformer, InitPolicy::Gaussian { std: 0.02 });
        assert_ne!(run.eval_after_growth, run.eval_before_growth);
        let mut buf = Vec::new();
        write_growth_csv(&mut buf, &run).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(GROWTH_HEADER));
        assert!(text.lines().nth(1).unwrap().starts_with("small,0,"));
        assert!(text.lines().last().unwrap().starts_with("large,8,,"));
    }

    #[test]
    fn mismatched_presets_are_rejected() {
        let corpus = Corpus::synthetic(1, 10_000, 0.1).unwrap();
        let mut cfg = GrowthConfig::desk(Arm::Tokenformer, 1, 0, 0);
        cfg.large_preset = "transformer-desk-128".into();
        assert!(matches!(growth_run::<f64>(&corpus, &cfg), Err(Error::Config(_))));
    }
}
