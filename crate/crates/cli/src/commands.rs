use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use tokenformer::autodiff::GradCheckReport;
use tokenformer::baseline::TransformerConfig;
use tokenformer::checkpoint::{self, AnyModel};
use tokenformer::cost::{flops_vs_length_sweep, matched_transformer_width, write_sweep_csv};
use tokenformer::data::Corpus;
use tokenformer::experiment::{growth_run, write_growth_csv, GrowthConfig};
use tokenformer::gradcheck_suite::{self as suite, ComponentReport};
use tokenformer::preset::{ArchConfig, Preset, REUSE_LADDER};
use tokenformer::scaling::{scale_model, verify_invariance};
use tokenformer::train::{eval_perplexity, train_loop, write_history_csv, TrainConfig};
use tokenformer::{Arm, LanguageModel, Rng, Scalar};

use crate::exit::{CheckFailed, Usage};
use crate::{CompareArgs, CostArgs, CostArm, EvalArgs, GradcheckArgs, ScaleArgs, Scope, TrainArgs};

/// Share of the corpus held out for evaluation.
const VALID_FRACTION: f64 = 0.05;

pub fn run(cmd: crate::Command) -> Result<()> {
    use crate::Command::*;
    match cmd {
        Train(a) => train(a),
        Scale(a) => scale(a),
        Eval(a) => eval(a),
        Gradcheck(a) => gradcheck(a),
        Cost(a) => cost(a),
        CompareNet2net(a) => compare(a),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn train(a: TrainArgs) -> Result<()> {
    let preset = Preset::resolve(&a.config)?;
    let mut arch = preset.arch;
    if let Some(arm) = a.arm {
        if arm != arch.arm() {
            bail!(Usage(format!("--arm {arm} disagrees with {} preset {}", arch.arm(), preset.name)));
        }
    }
    match &mut arch {
        ArchConfig::Tokenformer(c) => {
            if let Some(v) = a.variant {
                c.variant = v;
            }
            c.ln_affine |= a.ln_affine;
        }
        ArchConfig::Transformer(c) => {
            if a.variant.is_some() {
                bail!(Usage("--variant applies to the tokenformer arm only".into()));
            }
            c.ln_affine |= a.ln_affine;
        }
    }
    let defaults = TrainConfig::default();
    let total_steps = a.steps.unwrap_or(defaults.total_steps);
    let mut model = AnyModel::<f64>::new(&arch, &mut Rng::new(a.seed))?;
    let cfg = TrainConfig {
        arm: arch.arm(),
        base_lr: a.lr.unwrap_or(defaults.base_lr),
        warmup_steps: defaults.warmup_steps.min(total_steps / 5),
        total_steps,
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        seq_len: a.seq.unwrap_or(defaults.seq_len.min(model.max_seq())),
        seed: a.seed,
        eval_interval: a.eval_interval.unwrap_or(defaults.eval_interval),
        ..defaults
    };
    let corpus = Corpus::from_file(&a.data, VALID_FRACTION, a.seed)?;
    info!(
        "training {} ({} parameters) on {} bytes for {} steps",
        preset.name,
        model.param_count(),
        corpus.len(),
        cfg.total_steps
    );
    let out = a.out.clone();
    let outcome = train_loop(&mut model, &corpus, &cfg, &mut |step, m: &AnyModel<f64>, opt| {
        let bytes = checkpoint::encode_any(m, Some(opt), step, Some(&cfg))?;
        checkpoint::write_file(&out, &bytes)
    })?;
    let history_path = a.history.unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    let mut w = create(&history_path)?;
    write_history_csv(&mut w, &outcome.history)?;
    w.flush()?;

    let losses = outcome.train_losses();
    let k = losses.len().min(20);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    println!("first-{k} mean train loss {:.4}", mean(&losses[..k]));
    println!("last-{k} mean train loss {:.4}", mean(&losses[losses.len() - k..]));
    if let Some(e) = outcome.final_eval_loss() {
        println!("final eval loss {e:.4}");
    }
    println!("checkpoint {}", a.out.display());
    println!("history {}", history_path.display());
    Ok(())
}

fn scale(a: ScaleArgs) -> Result<()> {
    let ckpt = checkpoint::read_file::<f64>(&a.from)?;
    let source = ckpt.model.into_tokenformer()?;
    let target = Preset::resolve(&a.target)?;
    let target_cfg = target.arch.tokenformer()?;
    let mut rng = Rng::new(a.seed);
    let scaled = scale_model(&source, target_cfg, a.value_init, &mut rng)?;
    println!(
        "scaled {:?} -> {:?} pairs per layer (q, k, v, o, ffn)",
        source.config().pair_counts(),
        scaled.config().pair_counts()
    );
    println!("parameters {} -> {}", source.param_count(), scaled.param_count());
    if let Some(n) = a.verify {
        let diff = verify_invariance(&source, &scaled, n, &mut rng)?;
        println!("max abs logit difference over {n} sequences: {diff:e}");
        if diff > 1e-12 {
            bail!(CheckFailed(format!("scaled model differs from the source by {diff:e} (> 1e-12)")));
        }
    }
    let bytes = checkpoint::encode_tokenformer(&scaled, None, ckpt.step, ckpt.train.as_ref())?;
    checkpoint::write_file(&a.out, &bytes)?;
    println!("checkpoint {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::read_file::<f64>(&a.ckpt)?;
    let bytes = std::fs::read(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let seq = a.seq.unwrap_or(ckpt.model.max_seq());
    if seq > ckpt.model.max_seq() {
        bail!(Usage(format!("--seq {seq} exceeds the model's context of {}", ckpt.model.max_seq())));
    }
    let p = eval_perplexity(&ckpt.model, &bytes, seq, usize::MAX)?;
    println!("nll {:.6}", p.nll);
    println!("perplexity {:.4}", p.perplexity);
    println!("tokens {}", p.tokens);
    Ok(())
}

struct Tolerances {
    /// Per-coordinate relative error at 64 bits, scale-relative at 32.
    scaled: bool,
    h: f64,
    fd: f64,
    analytic: f64,
    reference_h: f64,
    reference: f64,
}

const TOL_64: Tolerances =
    Tolerances { scaled: false, h: 1e-5, fd: 1e-5, analytic: 1e-10, reference_h: 1e-6, reference: 1e-6 };

const TOL_32: Tolerances =
    Tolerances { scaled: true, h: 1e-3, fd: 1e-2, analytic: 1e-5, reference_h: 1e-3, reference: 1e-2 };

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let (rows, tols) = match a.bits {
        32 => (gradcheck_rows::<f32>(a.scope, a.seed, &TOL_32)?, &TOL_32),
        _ => (gradcheck_rows::<f64>(a.scope, a.seed, &TOL_64)?, &TOL_64),
    };
    println!("component,max_rel_err,max_abs_err,scaled_err,coordinates,tolerance,status");
    let mut failed = Vec::new();
    for (c, tol) in &rows {
        let err = if tols.scaled { c.report.scaled_err() } else { c.report.max_rel_err };
        let ok = err <= *tol;
        println!(
            "{},{:e},{:e},{:e},{},{:e},{}",
            c.component,
            c.report.max_rel_err,
            c.report.max_abs_err,
            c.report.scaled_err(),
            c.report.coordinates,
            tol,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.component.clone());
        }
    }
    if !failed.is_empty() {
        bail!(CheckFailed(format!("gradient check over tolerance: {}", failed.join(", "))));
    }
    Ok(())
}

fn gradcheck_rows<F: Scalar>(scope: Scope, seed: u64, tol: &Tolerances) -> Result<Vec<(ComponentReport, f64)>> {
    let named = |component: &str, report: GradCheckReport| ComponentReport { component: component.into(), report };
    Ok(match scope {
        Scope::Op => {
            let mut rows: Vec<(ComponentReport, f64)> =
                suite::op_checks::<F>(seed, tol.h)?.into_iter().map(|c| (c, tol.fd)).collect();
            rows.push((named("pattention_analytic", suite::pattention_analytic_check::<F>(100, seed)?), tol.analytic));
            rows.push((
                named("softmax_reference", suite::softmax_reference_check::<F>(seed, tol.reference_h)?),
                tol.reference,
            ));
            rows
        }
        Scope::Layer => suite::layer_checks::<F>(seed, tol.h)?.into_iter().map(|c| (c, tol.fd)).collect(),
        Scope::Model => vec![
            (named("model", suite::model_check::<F>(seed, tol.h, false)?), tol.fd),
            (named("model/ln_affine", suite::model_check::<F>(seed, tol.h, true)?), tol.fd),
        ],
    })
}

fn cost(a: CostArgs) -> Result<()> {
    let names: Vec<String> =
        if a.preset.is_empty() { REUSE_LADDER.iter().map(|s| s.to_string()).collect() } else { a.preset.clone() };
    let mut configs = Vec::new();
    for name in &names {
        let p = Preset::resolve(name)?;
        match &p.arch {
            ArchConfig::Tokenformer(c) => {
                if a.arm != CostArm::Transformer {
                    configs.push(p.arch.clone());
                }
                if a.arm != CostArm::Tokenformer {
                    let n = p.arch.costs(1)?.non_embedding_params();
                    let d = matched_transformer_width(n, c.n_layer as u64) as usize;
                    configs
                        .push(ArchConfig::Transformer(TransformerConfig::new(c.n_layer, d, 1, c.n_vocab, c.max_seq)));
                }
            }
            ArchConfig::Transformer(_) => {
                if a.arm == CostArm::Tokenformer {
                    bail!(Usage(format!("{} is a transformer preset", p.name)));
                }
                configs.push(p.arch.clone());
            }
        }
    }
    let rows = flops_vs_length_sweep(&configs, &a.sweep_t)?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            write_sweep_csv(&mut w, &rows)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            write_sweep_csv(&mut w, &rows)?;
        }
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    if a.steps == 0 {
        bail!(Usage("--steps must be positive".into()));
    }
    let corpus = Corpus::from_file(&a.data, VALID_FRACTION, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    println!("arm,eval_before_growth,eval_after_growth,eval_final");
    for arm in [Arm::Tokenformer, Arm::Transformer] {
        let run = growth_run::<f64>(&corpus, &GrowthConfig::desk(arm, a.steps, a.steps, a.seed))?;
        let path = a.out_dir.join(format!("{arm}.csv"));
        let mut w = create(&path)?;
        write_growth_csv(&mut w, &run)?;
        w.flush()?;
        println!("{arm},{},{},{}", run.eval_before_growth, run.eval_after_growth, run.eval_final);
    }
    Ok(())
}
