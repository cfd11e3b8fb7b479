use tokenformer::baseline::{TransformerConfig, TransformerLM};
use tokenformer::checkpoint;
use tokenformer::data::Corpus;
use tokenformer::pattention::ScoreVariant;
use tokenformer::train::{train_loop, train_resume, ResumeState, TrainConfig};
use tokenformer::{Error, LanguageModel, ModelConfig, Rng, TokenformerLM};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        total_steps: 12,
        warmup_steps: 3,
        batch_size: 2,
        seq_len: 16,
        eval_interval: 4,
        eval_windows: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn corpus() -> Corpus {
    Corpus::synthetic(3, 50_000, 0.1).unwrap()
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let corpus = corpus();
    let cfg = small_cfg();
    let mut full = TokenformerLM::<f64>::new(ModelConfig::desk(), &mut Rng::new(1)).unwrap();
    let mut saved = None;
    let uninterrupted = train_loop(&mut full, &corpus, &cfg, &mut |step, m: &TokenformerLM<f64>, opt| {
        if step == 8 {
            saved = Some(checkpoint::encode_tokenformer(m, Some(opt), step, Some(&cfg))?);
        }
        Ok(())
    })
    .unwrap();

    let ckpt = checkpoint::decode::<f64>(&saved.unwrap()).unwrap();
    assert_eq!(ckpt.step, 8);
    let mut resumed = ckpt.model.into_tokenformer().unwrap();
    let state = ResumeState { step: ckpt.step, optimizer: ckpt.optimizer.unwrap() };
    let tail = train_resume(&mut resumed, &corpus, &ckpt.train.unwrap(), Some(state), &mut |_, _, _| Ok(())).unwrap();

    assert_eq!(tail.history, uninterrupted.history[8..]);
    assert_eq!(resumed, full);
    assert_eq!(tail.optimizer, uninterrupted.optimizer);
}

#[test]
fn identical_seeds_give_identical_histories_for_both_arms() {
    let corpus = corpus();
    let cfg = small_cfg();
    let run_tf = || {
        let mut m = TokenformerLM::<f64>::new(ModelConfig::desk(), &mut Rng::new(2)).unwrap();
        train_loop(&mut m, &corpus, &cfg, &mut |_, _, _| Ok(())).unwrap().history
    };
    assert_eq!(run_tf(), run_tf());

    let run_t = || {
        let mut m = TransformerLM::<f32>::new(TransformerConfig::new(2, 32, 4, 257, 64), &mut Rng::new(2)).unwrap();
        train_loop(&mut m, &corpus, &cfg, &mut |_, _, _| Ok(())).unwrap().history
    };
    assert_eq!(run_t(), run_t());
}

#[test]
fn every_score_variant_and_affine_norm_reduces_loss() {
    let corpus = corpus();
    let cfg = TrainConfig { total_steps: 40, warmup_steps: 5, base_lr: 3e-3, eval_interval: 0, ..small_cfg() };
    for variant in ScoreVariant::ALL {
        for ln_affine in [false, true] {
            let mut mc = ModelConfig::desk();
            mc.variant = variant;
            mc.ln_affine = ln_affine;
            let mut m = TokenformerLM::<f64>::new(mc, &mut Rng::new(3)).unwrap();
            let out = train_loop(&mut m, &corpus, &cfg, &mut |_, _, _| Ok(())).unwrap();
            let l = out.train_losses();
            assert!(l.iter().all(|x| x.is_finite()));
            assert!(l[l.len() - 5..].iter().sum::<f64>() < l[..5].iter().sum::<f64>(), "{variant} affine={ln_affine}");
        }
    }
}

#[test]
fn divergence_is_a_numerical_error() {
    let corpus = corpus();
    let cfg = TrainConfig { base_lr: 1e30, grad_clip: None, eval_interval: 0, ..small_cfg() };
    let mut m = TransformerLM::<f32>::new(TransformerConfig::new(1, 16, 2, 257, 16), &mut Rng::new(4)).unwrap();
    let err = train_loop(&mut m, &corpus, &cfg, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Numerical { .. } | Error::NonFinite(_)), "{err}");
}

#[test]
fn resume_rejects_mismatched_state() {
    let corpus = corpus();
    let cfg = small_cfg();
    let mut m = TokenformerLM::<f64>::new(ModelConfig::desk(), &mut Rng::new(6)).unwrap();
    let wrong = tokenformer::optim::AdamWState::new([&[3usize][..]]);
    let r = train_resume(&mut m, &corpus, &cfg, Some(ResumeState { step: 2, optimizer: wrong }), &mut |_, _, _| Ok(()));
    assert!(matches!(r, Err(Error::Config(_))));
    let shapes: Vec<Vec<usize>> = m.parameters().iter().map(|p| p.tensor.shape().to_vec()).collect();
    let ok_state = tokenformer::optim::AdamWState::new(shapes.iter().map(|s| s.as_slice()));
    let r =
        train_resume(&mut m, &corpus, &cfg, Some(ResumeState { step: 99, optimizer: ok_state }), &mut |_, _, _| Ok(()));
    assert!(matches!(r, Err(Error::Config(_))));
}
