//! Pretraining loop: hierarchical sampling, optional video jitter, exact
//! forward/backward, and Adam under a linear-warmup + cosine schedule.

use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{augment_jitter, Corpus, CorpusView};
use crate::derive_seed;
use crate::encoder::{backward, forward, init_params, EncoderDims, Mlp, TowerGrads, TowerParams};
use crate::error::{Error, Result};
use crate::objective::{nce_loss, LossVariant};
use crate::sampler::{draw_minibatch, Minibatch, SamplingSpec};

/// RNG stream ids for the sub-seeds a run derives from its base seed.
const STREAM_PARAMS: u64 = 1;
const STREAM_JITTER: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub sampling: SamplingSpec,
    pub variant: LossVariant,
    /// Video jitter strength; 0 disables augmentation entirely.
    pub jitter_sigma: f64,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dims: EncoderDims,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.steps_per_epoch < 1 {
            return Err(Error::Config("epochs and steps_per_epoch must be >= 1".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_init <= self.lr_peak) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < lr_init ({}) <= lr_peak ({})",
                self.lr_init, self.lr_peak
            )));
        }
        if self.jitter_sigma < 0.0 || !self.jitter_sigma.is_finite() {
            return Err(Error::Config("jitter_sigma must be a finite value >= 0".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        self.sampling.validate()?;
        self.variant.validate()?;
        self.dims.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Learning rate at a 0-based global step: linear warmup from lr_init to
/// lr_peak across the first epoch, then cosine decay from lr_peak to zero
/// across the remaining steps.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let total = config.total_steps();
    if step >= total {
        return Err(Error::Usage(format!(
            "step {step} outside the schedule of {total} steps"
        )));
    }
    let warmup = config.steps_per_epoch;
    if step < warmup || config.epochs == 1 {
        let t = step as f64 / warmup as f64;
        return Ok(config.lr_init + (config.lr_peak - config.lr_init) * t);
    }
    // Cosine phase: the remaining steps map onto progress in [0, 1], so the
    // first cosine step sits at lr_peak and the final step at zero.
    let span = total - 1 - warmup;
    let progress = if span == 0 {
        0.0
    } else {
        (step - warmup) as f64 / span as f64
    };
    Ok(config.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second Adam moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: TowerGrads,
    pub v: TowerGrads,
}

impl AdamState {
    pub fn new(params: &TowerParams) -> Self {
        AdamState { m: params.zeros_grads(), v: params.zeros_grads() }
    }
}

fn adam_update_mlp(
    params: &mut Mlp,
    grads: &Mlp,
    m: &mut Mlp,
    v: &mut Mlp,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
) {
    for (((pl, gl), ml), vl) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(m.layers.iter_mut())
        .zip(v.layers.iter_mut())
    {
        Zip::from(&mut pl.weight)
            .and(&gl.weight)
            .and(&mut ml.weight)
            .and(&mut vl.weight)
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
            });
        Zip::from(&mut pl.bias)
            .and(&gl.bias)
            .and(&mut ml.bias)
            .and(&mut vl.bias)
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
            });
    }
}

/// One bias-corrected Adam update. `step` is the 0-based step index; the
/// bias correction uses t = step + 1.
pub fn adam_step(
    params: &mut TowerParams,
    grads: &TowerGrads,
    moments: &mut AdamState,
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let t = (step + 1) as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    adam_update_mlp(
        &mut params.video, &grads.video, &mut moments.m.video, &mut moments.v.video,
        lr, beta1, beta2, eps, bias1, bias2,
    );
    adam_update_mlp(
        &mut params.audio, &grads.audio, &mut moments.m.audio, &mut moments.v.audio,
        lr, beta1, beta2, eps, bias1, bias2,
    );
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_per_anchor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Wall-clock seconds per epoch. Diagnostic only; not part of any
    /// deterministic artifact.
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    /// Mean per-anchor loss over one 0-based epoch.
    pub fn mean_epoch_loss(&self, epoch: usize) -> f64 {
        let records: Vec<&StepRecord> =
            self.records.iter().filter(|r| r.epoch == epoch).collect();
        records.iter().map(|r| r.loss_per_anchor).sum::<f64>() / records.len() as f64
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map(|r| r.loss_per_anchor).unwrap_or(f64::NAN)
    }
}

/// Numeric blowups inside the training loop are divergence, reported with
/// the step that produced them.
fn as_divergence(err: Error, step: usize) -> Error {
    match err {
        Error::Numeric(detail) => Error::Diverged { step, detail },
        other => other,
    }
}

/// Copies minibatch features into dense matrices, applying one jitter gain
/// per video row when sigma > 0. With sigma = 0 the augmentation path is
/// skipped entirely and no randomness is consumed.
fn assemble_batch(
    corpus: &Corpus,
    minibatch: &Minibatch,
    jitter_sigma: f64,
    jitter_rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let b = minibatch.len();
    let mut video = Array2::zeros((b, corpus.config.video_dim));
    let mut audio = Array2::zeros((b, corpus.config.audio_dim));
    for (row, &(content, index)) in minibatch.entries.iter().enumerate() {
        let snippet = corpus.snippet(content, index);
        if jitter_sigma > 0.0 {
            let jittered = augment_jitter(&snippet.video_features, jitter_sigma, jitter_rng);
            video.row_mut(row).assign(&jittered);
        } else {
            video.row_mut(row).assign(&snippet.video_features);
        }
        audio.row_mut(row).assign(&snippet.audio_features);
    }
    (video, audio)
}

/// Runs the full pretraining loop. Deterministic in the config seed;
/// errors with the failing step if the loss or any parameter leaves the
/// finite range.
pub fn train(view: &CorpusView<'_>, config: &TrainConfig) -> Result<(TowerParams, TrainLog)> {
    config.validate()?;
    config.sampling.validate_against(view)?;
    let corpus = view.corpus();
    if config.dims.video_in != corpus.config.video_dim
        || config.dims.audio_in != corpus.config.audio_dim
    {
        return Err(Error::Config(format!(
            "encoder input widths ({}, {}) do not match corpus feature widths ({}, {})",
            config.dims.video_in,
            config.dims.audio_in,
            corpus.config.video_dim,
            corpus.config.audio_dim
        )));
    }

    let mut params = init_params(config.dims, derive_seed(config.seed, STREAM_PARAMS))?;
    let mut moments = AdamState::new(&params);
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.sampling.seed);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_JITTER));

    let total = config.total_steps();
    let mut records = Vec::with_capacity(total);
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut epoch_start = Instant::now();

    for step in 0..total {
        let epoch = step / config.steps_per_epoch;
        let lr = lr_at(step, config)?;
        let minibatch = draw_minibatch(view, &config.sampling, &mut sampler_rng)?;
        let (video, audio) =
            assemble_batch(corpus, &minibatch, config.jitter_sigma, &mut jitter_rng);

        let embeddings =
            forward(&params, &video, &audio).map_err(|e| as_divergence(e, step))?;
        let loss = nce_loss(&embeddings.z_video, &embeddings.z_audio, config.variant)
            .map_err(|e| as_divergence(e, step))?;
        if !loss.value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss became {}", loss.value),
            });
        }
        let grads = backward(&embeddings, &loss.grad_z_video, &loss.grad_z_audio, &params)?;
        adam_step(
            &mut params, &grads, &mut moments, step, lr,
            config.adam_beta1, config.adam_beta2, config.adam_eps,
        );
        if !params.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "a parameter became non-finite after the update".into(),
            });
        }

        records.push(StepRecord {
            step,
            epoch,
            lr,
            loss_total: loss.value,
            loss_per_anchor: loss.value / minibatch.len() as f64,
        });
        if (step + 1) % config.steps_per_epoch == 0 {
            epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
            epoch_start = Instant::now();
        }
    }

    Ok((params, TrainLog { records, epoch_seconds }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::sampler::Window;

    fn test_corpus_config() -> CorpusConfig {
        CorpusConfig {
            num_contents: 12,
            snippets_min: 10,
            snippets_max: 14,
            sem_dim: 3,
            art_dim: 2,
            video_dim: 8,
            audio_dim: 6,
            artifact_strength: 1.0,
            temporal_rho: 0.6,
            noise_scale: 0.2,
            num_classes: 3,
            holdout_fraction: 0.25,
            seed: 21,
        }
    }

    fn test_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 5,
            sampling: SamplingSpec {
                batch_size: 8,
                group_size: 2,
                window: Window::Full,
                seed: 5,
            },
            variant: LossVariant::Unnormalized,
            jitter_sigma: 0.0,
            lr_init: 1e-4,
            lr_peak: 2e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dims: EncoderDims {
                video_in: 8,
                audio_in: 6,
                hidden: 10,
                video_feat: 10,
                audio_feat: 10,
                embed: 6,
            },
            seed: 99,
        }
    }

    fn schedule_config(epochs: usize, steps_per_epoch: usize) -> TrainConfig {
        TrainConfig { epochs, steps_per_epoch, ..test_train_config() }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = schedule_config(10, 100);
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(100, &cfg).unwrap() - 2e-3).abs() < 1e-15);

        // Direct evaluation of the cosine at the last two steps: progress
        // hits 1 on the final step, so the rate lands exactly on zero.
        assert_eq!(lr_at(999, &cfg).unwrap(), 0.0);
        let want = 2e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 898.0 / 899.0).cos());
        assert!((lr_at(998, &cfg).unwrap() - want).abs() < 1e-18);

        assert!(matches!(lr_at(1000, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn schedule_is_continuous() {
        let cfg = schedule_config(4, 50);
        let total = cfg.total_steps();
        let warmup_slope = (cfg.lr_peak - cfg.lr_init) / cfg.steps_per_epoch as f64;
        let span = (total - 1 - cfg.steps_per_epoch) as f64;
        let cosine_slope = cfg.lr_peak * 0.5 * std::f64::consts::PI / span;
        let limit = warmup_slope.max(cosine_slope) * (1.0 + 1e-12);
        for step in 0..total - 1 {
            let jump = (lr_at(step + 1, &cfg).unwrap() - lr_at(step, &cfg).unwrap()).abs();
            assert!(jump <= limit, "step {step}: jump {jump} > {limit}");
        }
    }

    #[test]
    fn schedule_single_epoch_is_all_warmup() {
        let cfg = schedule_config(1, 10);
        assert_eq!(lr_at(0, &cfg).unwrap(), cfg.lr_init);
        assert!(lr_at(9, &cfg).unwrap() < cfg.lr_peak);
    }

    #[test]
    fn adam_scalar_oracle_on_first_step() {
        // From zero moments at t = 1 the bias corrections cancel and the
        // update is -lr * g / (|g| + eps) elementwise.
        let dims = test_train_config().dims;
        let params0 = init_params(dims, 3).unwrap();
        let mut grads = params0.zeros_grads();
        grads.video.layers[0].weight.fill(0.25);
        grads.video.layers[0].bias.fill(-0.5);
        grads.audio.layers[1].weight.fill(-1.5);

        let (lr, eps) = (0.01, 1e-8);
        let mut params = params0.clone();
        let mut moments = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut moments, 0, lr, 0.9, 0.999, eps);

        let scalar = |g: f64| -lr * g / (g.abs() + eps);
        for (got, want) in params.video.layers[0]
            .weight
            .iter()
            .zip(params0.video.layers[0].weight.iter())
        {
            assert!((got - (want + scalar(0.25))).abs() < 1e-12);
        }
        for (got, want) in params.video.layers[0]
            .bias
            .iter()
            .zip(params0.video.layers[0].bias.iter())
        {
            assert!((got - (want + scalar(-0.5))).abs() < 1e-12);
        }
        for (got, want) in params.audio.layers[1]
            .weight
            .iter()
            .zip(params0.audio.layers[1].weight.iter())
        {
            assert!((got - (want + scalar(-1.5))).abs() < 1e-12);
        }
        // Untouched layers see zero gradient and zero moments: unchanged.
        assert_eq!(params.video.layers[2], params0.video.layers[2]);
    }

    #[test]
    fn adam_zero_gradients_leave_params_and_decay_moments() {
        let dims = test_train_config().dims;
        let mut params = init_params(dims, 4).unwrap();
        let mut grads = params.zeros_grads();
        grads.video.layers[0].weight.fill(1.0);
        let mut moments = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut moments, 0, 0.01, 0.9, 0.999, 1e-8);
        let m_after_one = moments.m.video.layers[0].weight[[0, 0]];
        assert!((m_after_one - 0.1).abs() < 1e-12);

        let frozen = params.clone();
        let zeros = params.zeros_grads();
        let mut fresh_moments = AdamState::new(&params);
        let mut fresh_params = params.clone();
        adam_step(&mut fresh_params, &zeros, &mut fresh_moments, 0, 0.01, 0.9, 0.999, 1e-8);
        assert_eq!(fresh_params, frozen);

        adam_step(&mut params, &zeros, &mut moments, 1, 0.01, 0.9, 0.999, 1e-8);
        let decayed = moments.m.video.layers[0].weight[[0, 0]];
        assert!((decayed - 0.9 * m_after_one).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_scales_linearly_with_lr() {
        let dims = test_train_config().dims;
        let base = init_params(dims, 5).unwrap();
        let mut grads = base.zeros_grads();
        grads.video.layers[0].weight.fill(0.7);
        grads.audio.layers[0].weight.fill(-0.3);

        let run = |lr: f64| -> TowerParams {
            let mut p = base.clone();
            let mut m = AdamState::new(&p);
            adam_step(&mut p, &grads, &mut m, 0, lr, 0.9, 0.999, 1e-8);
            p
        };
        let p1 = run(0.01);
        let p2 = run(0.02);
        for ((a, b), orig) in p1.video.layers[0]
            .weight
            .iter()
            .zip(p2.video.layers[0].weight.iter())
            .zip(base.video.layers[0].weight.iter())
        {
            let d1 = a - orig;
            let d2 = b - orig;
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_changes_params() {
        let corpus = generate_corpus(&test_corpus_config()).unwrap();
        let view = corpus.full_view();
        let cfg = schedule_config(1, 1);
        let (params, log) = train(&view, &cfg).unwrap();
        assert_eq!(log.records.len(), 1);
        let init = init_params(cfg.dims, derive_seed(cfg.seed, STREAM_PARAMS)).unwrap();
        assert_ne!(params, init, "one update with a nonzero gradient must move params");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = generate_corpus(&test_corpus_config()).unwrap();
        let view = corpus.full_view();
        let cfg = test_train_config();
        let (p1, l1) = train(&view, &cfg).unwrap();
        let (p2, l2) = train(&view, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1.records, l2.records);
        assert_eq!(l1.records.len(), cfg.total_steps());
        assert!(l1.records.iter().all(|r| r.loss_total.is_finite()));
    }

    #[test]
    fn jitter_zero_assembles_the_plain_features() {
        let corpus = generate_corpus(&test_corpus_config()).unwrap();
        let view = corpus.full_view();
        let spec = test_train_config().sampling;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mb = draw_minibatch(&view, &spec, &mut rng).unwrap();

        let mut jitter_rng_a = ChaCha8Rng::seed_from_u64(100);
        let mut jitter_rng_b = ChaCha8Rng::seed_from_u64(777);
        let (va, aa) = assemble_batch(&corpus, &mb, 0.0, &mut jitter_rng_a);
        let (vb, ab) = assemble_batch(&corpus, &mb, 0.0, &mut jitter_rng_b);
        assert_eq!(va, vb);
        assert_eq!(aa, ab);
        for (row, &(c, m)) in mb.entries.iter().enumerate() {
            assert_eq!(va.row(row), corpus.snippet(c, m).video_features.view());
        }
        // The two rngs were never consumed: both still agree with a fresh one.
        assert_eq!(jitter_rng_a.get_word_pos(), 0);
        assert_eq!(jitter_rng_b.get_word_pos(), 0);
    }

    #[test]
    fn jitter_applies_to_video_only() {
        let corpus = generate_corpus(&test_corpus_config()).unwrap();
        let view = corpus.full_view();
        let spec = test_train_config().sampling;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mb = draw_minibatch(&view, &spec, &mut rng).unwrap();
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(3);
        let (video, audio) = assemble_batch(&corpus, &mb, 0.8, &mut jitter_rng);
        for (row, &(c, m)) in mb.entries.iter().enumerate() {
            let snippet = corpus.snippet(c, m);
            assert_eq!(audio.row(row), snippet.audio_features.view());
            // Each video row is a scalar multiple of the raw features.
            let raw = &snippet.video_features;
            let gain = video[[row, 0]] / raw[0];
            for (got, want) in video.row(row).iter().zip(raw.iter()) {
                assert!((got - want * gain).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let corpus = generate_corpus(&test_corpus_config()).unwrap();
        let view = corpus.full_view();
        let mut cfg = test_train_config();
        cfg.lr_init = 1e280;
        cfg.lr_peak = 1e280;
        match train(&view, &cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step < cfg.total_steps()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dims_must_match_corpus() {
        let corpus = generate_corpus(&test_corpus_config()).unwrap();
        let view = corpus.full_view();
        let mut cfg = test_train_config();
        cfg.dims.video_in = 99;
        assert!(matches!(train(&view, &cfg), Err(Error::Config(_))));
    }
}
