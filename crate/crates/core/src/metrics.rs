//! Held-out diagnostics: the three similarity pools, histogram KL
//! divergences, the derived discrepancy report, and a linear probe over
//! frozen embeddings.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusView;
use crate::encoder::{forward_inference, TowerParams};
use crate::error::{Error, Result};
use crate::objective::LossVariant;

/// How many pairs each pool received.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolBudget {
    pub pos: usize,
    pub neg_within: usize,
    pub neg_cross: usize,
}

/// Empirical samples of the matched, mismatched-same-content, and
/// cross-content similarity distributions on a held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPools {
    pub pos: Vec<f64>,
    pub neg_within: Vec<f64>,
    pub neg_cross: Vec<f64>,
    pub budget: PoolBudget,
}

/// The three pairwise KL divergences and the derived gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    /// KL(within-content negatives vs matched pairs).
    pub kl_within_vs_pos: f64,
    /// KL(cross-content negatives vs matched pairs).
    pub kl_cross_vs_pos: f64,
    /// KL(within-content negatives vs cross-content negatives).
    pub kl_within_vs_cross: f64,
    /// kl_cross_vs_pos - kl_within_vs_pos.
    pub gap: f64,
}

/// Which tower's embeddings feed the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

struct EmbeddedView {
    z_video: Array2<f64>,
    z_audio: Array2<f64>,
    /// (row offset, snippet count) per view content, in view order.
    content_rows: Vec<(usize, usize)>,
    labels: Vec<usize>,
}

fn embed_view(params: &TowerParams, view: &CorpusView<'_>) -> Result<EmbeddedView> {
    let total = view.total_snippets();
    if total == 0 {
        return Err(Error::Evaluation("view has no snippets to embed".into()));
    }
    let corpus_cfg = &view.corpus().config;
    let mut video = Array2::zeros((total, corpus_cfg.video_dim));
    let mut audio = Array2::zeros((total, corpus_cfg.audio_dim));
    let mut content_rows = Vec::with_capacity(view.num_contents());
    let mut labels = Vec::with_capacity(total);
    let mut row = 0usize;
    for local in 0..view.num_contents() {
        let content = view.content(local);
        content_rows.push((row, content.len()));
        for snippet in &content.snippets {
            video.row_mut(row).assign(&snippet.video_features);
            audio.row_mut(row).assign(&snippet.audio_features);
            labels.push(snippet.class_label);
            row += 1;
        }
    }
    let out = forward_inference(params, &video, &audio)?;
    Ok(EmbeddedView {
        z_video: out.z_video,
        z_audio: out.z_audio,
        content_rows,
        labels,
    })
}

/// Similarity of one (video row, audio row) pair under the variant the loss
/// was trained with.
fn pair_similarity(
    z_video: &Array2<f64>,
    z_audio: &Array2<f64>,
    video_norms: &Array1<f64>,
    audio_norms: &Array1<f64>,
    i: usize,
    j: usize,
    variant: LossVariant,
) -> f64 {
    let dot = z_video.row(i).dot(&z_audio.row(j));
    match variant {
        LossVariant::Unnormalized => dot,
        LossVariant::NormalizedTau { tau } => dot / (video_norms[i] * audio_norms[j] * tau),
    }
}

fn row_norms_checked(z: &Array2<f64>, modality: &str, variant: LossVariant) -> Result<Array1<f64>> {
    let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if matches!(variant, LossVariant::NormalizedTau { .. }) && norms.iter().any(|&n| n == 0.0) {
        return Err(Error::Numeric(format!(
            "{modality} embedding has a zero-norm row; cosine similarity undefined"
        )));
    }
    Ok(norms)
}

/// Embeds every held-out snippet once per modality and fills the three
/// pools: all matched pairs, plus `budget` uniform draws each for the two
/// negative pools. Deterministic in (params, view, seed).
pub fn collect_similarities(
    params: &TowerParams,
    holdout: &CorpusView<'_>,
    variant: LossVariant,
    budget: usize,
    seed: u64,
) -> Result<SimilarityPools> {
    variant.validate()?;
    if budget == 0 {
        return Err(Error::Config("pair budget must be >= 1".into()));
    }
    let embedded = embed_view(params, holdout)?;
    let vn = row_norms_checked(&embedded.z_video, "video", variant)?;
    let an = row_norms_checked(&embedded.z_audio, "audio", variant)?;
    let sim = |i: usize, j: usize| {
        pair_similarity(&embedded.z_video, &embedded.z_audio, &vn, &an, i, j, variant)
    };

    let total = embedded.labels.len();
    let pos: Vec<f64> = (0..total).map(|r| sim(r, r)).collect();

    let contents = &embedded.content_rows;
    let pairable: Vec<&(usize, usize)> = contents.iter().filter(|(_, len)| *len >= 2).collect();
    if pairable.is_empty() {
        return Err(Error::Evaluation(
            "no held-out content has two snippets; cannot fill the within-content pool".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut neg_within = Vec::with_capacity(budget);
    while neg_within.len() < budget {
        let &&(start, len) = &pairable[rng.gen_range(0..pairable.len())];
        let m1 = rng.gen_range(0..len);
        let m2 = rng.gen_range(0..len);
        if m1 == m2 {
            continue;
        }
        neg_within.push(sim(start + m1, start + m2));
    }

    if contents.len() < 2 {
        return Err(Error::Evaluation(
            "holdout has a single content; cannot fill the cross-content pool".into(),
        ));
    }
    let mut neg_cross = Vec::with_capacity(budget);
    while neg_cross.len() < budget {
        let c1 = rng.gen_range(0..contents.len());
        let c2 = rng.gen_range(0..contents.len());
        if c1 == c2 {
            continue;
        }
        let (s1, l1) = contents[c1];
        let (s2, l2) = contents[c2];
        neg_cross.push(sim(s1 + rng.gen_range(0..l1), s2 + rng.gen_range(0..l2)));
    }

    let budget_record = PoolBudget {
        pos: pos.len(),
        neg_within: neg_within.len(),
        neg_cross: neg_cross.len(),
    };
    Ok(SimilarityPools { pos, neg_within, neg_cross, budget: budget_record })
}

/// Histogram KL divergence over a shared equal-width binning spanning the
/// pooled samples, with add-epsilon smoothing. Returns 0 when the pooled
/// range is degenerate; never negative.
pub fn kl_divergence(
    p_samples: &[f64],
    q_samples: &[f64],
    bins: usize,
    epsilon: f64,
) -> Result<f64> {
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(Error::Config("kl_divergence needs nonempty sample arrays".into()));
    }
    if bins < 2 {
        return Err(Error::Config("kl_divergence needs bins >= 2".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config("kl_divergence needs epsilon > 0".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &x in p_samples.iter().chain(q_samples.iter()) {
        if !x.is_finite() {
            return Err(Error::Numeric("kl_divergence samples must be finite".into()));
        }
        min = min.min(x);
        max = max.max(x);
    }
    if min == max {
        return Ok(0.0);
    }

    let width = (max - min) / bins as f64;
    let histogram = |xs: &[f64]| -> Vec<f64> {
        let mut counts = vec![0.0f64; bins];
        for &x in xs {
            let idx = (((x - min) / width) as usize).min(bins - 1);
            counts[idx] += 1.0;
        }
        let mass = xs.len() as f64 + bins as f64 * epsilon;
        counts.iter().map(|c| (c + epsilon) / mass).collect()
    };
    let p = histogram(p_samples);
    let q = histogram(q_samples);
    let kl: f64 = p
        .iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// The three KLs of the pools plus the gap; each KL bins over its own
/// (p, q) pair.
pub fn discrepancy(pools: &SimilarityPools, bins: usize, epsilon: f64) -> Result<DiscrepancyReport> {
    let kl_within_vs_pos = kl_divergence(&pools.neg_within, &pools.pos, bins, epsilon)?;
    let kl_cross_vs_pos = kl_divergence(&pools.neg_cross, &pools.pos, bins, epsilon)?;
    let kl_within_vs_cross = kl_divergence(&pools.neg_within, &pools.neg_cross, bins, epsilon)?;
    Ok(DiscrepancyReport {
        kl_within_vs_pos,
        kl_cross_vs_pos,
        kl_within_vs_cross,
        gap: kl_cross_vs_pos - kl_within_vs_pos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Full-batch gradient descent iterations.
    pub iterations: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights (the intercept is unpenalized).
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { iterations: 500, learning_rate: 0.2, l2: 1e-4 }
    }
}

/// L2-regularized multinomial logistic regression on fixed features:
/// deterministic zero init, full-batch gradient descent, top-1 test
/// accuracy. Features are centered and scaled by one global factor so the
/// fit is invariant to rotations of the feature space.
pub fn fit_linear_probe(
    x_train: &Array2<f64>,
    y_train: &[usize],
    x_test: &Array2<f64>,
    y_test: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::Probe("probe needs at least two classes".into()));
    }
    if x_train.nrows() != y_train.len() || x_test.nrows() != y_test.len() {
        return Err(Error::Probe("feature/label row counts differ".into()));
    }
    if x_train.nrows() == 0 || x_test.nrows() == 0 {
        return Err(Error::Probe("probe needs nonempty train and test sets".into()));
    }
    if x_train.ncols() != x_test.ncols() {
        return Err(Error::Probe("train/test feature widths differ".into()));
    }
    if y_train.iter().chain(y_test.iter()).any(|&y| y >= num_classes) {
        return Err(Error::Probe("label outside [0, num_classes)".into()));
    }
    let first = y_train[0];
    if y_train.iter().all(|&y| y == first) {
        return Err(Error::Probe("training labels contain a single class".into()));
    }

    let n = x_train.nrows() as f64;
    let d = x_train.ncols();
    let mean = x_train.mean_axis(Axis(0)).expect("nonempty");
    let centered = x_train - &mean;
    // One global scale: sqrt of the mean squared norm per coordinate.
    let scale = (centered.iter().map(|x| x * x).sum::<f64>() / (n * d as f64))
        .sqrt()
        .max(1e-12);
    let xt = centered / scale;
    let xe = (x_test - &mean) / scale;

    let mut weights: Array2<f64> = Array2::zeros((d, num_classes));
    let mut intercept: Array1<f64> = Array1::zeros(num_classes);
    for _ in 0..config.iterations {
        let mut probs = xt.dot(&weights) + &intercept;
        for mut row in probs.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        for (i, &y) in y_train.iter().enumerate() {
            probs[[i, y]] -= 1.0;
        }
        let grad_logits = probs / n;
        let grad_w = xt.t().dot(&grad_logits) + &(&weights * config.l2);
        let grad_b = grad_logits.sum_axis(Axis(0));
        weights -= &(&grad_w * config.learning_rate);
        intercept -= &(&grad_b * config.learning_rate);
    }

    let logits = xe.dot(&weights) + &intercept;
    let correct = logits
        .outer_iter()
        .zip(y_test.iter())
        .filter(|(row, &y)| {
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if v > best_val {
                    best_val = v;
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / y_test.len() as f64)
}

/// Probes frozen embeddings of one modality: fits on the train view,
/// reports top-1 accuracy on the test view. The views must be disjoint.
pub fn linear_probe(
    params: &TowerParams,
    train_view: &CorpusView<'_>,
    test_view: &CorpusView<'_>,
    modality: Modality,
    config: &ProbeConfig,
) -> Result<f64> {
    for id in test_view.content_ids() {
        if train_view.content_ids().contains(id) {
            return Err(Error::Probe(format!(
                "probe views overlap on content {id}"
            )));
        }
    }
    let train = embed_view(params, train_view)?;
    let test = embed_view(params, test_view)?;
    let (xt, xe) = match modality {
        Modality::Video => (&train.z_video, &test.z_video),
        Modality::Audio => (&train.z_audio, &test.z_audio),
    };
    fit_linear_probe(
        xt,
        &train.labels,
        xe,
        &test.labels,
        train_view.corpus().config.num_classes,
        config,
    )
}
