//! Symmetric cross-modal noise-contrastive loss.
//!
//! For anchor i the positive is the matched pair (z_v^i, z_a^i); the
//! negatives are every mismatched pair sharing one side with the anchor,
//! 2(B-1) in total. The loss sums -log softmax(positive) over anchors,
//! computed with a per-anchor max subtraction over the anchor's full
//! candidate set for numerical stability.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossVariant {
    /// Raw dot-product similarities.
    Unnormalized,
    /// Cosine similarities divided by the temperature.
    NormalizedTau { tau: f64 },
}

impl LossVariant {
    pub fn validate(&self) -> Result<()> {
        if let LossVariant::NormalizedTau { tau } = self {
            if !(*tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("temperature tau = {tau} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> Option<f64> {
        match self {
            LossVariant::Unnormalized => None,
            LossVariant::NormalizedTau { tau } => Some(*tau),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossVariant::Unnormalized => write!(f, "unnorm"),
            LossVariant::NormalizedTau { tau } => write!(f, "norm(tau={tau})"),
        }
    }
}

/// Loss value plus exact gradients with respect to both embedding matrices.
#[derive(Debug, Clone)]
pub struct LossResult {
    /// Batch-total loss (sum over anchors).
    pub value: f64,
    pub grad_z_video: Array2<f64>,
    pub grad_z_audio: Array2<f64>,
    /// Similarities after the variant transform, S[i][j] = sim(z_v^i, z_a^j).
    pub similarity_matrix: Array2<f64>,
}

fn row_norms(z: &Array2<f64>, modality: &str) -> Result<Array1<f64>> {
    let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::Numeric(format!(
            "{modality} embedding has a zero-norm row; cosine similarity undefined"
        )));
    }
    Ok(norms)
}

/// S[i][j] = sim(z_v^i, z_a^j): dot product, or cosine / tau for the
/// normalized variant.
pub fn pairwise_similarity(
    z_video: &Array2<f64>,
    z_audio: &Array2<f64>,
    variant: LossVariant,
) -> Result<Array2<f64>> {
    variant.validate()?;
    if z_video.ncols() != z_audio.ncols() {
        return Err(Error::Config(format!(
            "embedding widths differ: {} vs {}",
            z_video.ncols(),
            z_audio.ncols()
        )));
    }
    let raw = z_video.dot(&z_audio.t());
    match variant {
        LossVariant::Unnormalized => Ok(raw),
        LossVariant::NormalizedTau { tau } => {
            let vn = row_norms(z_video, "video")?;
            let an = row_norms(z_audio, "audio")?;
            let mut s = raw;
            for ((i, j), x) in s.indexed_iter_mut() {
                *x /= vn[i] * an[j] * tau;
            }
            Ok(s)
        }
    }
}

fn check_similarity_matrix(s: &Array2<f64>) -> Result<usize> {
    let b = s.nrows();
    if s.ncols() != b || b == 0 {
        return Err(Error::Numeric(format!(
            "similarity matrix must be square and nonempty, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("similarity matrix contains non-finite values".into()));
    }
    Ok(b)
}

/// Loss value and dL/dS for a similarity matrix.
///
/// Anchor i's candidate set is {S_ii} with the 2(B-1) negatives
/// {S_ij, S_ji : j != i}; each anchor term is -log of the positive's
/// softmax mass over that set.
pub fn nce_loss_from_similarity(s: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let b = check_similarity_matrix(s)?;
    let mut value = 0.0;
    let mut grad = Array2::zeros((b, b));
    for i in 0..b {
        // Stabilized log-sum-exp over the anchor's candidate set.
        let mut max = s[[i, i]];
        for j in 0..b {
            if j != i {
                max = max.max(s[[i, j]]).max(s[[j, i]]);
            }
        }
        let mut denom = (s[[i, i]] - max).exp();
        for j in 0..b {
            if j != i {
                denom += (s[[i, j]] - max).exp() + (s[[j, i]] - max).exp();
            }
        }
        value += denom.ln() - (s[[i, i]] - max);

        // Softmax over the candidate set; the positive's slot also carries
        // the -1 from the log numerator.
        grad[[i, i]] += (s[[i, i]] - max).exp() / denom - 1.0;
        for j in 0..b {
            if j != i {
                grad[[i, j]] += (s[[i, j]] - max).exp() / denom;
                grad[[j, i]] += (s[[j, i]] - max).exp() / denom;
            }
        }
    }
    Ok((value, grad))
}

/// Full loss: similarities under the variant, the contrastive objective,
/// and exact gradients chained back to both embedding matrices.
pub fn nce_loss(
    z_video: &Array2<f64>,
    z_audio: &Array2<f64>,
    variant: LossVariant,
) -> Result<LossResult> {
    if z_video.nrows() != z_audio.nrows() {
        return Err(Error::Config(format!(
            "embedding batch sizes differ: {} vs {}",
            z_video.nrows(),
            z_audio.nrows()
        )));
    }
    let similarity = pairwise_similarity(z_video, z_audio, variant)?;
    let (value, grad_s) = nce_loss_from_similarity(&similarity)?;

    let (grad_z_video, grad_z_audio) = match variant {
        LossVariant::Unnormalized => (grad_s.dot(z_audio), grad_s.t().dot(z_video)),
        LossVariant::NormalizedTau { tau } => {
            // S = (1/tau) U W^T with U, W the row-normalized embeddings; the
            // gradient flows through the normalization.
            let vn = row_norms(z_video, "video")?;
            let an = row_norms(z_audio, "audio")?;
            let u = normalize_rows(z_video, &vn);
            let w = normalize_rows(z_audio, &an);
            let grad_u = grad_s.dot(&w) / tau;
            let grad_w = grad_s.t().dot(&u) / tau;
            (
                normalization_backward(&u, &grad_u, &vn),
                normalization_backward(&w, &grad_w, &an),
            )
        }
    };

    Ok(LossResult { value, grad_z_video, grad_z_audio, similarity_matrix: similarity })
}

fn normalize_rows(z: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut u = z.clone();
    for (mut row, &n) in u.outer_iter_mut().zip(norms.iter()) {
        row.mapv_inplace(|x| x / n);
    }
    u
}

/// dL/dz for z -> z/|z| given dL/du: (g - u (u . g)) / |z| per row.
fn normalization_backward(
    unit: &Array2<f64>,
    grad_unit: &Array2<f64>,
    norms: &Array1<f64>,
) -> Array2<f64> {
    let mut out = grad_unit.clone();
    for ((mut row, u), &n) in out
        .outer_iter_mut()
        .zip(unit.outer_iter())
        .zip(norms.iter())
    {
        let along = row.dot(&u);
        for (g, &ui) in row.iter_mut().zip(u.iter()) {
            *g = (*g - along * ui) / n;
        }
    }
    out
}
