//! Minibatch sampling policies.
//!
//! The baseline draws B snippets i.i.d. by picking B distinct contents with
//! one snippet each (k = 1). The hierarchical policy draws B/k distinct
//! contents and k distinct snippets per content, optionally constrained to a
//! temporal window of span at most w.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusView;
use crate::error::{Error, Result};

/// Temporal window for the snippets of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Window {
    /// Span bounded by a fixed count of snippet positions.
    Count(usize),
    /// No temporal constraint: the window is the whole content.
    #[serde(rename = "full")]
    Full,
}

impl Window {
    pub fn as_count(&self) -> Option<usize> {
        match self {
            Window::Count(w) => Some(*w),
            Window::Full => None,
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Window::Count(w) => write!(f, "{w}"),
            Window::Full => write!(f, "full"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Minibatch size B.
    pub batch_size: usize,
    /// Snippets drawn per selected content (k).
    pub group_size: usize,
    /// Temporal window w; `Full` means w = M_n per content.
    pub window: Window,
    pub seed: u64,
}

impl SamplingSpec {
    /// Structural checks that do not need a corpus.
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 1 {
            return Err(Error::Config("group_size k must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % self.group_size != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be a positive multiple of group_size {}",
                self.batch_size, self.group_size
            )));
        }
        if let Window::Count(w) = self.window {
            if self.group_size > w {
                return Err(Error::Config(format!(
                    "group_size k = {} exceeds window w = {w}",
                    self.group_size
                )));
            }
        }
        Ok(())
    }

    /// Checks this spec against a concrete corpus view; names the violated
    /// bound on failure.
    pub fn validate_against(&self, view: &CorpusView<'_>) -> Result<()> {
        self.validate()?;
        let groups = self.batch_size / self.group_size;
        if groups > view.num_contents() {
            return Err(Error::Sampling(format!(
                "B/k = {groups} groups exceed the {} available contents",
                view.num_contents()
            )));
        }
        let min_len = view.min_content_len();
        if self.group_size > min_len {
            return Err(Error::Sampling(format!(
                "group_size k = {} exceeds the shortest content length M_n = {min_len}",
                self.group_size
            )));
        }
        if let Window::Count(w) = self.window {
            if w > min_len {
                return Err(Error::Sampling(format!(
                    "window w = {w} exceeds the shortest content length M_n = {min_len}"
                )));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.batch_size / self.group_size
    }
}

/// One drawn minibatch: B (content_id, snippet_index) pairs with a group
/// boundary every k entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub entries: Vec<(usize, usize)>,
    pub group_size: usize,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = &[(usize, usize)]> {
        self.entries.chunks(self.group_size)
    }

    /// Counts the negatives of anchor `i` whose other side comes from the
    /// anchor's own content (2 per same-content co-member).
    pub fn same_content_negatives(&self, i: usize) -> usize {
        let content = self.entries[i].0;
        2 * self
            .entries
            .iter()
            .enumerate()
            .filter(|&(j, &(c, _))| j != i && c == content)
            .count()
    }
}

/// Size of the negative set for anchor `i` in a batch of size B: the
/// 2(B-1) mismatched pairs that share one side with the anchor.
pub fn negative_pair_count(i: usize, batch_size: usize) -> usize {
    assert!(i < batch_size, "anchor index {i} out of batch of {batch_size}");
    2 * (batch_size - 1)
}

/// Draws `amount` distinct values from `0..n` uniformly, in draw order.
fn sample_distinct<R: Rng>(rng: &mut R, n: usize, amount: usize) -> Vec<usize> {
    debug_assert!(amount <= n);
    // Partial Fisher-Yates over an index table; O(n) but n is at most a
    // content length or the content count here.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..amount {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(amount);
    pool
}

/// Draws one minibatch under the spec: B/k distinct contents uniformly
/// without replacement, then k distinct snippet indices per content, all
/// inside a uniformly placed window when one is set.
pub fn draw_minibatch<R: Rng>(
    view: &CorpusView<'_>,
    spec: &SamplingSpec,
    rng: &mut R,
) -> Result<Minibatch> {
    spec.validate_against(view)?;
    let k = spec.group_size;
    let mut entries = Vec::with_capacity(spec.batch_size);
    for local in sample_distinct(rng, view.num_contents(), spec.groups()) {
        let content = view.content(local);
        let len = content.len();
        let indices = match spec.window {
            Window::Full => sample_distinct(rng, len, k),
            Window::Count(w) => {
                let start = rng.gen_range(0..=len - w);
                sample_distinct(rng, w, k)
                    .into_iter()
                    .map(|m| start + m)
                    .collect()
            }
        };
        entries.extend(indices.into_iter().map(|m| (content.id, m)));
    }
    Ok(Minibatch { entries, group_size: k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Corpus, CorpusConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn corpus(num_contents: usize, len: usize) -> Corpus {
        generate_corpus(&CorpusConfig {
            num_contents,
            snippets_min: len,
            snippets_max: len,
            sem_dim: 2,
            art_dim: 2,
            video_dim: 4,
            audio_dim: 4,
            artifact_strength: 1.0,
            temporal_rho: 0.5,
            noise_scale: 0.1,
            num_classes: 2,
            holdout_fraction: 0.5,
            seed: 1,
        })
        .unwrap()
    }

    fn spec(batch_size: usize, group_size: usize, window: Window) -> SamplingSpec {
        SamplingSpec { batch_size, group_size, window, seed: 0 }
    }

    fn assert_minibatch_laws(mb: &Minibatch, spec: &SamplingSpec, max_len: usize) {
        assert_eq!(mb.len(), spec.batch_size);
        let mut contents_seen = HashSet::new();
        for group in mb.groups() {
            let content = group[0].0;
            assert!(contents_seen.insert(content), "content {content} repeated across groups");
            let indices: HashSet<usize> = group.iter().map(|&(c, m)| {
                assert_eq!(c, content, "mixed contents inside a group");
                m
            }).collect();
            assert_eq!(indices.len(), spec.group_size, "duplicate snippet in group");
            let lo = *indices.iter().min().unwrap();
            let hi = *indices.iter().max().unwrap();
            let span = hi - lo + 1;
            match spec.window {
                Window::Count(w) => assert!(span <= w, "span {span} > w {w}"),
                Window::Full => assert!(span <= max_len),
            }
        }
    }

    #[test]
    fn baseline_k1_is_b_distinct_contents() {
        let corpus = corpus(32, 10);
        let view = corpus.full_view();
        let s = spec(16, 1, Window::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mb = draw_minibatch(&view, &s, &mut rng).unwrap();
            let contents: HashSet<usize> = mb.entries.iter().map(|&(c, _)| c).collect();
            assert_eq!(contents.len(), 16);
            assert_minibatch_laws(&mb, &s, 10);
        }
    }

    #[test]
    fn window_equal_k_forces_consecutive_indices() {
        let corpus = corpus(8, 100);
        let view = corpus.full_view();
        let s = spec(16, 4, Window::Count(4));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let mb = draw_minibatch(&view, &s, &mut rng).unwrap();
            for group in mb.groups() {
                let mut idx: Vec<usize> = group.iter().map(|&(_, m)| m).collect();
                idx.sort_unstable();
                for pair in idx.windows(2) {
                    assert_eq!(pair[1], pair[0] + 1, "indices not consecutive: {idx:?}");
                }
            }
        }
    }

    #[test]
    fn single_group_batch_uses_one_content() {
        let corpus = corpus(4, 20);
        let view = corpus.full_view();
        let s = spec(8, 8, Window::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mb = draw_minibatch(&view, &s, &mut rng).unwrap();
        let contents: HashSet<usize> = mb.entries.iter().map(|&(c, _)| c).collect();
        assert_eq!(contents.len(), 1);
        assert_minibatch_laws(&mb, &s, 20);
    }

    #[test]
    fn windowed_draws_respect_all_laws() {
        let corpus = corpus(16, 32);
        let view = corpus.full_view();
        for s in [
            spec(16, 4, Window::Count(8)),
            spec(16, 2, Window::Count(2)),
            spec(32, 8, Window::Full),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            for _ in 0..2000 {
                let mb = draw_minibatch(&view, &s, &mut rng).unwrap();
                assert_minibatch_laws(&mb, &s, 32);
            }
        }
    }

    #[test]
    fn incompatible_specs_name_the_bound() {
        let corpus = corpus(4, 10);
        let view = corpus.full_view();
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        let err = draw_minibatch(&view, &spec(64, 1, Window::Full), &mut rng).unwrap_err();
        assert!(err.to_string().contains("B/k"), "{err}");

        let err = draw_minibatch(&view, &spec(16, 16, Window::Full), &mut rng).unwrap_err();
        assert!(err.to_string().contains("group_size"), "{err}");

        let err = draw_minibatch(&view, &spec(16, 4, Window::Count(12)), &mut rng).unwrap_err();
        assert!(err.to_string().contains("window"), "{err}");

        let err = spec(16, 4, Window::Count(2)).validate().unwrap_err();
        assert!(err.to_string().contains("exceeds window"), "{err}");

        let err = spec(10, 4, Window::Full).validate().unwrap_err();
        assert!(err.to_string().contains("multiple"), "{err}");
    }

    #[test]
    fn negative_counts() {
        assert_eq!(negative_pair_count(0, 512), 1022);
        assert_eq!(negative_pair_count(1, 2), 2);

        // A (k = 16) group contributes 2(k-1) = 30 same-content negatives.
        let corpus = corpus(8, 40);
        let view = corpus.full_view();
        let s = spec(64, 16, Window::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mb = draw_minibatch(&view, &s, &mut rng).unwrap();
        for i in 0..mb.len() {
            assert_eq!(mb.same_content_negatives(i), 30);
        }
    }

    #[test]
    #[should_panic(expected = "anchor index")]
    fn negative_pair_count_checks_range() {
        negative_pair_count(2, 2);
    }

    #[test]
    fn draws_are_deterministic_in_seed() {
        let corpus = corpus(16, 32);
        let view = corpus.full_view();
        let s = spec(16, 4, Window::Count(8));
        let draw_all = || -> Vec<Minibatch> {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            (0..50).map(|_| draw_minibatch(&view, &s, &mut rng).unwrap()).collect()
        };
        assert_eq!(draw_all(), draw_all());
    }

    /// Chi-square sanity check: with k = 1 on a balanced corpus the
    /// per-content selection counts stay within 3 standard errors of the
    /// chi-square statistic's expectation.
    #[test]
    fn content_selection_is_uniform() {
        let corpus = corpus(20, 10);
        let view = corpus.full_view();
        let s = spec(10, 1, Window::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 100_000 / s.batch_size;
        let mut counts = vec![0usize; view.num_contents()];
        for _ in 0..draws {
            let mb = draw_minibatch(&view, &s, &mut rng).unwrap();
            for &(c, _) in &mb.entries {
                counts[c] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / counts.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let dof = (counts.len() - 1) as f64;
        let limit = dof + 3.0 * (2.0 * dof).sqrt();
        assert!(chi2 < limit, "chi2 {chi2} exceeds {limit}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn window_and_distinctness_laws_hold(
                k in 1usize..6,
                groups in 1usize..4,
                w_extra in 0usize..8,
                len_extra in 0usize..12,
                seed in 0u64..1000,
            ) {
                let w = k + w_extra;
                let len = (w + len_extra).max(2);
                let corpus = corpus(groups + 2, len);
                let view = corpus.full_view();
                let s = spec(groups * k, k, Window::Count(w));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..20 {
                    let mb = draw_minibatch(&view, &s, &mut rng).unwrap();
                    assert_minibatch_laws(&mb, &s, len);
                }
            }
        }
    }
}
