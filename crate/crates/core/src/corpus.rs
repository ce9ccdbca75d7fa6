//! Synthetic long-form content generator.
//!
//! Each content owns a fixed artifact latent shared by all of its snippets;
//! per-snippet semantics follow an AR(1) chain along the temporal axis. Video
//! and audio observations mix both latents through four fixed matrices, so
//! mismatched snippet pairs from one content stay correlated through the
//! artifact channel while cross-content pairs do not.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{read_array1, read_array2, write_array1, write_array2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Number of long-form contents N.
    pub num_contents: usize,
    /// Inclusive lower bound on snippets per content.
    pub snippets_min: usize,
    /// Inclusive upper bound on snippets per content.
    pub snippets_max: usize,
    /// Semantic latent dimension.
    pub sem_dim: usize,
    /// Artifact latent dimension.
    pub art_dim: usize,
    /// Observed video feature length D_v.
    pub video_dim: usize,
    /// Observed audio feature length D_a.
    pub audio_dim: usize,
    /// Artifact channel strength alpha (>= 0).
    pub artifact_strength: f64,
    /// Scene-continuity correlation rho in [0, 1).
    pub temporal_rho: f64,
    /// Additive observation noise scale (>= 0).
    pub noise_scale: f64,
    /// Number of semantic class labels for probing.
    pub num_classes: usize,
    /// Fraction of contents held out, in (0, 1).
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_contents < 2 {
            return Err(Error::Config("num_contents must be >= 2".into()));
        }
        if self.snippets_min < 2 || self.snippets_min > self.snippets_max {
            return Err(Error::Config(format!(
                "snippets_per_content range [{}, {}] must satisfy 2 <= min <= max",
                self.snippets_min, self.snippets_max
            )));
        }
        for (name, v) in [
            ("sem_dim", self.sem_dim),
            ("art_dim", self.art_dim),
            ("video_dim", self.video_dim),
            ("audio_dim", self.audio_dim),
            ("num_classes", self.num_classes),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.artifact_strength < 0.0 || !self.artifact_strength.is_finite() {
            return Err(Error::Config("artifact_strength must be a finite value >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.temporal_rho) {
            return Err(Error::Config("temporal_rho must lie in [0, 1)".into()));
        }
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            return Err(Error::Config("noise_scale must be a finite value >= 0".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        let held = holdout_count(self.num_contents, self.holdout_fraction);
        if held == 0 || held >= self.num_contents {
            return Err(Error::Config(format!(
                "holdout_fraction {} leaves an empty split for {} contents",
                self.holdout_fraction, self.num_contents
            )));
        }
        Ok(())
    }
}

/// One audiovisual snippet: observed features plus its diagnostic latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub content_id: usize,
    /// 0-based position in temporal order within the content.
    pub snippet_index: usize,
    pub video_features: Array1<f64>,
    pub audio_features: Array1<f64>,
    /// Semantic class, derived from the semantic latent only. Diagnostic:
    /// never consumed during pretraining.
    pub class_label: usize,
    /// Semantic latent, kept for diagnostics on temporal structure.
    pub semantic_latent: Array1<f64>,
}

/// One long-form content: an ordered snippet sequence sharing one artifact latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Content {
    pub id: usize,
    pub artifact_latent: Array1<f64>,
    pub snippets: Vec<Snippet>,
}

impl Content {
    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }
}

/// The four fixed mixing matrices shared by every snippet of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrices {
    pub video_from_semantic: Array2<f64>,
    pub video_from_artifact: Array2<f64>,
    pub audio_from_semantic: Array2<f64>,
    pub audio_from_artifact: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub contents: Vec<Content>,
    pub mixing: MixingMatrices,
    pub config: CorpusConfig,
}

impl Corpus {
    pub fn num_contents(&self) -> usize {
        self.contents.len()
    }

    pub fn total_snippets(&self) -> usize {
        self.contents.iter().map(Content::len).sum()
    }

    pub fn snippet(&self, content_id: usize, snippet_index: usize) -> &Snippet {
        &self.contents[content_id].snippets[snippet_index]
    }

    /// View over every content of the corpus.
    pub fn full_view(&self) -> CorpusView<'_> {
        CorpusView {
            corpus: self,
            content_ids: (0..self.contents.len()).collect(),
        }
    }
}

/// A read-only selection of contents from an immutable corpus.
#[derive(Debug, Clone)]
pub struct CorpusView<'a> {
    corpus: &'a Corpus,
    content_ids: Vec<usize>,
}

impl<'a> CorpusView<'a> {
    pub fn corpus(&self) -> &'a Corpus {
        self.corpus
    }

    pub fn num_contents(&self) -> usize {
        self.content_ids.len()
    }

    /// Global content ids selected by this view, in ascending order.
    pub fn content_ids(&self) -> &[usize] {
        &self.content_ids
    }

    pub fn content(&self, local: usize) -> &'a Content {
        &self.corpus.contents[self.content_ids[local]]
    }

    pub fn total_snippets(&self) -> usize {
        self.content_ids
            .iter()
            .map(|&id| self.corpus.contents[id].len())
            .sum()
    }

    pub fn min_content_len(&self) -> usize {
        self.content_ids
            .iter()
            .map(|&id| self.corpus.contents[id].len())
            .min()
            .unwrap_or(0)
    }

    pub fn snippets(&self) -> impl Iterator<Item = &'a Snippet> + '_ {
        self.content_ids
            .iter()
            .flat_map(|&id| self.corpus.contents[id].snippets.iter())
    }
}

fn holdout_count(num_contents: usize, fraction: f64) -> usize {
    (fraction * num_contents as f64).round() as usize
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_iter((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Mixing matrix with standard-normal entries scaled by 1/sqrt(cols), so the
/// mixed observation keeps O(1) variance regardless of latent width.
fn mixing_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Generates a corpus. Pure function of the config: identical configs yield
/// bit-identical corpora.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mixing = MixingMatrices {
        video_from_semantic: mixing_matrix(&mut rng, config.video_dim, config.sem_dim),
        video_from_artifact: mixing_matrix(&mut rng, config.video_dim, config.art_dim),
        audio_from_semantic: mixing_matrix(&mut rng, config.audio_dim, config.sem_dim),
        audio_from_artifact: mixing_matrix(&mut rng, config.audio_dim, config.art_dim),
    };

    let innovation = (1.0 - config.temporal_rho * config.temporal_rho).sqrt();
    let mut contents = Vec::with_capacity(config.num_contents);
    for content_id in 0..config.num_contents {
        let len = rng.gen_range(config.snippets_min..=config.snippets_max);
        let artifact = standard_normal_vec(&mut rng, config.art_dim);
        let video_artifact = mixing.video_from_artifact.dot(&artifact) * config.artifact_strength;
        let audio_artifact = mixing.audio_from_artifact.dot(&artifact) * config.artifact_strength;

        let mut snippets = Vec::with_capacity(len);
        let mut semantic = Array1::zeros(config.sem_dim);
        for snippet_index in 0..len {
            let eps = standard_normal_vec(&mut rng, config.sem_dim);
            // AR(1) with stationary unit marginal variance; the chain starts
            // from its stationary distribution.
            semantic = if snippet_index == 0 {
                eps
            } else {
                &semantic * config.temporal_rho + &eps * innovation
            };

            let video_noise = standard_normal_vec(&mut rng, config.video_dim);
            let audio_noise = standard_normal_vec(&mut rng, config.audio_dim);
            let video = mixing.video_from_semantic.dot(&semantic)
                + &video_artifact
                + video_noise * config.noise_scale;
            let audio = mixing.audio_from_semantic.dot(&semantic)
                + &audio_artifact
                + audio_noise * config.noise_scale;

            let class_label = max_magnitude_index(&semantic) % config.num_classes;
            snippets.push(Snippet {
                content_id,
                snippet_index,
                video_features: video,
                audio_features: audio,
                class_label,
                semantic_latent: semantic.clone(),
            });
        }
        contents.push(Content {
            id: content_id,
            artifact_latent: artifact,
            snippets,
        });
    }

    Ok(Corpus {
        contents,
        mixing,
        config: config.clone(),
    })
}

fn max_magnitude_index(v: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_mag = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_mag {
            best_mag = x.abs();
            best = i;
        }
    }
    best
}

/// Splits a corpus into train/holdout views at content granularity. The
/// holdout receives `round(fraction * N)` contents; no content appears on
/// both sides.
pub fn split_holdout(
    corpus: &Corpus,
    fraction: f64,
    seed: u64,
) -> Result<(CorpusView<'_>, CorpusView<'_>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} must lie in (0, 1)"
        )));
    }
    let n = corpus.num_contents();
    let held = holdout_count(n, fraction);
    if held == 0 || held >= n {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} leaves an empty split for {n} contents"
        )));
    }

    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates membership shuffle; each side is then sorted so iteration
    // order does not depend on the shuffle.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let mut holdout_ids: Vec<usize> = ids[..held].to_vec();
    let mut train_ids: Vec<usize> = ids[held..].to_vec();
    holdout_ids.sort_unstable();
    train_ids.sort_unstable();

    Ok((
        CorpusView { corpus, content_ids: train_ids },
        CorpusView { corpus, content_ids: holdout_ids },
    ))
}

/// Scales a feature vector by one gain drawn uniformly from
/// `[max(0, 1 - sigma), 1 + sigma]`. One draw per call.
pub fn augment_jitter<R: Rng>(features: &Array1<f64>, sigma: f64, rng: &mut R) -> Array1<f64> {
    assert!(sigma >= 0.0, "jitter sigma must be >= 0");
    let low = (1.0 - sigma).max(0.0);
    let gain = rng.gen_range(low..=1.0 + sigma);
    features * gain
}

const CORPUS_MAGIC: &[u8; 8] = b"XMCORP01";

impl Corpus {
    /// Serializes the corpus, config echo and seed included, to a
    /// byte-exact binary layout.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CORPUS_MAGIC)?;
        let c = &self.config;
        for v in [
            c.num_contents as u64,
            c.snippets_min as u64,
            c.snippets_max as u64,
            c.sem_dim as u64,
            c.art_dim as u64,
            c.video_dim as u64,
            c.audio_dim as u64,
            c.num_classes as u64,
            c.seed,
        ] {
            w.write_u64::<LittleEndian>(v)?;
        }
        for v in [c.artifact_strength, c.temporal_rho, c.noise_scale, c.holdout_fraction] {
            w.write_f64::<LittleEndian>(v)?;
        }
        write_array2(w, &self.mixing.video_from_semantic)?;
        write_array2(w, &self.mixing.video_from_artifact)?;
        write_array2(w, &self.mixing.audio_from_semantic)?;
        write_array2(w, &self.mixing.audio_from_artifact)?;
        w.write_u64::<LittleEndian>(self.contents.len() as u64)?;
        for content in &self.contents {
            w.write_u64::<LittleEndian>(content.id as u64)?;
            write_array1(w, &content.artifact_latent)?;
            w.write_u64::<LittleEndian>(content.snippets.len() as u64)?;
            for s in &content.snippets {
                w.write_u64::<LittleEndian>(s.content_id as u64)?;
                w.write_u64::<LittleEndian>(s.snippet_index as u64)?;
                w.write_u64::<LittleEndian>(s.class_label as u64)?;
                write_array1(w, &s.video_features)?;
                write_array1(w, &s.audio_features)?;
                write_array1(w, &s.semantic_latent)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Corpus> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format("not a corpus file".into()));
        }
        let mut ints = [0u64; 9];
        for v in ints.iter_mut() {
            *v = r.read_u64::<LittleEndian>()?;
        }
        let mut floats = [0f64; 4];
        for v in floats.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let config = CorpusConfig {
            num_contents: ints[0] as usize,
            snippets_min: ints[1] as usize,
            snippets_max: ints[2] as usize,
            sem_dim: ints[3] as usize,
            art_dim: ints[4] as usize,
            video_dim: ints[5] as usize,
            audio_dim: ints[6] as usize,
            num_classes: ints[7] as usize,
            seed: ints[8],
            artifact_strength: floats[0],
            temporal_rho: floats[1],
            noise_scale: floats[2],
            holdout_fraction: floats[3],
        };
        let mixing = MixingMatrices {
            video_from_semantic: read_array2(r)?,
            video_from_artifact: read_array2(r)?,
            audio_from_semantic: read_array2(r)?,
            audio_from_artifact: read_array2(r)?,
        };
        let num_contents = r.read_u64::<LittleEndian>()? as usize;
        let mut contents = Vec::with_capacity(num_contents);
        for _ in 0..num_contents {
            let id = r.read_u64::<LittleEndian>()? as usize;
            let artifact_latent = read_array1(r)?;
            let num_snippets = r.read_u64::<LittleEndian>()? as usize;
            let mut snippets = Vec::with_capacity(num_snippets);
            for _ in 0..num_snippets {
                let content_id = r.read_u64::<LittleEndian>()? as usize;
                let snippet_index = r.read_u64::<LittleEndian>()? as usize;
                let class_label = r.read_u64::<LittleEndian>()? as usize;
                snippets.push(Snippet {
                    content_id,
                    snippet_index,
                    class_label,
                    video_features: read_array1(r)?,
                    audio_features: read_array1(r)?,
                    semantic_latent: read_array1(r)?,
                });
            }
            contents.push(Content { id, artifact_latent, snippets });
        }
        Ok(Corpus { contents, mixing, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}
