//! Two-tower feedforward encoder with projection heads.
//!
//! Each modality runs through four affine layers (two tower layers, two head
//! layers) with a rectifier between consecutive layers and no nonlinearity
//! after the final affine, leaving the embedding space unconstrained. The
//! backward pass is exact analytic differentiation of that composition.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_array1, read_array2, write_array1, write_array2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Video feature width D_v.
    pub video_in: usize,
    /// Audio feature width D_a.
    pub audio_in: usize,
    /// Hidden width of both towers.
    pub hidden: usize,
    /// Video tower output width d_f.
    pub video_feat: usize,
    /// Audio tower output width d_g.
    pub audio_feat: usize,
    /// Shared embedding width d.
    pub embed: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("video_in", self.video_in),
            ("audio_in", self.audio_in),
            ("hidden", self.hidden),
            ("video_feat", self.video_feat),
            ("audio_feat", self.audio_feat),
            ("embed", self.embed),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("encoder dim {name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Layer widths of the video pipeline: tower then head.
    pub fn video_widths(&self) -> [usize; 5] {
        [self.video_in, self.hidden, self.video_feat, self.embed, self.embed]
    }

    pub fn audio_widths(&self) -> [usize; 5] {
        [self.audio_in, self.hidden, self.audio_feat, self.embed, self.embed]
    }
}

/// One affine layer; `weight` maps inputs (rows) to outputs (cols).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn zeros_like(&self) -> Affine {
        Affine {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// An affine stack with rectifiers between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    pub fn zeros_like(&self) -> Mlp {
        Mlp { layers: self.layers.iter().map(Affine::zeros_like).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|x| x.is_finite()) && l.bias.iter().all(|x| x.is_finite()))
    }
}

/// All learnable weights of both towers and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub video: Mlp,
    pub audio: Mlp,
    pub dims: EncoderDims,
    pub init_seed: u64,
}

/// Gradient holder with the exact shape of [`TowerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct TowerGrads {
    pub video: Mlp,
    pub audio: Mlp,
}

impl TowerParams {
    pub fn param_count(&self) -> usize {
        self.video.param_count() + self.audio.param_count()
    }

    pub fn zeros_grads(&self) -> TowerGrads {
        TowerGrads { video: self.video.zeros_like(), audio: self.audio.zeros_like() }
    }

    pub fn is_finite(&self) -> bool {
        self.video.is_finite() && self.audio.is_finite()
    }
}

fn init_mlp(widths: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            Affine {
                weight: Array2::from_shape_fn((fan_in, fan_out), |_| {
                    rng.gen_range(-bound..=bound)
                }),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Mlp { layers }
}

/// Initializes both pipelines: weights uniform in [-sqrt(6/fan_in),
/// sqrt(6/fan_in)], biases zero. Deterministic in the seed.
pub fn init_params(dims: EncoderDims, seed: u64) -> Result<TowerParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = init_mlp(&dims.video_widths(), &mut rng);
    let audio = init_mlp(&dims.audio_widths(), &mut rng);
    Ok(TowerParams { video, audio, dims, init_seed: seed })
}

/// Per-modality activations retained for the backward pass.
#[derive(Debug, Clone)]
struct MlpCache {
    /// Input to each layer (post-rectifier activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    preacts: Vec<Array2<f64>>,
}

/// Embeddings for one minibatch plus the cache needed to backpropagate.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub z_video: Array2<f64>,
    pub z_audio: Array2<f64>,
    cache: Option<(MlpCache, MlpCache)>,
}

impl EmbeddingBatch {
    pub fn batch_size(&self) -> usize {
        self.z_video.nrows()
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn mlp_forward(mlp: &Mlp, input: &Array2<f64>, keep_cache: bool) -> (Array2<f64>, Option<MlpCache>) {
    let last = mlp.layers.len() - 1;
    let mut cache = keep_cache.then(|| MlpCache {
        inputs: Vec::with_capacity(mlp.layers.len()),
        preacts: Vec::with_capacity(mlp.layers.len()),
    });
    let mut activation = input.clone();
    for (l, layer) in mlp.layers.iter().enumerate() {
        let preact = activation.dot(&layer.weight) + &layer.bias;
        if let Some(c) = cache.as_mut() {
            c.inputs.push(activation);
            c.preacts.push(preact.clone());
        }
        activation = if l < last { relu(&preact) } else { preact };
    }
    (activation, cache)
}

fn check_input(name: &str, batch: &Array2<f64>, width: usize) -> Result<()> {
    if batch.ncols() != width {
        return Err(Error::Config(format!(
            "{name} batch width {} does not match encoder input width {width}",
            batch.ncols()
        )));
    }
    if batch.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{name} batch contains non-finite values")));
    }
    Ok(())
}

/// Runs both pipelines, caching activations for [`backward`].
pub fn forward(
    params: &TowerParams,
    video_batch: &Array2<f64>,
    audio_batch: &Array2<f64>,
) -> Result<EmbeddingBatch> {
    forward_impl(params, video_batch, audio_batch, true)
}

/// Forward without the backward cache, for read-only evaluation.
pub fn forward_inference(
    params: &TowerParams,
    video_batch: &Array2<f64>,
    audio_batch: &Array2<f64>,
) -> Result<EmbeddingBatch> {
    forward_impl(params, video_batch, audio_batch, false)
}

fn forward_impl(
    params: &TowerParams,
    video_batch: &Array2<f64>,
    audio_batch: &Array2<f64>,
    keep_cache: bool,
) -> Result<EmbeddingBatch> {
    check_input("video", video_batch, params.dims.video_in)?;
    check_input("audio", audio_batch, params.dims.audio_in)?;
    if video_batch.nrows() != audio_batch.nrows() {
        return Err(Error::Config(format!(
            "modality batch sizes differ: {} vs {}",
            video_batch.nrows(),
            audio_batch.nrows()
        )));
    }
    let (z_video, video_cache) = mlp_forward(&params.video, video_batch, keep_cache);
    let (z_audio, audio_cache) = mlp_forward(&params.audio, audio_batch, keep_cache);
    if z_video.iter().chain(z_audio.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("forward produced non-finite embeddings".into()));
    }
    Ok(EmbeddingBatch {
        z_video,
        z_audio,
        cache: video_cache.zip(audio_cache),
    })
}

fn mlp_backward(mlp: &Mlp, cache: &MlpCache, grad_output: &Array2<f64>) -> Mlp {
    let last = mlp.layers.len() - 1;
    let mut grads: Vec<Affine> = mlp.layers.iter().map(Affine::zeros_like).collect();
    let mut grad = grad_output.clone();
    for l in (0..=last).rev() {
        // grad currently holds dL/d(post-activation of layer l); push it
        // through the rectifier for all but the final layer.
        let delta = if l < last {
            let mut d = grad;
            Zip::from(&mut d).and(&cache.preacts[l]).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            d
        } else {
            grad
        };
        grads[l].weight = cache.inputs[l].t().dot(&delta);
        grads[l].bias = delta.sum_axis(Axis(0));
        grad = delta.dot(&mlp.layers[l].weight.t());
    }
    Mlp { layers: grads }
}

/// Exact gradients of every parameter given dLoss/dz for both modalities.
/// Linear in the incoming gradients.
pub fn backward(
    embeddings: &EmbeddingBatch,
    grad_z_video: &Array2<f64>,
    grad_z_audio: &Array2<f64>,
    params: &TowerParams,
) -> Result<TowerGrads> {
    let (video_cache, audio_cache) = embeddings
        .cache
        .as_ref()
        .ok_or_else(|| Error::Usage("backward needs a cached forward pass".into()))?;
    if grad_z_video.raw_dim() != embeddings.z_video.raw_dim()
        || grad_z_audio.raw_dim() != embeddings.z_audio.raw_dim()
    {
        return Err(Error::Usage("gradient shapes do not match embedding shapes".into()));
    }
    Ok(TowerGrads {
        video: mlp_backward(&params.video, video_cache, grad_z_video),
        audio: mlp_backward(&params.audio, audio_cache, grad_z_audio),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"XMCKPT01";

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> Result<()> {
    w.write_u64::<LittleEndian>(mlp.layers.len() as u64)?;
    for layer in &mlp.layers {
        write_array2(w, &layer.weight)?;
        write_array1(w, &layer.bias)?;
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        layers.push(Affine { weight: read_array2(r)?, bias: read_array1(r)? });
    }
    Ok(Mlp { layers })
}

impl TowerParams {
    /// Checkpoint serialization; embeds dims and the init seed and
    /// round-trips bit-exactly.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            self.dims.video_in as u64,
            self.dims.audio_in as u64,
            self.dims.hidden as u64,
            self.dims.video_feat as u64,
            self.dims.audio_feat as u64,
            self.dims.embed as u64,
            self.init_seed,
        ] {
            w.write_u64::<LittleEndian>(v)?;
        }
        write_mlp(w, &self.video)?;
        write_mlp(w, &self.audio)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<TowerParams> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut ints = [0u64; 7];
        for v in ints.iter_mut() {
            *v = r.read_u64::<LittleEndian>()?;
        }
        let dims = EncoderDims {
            video_in: ints[0] as usize,
            audio_in: ints[1] as usize,
            hidden: ints[2] as usize,
            video_feat: ints[3] as usize,
            audio_feat: ints[4] as usize,
            embed: ints[5] as usize,
        };
        Ok(TowerParams {
            dims,
            init_seed: ints[6],
            video: read_mlp(r)?,
            audio: read_mlp(r)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<TowerParams> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}
