//! The network: dilated-conv language encoder with statistics pooling, the
//! kernel-1 convolution projection, the language / speaker classifier pair
//! (the speaker head is consumed through gradient reversal when adversarial
//! training is on), the per-frame phoneme head, and the language-ID lookup
//! baseline.
//!
//! Parameters are partitioned into four freeze groups. Stage 1 trains
//! everything except the encoder; stage 2 trains the phoneme head only. The
//! freeze boundary is structural: the optimizer is handed exactly the
//! trainable groups, nothing else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::CorpusConfig;
use crate::tensor::{Tensor, TensorError};

pub const CKPT_MAGIC: &[u8; 4] = b"LDCK";
pub const CKPT_VERSION: u32 = 1;

/// Receptive field of the three dilated conv blocks (k=3, dilations 1,2,3).
pub const MIN_FRAMES: usize = 13;
pub const Z_DIM: usize = 64;
pub const H_DIM: usize = 32;
const CONV_CHANNELS: usize = 32;
const PHONEME_HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unseen language has no ID: {0}")]
    UnseenLanguage(usize),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Projection,
    Classifiers,
    Downstream,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Encoder,
        Group::Projection,
        Group::Classifiers,
        Group::Downstream,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Encoder => "enc",
            Group::Projection => "proj",
            Group::Classifiers => "cls",
            Group::Downstream => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub n_seen_languages: usize,
    pub n_speakers: usize,
    pub n_global_phonemes: usize,
}

impl ModelDims {
    pub fn from_corpus(c: &CorpusConfig) -> ModelDims {
        ModelDims {
            feat_dim: c.feat_dim,
            n_seen_languages: c.n_seen_languages,
            n_speakers: c.n_speakers,
            n_global_phonemes: c.n_global_phonemes(),
        }
    }
}

struct Conv {
    w: Tensor,
    b: Tensor,
    dilation: usize,
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    /// `x` is `[N, in]`; returns `[N, out]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.add_row(&self.b)?)
    }
}

pub struct ModelGraph {
    pub dims: ModelDims,
    pub sat_enabled: bool,
    pub projection_enabled: bool,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    enc_lin: Linear,
    proj: Conv,
    lang_head: Linear,
    spk_head: Linear,
    ph_fc1: Linear,
    ph_fc2: Linear,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(shape, data).expect("finite init")
}

impl ModelGraph {
    pub fn new(dims: ModelDims, sat_enabled: bool, projection_enabled: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D4F44454C);
        let c = CONV_CHANNELS;
        let d = dims.feat_dim;
        let conv = |rng: &mut ChaCha8Rng, cin: usize, dil: usize| Conv {
            w: xavier(rng, &[3, cin, c], 3 * cin, c),
            b: Tensor::zeros(&[c]),
            dilation: dil,
        };
        let linear = |rng: &mut ChaCha8Rng, i: usize, o: usize| Linear {
            w: xavier(rng, &[i, o], i, o),
            b: Tensor::zeros(&[o]),
        };
        let conv1 = conv(&mut rng, d, 1);
        let conv2 = conv(&mut rng, c, 2);
        let conv3 = conv(&mut rng, c, 3);
        let enc_lin = linear(&mut rng, 2 * c, Z_DIM);
        // positive bias start: units that die under the ReLU stop receiving
        // gradients, and information carried by the dead-unit pattern is
        // invisible to the adversarial pressure on the projection
        let proj = Conv {
            w: xavier(&mut rng, &[1, Z_DIM, H_DIM], Z_DIM, H_DIM),
            b: Tensor::from_vec(&[H_DIM], vec![1.0; H_DIM]).expect("finite init"),
            dilation: 1,
        };
        let lang_head = linear(&mut rng, H_DIM, dims.n_seen_languages);
        let spk_head = linear(&mut rng, H_DIM, dims.n_speakers);
        let ph_fc1 = linear(&mut rng, d + H_DIM, PHONEME_HIDDEN);
        let ph_fc2 = linear(&mut rng, PHONEME_HIDDEN, dims.n_global_phonemes);
        ModelGraph {
            dims,
            sat_enabled,
            projection_enabled,
            conv1,
            conv2,
            conv3,
            enc_lin,
            proj,
            lang_head,
            spk_head,
            ph_fc1,
            ph_fc2,
        }
    }

    /// Named parameters of one freeze group, in a stable order.
    pub fn params_in(&self, group: Group) -> Vec<(String, Tensor)> {
        let named = |items: Vec<(&str, &Tensor)>| {
            items
                .into_iter()
                .map(|(n, t)| (format!("{}/{}", group.name(), n), t.clone()))
                .collect::<Vec<_>>()
        };
        match group {
            Group::Encoder => named(vec![
                ("conv1.w", &self.conv1.w),
                ("conv1.b", &self.conv1.b),
                ("conv2.w", &self.conv2.w),
                ("conv2.b", &self.conv2.b),
                ("conv3.w", &self.conv3.w),
                ("conv3.b", &self.conv3.b),
                ("lin.w", &self.enc_lin.w),
                ("lin.b", &self.enc_lin.b),
            ]),
            Group::Projection => named(vec![("conv.w", &self.proj.w), ("conv.b", &self.proj.b)]),
            Group::Classifiers => named(vec![
                ("lang.w", &self.lang_head.w),
                ("lang.b", &self.lang_head.b),
                ("spk.w", &self.spk_head.w),
                ("spk.b", &self.spk_head.b),
            ]),
            Group::Downstream => named(vec![
                ("fc1.w", &self.ph_fc1.w),
                ("fc1.b", &self.ph_fc1.b),
                ("fc2.w", &self.ph_fc2.w),
                ("fc2.b", &self.ph_fc2.b),
            ]),
        }
    }

    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        Group::ALL
            .iter()
            .flat_map(|g| self.params_in(*g))
            .collect()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.all_params() {
            p.zero_grad();
        }
    }

    /// Frames `[T, feat_dim]` to the pooled intermediate representation
    /// `z_lang` (a 64-vector), for any `T >= 13`.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let t = frames.shape()[0];
        if t < MIN_FRAMES {
            return Err(ModelError::Tensor(TensorError::SequenceTooShort {
                op: "encode",
                len: t,
                required: MIN_FRAMES,
            }));
        }
        let x = frames
            .conv1d(&self.conv1.w, &self.conv1.b, self.conv1.dilation)?
            .relu()?;
        let x = x
            .conv1d(&self.conv2.w, &self.conv2.b, self.conv2.dilation)?
            .relu()?;
        let x = x
            .conv1d(&self.conv3.w, &self.conv3.b, self.conv3.dilation)?
            .relu()?;
        let pooled = x.statistics_pooling()?;
        let z = self
            .enc_lin
            .forward(&pooled.reshape(&[1, 2 * CONV_CHANNELS])?)?;
        Ok(z.reshape(&[Z_DIM])?)
    }

    /// z_lang to the language embedding h_lang. With the projection disabled
    /// (the ablation condition) this is the untrained identity onto the first
    /// 32 dimensions of z_lang.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape() != [Z_DIM] {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "project",
                lhs: z.shape().to_vec(),
                rhs: vec![Z_DIM],
            }));
        }
        if !self.projection_enabled {
            return Ok(z.slice(0, H_DIM)?);
        }
        let h = z
            .reshape(&[1, Z_DIM])?
            .conv1d(&self.proj.w, &self.proj.b, 1)?
            .relu()?;
        Ok(h.reshape(&[H_DIM])?)
    }

    /// Language and speaker logits from a batch of embeddings `[N, 32]`.
    /// The speaker path goes through gradient reversal when SAT is enabled;
    /// forward values are identical either way.
    pub fn forward_heads(
        &self,
        h_batch: &Tensor,
        sat_enabled: bool,
        lambda: f64,
    ) -> Result<(Tensor, Tensor)> {
        let lang_logits = self.lang_head.forward(h_batch)?;
        let spk_input = if sat_enabled {
            h_batch.grad_reverse(lambda)?
        } else {
            h_batch.clone()
        };
        let spk_logits = self.spk_head.forward(&spk_input)?;
        Ok((lang_logits, spk_logits))
    }

    /// Per-frame phoneme logits over the global phoneme index space. The head
    /// sees the raw frames plus the broadcast language embedding; it never
    /// touches z_lang directly.
    pub fn phoneme_logits(&self, frames: &Tensor, h: &Tensor) -> Result<Tensor> {
        let t = frames.shape()[0];
        let x = frames.concat_cols(&h.tile_rows(t)?)?;
        let a = self.ph_fc1.forward(&x)?.relu()?;
        Ok(self.ph_fc2.forward(&a)?)
    }

    // ---- checkpointing ----

    pub fn save_checkpoint(&self, path: &Path, config_hash: &[u8; 32], groups: &[Group]) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(config_hash);
        let params: Vec<(String, Tensor)> =
            groups.iter().flat_map(|g| self.params_in(*g)).collect();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in &params {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data().iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(&buf).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads parameter records into this model by name. Returns the stored
    /// config hash and the loaded names; unknown names and shape mismatches
    /// are errors.
    pub fn load_checkpoint(&self, path: &Path) -> Result<([u8; 32], Vec<String>)> {
        let err = |msg: String| ModelError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        if bytes.len() < 44 || &bytes[..4] != CKPT_MAGIC {
            return Err(err("missing LDCK magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(&bytes[8..40]);
        let n_records = u32::from_le_bytes(bytes[40..44].try_into().unwrap()) as usize;
        let by_name: std::collections::HashMap<String, Tensor> =
            self.all_params().into_iter().collect();
        let mut off = 44;
        let mut loaded = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let name_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            let name = String::from_utf8(bytes[off..off + name_len].to_vec())
                .map_err(|e| err(e.to_string()))?;
            off += name_len;
            let ndim = bytes[off] as usize;
            off += 1;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
                off += 4;
            }
            let n: usize = shape.iter().product();
            if off + n * 8 > bytes.len() {
                return Err(err(format!("truncated payload for {name}")));
            }
            let target = by_name
                .get(&name)
                .ok_or_else(|| err(format!("unknown parameter {name}")))?;
            if target.shape() != shape.as_slice() {
                return Err(err(format!(
                    "{name}: shape {:?} does not match model shape {:?}",
                    shape,
                    target.shape()
                )));
            }
            let mut data = target.data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v = f64::from_le_bytes(bytes[off + i * 8..off + i * 8 + 8].try_into().unwrap());
            }
            off += n * 8;
            loaded.push(name);
        }
        Ok((config_hash, loaded))
    }

    /// SHA-256 over a group's parameter bytes; the freeze contracts are
    /// asserted by comparing these before and after training.
    pub fn group_hash(&self, group: Group) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.params_in(group) {
            h.update(name.as_bytes());
            for v in t.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// The language-ID lookup baseline: a fixed per-language expression that
/// structurally cannot represent a language absent from its table.
pub struct LanguageIDBaseline {
    table: Vec<Vec<f64>>,
}

impl LanguageIDBaseline {
    pub fn new(table: Vec<Vec<f64>>) -> Self {
        LanguageIDBaseline { table }
    }

    /// Builds the table as the mean language embedding per seen language.
    pub fn from_embeddings(embeddings: &[Vec<f64>], languages: &[usize], n_seen: usize) -> Self {
        let dim = embeddings.first().map_or(H_DIM, Vec::len);
        let mut table = vec![vec![0.0; dim]; n_seen];
        let mut counts = vec![0usize; n_seen];
        for (e, &l) in embeddings.iter().zip(languages) {
            if l < n_seen {
                for (acc, v) in table[l].iter_mut().zip(e) {
                    *acc += v;
                }
                counts[l] += 1;
            }
        }
        for (row, n) in table.iter_mut().zip(&counts) {
            if *n > 0 {
                for v in row.iter_mut() {
                    *v /= *n as f64;
                }
            }
        }
        LanguageIDBaseline { table }
    }

    pub fn embed(&self, language_id: usize) -> Result<&[f64]> {
        self.table
            .get(language_id)
            .map(Vec::as_slice)
            .ok_or(ModelError::UnseenLanguage(language_id))
    }
}
