//! Deterministic synthetic multilingual corpus with known ground truth.
//!
//! Each language owns a small pool of formant bins; phonemes are sparse
//! log-energy templates built from 2-3 bins of that pool and follow a Markov
//! chain with geometric dwell times. A shared roster of speakers voices every
//! language: each speaker is a language-independent transform (circular pitch
//! shift, spectral tilt, gain) applied on top of the language templates, so
//! language and speaker are independent, exactly controllable factors.
//!
//! Two deliberate ambiguities make single frames insufficient for phoneme
//! decoding, so utterance-level context carries real value: seen languages
//! come in pairs with near-duplicate templates (resolvable only via language
//! identity), and the last, unseen language has flat templates on a reserved
//! central bin window, where the roster's pitch shifts alias different
//! phonemes onto the same bins (resolvable only via the utterance's shift
//! context).
//! See [`make_language_specs`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::par;

pub const FILE_MAGIC: &[u8; 4] = b"SYNU";
pub const FILE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt utterance file, expected {expected} bytes, got {actual}")]
    Corrupt {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: bad header: {msg}")]
    BadHeader { path: PathBuf, msg: String },
    #[error("cannot build {n_phonemes} separable phoneme templates per language for {n_languages} languages in {feat_dim} bins")]
    Infeasible {
        n_languages: usize,
        n_phonemes: usize,
        feat_dim: usize,
    },
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error("utterance index {index} out of range ({len} entries)")]
    IndexOutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Generative description of one language.
#[derive(Debug, Clone)]
pub struct LanguageSpec {
    pub language_id: usize,
    /// `P` log-energy templates over `feat_dim` bins.
    pub phoneme_templates: Vec<Vec<f64>>,
    /// Row-stochastic `P x P` transition matrix.
    pub transition_matrix: Vec<Vec<f64>>,
    pub mean_phoneme_duration: f64,
}

/// Language-independent speaker transform.
#[derive(Debug, Clone)]
pub struct SpeakerSpec {
    pub speaker_id: usize,
    /// Circular shift of the template, in bins.
    pub pitch_offset: i32,
    /// Additive per-bin slope coefficient.
    pub spectral_tilt: f64,
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    /// `T x feat_dim` log-filterbank-like frames, row-major.
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub feat_dim: usize,
    pub y_lang: usize,
    pub y_spk: usize,
    /// Per-frame indices into the language's phoneme inventory.
    pub phonemes: Vec<u16>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub file: String,
    pub language: usize,
    pub speaker: usize,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageCounts {
    pub language: usize,
    pub train: usize,
    pub eval: usize,
    pub speakers: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub frames: usize,
    pub feat_dim: usize,
    pub n_phonemes: usize,
    pub n_seen_languages: usize,
    pub n_languages: usize,
    pub n_speakers: usize,
    pub counts: Vec<LanguageCounts>,
    pub entries: Vec<UtteranceEntry>,
}

impl CorpusManifest {
    pub fn n_global_phonemes(&self) -> usize {
        self.n_languages * self.n_phonemes
    }

    /// Global phoneme index: languages do not share phoneme identities.
    pub fn global_phoneme(&self, language: usize, phoneme: u16) -> usize {
        language * self.n_phonemes + phoneme as usize
    }

    pub fn indices(&self, split: Split, seen_only: bool) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                e.split == split && (!seen_only || e.language < self.n_seen_languages)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Stage-2 fine-tuning pool: train-split utterances of the unseen
    /// languages, in manifest order.
    pub fn unseen_train_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Train && e.language >= self.n_seen_languages)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn unseen_eval_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Eval && e.language >= self.n_seen_languages)
            .map(|(i, _)| i)
            .collect()
    }
}

// splitmix64, used to derive independent stream seeds
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

pub fn mix2(a: u64, b: u64) -> u64 {
    mix(mix(a) ^ b)
}

fn choose(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut r = 1usize;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Energy of every active bin in the unseen language's flat templates.
const FLAT_ENERGY: f64 = 4.0;
/// Per-bin energy nudge distinguishing a near-duplicate template from its
/// partner-language original. Comparable to the frame noise, so resolving
/// these phonemes requires knowing the language.
const DUP_DELTA: f64 = 0.06;
/// Rotation-invariant identity of a bin combination: the circular gaps
/// between consecutive active bins, canonicalized over rotations. Two
/// combinations render onto the same bins under some relative pitch shift
/// exactly when their signatures are equal, so giving every seen-language
/// combination a globally unique signature makes speaker identity useless for
/// decoding seen frames: no seen phoneme can be mistaken for another by
/// mistaking the shift.
fn shift_signature(combo: &[usize], feat_dim: usize) -> Vec<usize> {
    let mut bins = combo.to_vec();
    bins.sort_unstable();
    let k = bins.len();
    let gaps: Vec<usize> = (0..k)
        .map(|i| {
            let next = bins[(i + 1) % k] + if i + 1 == k { feat_dim } else { 0 };
            next - bins[i]
        })
        .collect();
    let mut best = gaps.clone();
    for r in 1..k {
        let rot: Vec<usize> = (0..k).map(|i| gaps[(i + r) % k]).collect();
        if rot < best {
            best = rot;
        }
    }
    best
}

/// Builds the per-language generative specs. Deterministic given `seed`.
///
/// Layout:
/// - The last language (the unseen one) draws its bins from a reserved
///   central window no other language's templates touch, and its templates
///   are flat: every
///   active bin carries the same energy. Under the roster's circular pitch
///   shifts, different (phoneme, shift) pairs then render to identical bin
///   patterns, so decoding it needs utterance-level shift context, not just
///   the frame.
/// - Seen languages come in pairs: the leading templates of the odd partner
///   are near-duplicates of the even partner's (same bins, energies nudged by
///   `DUP_DELTA`), so telling those phonemes apart requires knowing the
///   language. The remaining templates use fresh bin combinations, which
///   keeps each language identifiable from pooled frames.
/// - Every seen combination gets a globally unique [`shift_signature`], so
///   the only frame-level ambiguities in the corpus are the two deliberate
///   ones above.
pub fn make_language_specs(
    n_languages: usize,
    n_phonemes: usize,
    feat_dim: usize,
    mean_phoneme_duration: f64,
    seed: u64,
) -> Result<Vec<LanguageSpec>> {
    assert!(n_languages >= 2, "need at least 2 languages");
    assert!(n_phonemes >= 3, "need at least 3 phonemes");
    let infeasible = || DataError::Infeasible {
        n_languages,
        n_phonemes,
        feat_dim,
    };
    // smallest pools with enough 2- and 3-bin combinations; seen pools carry
    // headroom because combinations are also rejected on signature clashes
    let combos_in = |p: usize| choose(p, 2) + choose(p, 3);
    let mut unseen_pool_size = 4;
    while combos_in(unseen_pool_size) < n_phonemes {
        unseen_pool_size += 1;
        if unseen_pool_size > feat_dim {
            return Err(infeasible());
        }
    }
    let mut seen_pool_size = unseen_pool_size;
    while combos_in(seen_pool_size) < 4 * n_phonemes {
        seen_pool_size += 1;
    }
    if feat_dim < unseen_pool_size + seen_pool_size {
        return Err(infeasible());
    }
    // the unseen language's reserved window sits in the middle of the bin
    // axis: no seen template touches it, but the roster's circular pitch
    // shifts move seen energy into it during rendering, so the pretrained
    // encoder's input weights for those bins are trained rather than left at
    // initialization (which would scatter unseen-language embeddings along
    // arbitrary random directions)
    let unseen_start = (feat_dim - unseen_pool_size) / 2;
    let seen_bins: Vec<usize> = (0..feat_dim)
        .filter(|&b| b < unseen_start || b >= unseen_start + unseen_pool_size)
        .collect();
    let n_dup = (3 * n_phonemes) / 4;
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, 0x4C414E47));

    // the unseen language first: its signatures are reserved so that no seen
    // phoneme can shift-collide with it either
    let unseen_pool: Vec<usize> = (unseen_start..unseen_start + unseen_pool_size).collect();
    let mut unseen_combos: Vec<Vec<usize>> = Vec::with_capacity(n_phonemes);
    while unseen_combos.len() < n_phonemes {
        let n_formants = rng.gen_range(2..=3usize.min(unseen_pool.len()));
        let combo = sample_from(&mut rng, &unseen_pool, n_formants);
        if !unseen_combos.contains(&combo) {
            unseen_combos.push(combo);
        }
    }
    let mut used_signatures: Vec<Vec<usize>> = unseen_combos
        .iter()
        .map(|c| shift_signature(c, feat_dim))
        .collect();

    let mut specs: Vec<LanguageSpec> = Vec::with_capacity(n_languages);
    let mut all_combos: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n_languages);
    for lang in 0..n_languages - 1 {
        // odd seen languages copy their even partner's leading bin
        // combinations; fresh combinations come from the language's own pool
        let paired = lang % 2 == 1;
        'retry: for attempt in 0.. {
            if attempt >= 64 {
                return Err(infeasible());
            }
            let pool = sample_from(&mut rng, &seen_bins, seen_pool_size);
            let mut templates = Vec::with_capacity(n_phonemes);
            let mut combos: Vec<Vec<usize>> = Vec::new();
            let mut new_signatures: Vec<Vec<usize>> = Vec::new();
            if paired {
                // near-duplicates of the partner's leading templates: same
                // bins, energies nudged by an alternating +-DUP_DELTA pattern
                for i in 0..n_dup {
                    let combo = all_combos[lang - 1][i].clone();
                    let mut tpl = specs[lang - 1].phoneme_templates[i].clone();
                    for (k, &b) in combo.iter().enumerate() {
                        tpl[b] += if k % 2 == 0 { DUP_DELTA } else { -DUP_DELTA };
                    }
                    combos.push(combo);
                    templates.push(tpl);
                }
            }
            while templates.len() < n_phonemes {
                let mut combo;
                let mut sig;
                let mut tries = 0;
                loop {
                    // 2-bin signatures are scarce on the circular bin ring,
                    // so fall back to 3-bin combinations under pressure
                    let n_formants = if tries < 60 {
                        rng.gen_range(2..=3usize.min(pool.len()))
                    } else {
                        3usize.min(pool.len())
                    };
                    combo = sample_from(&mut rng, &pool, n_formants);
                    sig = shift_signature(&combo, feat_dim);
                    if !combos.contains(&combo)
                        && !used_signatures.contains(&sig)
                        && !new_signatures.contains(&sig)
                    {
                        break;
                    }
                    tries += 1;
                    if tries > 400 {
                        continue 'retry;
                    }
                }
                let mut tpl = vec![0.0; feat_dim];
                for &b in &combo {
                    tpl[b] = rng.gen_range(3.0..5.0);
                }
                combos.push(combo);
                new_signatures.push(sig);
                templates.push(tpl);
            }
            // even partners keep extra headroom so the duplicates derived
            // from them still clear the within-language separability floor
            let sep_floor = if paired { 1.0 } else { 1.5 };
            if min_pairwise_l2(&templates) < sep_floor {
                continue 'retry;
            }
            if specs
                .iter()
                .any(|s| min_cross_l2(&s.phoneme_templates, &templates) == 0.0)
            {
                continue 'retry;
            }
            let transition_matrix = random_stochastic(&mut rng, n_phonemes);
            specs.push(LanguageSpec {
                language_id: lang,
                phoneme_templates: templates,
                transition_matrix,
                mean_phoneme_duration,
            });
            all_combos.push(combos);
            used_signatures.append(&mut new_signatures);
            break;
        }
    }

    let templates: Vec<Vec<f64>> = unseen_combos
        .iter()
        .map(|combo| {
            let mut tpl = vec![0.0; feat_dim];
            for &b in combo {
                tpl[b] = FLAT_ENERGY;
            }
            tpl
        })
        .collect();
    debug_assert!(min_pairwise_l2(&templates) >= 1.0);
    let transition_matrix = random_stochastic(&mut rng, n_phonemes);
    // the unseen language speaks in shorter segments: utterance-level
    // statistics then average over roughly twice as many segments, which the
    // small fine-tuning pool needs for stable embeddings
    specs.push(LanguageSpec {
        language_id: n_languages - 1,
        phoneme_templates: templates,
        transition_matrix,
        mean_phoneme_duration: (mean_phoneme_duration / 2.0).max(1.0),
    });
    Ok(specs)
}

fn sample_from(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let b = pool[rng.gen_range(0..pool.len())];
        if !picked.contains(&b) {
            picked.push(b);
        }
    }
    picked.sort_unstable();
    picked
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| -rng.gen_range(1e-9..1.0f64).ln()).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn min_pairwise_l2(templates: &[Vec<f64>]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            min = min.min(l2(&templates[i], &templates[j]));
        }
    }
    min
}

fn min_cross_l2(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut min = f64::INFINITY;
    for x in a {
        for y in b {
            min = min.min(l2(x, y));
        }
    }
    min
}

/// Number of distinct circular pitch shifts in the roster; speaker `i` gets
/// shift `(i % PITCH_SHIFT_COUNT) - PITCH_SHIFT_COUNT/2`, so the first
/// `PITCH_SHIFT_COUNT` speakers cover every shift.
pub const PITCH_SHIFT_COUNT: usize = 5;

/// Builds the shared speaker roster. The transforms are language-independent
/// and every language is voiced by the same speakers. The roster splits into
/// two voice groups with opposite spectral tilt and gain signs (a gender
/// analog): the leading `PITCH_SHIFT_COUNT` speakers — the ones a
/// low-resource fine-tuning pool is drawn from — form one group, the rest
/// the other, so generalizing from the pool to the full roster crosses a
/// voice-group boundary the seen-language corpus covers but the low-resource
/// pool does not.
pub fn make_speaker_specs(n_speakers: usize, seed: u64) -> Vec<SpeakerSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, 0x53504B52));
    (0..n_speakers)
        .map(|i| {
            let voice = if i < PITCH_SHIFT_COUNT.min(n_speakers) { 1.0 } else { -1.0 };
            SpeakerSpec {
                speaker_id: i,
                pitch_offset: (i % PITCH_SHIFT_COUNT) as i32 - (PITCH_SHIFT_COUNT as i32 / 2),
                spectral_tilt: voice * rng.gen_range(0.08..0.2),
                gain: voice * rng.gen_range(0.15..0.4),
            }
        })
        .collect()
}

/// Renders one utterance. The phoneme path depends only on (language, seed),
/// so two speakers rendered from the same seed share label sequences while
/// their frame matrices differ.
pub fn render_utterance(
    lang: &LanguageSpec,
    spk: &SpeakerSpec,
    length: usize,
    noise_sigma: f64,
    seed: u64,
) -> SyntheticUtterance {
    assert!(length >= 20, "utterance length must be >= 20 frames");
    let feat_dim = lang.phoneme_templates[0].len();
    let n_phonemes = lang.phoneme_templates.len();
    let mut path_rng = ChaCha8Rng::seed_from_u64(mix2(seed, lang.language_id as u64));
    let mut phonemes = Vec::with_capacity(length);
    let p_leave = 1.0 / lang.mean_phoneme_duration.max(1.0);
    let mut state = path_rng.gen_range(0..n_phonemes);
    while phonemes.len() < length {
        let u: f64 = path_rng.gen_range(0.0..1.0);
        let dwell = if n_phonemes == 1 {
            length
        } else {
            1 + ((1.0 - u).ln() / (1.0 - p_leave).ln()).floor() as usize
        };
        for _ in 0..dwell.min(length - phonemes.len()) {
            phonemes.push(state as u16);
        }
        // next state from the transition row
        let row = &lang.transition_matrix[state];
        let r: f64 = path_rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut next = n_phonemes - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if r < acc {
                next = j;
                break;
            }
        }
        state = next;
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix2(
        mix2(seed, lang.language_id as u64),
        0x4E4F4953 ^ spk.speaker_id as u64,
    ));
    let mut frames = vec![0.0; length * feat_dim];
    let d = feat_dim as i64;
    for (t, &ph) in phonemes.iter().enumerate() {
        let tpl = &lang.phoneme_templates[ph as usize];
        for b in 0..feat_dim {
            let src = (b as i64 - spk.pitch_offset as i64).rem_euclid(d) as usize;
            let tilt = spk.spectral_tilt * (b as f64 / (feat_dim - 1) as f64 - 0.5);
            let noise: f64 = if noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                noise_sigma * z
            } else {
                0.0
            };
            frames[t * feat_dim + b] = tpl[src] + tilt + spk.gain + noise;
        }
    }
    SyntheticUtterance {
        frames,
        n_frames: length,
        feat_dim,
        y_lang: lang.language_id,
        y_spk: spk.speaker_id,
        phonemes,
        seed,
    }
}

// ---- on-disk format ----

fn utterance_byte_len(t: usize, d: usize) -> usize {
    4 + 5 * 4 + t * d * 8 + t * 2
}

pub fn write_utterance(path: &Path, utt: &SyntheticUtterance) -> Result<()> {
    let mut buf = Vec::with_capacity(utterance_byte_len(utt.n_frames, utt.feat_dim));
    buf.extend_from_slice(FILE_MAGIC);
    buf.extend_from_slice(&FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(utt.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(utt.feat_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(utt.y_lang as u32).to_le_bytes());
    buf.extend_from_slice(&(utt.y_spk as u32).to_le_bytes());
    for v in &utt.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in &utt.phonemes {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_utterance(path: &Path) -> Result<SyntheticUtterance> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if bytes.len() < 24 || &bytes[..4] != FILE_MAGIC {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            msg: "missing SYNU magic".into(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FILE_VERSION {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            msg: format!("unsupported version {version}"),
        });
    }
    let t = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let y_lang = u32_at(16) as usize;
    let y_spk = u32_at(20) as usize;
    let expected = utterance_byte_len(t, d);
    if bytes.len() != expected {
        return Err(DataError::Corrupt {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut frames = Vec::with_capacity(t * d);
    let mut off = 24;
    for _ in 0..t * d {
        frames.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        off += 8;
    }
    let mut phonemes = Vec::with_capacity(t);
    for _ in 0..t {
        phonemes.push(u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()));
        off += 2;
    }
    Ok(SyntheticUtterance {
        frames,
        n_frames: t,
        feat_dim: d,
        y_lang,
        y_spk,
        phonemes,
        seed: 0, // not stored in the binary format; lives in the manifest
    })
}

/// Generates and persists the full corpus under `dir` (`manifest.json` plus
/// one `.synu` file per utterance). Rendering runs in parallel; writing is
/// single-writer in manifest order.
pub fn build_corpus(cfg: &TrainConfig, dir: &Path) -> Result<CorpusManifest> {
    let c = &cfg.corpus;
    let specs = make_language_specs(
        c.n_languages(),
        c.n_phonemes,
        c.feat_dim,
        c.mean_phoneme_duration,
        cfg.seed,
    )?;
    let speakers = make_speaker_specs(c.n_speakers, cfg.seed);
    std::fs::create_dir_all(dir.join("utt")).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;

    let mut entries = Vec::new();
    let mut counts: Vec<LanguageCounts> = (0..c.n_languages())
        .map(|l| LanguageCounts {
            language: l,
            train: 0,
            eval: 0,
            speakers: Vec::new(), // filled with the language's train speakers
        })
        .collect();
    // speakers whose pitch shift at least one other roster member duplicates
    let redundant: Vec<usize> = (0..c.n_speakers)
        .filter(|&i| {
            (0..c.n_speakers).any(|j| j != i && j % PITCH_SHIFT_COUNT == i % PITCH_SHIFT_COUNT)
        })
        .collect();
    for lang in 0..c.n_languages() {
        let seen = lang < c.n_seen_languages;
        // the low-resource pool comes from the leading speakers only (the
        // smallest prefix covering every pitch shift), while evaluation spans
        // the whole roster: a tiny fine-tuning corpus does not come with
        // full speaker coverage, and generalizing to the remaining speakers
        // is part of the transfer task
        let pool_speakers = if seen {
            c.n_speakers
        } else {
            PITCH_SHIFT_COUNT.min(c.n_speakers)
        };
        let train_per_spk = if seen {
            c.train_per_speaker
        } else {
            c.unseen_train_pool.div_ceil(pool_speakers)
        };
        // each seen language trains on an incomplete slice of the roster (a
        // rotating selection of speakers is held out) while evaluation
        // always spans all speakers: per-language speaker coverage is never
        // complete in a real multilingual corpus, and robustness to a
        // language's unheard speakers is what speaker-adversarial training
        // buys. Only shift-redundant speakers are eligible — another train
        // speaker of the language must cover the same pitch shift, so the
        // held-out voice is a new tilt/gain/shift combination rather than a
        // bin pattern the encoder never saw (circular shifts, unlike the
        // affine tilt and gain, cannot be extrapolated).
        let held_out: Vec<usize> = if seen && !redundant.is_empty() {
            (0..c.held_out_speakers_per_language.min(redundant.len()))
                .map(|j| redundant[(lang + j) % redundant.len()])
                .collect()
        } else {
            Vec::new()
        };
        let mut unseen_left = c.unseen_train_pool;
        for spk in 0..c.n_speakers {
            let n_train = if held_out.contains(&spk) {
                0
            } else if seen {
                train_per_spk
            } else if spk < pool_speakers {
                let n = train_per_spk.min(unseen_left);
                unseen_left -= n;
                n
            } else {
                0
            };
            if n_train > 0 {
                counts[lang].speakers.push(spk);
            }
            for (split, n) in [(Split::Train, n_train), (Split::Eval, c.eval_per_speaker)] {
                for _ in 0..n {
                    let index = entries.len();
                    let seed = mix2(cfg.seed, index as u64);
                    entries.push(UtteranceEntry {
                        file: format!("utt/{index:05}.synu"),
                        language: lang,
                        speaker: spk,
                        split,
                        seed,
                    });
                    match split {
                        Split::Train => counts[lang].train += 1,
                        Split::Eval => counts[lang].eval += 1,
                    }
                }
            }
        }
    }

    let rendered = par::map_indices(entries.len(), 16, |i| {
        let e = &entries[i];
        render_utterance(
            &specs[e.language],
            &speakers[e.speaker],
            c.frames,
            c.noise_sigma,
            e.seed,
        )
    });
    for (e, utt) in entries.iter().zip(&rendered) {
        write_utterance(&dir.join(&e.file), utt)?;
    }

    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        frames: c.frames,
        feat_dim: c.feat_dim,
        n_phonemes: c.n_phonemes,
        n_seen_languages: c.n_seen_languages,
        n_languages: c.n_languages(),
        n_speakers: c.n_speakers,
        counts,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::BadManifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json).map_err(|source| DataError::Io {
        path: dir.join("manifest.json"),
        source,
    })?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DataError::BadManifest(e.to_string()))
}

pub fn load_utterance(
    dir: &Path,
    manifest: &CorpusManifest,
    index: usize,
) -> Result<SyntheticUtterance> {
    let entry = manifest
        .entries
        .get(index)
        .ok_or(DataError::IndexOutOfRange {
            index,
            len: manifest.entries.len(),
        })?;
    let mut utt = read_utterance(&dir.join(&entry.file))?;
    if utt.n_frames != manifest.frames || utt.feat_dim != manifest.feat_dim {
        return Err(DataError::BadHeader {
            path: dir.join(&entry.file),
            msg: format!(
                "shape {}x{} does not match manifest {}x{}",
                utt.n_frames, utt.feat_dim, manifest.frames, manifest.feat_dim
            ),
        });
    }
    utt.seed = entry.seed;
    Ok(utt)
}

/// SHA-256 over the manifest plus every utterance file, in manifest order.
pub fn corpus_hash(dir: &Path, manifest: &CorpusManifest) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    let manifest_bytes =
        std::fs::read(dir.join("manifest.json")).map_err(|source| DataError::Io {
            path: dir.join("manifest.json"),
            source,
        })?;
    h.update(&manifest_bytes);
    for e in &manifest.entries {
        let bytes = std::fs::read(dir.join(&e.file)).map_err(|source| DataError::Io {
            path: dir.join(&e.file),
            source,
        })?;
        h.update(&bytes);
    }
    Ok(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    #[test]
    fn language_specs_deterministic() {
        let a = make_language_specs(6, 8, 24, 8.0, 7).unwrap();
        let b = make_language_specs(6, 8, 24, 8.0, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.phoneme_templates, y.phoneme_templates);
            assert_eq!(x.transition_matrix, y.transition_matrix);
        }
    }

    #[test]
    fn language_specs_distinct_across_languages() {
        let specs = make_language_specs(6, 8, 24, 8.0, 7).unwrap();
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                assert!(
                    min_cross_l2(&specs[i].phoneme_templates, &specs[j].phoneme_templates) > 0.0
                );
            }
        }
    }

    #[test]
    fn templates_separable_within_language() {
        let specs = make_language_specs(6, 8, 24, 8.0, 7).unwrap();
        for s in &specs {
            assert!(min_pairwise_l2(&s.phoneme_templates) >= 1.0);
        }
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let specs = make_language_specs(4, 6, 24, 8.0, 3).unwrap();
        for s in &specs {
            for row in &s.transition_matrix {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn unseen_language_bins_disjoint_from_seen() {
        let specs = make_language_specs(7, 8, 24, 8.0, 7).unwrap();
        let last = specs.last().unwrap();
        let active = |tpl: &[f64]| -> Vec<usize> {
            tpl.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect()
        };
        let unseen_bins: Vec<usize> = last.phoneme_templates.iter().flat_map(|t| active(t)).collect();
        for s in &specs[..specs.len() - 1] {
            for tpl in &s.phoneme_templates {
                for b in active(tpl) {
                    assert!(!unseen_bins.contains(&b));
                }
            }
        }
    }

    #[test]
    fn infeasible_request_errors() {
        assert!(matches!(
            make_language_specs(2, 200, 6, 8.0, 1),
            Err(DataError::Infeasible { .. })
        ));
    }

    #[test]
    fn render_deterministic() {
        let specs = make_language_specs(2, 4, 24, 8.0, 1).unwrap();
        let spk = make_speaker_specs(2, 1);
        let a = render_utterance(&specs[0], &spk[0], 50, 0.05, 42);
        let b = render_utterance(&specs[0], &spk[0], 50, 0.05, 42);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.phonemes, b.phonemes);
    }

    #[test]
    fn render_single_phoneme_no_noise_is_constant() {
        let lang = LanguageSpec {
            language_id: 0,
            phoneme_templates: vec![vec![1.0; 8]],
            transition_matrix: vec![vec![1.0]],
            mean_phoneme_duration: 8.0,
        };
        let spk = SpeakerSpec {
            speaker_id: 0,
            pitch_offset: 1,
            spectral_tilt: 0.2,
            gain: 0.1,
        };
        let utt = render_utterance(&lang, &spk, 30, 0.0, 5);
        let first = &utt.frames[..8];
        for t in 1..30 {
            assert_eq!(&utt.frames[t * 8..(t + 1) * 8], first);
        }
    }

    #[test]
    fn same_seed_two_speakers_same_path_different_frames() {
        let specs = make_language_specs(2, 4, 24, 8.0, 1).unwrap();
        let spk = make_speaker_specs(4, 1);
        let a = render_utterance(&specs[0], &spk[0], 60, 0.05, 9);
        let b = render_utterance(&specs[0], &spk[1], 60, 0.05, 9);
        assert_eq!(a.phonemes, b.phonemes);
        let dist: f64 = a
            .frames
            .iter()
            .zip(&b.frames)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.corpus.n_seen_languages = 2;
        cfg.corpus.n_speakers = 2;
        cfg.corpus.train_per_speaker = 3;
        cfg.corpus.eval_per_speaker = 2;
        cfg.corpus.held_out_speakers_per_language = 0;
        cfg.corpus.unseen_train_pool = 4;
        cfg.corpus.frames = 30;
        cfg
    }

    #[test]
    fn corpus_roundtrip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let manifest = build_corpus(&cfg, dir.path()).unwrap();
        // seen: 2 langs x 2 spk x 3 train + 2 eval; unseen: 4 train + 4 eval
        assert_eq!(manifest.counts[0].train, 6);
        assert_eq!(manifest.counts[0].eval, 4);
        assert_eq!(manifest.counts[2].train, 4);
        assert_eq!(manifest.entries.len(), 6 + 4 + 6 + 4 + 4 + 4);
        for (i, e) in manifest.entries.iter().enumerate() {
            assert!(dir.path().join(&e.file).exists());
            let utt = load_utterance(dir.path(), &manifest, i).unwrap();
            assert_eq!(utt.y_lang, e.language);
            assert_eq!(utt.y_spk, e.speaker);
            // bitwise persistence roundtrip against a fresh render
            let specs =
                make_language_specs(3, cfg.corpus.n_phonemes, cfg.corpus.feat_dim, cfg.corpus.mean_phoneme_duration, cfg.seed)
                    .unwrap();
            let speakers = make_speaker_specs(2, cfg.seed);
            let fresh = render_utterance(
                &specs[e.language],
                &speakers[e.speaker],
                cfg.corpus.frames,
                cfg.corpus.noise_sigma,
                e.seed,
            );
            assert_eq!(utt.frames, fresh.frames);
            assert_eq!(utt.phonemes, fresh.phonemes);
        }
    }

    #[test]
    fn corrupt_file_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let manifest = build_corpus(&cfg, dir.path()).unwrap();
        let path = dir.path().join(&manifest.entries[0].file);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, &bytes).unwrap();
        match load_utterance(dir.path(), &manifest, 0) {
            Err(DataError::Corrupt {
                expected, actual, ..
            }) => {
                assert_eq!(expected, actual + 10);
            }
            other => panic!("expected Corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn build_corpus_deterministic_hash() {
        let cfg = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_corpus(&cfg, d1.path()).unwrap();
        let m2 = build_corpus(&cfg, d2.path()).unwrap();
        assert_eq!(
            corpus_hash(d1.path(), &m1).unwrap(),
            corpus_hash(d2.path(), &m2).unwrap()
        );
    }
}
