//! Adam optimizer and the two-stage training protocol.
//!
//! Stage 1 (multilingual): the pretrained encoder is frozen bitwise and the
//! projection, both classifiers and the phoneme head train on the seen
//! languages under the task loss plus the language-embedding loss. Stage 2
//! (low-resource): everything up to and including the projection and the
//! classifiers is frozen and only the phoneme head trains on the unseen
//! language's budgeted utterances under the task loss alone.
//!
//! Freezing is structural: the optimizer is constructed over exactly the
//! trainable groups, and group hashes are checked before/after as a guard.
//! Because frozen parameters cannot move, z_lang is precomputed once per
//! utterance in both stages, which keeps the step loop off the encoder.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{hex, ConfigError, Stage, TrainConfig};
use crate::losses::{self, LossReport, MetricsWriter};
use crate::model::{Group, ModelDims, ModelError, ModelGraph};
use crate::synthdata::{self, CorpusManifest, DataError, SyntheticUtterance};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}; last finite report: {last:?}")]
    NanAbort {
        step: usize,
        last: Option<LossReport>,
    },
    #[error("encoder pretraining missed the {gate:.0}% accuracy gate after {steps} steps (reached {reached:.1}%); increase pretrain_max_steps or simplify the corpus")]
    GateUnmet { gate: f64, reached: f64, steps: usize },
    #[error("freeze violation: group {0} changed during a stage that freezes it")]
    FreezeViolation(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---- optimizer ----

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Standard Adam with bias correction, bound to a fixed parameter list.
pub struct Adam {
    params: Vec<Tensor>,
    slots: Vec<Slot>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let slots = params
            .iter()
            .map(|p| Slot {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            })
            .collect();
        Adam {
            params,
            slots,
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
        }
    }

    pub fn from_config(params: Vec<Tensor>, cfg: &TrainConfig) -> Adam {
        Adam::new(
            params,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )
    }

    /// One update over all bound parameters. A missing gradient counts as
    /// zero (the moments still decay).
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, slot) in self.params.iter().zip(&mut self.slots) {
            let grad = p.grad();
            if let Some(g) = &grad {
                if g.len() != slot.m.len() {
                    return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: vec![g.len()],
                        rhs: vec![slot.m.len()],
                    }));
                }
            }
            let mut data = p.data_mut();
            for i in 0..slot.m.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---- data access ----

/// The whole corpus held in memory (desk scale: tens of megabytes).
pub struct TrainData {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
    pub utts: Vec<SyntheticUtterance>,
}

impl TrainData {
    pub fn load(dir: &Path) -> Result<TrainData> {
        if !dir.join("manifest.json").exists() {
            return Err(TrainError::MissingArtifact(dir.join("manifest.json")));
        }
        let manifest = synthdata::load_manifest(dir)?;
        let mut utts = Vec::with_capacity(manifest.entries.len());
        for i in 0..manifest.entries.len() {
            utts.push(synthdata::load_utterance(dir, &manifest, i)?);
        }
        Ok(TrainData {
            dir: dir.to_path_buf(),
            manifest,
            utts,
        })
    }

    pub fn frames_tensor(&self, index: usize) -> Tensor {
        let u = &self.utts[index];
        Tensor::from_vec(&[u.n_frames, u.feat_dim], u.frames.clone())
            .expect("corpus frames are finite")
    }

    pub fn global_phonemes(&self, index: usize) -> Vec<usize> {
        let u = &self.utts[index];
        u.phonemes
            .iter()
            .map(|&p| self.manifest.global_phoneme(u.y_lang, p))
            .collect()
    }
}

/// Round-robin over the unseen language's speakers so that small budgets
/// still cover the roster.
pub fn budget_indices(manifest: &CorpusManifest, budget: usize) -> Vec<usize> {
    let pool = manifest.unseen_train_indices();
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in pool {
        debug_assert!(manifest.entries[i].language >= manifest.n_seen_languages);
        by_speaker
            .entry(manifest.entries[i].speaker)
            .or_default()
            .push(i);
    }
    let mut picked = Vec::with_capacity(budget);
    let mut round = 0;
    while picked.len() < budget {
        let mut any = false;
        for list in by_speaker.values() {
            if let Some(&i) = list.get(round) {
                picked.push(i);
                any = true;
                if picked.len() == budget {
                    break;
                }
            }
        }
        if !any {
            break; // pool exhausted
        }
        round += 1;
    }
    picked
}

// ---- forward passes ----

/// GRL scale at a given step: constant by default, linear 0 -> grl_lambda
/// over the first `grl_ramp_steps` when configured.
pub fn lambda_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.grl_ramp_steps > 0 && step < cfg.grl_ramp_steps {
        cfg.grl_lambda * step as f64 / cfg.grl_ramp_steps as f64
    } else {
        cfg.grl_lambda
    }
}

/// Full-graph stage-1 batch loss, differentiating through the encoder as
/// well. The training loop uses the cached-z fast path instead; this route
/// exists for end-to-end gradient checking and computes identical values.
pub fn stage1_batch_loss(
    model: &ModelGraph,
    data: &TrainData,
    batch: &[usize],
    sat_enabled: bool,
    lambda: f64,
) -> Result<(Tensor, LossReport)> {
    let mut hs = Vec::with_capacity(batch.len());
    let mut task_terms = Vec::with_capacity(batch.len());
    let mut y_lang = Vec::with_capacity(batch.len());
    let mut y_spk = Vec::with_capacity(batch.len());
    for &i in batch {
        let frames = data.frames_tensor(i);
        let z = model.encode(&frames)?;
        let h = model.project(&z)?;
        let logits = model.phoneme_logits(&frames, &h)?;
        task_terms.push(logits.softmax_cross_entropy(&data.global_phonemes(i))?);
        hs.push(h);
        y_lang.push(data.utts[i].y_lang);
        y_spk.push(data.utts[i].y_spk);
    }
    let h_batch = Tensor::stack_rows(&hs)?;
    let (lang_logits, spk_logits) = model.forward_heads(&h_batch, sat_enabled, lambda)?;
    let l_lang = losses::language_loss(&lang_logits, &y_lang)?;
    let l_spk = losses::speaker_loss(&spk_logits, &y_spk)?;
    let l_le = losses::le_loss(&l_lang, &l_spk)?;
    let l_task = mean_terms(&task_terms)?;
    let total = losses::composite_loss(Stage::Multilingual, &l_le, &l_task)?;
    let report = LossReport {
        step: 0,
        l_lang: l_lang.item(),
        l_spk: l_spk.item(),
        l_le: l_le.item(),
        l_task: l_task.item(),
        l_total: total.item(),
    };
    Ok((total, report))
}

/// The scalar whose true gradient equals the GRL-reversed gradient of the
/// stage-1 loss for parameters upstream of the reversal:
/// `l_task + l_lang - lambda * l_spk`, computed on the plain (no-GRL) path.
/// Used by gradient checks; the training loop never optimizes this.
pub fn stage1_pseudo_loss(
    model: &ModelGraph,
    data: &TrainData,
    batch: &[usize],
    lambda: f64,
) -> Result<Tensor> {
    let mut hs = Vec::with_capacity(batch.len());
    let mut task_terms = Vec::with_capacity(batch.len());
    let mut y_lang = Vec::with_capacity(batch.len());
    let mut y_spk = Vec::with_capacity(batch.len());
    for &i in batch {
        let frames = data.frames_tensor(i);
        let z = model.encode(&frames)?;
        let h = model.project(&z)?;
        let logits = model.phoneme_logits(&frames, &h)?;
        task_terms.push(logits.softmax_cross_entropy(&data.global_phonemes(i))?);
        hs.push(h);
        y_lang.push(data.utts[i].y_lang);
        y_spk.push(data.utts[i].y_spk);
    }
    let h_batch = Tensor::stack_rows(&hs)?;
    let (lang_logits, spk_logits) = model.forward_heads(&h_batch, false, 0.0)?;
    let l_lang = losses::language_loss(&lang_logits, &y_lang)?;
    let l_spk = losses::speaker_loss(&spk_logits, &y_spk)?;
    let l_task = mean_terms(&task_terms)?;
    Ok(l_task.add(&l_lang)?.add(&l_spk.scale(-lambda)?)?)
}

fn mean_terms(terms: &[Tensor]) -> Result<Tensor> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64)?)
}

fn precompute_z(model: &ModelGraph, data: &TrainData, indices: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut cache = vec![None; data.utts.len()];
    for &i in indices {
        let z = model.encode(&data.frames_tensor(i))?;
        cache[i] = Some(z.data().clone());
    }
    Ok(cache)
}

// ---- outcomes and the run manifest ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOutcome {
    pub final_report: LossReport,
    pub checkpoint_hash: String,
    /// Hex group hashes after training, keyed by group name.
    pub group_hashes: BTreeMap<String, String>,
    #[serde(skip)]
    pub reports: Vec<LossReport>,
}

/// `run.json`: enough to reproduce the run exactly.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<TrainConfig>,
    pub corpus_hash: Option<String>,
    pub pretrain: Option<PretrainOutcome>,
    pub stage1: Option<StageOutcome>,
    pub stage2: Option<StageOutcome>,
}

impl RunManifest {
    pub fn load_or_default(dir: &Path) -> RunManifest {
        std::fs::read_to_string(dir.join("run.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).unwrap())
            .map_err(io_err(&path))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

// ---- pretraining ----

/// Trains the encoder alone on language identification over the seen
/// languages for the full step budget (long language-ID training compresses
/// within-language variation in z, not just the decision boundary), verifies
/// the held-out accuracy gate, and saves an encoder-only checkpoint.
pub fn pretrain_encoder(
    cfg: &TrainConfig,
    data: &TrainData,
    ckpt_path: &Path,
    metrics_path: &Path,
) -> Result<PretrainOutcome> {
    let dims = ModelDims::from_corpus(&cfg.corpus);
    let model = ModelGraph::new(dims, cfg.sat_enabled, cfg.projection_enabled, cfg.seed);
    // throwaway language-ID head on z_lang; not part of any freeze group
    let mut rng = ChaCha8Rng::seed_from_u64(synthdata::mix2(cfg.seed, 0x50524549));
    let a = (6.0 / (64 + dims.n_seen_languages) as f64).sqrt();
    let aux_w = Tensor::from_vec(
        &[64, dims.n_seen_languages],
        (0..64 * dims.n_seen_languages)
            .map(|_| rng.gen_range(-a..a))
            .collect(),
    )
    .expect("finite init");
    let aux_b = Tensor::zeros(&[dims.n_seen_languages]);

    let train_idx = data.manifest.indices(synthdata::Split::Train, true);
    let eval_idx = data.manifest.indices(synthdata::Split::Eval, true);
    let mut params: Vec<Tensor> = model
        .params_in(Group::Encoder)
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    params.push(aux_w.clone());
    params.push(aux_b.clone());
    let mut opt = Adam::from_config(params, cfg);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(synthdata::mix2(cfg.seed, 0x42415430));
    let mut metrics = MetricsWriter::create(metrics_path).map_err(io_err(metrics_path))?;

    let eval_accuracy = |model: &ModelGraph| -> Result<f64> {
        let mut correct = 0usize;
        for &i in &eval_idx {
            let z = model.encode(&data.frames_tensor(i))?;
            let logits = Tensor::stack_rows(&[z])?
                .matmul(&aux_w)?
                .add_row(&aux_b)?;
            let row = logits.data();
            let pred = argmax(&row);
            if pred == data.utts[i].y_lang {
                correct += 1;
            }
        }
        Ok(correct as f64 / eval_idx.len() as f64)
    };

    let check_every = 100;
    let mut steps_run = 0;
    let mut reached = 0.0;
    for step in 0..cfg.pretrain_max_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| train_idx[batch_rng.gen_range(0..train_idx.len())])
            .collect();
        let zs: Result<Vec<Tensor>> = batch
            .iter()
            .map(|&i| model.encode(&data.frames_tensor(i)).map_err(Into::into))
            .collect();
        let z_batch = Tensor::stack_rows(&zs?)?;
        let logits = z_batch.matmul(&aux_w)?.add_row(&aux_b)?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.utts[i].y_lang).collect();
        let loss = logits.softmax_cross_entropy(&labels)?;
        let val = loss.item();
        metrics
            .append(&LossReport {
                step,
                l_lang: val,
                l_spk: 0.0,
                l_le: val,
                l_task: 0.0,
                l_total: val,
            })
            .map_err(io_err(metrics_path))?;
        loss.backward()?;
        opt.step()?;
        model.zero_grad();
        aux_w.zero_grad();
        aux_b.zero_grad();
        steps_run = step + 1;
        if steps_run % check_every == 0 || steps_run == cfg.pretrain_max_steps {
            reached = eval_accuracy(&model)?;
        }
    }
    if reached < cfg.pretrain_accuracy_gate {
        return Err(TrainError::GateUnmet {
            gate: cfg.pretrain_accuracy_gate * 100.0,
            reached: reached * 100.0,
            steps: steps_run,
        });
    }
    model.save_checkpoint(ckpt_path, &cfg.hash(), &[Group::Encoder])?;
    Ok(PretrainOutcome {
        steps_run,
        final_accuracy: reached,
        checkpoint_hash: file_sha256(ckpt_path)?,
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

// ---- stage 1 ----

pub fn train_stage1(
    cfg: &TrainConfig,
    data: &TrainData,
    encoder_ckpt: &Path,
    ckpt_path: &Path,
    metrics_path: &Path,
) -> Result<StageOutcome> {
    if !encoder_ckpt.exists() {
        return Err(TrainError::MissingArtifact(encoder_ckpt.to_path_buf()));
    }
    let dims = ModelDims::from_corpus(&cfg.corpus);
    let model = ModelGraph::new(dims, cfg.sat_enabled, cfg.projection_enabled, cfg.seed);
    let (_, loaded) = model.load_checkpoint(encoder_ckpt)?;
    if !loaded.iter().any(|n| n.starts_with("enc/")) {
        return Err(TrainError::Model(ModelError::Checkpoint {
            path: encoder_ckpt.to_path_buf(),
            msg: "no encoder parameters in checkpoint".into(),
        }));
    }

    let enc_hash_before = model.group_hash(Group::Encoder);
    let train_idx = data.manifest.indices(synthdata::Split::Train, true);
    let z_cache = precompute_z(&model, data, &train_idx)?;

    let mut groups = vec![Group::Classifiers, Group::Downstream];
    if cfg.projection_enabled {
        groups.insert(0, Group::Projection);
    }
    // the speaker head is the adversary: it gets its own, faster optimizer
    // so it stays near-optimal while the projection moves (see TrainConfig)
    let (spk_params, main_params): (Vec<_>, Vec<_>) = groups
        .iter()
        .flat_map(|g| model.params_in(*g))
        .partition(|(n, _)| n.starts_with("cls/spk"));
    let spk_params: Vec<Tensor> = spk_params.into_iter().map(|(_, t)| t).collect();
    let main_params: Vec<Tensor> = main_params.into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::from_config(main_params, cfg);
    let mut opt_adv = Adam::new(
        spk_params,
        cfg.learning_rate * cfg.adversary_lr_multiplier,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let mut batch_rng = ChaCha8Rng::seed_from_u64(synthdata::mix2(cfg.seed, 0x42415431));
    let mut metrics = MetricsWriter::create(metrics_path).map_err(io_err(metrics_path))?;

    // stage 1 never sees the unseen language, so its phoneme softmax runs
    // over the seen languages' classes only (a constant column selection);
    // the unseen classes' output weights keep their initialization instead
    // of being driven down for 3000 steps as never-correct classes
    let p_total = cfg.corpus.n_global_phonemes();
    let n_seen_classes = cfg.corpus.n_seen_languages * cfg.corpus.n_phonemes;
    let seen_select = {
        let mut m = vec![0.0; p_total * n_seen_classes];
        for j in 0..n_seen_classes {
            m[j * n_seen_classes + j] = 1.0;
        }
        Tensor::from_vec(&[p_total, n_seen_classes], m)?
    };

    let mut reports: Vec<LossReport> = Vec::with_capacity(cfg.stage1_steps);
    for step in 0..cfg.stage1_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| train_idx[batch_rng.gen_range(0..train_idx.len())])
            .collect();
        let lambda = lambda_at(cfg, step);
        let mut hs = Vec::with_capacity(batch.len());
        let mut task_terms = Vec::with_capacity(batch.len());
        let mut y_lang = Vec::with_capacity(batch.len());
        let mut y_spk = Vec::with_capacity(batch.len());
        for &i in &batch {
            let z = Tensor::from_vec(&[64], z_cache[i].clone().expect("cached"))?;
            let h = model.project(&z)?;
            let frames = data.frames_tensor(i);
            let logits = model.phoneme_logits(&frames, &h)?.matmul(&seen_select)?;
            task_terms.push(logits.softmax_cross_entropy(&data.global_phonemes(i))?);
            hs.push(h);
            y_lang.push(data.utts[i].y_lang);
            y_spk.push(data.utts[i].y_spk);
        }
        let h_batch = Tensor::stack_rows(&hs)?;
        let (lang_logits, spk_logits) = model.forward_heads(&h_batch, cfg.sat_enabled, lambda)?;
        let l_lang = losses::language_loss(&lang_logits, &y_lang)?;
        let l_spk = losses::speaker_loss(&spk_logits, &y_spk)?;
        let l_le = losses::le_loss(&l_lang, &l_spk)?;
        let l_task = mean_terms(&task_terms)?;
        let total = losses::composite_loss(Stage::Multilingual, &l_le, &l_task)?;
        let report = LossReport {
            step,
            l_lang: l_lang.item(),
            l_spk: l_spk.item(),
            l_le: l_le.item(),
            l_task: l_task.item(),
            l_total: total.item(),
        };
        if !report.is_finite() {
            return Err(TrainError::NanAbort {
                step,
                last: reports.last().copied(),
            });
        }
        metrics.append(&report).map_err(io_err(metrics_path))?;
        reports.push(report);
        total.backward()?;
        opt.step()?;
        opt_adv.step()?;
        model.zero_grad();

        // extra head-only updates keep the speaker classifier near its
        // optimum against the just-updated projection; h is detached so only
        // the head moves
        for _ in 0..cfg.adversary_extra_steps {
            let mut hs = Vec::with_capacity(cfg.adversary_batch_size);
            let mut ys = Vec::with_capacity(cfg.adversary_batch_size);
            for _ in 0..cfg.adversary_batch_size {
                let i = train_idx[batch_rng.gen_range(0..train_idx.len())];
                let z = Tensor::from_vec(&[64], z_cache[i].clone().expect("cached"))?;
                let h = model.project(&z)?;
                hs.push(Tensor::from_vec(&[32], h.data().clone())?);
                ys.push(data.utts[i].y_spk);
            }
            let h_batch = Tensor::stack_rows(&hs)?;
            let (_, spk_logits) = model.forward_heads(&h_batch, false, 0.0)?;
            let l_spk = losses::speaker_loss(&spk_logits, &ys)?;
            l_spk.backward()?;
            opt_adv.step()?;
            model.zero_grad();
        }
    }

    // final head-refresh phase: under adversarial training the embedding
    // keeps moving until the last joint step, so the phoneme head always
    // lags the representation it is evaluated against. With the projection
    // now settled, the head converges on the final embedding. The phase runs
    // unconditionally so both SAT conditions follow the same schedule.
    if cfg.stage1_head_refresh_steps > 0 {
        let head_params: Vec<Tensor> = model
            .params_in(Group::Downstream)
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let mut opt_head = Adam::from_config(head_params, cfg);
        let mut refresh_rng = ChaCha8Rng::seed_from_u64(synthdata::mix2(cfg.seed, 0x52465348));
        for k in 0..cfg.stage1_head_refresh_steps {
            let batch: Vec<usize> = (0..cfg.batch_size)
                .map(|_| train_idx[refresh_rng.gen_range(0..train_idx.len())])
                .collect();
            let mut task_terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let z = Tensor::from_vec(&[64], z_cache[i].clone().expect("cached"))?;
                let h = model.project(&z)?;
                let frames = data.frames_tensor(i);
                let logits = model.phoneme_logits(&frames, &h)?.matmul(&seen_select)?;
                task_terms.push(logits.softmax_cross_entropy(&data.global_phonemes(i))?);
            }
            let l_task = mean_terms(&task_terms)?;
            let report = LossReport {
                step: cfg.stage1_steps + k,
                l_lang: 0.0,
                l_spk: 0.0,
                l_le: 0.0,
                l_task: l_task.item(),
                l_total: l_task.item(),
            };
            if !report.is_finite() {
                return Err(TrainError::NanAbort {
                    step: cfg.stage1_steps + k,
                    last: reports.last().copied(),
                });
            }
            metrics.append(&report).map_err(io_err(metrics_path))?;
            reports.push(report);
            l_task.backward()?;
            opt_head.step()?;
            model.zero_grad();
        }
    }

    if model.group_hash(Group::Encoder) != enc_hash_before {
        return Err(TrainError::FreezeViolation("enc"));
    }
    model.save_checkpoint(ckpt_path, &cfg.hash(), &Group::ALL)?;
    Ok(StageOutcome {
        final_report: *reports.last().expect("at least one step"),
        checkpoint_hash: file_sha256(ckpt_path)?,
        group_hashes: group_hashes(&model),
        reports,
    })
}

fn group_hashes(model: &ModelGraph) -> BTreeMap<String, String> {
    Group::ALL
        .iter()
        .map(|g| (g.name().to_string(), hex(&model.group_hash(*g))))
        .collect()
}

// ---- stage 2 ----

pub fn train_stage2(
    cfg: &TrainConfig,
    data: &TrainData,
    stage1_ckpt: &Path,
    ckpt_path: &Path,
    metrics_path: &Path,
) -> Result<StageOutcome> {
    if !stage1_ckpt.exists() {
        return Err(TrainError::MissingArtifact(stage1_ckpt.to_path_buf()));
    }
    let dims = ModelDims::from_corpus(&cfg.corpus);
    let model = ModelGraph::new(dims, cfg.sat_enabled, cfg.projection_enabled, cfg.seed);
    let (_, loaded) = model.load_checkpoint(stage1_ckpt)?;
    if loaded.len() != model.all_params().len() {
        return Err(TrainError::Model(ModelError::Checkpoint {
            path: stage1_ckpt.to_path_buf(),
            msg: format!("expected a full checkpoint, found {} records", loaded.len()),
        }));
    }

    let frozen_before: Vec<[u8; 32]> = [Group::Encoder, Group::Projection, Group::Classifiers]
        .iter()
        .map(|g| model.group_hash(*g))
        .collect();

    let budget = budget_indices(&data.manifest, cfg.low_resource_budget);
    debug_assert!(budget
        .iter()
        .all(|&i| data.manifest.entries[i].language >= data.manifest.n_seen_languages));
    // everything up to h_lang is frozen, so h is a constant per utterance
    let mut h_cache: Vec<Option<Vec<f64>>> = vec![None; data.utts.len()];
    for &i in &budget {
        let z = model.encode(&data.frames_tensor(i))?;
        let h = model.project(&z)?;
        h_cache[i] = Some(h.data().clone());
    }

    let params: Vec<Tensor> = model
        .params_in(Group::Downstream)
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let mut opt = Adam::new(
        params,
        cfg.stage2_learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let mut batch_rng = ChaCha8Rng::seed_from_u64(synthdata::mix2(cfg.seed, 0x42415432));
    let mut metrics = MetricsWriter::create(metrics_path).map_err(io_err(metrics_path))?;

    let mut reports: Vec<LossReport> = Vec::with_capacity(cfg.stage2_steps);
    for step in 0..cfg.stage2_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| budget[batch_rng.gen_range(0..budget.len())])
            .collect();
        let mut task_terms = Vec::with_capacity(batch.len());
        for &i in &batch {
            let h = Tensor::from_vec(&[32], h_cache[i].clone().expect("cached"))?;
            let frames = data.frames_tensor(i);
            let logits = model.phoneme_logits(&frames, &h)?;
            task_terms.push(logits.softmax_cross_entropy(&data.global_phonemes(i))?);
        }
        let l_task = mean_terms(&task_terms)?;
        let zero = Tensor::scalar(0.0);
        let total = losses::composite_loss(Stage::LowResource, &zero, &l_task)?;
        let report = LossReport {
            step,
            l_lang: 0.0,
            l_spk: 0.0,
            l_le: 0.0,
            l_task: l_task.item(),
            l_total: total.item(),
        };
        if !report.is_finite() {
            return Err(TrainError::NanAbort {
                step,
                last: reports.last().copied(),
            });
        }
        metrics.append(&report).map_err(io_err(metrics_path))?;
        reports.push(report);
        total.backward()?;
        opt.step()?;
        model.zero_grad();
    }

    for (g, before) in [Group::Encoder, Group::Projection, Group::Classifiers]
        .iter()
        .zip(&frozen_before)
    {
        if model.group_hash(*g) != *before {
            return Err(TrainError::FreezeViolation(g.name()));
        }
    }
    model.save_checkpoint(ckpt_path, &cfg.hash(), &Group::ALL)?;
    Ok(StageOutcome {
        final_report: *reports.last().expect("at least one step"),
        checkpoint_hash: file_sha256(ckpt_path)?,
        group_hashes: group_hashes(&model),
        reports,
    })
}

/// From-scratch comparison model for the low-resource setting: random init,
/// trained end to end (encoder, projection, phoneme head) on the same
/// budgeted utterances under the task loss, for the same number of steps.
pub fn train_scratch_lowresource(cfg: &TrainConfig, data: &TrainData) -> Result<ModelGraph> {
    let dims = ModelDims::from_corpus(&cfg.corpus);
    let model = ModelGraph::new(dims, false, cfg.projection_enabled, cfg.seed ^ 0x5343);
    let budget = budget_indices(&data.manifest, cfg.low_resource_budget);
    let params: Vec<Tensor> = [Group::Encoder, Group::Projection, Group::Downstream]
        .iter()
        .flat_map(|g| model.params_in(*g))
        .map(|(_, t)| t)
        .collect();
    let mut opt = Adam::new(
        params,
        cfg.stage2_learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let mut batch_rng = ChaCha8Rng::seed_from_u64(synthdata::mix2(cfg.seed, 0x42415433));
    for step in 0..cfg.stage2_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| budget[batch_rng.gen_range(0..budget.len())])
            .collect();
        let mut task_terms = Vec::with_capacity(batch.len());
        for &i in &batch {
            let frames = data.frames_tensor(i);
            let z = model.encode(&frames)?;
            let h = model.project(&z)?;
            let logits = model.phoneme_logits(&frames, &h)?;
            task_terms.push(logits.softmax_cross_entropy(&data.global_phonemes(i))?);
        }
        let l_task = mean_terms(&task_terms)?;
        if !l_task.item().is_finite() {
            return Err(TrainError::NanAbort { step, last: None });
        }
        l_task.backward()?;
        opt.step()?;
        model.zero_grad();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_single_step_hand_evaluated() {
        let w = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut opt = Adam::new(vec![w.clone()], 0.1, 0.9, 0.999, 1e-8);
        w.accum_grad_for_test(&[1.0]);
        opt.step().unwrap();
        // m_hat = v_hat = 1 at t=1, so the update is lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-12);
        assert!((w.data()[0] + 0.09999999).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter() {
        let w = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let mut opt = Adam::new(vec![w.clone()], 0.1, 0.9, 0.999, 1e-8);
        opt.step().unwrap();
        assert_eq!(w.data()[0], 0.5);
    }

    #[test]
    fn adam_matches_scalar_oracle_over_steps() {
        // independent scalar oracle following the update equations literally
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let grads = [0.7, -1.3, 0.2, 0.0, 2.5];
        let mut w_oracle = 0.3f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let w = Tensor::from_vec(&[1], vec![0.3]).unwrap();
        let mut opt = Adam::new(vec![w.clone()], lr, b1, b2, eps);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            w_oracle -= lr * m_hat / (v_hat.sqrt() + eps);

            w.zero_grad();
            w.accum_grad_for_test(&[*g]);
            opt.step().unwrap();
            assert!((w.data()[0] - w_oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_ramp() {
        let mut cfg = TrainConfig::default();
        cfg.grl_lambda = 1.0;
        cfg.grl_ramp_steps = 0;
        assert_eq!(lambda_at(&cfg, 0), 1.0);
        cfg.grl_ramp_steps = 100;
        assert_eq!(lambda_at(&cfg, 0), 0.0);
        assert_eq!(lambda_at(&cfg, 50), 0.5);
        assert_eq!(lambda_at(&cfg, 100), 1.0);
        assert_eq!(lambda_at(&cfg, 500), 1.0);
    }
}
