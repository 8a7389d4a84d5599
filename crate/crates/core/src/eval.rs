//! Evaluation: per-frame token error rate, post-hoc linear probes over
//! frozen embeddings, 2-D PCA with a hand-rolled Jacobi eigensolver, mean
//! silhouette scores, and the four-condition ablation grid.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::model::{ModelDims, ModelError, ModelGraph};
use crate::par;
use crate::plot;
use crate::synthdata::{DataError, Split};
use crate::tensor::TensorError;
use crate::training::{argmax, TrainData};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing checkpoint for condition {condition}: {path}")]
    MissingCondition { condition: String, path: PathBuf },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---- elementary metrics ----

/// Fraction of positions where the two sequences disagree.
pub fn token_error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Invalid(format!(
            "token_error_rate: length mismatch {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(EvalError::Invalid("token_error_rate: empty sequences".into()));
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// True when all samples carry one label; the 1.0 accuracy is then
    /// degenerate rather than informative.
    pub single_class: bool,
}

/// Trains a fresh multinomial logistic probe on a 70/30 split of the frozen
/// embeddings (full-batch gradient descent, 500 steps, lr 0.1, seed-pinned)
/// and returns held-out accuracy.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<ProbeResult> {
    let n = embeddings.len();
    if n == 0 || n != labels.len() {
        return Err(EvalError::Invalid("linear_probe: empty or mismatched inputs".into()));
    }
    let d = embeddings[0].len();
    let k = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if let Some(&c) = present.iter().find(|&&c| counts[c] < 2) {
        return Err(EvalError::Invalid(format!(
            "linear_probe: class {c} has fewer than 2 samples"
        )));
    }
    if present.len() == 1 {
        return Ok(ProbeResult {
            accuracy: 1.0,
            single_class: true,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = (n * 7) / 10;
    let (train, test) = order.split_at(n_train.max(1).min(n - 1));

    let mut w = vec![0.0f64; d * k];
    let mut b = vec![0.0f64; k];
    let lr = 0.1;
    let mut logits = vec![0.0f64; k];
    let mut gw = vec![0.0f64; d * k];
    let mut gb = vec![0.0f64; k];
    for _ in 0..500 {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        for &i in train {
            let x = &embeddings[i];
            softmax_logits(x, &w, &b, &mut logits);
            for c in 0..k {
                let err = logits[c] - if c == labels[i] { 1.0 } else { 0.0 };
                gb[c] += err;
                for j in 0..d {
                    gw[j * k + c] += err * x[j];
                }
            }
        }
        let scale = lr / train.len() as f64;
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= scale * gv;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= scale * gv;
        }
    }

    let mut correct = 0usize;
    for &i in test {
        softmax_logits(&embeddings[i], &w, &b, &mut logits);
        if argmax(&logits) == labels[i] {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        single_class: false,
    })
}

/// Writes softmax(x W + b) into `out`.
fn softmax_logits(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let k = out.len();
    out.copy_from_slice(b);
    for (j, &xv) in x.iter().enumerate() {
        let row = &w[j * k..(j + 1) * k];
        for c in 0..k {
            out[c] += xv * row[c];
        }
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

// ---- PCA ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca2 {
    pub coords: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
}

/// Mean-centers the rows and projects onto the top-2 eigenvectors of the
/// sample covariance. Sign convention: each eigenvector is flipped so its
/// largest-magnitude coordinate is positive.
pub fn pca2(points: &[Vec<f64>]) -> Result<Pca2> {
    let n = points.len();
    if n < 3 {
        return Err(EvalError::Invalid(format!("pca2: need at least 3 points, got {n}")));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(EvalError::Invalid(format!("pca2: need dimension >= 2, got {d}")));
    }
    let mut mean = vec![0.0f64; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (p[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }

    let (eigvals, eigvecs) = jacobi_eigen(cov, d);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let total: f64 = eigvals.iter().map(|&v| v.max(0.0)).sum();

    let mut axes = [vec![0.0f64; d], vec![0.0f64; d]];
    let mut ratios = [0.0f64; 2];
    for a in 0..2 {
        let col = idx[a];
        for i in 0..d {
            axes[a][i] = eigvecs[i * d + col];
        }
        let mut peak = 0usize;
        for i in 0..d {
            if axes[a][i].abs() > axes[a][peak].abs() {
                peak = i;
            }
        }
        if axes[a][peak] < 0.0 {
            axes[a].iter_mut().for_each(|v| *v = -*v);
        }
        ratios[a] = if total > 0.0 {
            eigvals[col].max(0.0) / total
        } else {
            0.0
        };
    }

    let coords = points
        .iter()
        .map(|p| {
            let mut c = [0.0f64; 2];
            for a in 0..2 {
                for i in 0..d {
                    c[a] += (p[i] - mean[i]) * axes[a][i];
                }
            }
            c
        })
        .collect();
    Ok(Pca2 {
        coords,
        explained_variance_ratio: ratios,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
/// Returns eigenvalues and an orthogonal matrix whose columns are the
/// corresponding eigenvectors.
pub fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigvals = (0..n).map(|i| a[i * n + i]).collect();
    (eigvals, v)
}

// ---- silhouette ----

/// Mean silhouette score with Euclidean distance. The implementation is the
/// O(N^2) brute force; N is at most a few thousand here.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n != labels.len() || n == 0 {
        return Err(EvalError::Invalid("silhouette: empty or mismatched inputs".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(EvalError::Invalid("silhouette: need at least 2 classes".into()));
    }
    if let Some(&c) = present.iter().find(|&&c| counts[c] < 2) {
        return Err(EvalError::Invalid(format!(
            "silhouette: class {c} has fewer than 2 members"
        )));
    }

    let scores = par::map_indices(n, 64, |i| {
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sums[labels[j]] += dist;
        }
        let own = labels[i];
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = present
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        (b - a) / a.max(b)
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}

// ---- embedding extraction and condition reports ----

pub struct Embeddings {
    pub z: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub lang: Vec<usize>,
    pub spk: Vec<usize>,
}

pub fn extract_embeddings(
    model: &ModelGraph,
    data: &TrainData,
    indices: &[usize],
) -> Result<Embeddings> {
    let mut out = Embeddings {
        z: Vec::with_capacity(indices.len()),
        h: Vec::with_capacity(indices.len()),
        lang: Vec::with_capacity(indices.len()),
        spk: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let z = model.encode(&data.frames_tensor(i))?;
        let h = model.project(&z)?;
        out.z.push(z.data().clone());
        out.h.push(h.data().clone());
        out.lang.push(data.utts[i].y_lang);
        out.spk.push(data.utts[i].y_spk);
    }
    Ok(out)
}

/// Per-frame phoneme predictions for one utterance. `class_limit` restricts
/// the argmax to the first `class_limit` classes: a stage-1 model serves only
/// the seen languages' inventory, so its unseen-class output rows are still
/// at initialization and must not compete in the argmax.
pub fn predict_phonemes(
    model: &ModelGraph,
    data: &TrainData,
    index: usize,
    class_limit: Option<usize>,
) -> Result<Vec<usize>> {
    let frames = data.frames_tensor(index);
    let z = model.encode(&frames)?;
    let h = model.project(&z)?;
    let logits = model.phoneme_logits(&frames, &h)?;
    let n_classes = logits.shape()[1];
    let limit = class_limit.unwrap_or(n_classes).min(n_classes);
    let rows = logits.data();
    Ok((0..logits.shape()[0])
        .map(|t| argmax(&rows[t * n_classes..t * n_classes + limit]))
        .collect())
}

/// Mean TER over `indices`, plus the per-language breakdown.
pub fn ter_over(
    model: &ModelGraph,
    data: &TrainData,
    indices: &[usize],
    class_limit: Option<usize>,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut wrong_total = 0usize;
    let mut frames_total = 0usize;
    let mut per_lang: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &i in indices {
        let pred = predict_phonemes(model, data, i, class_limit)?;
        let truth = data.global_phonemes(i);
        let wrong = pred.iter().zip(&truth).filter(|(p, t)| p != t).count();
        wrong_total += wrong;
        frames_total += truth.len();
        let e = per_lang.entry(data.utts[i].y_lang).or_insert((0, 0));
        e.0 += wrong;
        e.1 += truth.len();
    }
    let per_lang = per_lang
        .into_iter()
        .map(|(l, (w, t))| (format!("lang{l}"), w as f64 / t as f64))
        .collect();
    Ok((wrong_total as f64 / frames_total as f64, per_lang))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionTags {
    pub sat_enabled: bool,
    pub projection_enabled: bool,
    pub budget: Option<usize>,
}

impl ConditionTags {
    pub fn slug(&self) -> String {
        let mut s = format!(
            "sat_{}_proj_{}",
            if self.sat_enabled { "on" } else { "off" },
            if self.projection_enabled { "on" } else { "off" }
        );
        if let Some(b) = self.budget {
            s.push_str(&format!("_b{b}"));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: ConditionTags,
    pub token_error_rate: f64,
    pub token_error_rate_per_language: BTreeMap<String, f64>,
    pub language_probe_accuracy: f64,
    pub speaker_probe_accuracy: f64,
    pub silhouette_z_by_language: f64,
    pub silhouette_h_by_language: f64,
    pub pca: Pca2,
    /// PCA fit per condition over its own embeddings, not jointly.
    pub pca_fit: String,
    /// Per-point labels aligned with `pca.coords`, so plots can be redrawn
    /// from the report alone.
    pub languages: Vec<usize>,
    pub speakers: Vec<usize>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !rate_ok(self.token_error_rate)
            || !self.token_error_rate_per_language.values().all(|&v| rate_ok(v))
            || !rate_ok(self.language_probe_accuracy)
            || !rate_ok(self.speaker_probe_accuracy)
        {
            return Err(EvalError::Invalid("report: rate out of [0,1]".into()));
        }
        for s in [self.silhouette_z_by_language, self.silhouette_h_by_language] {
            if !(-1.0..=1.0).contains(&s) {
                return Err(EvalError::Invalid("report: silhouette out of [-1,1]".into()));
            }
        }
        let ev: f64 = self.pca.explained_variance_ratio.iter().sum();
        if ev > 1.0 + 1e-9 {
            return Err(EvalError::Invalid("report: explained variance ratios sum > 1".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Invalid(e.to_string()))
    }
}

/// Evaluates one stage-1 condition over the seen-language eval split.
pub fn evaluate_condition(
    model: &ModelGraph,
    data: &TrainData,
    tags: ConditionTags,
    seed: u64,
) -> Result<EvalReport> {
    let eval_idx = data.manifest.indices(Split::Eval, true);
    let n_seen_classes = data.manifest.n_seen_languages * data.manifest.n_phonemes;
    let (ter, per_lang) = ter_over(model, data, &eval_idx, Some(n_seen_classes))?;
    let emb = extract_embeddings(model, data, &eval_idx)?;
    let lang_probe = linear_probe(&emb.h, &emb.lang, seed ^ 0x4C50)?;
    let spk_probe = linear_probe(&emb.h, &emb.spk, seed ^ 0x5350)?;
    let sil_z = silhouette(&emb.z, &emb.lang)?;
    let sil_h = silhouette(&emb.h, &emb.lang)?;
    let pca = pca2(&emb.h)?;
    let report = EvalReport {
        condition: tags,
        token_error_rate: ter,
        token_error_rate_per_language: per_lang,
        language_probe_accuracy: lang_probe.accuracy,
        speaker_probe_accuracy: spk_probe.accuracy,
        silhouette_z_by_language: sil_z,
        silhouette_h_by_language: sil_h,
        pca,
        pca_fit: "per_condition".into(),
        languages: emb.lang,
        speakers: emb.spk,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluates a stage-2 (or scratch) model over the unseen-language eval
/// split; probes and silhouettes still describe the seen-language embedding
/// geometry, which is unchanged by stage 2.
pub fn evaluate_transfer(
    model: &ModelGraph,
    data: &TrainData,
    tags: ConditionTags,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let _ = tags;
    let idx = data.manifest.unseen_eval_indices();
    ter_over(model, data, &idx, None)
}

/// Loads a stage-1 checkpoint into a model wired for its condition.
pub fn load_condition_model(
    cfg: &TrainConfig,
    tags: &ConditionTags,
    ckpt: &Path,
) -> Result<ModelGraph> {
    if !ckpt.exists() {
        return Err(EvalError::MissingCondition {
            condition: tags.slug(),
            path: ckpt.to_path_buf(),
        });
    }
    let dims = ModelDims::from_corpus(&cfg.corpus);
    let model = ModelGraph::new(dims, tags.sat_enabled, tags.projection_enabled, cfg.seed);
    model.load_checkpoint(ckpt)?;
    Ok(model)
}

/// Evaluates the four stage-1 ablation conditions, writing a report, two
/// scatter plots (colored by language, marker-shaped by speaker) per
/// condition, and a summary table.
pub fn run_ablation_grid(
    cfg: &TrainConfig,
    data: &TrainData,
    checkpoints: &[(ConditionTags, PathBuf)],
    out_dir: &Path,
) -> Result<Vec<EvalReport>> {
    std::fs::create_dir_all(out_dir.join("plots")).map_err(io_err(out_dir))?;
    let mut reports = Vec::with_capacity(checkpoints.len());
    for (tags, ckpt) in checkpoints {
        let model = load_condition_model(cfg, tags, ckpt)?;
        let report = evaluate_condition(&model, data, tags.clone(), cfg.seed)?;
        let slug = tags.slug();
        report.save(&out_dir.join(format!("eval_report_{slug}.json")))?;
        emit_plots(&report, out_dir)?;
        reports.push(report);
    }
    write_summary(&reports, &out_dir.join("summary.md"))?;
    Ok(reports)
}

/// Redraws the two scatter plots for a saved report into `out_dir/plots/`.
pub fn emit_plots(report: &EvalReport, out_dir: &Path) -> Result<()> {
    let plots = out_dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    let slug = report.condition.slug();
    let lang_path = plots.join(format!("pca_{slug}_by_language.svg"));
    plot::scatter_svg(
        &lang_path,
        &report.pca.coords,
        &report.languages,
        None,
        &format!("h_lang PCA, {slug}, colored by language"),
    )
    .map_err(io_err(&lang_path))?;
    let spk_path = plots.join(format!("pca_{slug}_by_speaker.svg"));
    plot::scatter_svg(
        &spk_path,
        &report.pca.coords,
        &report.speakers,
        Some(&report.speakers),
        &format!("h_lang PCA, {slug}, colored by speaker"),
    )
    .map_err(io_err(&spk_path))
}

pub fn write_summary(reports: &[EvalReport], path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::new();
    s.push_str("# Ablation summary\n\n");
    s.push_str("| condition | TER | lang probe | spk probe | silhouette(h) | silhouette(z) | EV ratio |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in reports {
        let ev = r.pca.explained_variance_ratio;
        writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.3}+{:.3} |",
            r.condition.slug(),
            r.token_error_rate,
            r.language_probe_accuracy,
            r.speaker_probe_accuracy,
            r.silhouette_h_by_language,
            r.silhouette_z_by_language,
            ev[0],
            ev[1]
        )
        .unwrap();
    }
    std::fs::write(path, s).map_err(io_err(path))
}
