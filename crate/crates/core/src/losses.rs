//! Composable scalar objectives: the language and speaker cross-entropies,
//! their sum (the language-embedding loss), and the stage-dependent composite
//! with the downstream per-frame phoneme loss. All terms enter with
//! coefficient 1.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::Stage;
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_lang: f64,
    pub l_spk: f64,
    pub l_le: f64,
    pub l_task: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_lang, self.l_spk, self.l_le, self.l_task, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean batch cross-entropy of the language classifier.
pub fn language_loss(lang_logits: &Tensor, y_lang: &[usize]) -> Result<Tensor> {
    lang_logits.softmax_cross_entropy(y_lang)
}

/// Mean batch cross-entropy of the speaker classifier. The adversarial
/// behavior lives entirely in the gradient-reversal backward rule of the
/// logits' input path; the value is a plain cross-entropy either way.
pub fn speaker_loss(spk_logits: &Tensor, y_spk: &[usize]) -> Result<Tensor> {
    spk_logits.softmax_cross_entropy(y_spk)
}

/// Language-embedding loss: the plain sum of the two classifier losses.
pub fn le_loss(l_lang: &Tensor, l_spk: &Tensor) -> Result<Tensor> {
    l_lang.add(l_spk)
}

/// Stage-1 total is the task loss plus the embedding loss; stage-2 drops the
/// embedding term entirely.
pub fn composite_loss(stage: Stage, l_le: &Tensor, l_task: &Tensor) -> Result<Tensor> {
    match stage {
        Stage::Multilingual => l_task.add(l_le),
        Stage::LowResource => l_task.scale(1.0),
    }
}

/// Append-only `metrics.csv` writer.
pub struct MetricsWriter {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<MetricsWriter> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "step,l_lang,l_spk,l_le,l_task,l_total")?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, r: &LossReport) -> std::io::Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{},{}",
            r.step, r.l_lang, r.l_spk, r.l_le, r.l_task, r.l_total
        )
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
