//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`). The expensive criteria share a single
//! pipeline context built lazily on first use; everything in it is pinned to
//! the default seed.

use once_cell::sync::Lazy;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use langemb::config::{CorpusConfig, TrainConfig};
use langemb::eval::{self, ConditionTags, EvalReport};
use langemb::gradcheck;
use langemb::model::{LanguageIDBaseline, ModelDims, ModelError, ModelGraph};
use langemb::par::set_parallel;
use langemb::synthdata::{self, build_corpus};
use langemb::tensor::Tensor;
use langemb::training::{self, stage1_batch_loss, TrainData};

struct Ctx {
    _dir: tempfile::TempDir,
    out: PathBuf,
    dataset: PathBuf,
    /// datagen -> pretrain -> stage 1 -> stage 2 -> eval on defaults,
    /// single-threaded.
    pipeline_secs: f64,
    /// Stage-1 condition reports keyed by (sat_enabled, projection_enabled).
    reports: BTreeMap<(bool, bool), EvalReport>,
    /// budget -> (TER fine-tuned with SAT, fine-tuned without SAT, scratch).
    transfer: BTreeMap<usize, (f64, f64, f64)>,
    stage1_hashes: BTreeMap<String, String>,
    stage2_hashes: BTreeMap<String, String>,
    baseline_unseen_is_hard_error: bool,
}

static CTX: Lazy<Ctx> = Lazy::new(build_ctx);

fn ckpt(out: &PathBuf, name: &str) -> PathBuf {
    out.join("checkpoints").join(name)
}

fn build_ctx() -> Ctx {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().to_path_buf();
    let dataset = out.join("dataset");
    std::fs::create_dir_all(out.join("checkpoints")).unwrap();
    let cfg = TrainConfig::default();

    // timed portion: the default pipeline, single-threaded (criterion 10)
    set_parallel(false);
    let t0 = Instant::now();
    build_corpus(&cfg, &dataset).expect("datagen");
    let data = TrainData::load(&dataset).expect("load corpus");
    let enc = ckpt(&out, "encoder.ldck");
    training::pretrain_encoder(&cfg, &data, &enc, &out.join("metrics_pretrain.csv"))
        .expect("pretrain");
    let s1_on = training::train_stage1(
        &cfg,
        &data,
        &enc,
        &ckpt(&out, "stage1_sat_on_proj_on.ldck"),
        &out.join("metrics.csv"),
    )
    .expect("stage 1 with SAT");
    let s2_on_20 = training::train_stage2(
        &cfg,
        &data,
        &ckpt(&out, "stage1_sat_on_proj_on.ldck"),
        &ckpt(&out, "stage2_sat_on_b20.ldck"),
        &out.join("metrics_stage2_b20.csv"),
    )
    .expect("stage 2 b20");
    let tags_on = ConditionTags {
        sat_enabled: true,
        projection_enabled: true,
        budget: None,
    };
    let model_on =
        eval::load_condition_model(&cfg, &tags_on, &ckpt(&out, "stage1_sat_on_proj_on.ldck"))
            .expect("load stage 1");
    eval::evaluate_condition(&model_on, &data, tags_on.clone(), cfg.seed).expect("eval");
    let pipeline_secs = t0.elapsed().as_secs_f64();
    set_parallel(true);

    // remaining stage-1 ablation conditions
    let mut conditions = vec![(tags_on.clone(), ckpt(&out, "stage1_sat_on_proj_on.ldck"))];
    for (sat, proj) in [(false, true), (true, false), (false, false)] {
        let mut c = cfg.clone();
        c.sat_enabled = sat;
        c.projection_enabled = proj;
        let tags = ConditionTags {
            sat_enabled: sat,
            projection_enabled: proj,
            budget: None,
        };
        let path = ckpt(&out, &format!("stage1_{}.ldck", tags.slug()));
        training::train_stage1(&c, &data, &enc, &path, &out.join(format!("metrics_{}.csv", tags.slug())))
            .expect("stage 1 condition");
        conditions.push((tags, path));
    }
    let grid = eval::run_ablation_grid(&cfg, &data, &conditions, &out).expect("ablation grid");
    let mut reports = BTreeMap::new();
    for r in grid {
        reports.insert((r.condition.sat_enabled, r.condition.projection_enabled), r);
    }

    // transfer comparisons at both budgets (stage 2 from the SAT-on and
    // SAT-off stage-1 checkpoints, plus a from-scratch model)
    let mut transfer = BTreeMap::new();
    let mut stage2_hashes = BTreeMap::new();
    for budget in [20usize, 120] {
        let mut ters = [0.0f64; 3];
        for (slot, sat) in [(0usize, true), (1, false)] {
            let mut c = cfg.clone();
            c.sat_enabled = sat;
            c.low_resource_budget = budget;
            let s1_name = format!(
                "stage1_sat_{}_proj_on.ldck",
                if sat { "on" } else { "off" }
            );
            let s2_name = format!(
                "stage2_sat_{}_b{budget}.ldck",
                if sat { "on" } else { "off" }
            );
            let outcome = if sat && budget == 20 {
                s2_on_20.clone()
            } else {
                training::train_stage2(
                    &c,
                    &data,
                    &ckpt(&out, &s1_name),
                    &ckpt(&out, &s2_name),
                    &out.join(format!("metrics_{s2_name}.csv")),
                )
                .expect("stage 2")
            };
            if sat && budget == 20 {
                stage2_hashes = outcome.group_hashes.clone();
            }
            let tags = ConditionTags {
                sat_enabled: sat,
                projection_enabled: true,
                budget: Some(budget),
            };
            let m = eval::load_condition_model(&c, &tags, &ckpt(&out, &s2_name)).expect("load s2");
            let (ter, _) = eval::evaluate_transfer(&m, &data, tags).expect("transfer eval");
            ters[slot] = ter;
        }
        let mut c = cfg.clone();
        c.low_resource_budget = budget;
        let scratch = training::train_scratch_lowresource(&c, &data).expect("scratch");
        let idx = data.manifest.unseen_eval_indices();
        let (ter_scratch, _) = eval::ter_over(&scratch, &data, &idx, None).expect("scratch eval");
        ters[2] = ter_scratch;
        transfer.insert(budget, (ters[0], ters[1], ters[2]));
    }

    // language-ID lookup baseline over seen languages only
    let eval_idx = data.manifest.indices(synthdata::Split::Eval, true);
    let emb = eval::extract_embeddings(&model_on, &data, &eval_idx).expect("embeddings");
    let baseline =
        LanguageIDBaseline::from_embeddings(&emb.h, &emb.lang, cfg.corpus.n_seen_languages);
    let baseline_unseen_is_hard_error = matches!(
        baseline.embed(cfg.corpus.n_seen_languages),
        Err(ModelError::UnseenLanguage(_))
    );

    Ctx {
        _dir: dir,
        out,
        dataset,
        pipeline_secs,
        reports,
        transfer,
        stage1_hashes: s1_on.group_hashes,
        stage2_hashes,
        baseline_unseen_is_hard_error,
    }
}

fn small_corpus_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.corpus = CorpusConfig {
        n_seen_languages: 3,
        n_unseen_languages: 1,
        n_phonemes: 4,
        n_speakers: 2,
        train_per_speaker: 6,
        eval_per_speaker: 3,
        held_out_speakers_per_language: 0,
        unseen_train_pool: 6,
        frames: 20,
        feat_dim: 12,
        noise_sigma: 0.05,
        mean_phoneme_duration: 4.0,
    };
    cfg.low_resource_budget = 4;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn criterion_01_full_loss_finite_difference_check() {
    let t0 = Instant::now();
    let cfg = small_corpus_config();
    let dir = tempfile::tempdir().unwrap();
    build_corpus(&cfg, dir.path()).unwrap();
    let data = TrainData::load(dir.path()).unwrap();
    let model = ModelGraph::new(ModelDims::from_corpus(&cfg.corpus), true, true, 1);
    let batch: Vec<usize> = data.manifest.indices(synthdata::Split::Train, true)[..2].to_vec();

    let (total, _) = stage1_batch_loss(&model, &data, &batch, true, 1.0).unwrap();
    total.backward().unwrap();
    let analytic: Vec<(String, Tensor, Vec<f64>)> = model
        .all_params()
        .into_iter()
        .map(|(name, p)| {
            let g = p.grad().expect("gradient reaches every parameter");
            (name, p, g)
        })
        .collect();
    model.zero_grad();

    let loss = || {
        stage1_batch_loss(&model, &data, &batch, true, 1.0)
            .unwrap()
            .0
            .item()
    };
    // Parameters upstream of the gradient reversal deliberately receive the
    // reversed speaker gradient, so their finite-difference oracle is the
    // pseudo-objective l_task + l_lang - lambda*l_spk; everything downstream
    // checks against the actual loss.
    let pseudo = || {
        training::stage1_pseudo_loss(&model, &data, &batch, 1.0)
            .unwrap()
            .item()
    };
    for (name, p, g) in &analytic {
        let coords = gradcheck::stride_coords(p.numel(), 48);
        let upstream_of_grl = name.starts_with("enc/") || name.starts_with("proj/");
        let numeric = if upstream_of_grl {
            gradcheck::numeric_grad_at(p, &coords, 1e-5, &pseudo)
        } else {
            gradcheck::numeric_grad_at(p, &coords, 1e-5, &loss)
        };
        let picked: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
        let err = gradcheck::max_rel_err(&picked, &numeric);
        assert!(err < 1e-5, "{name}: max relative error {err}");
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 30.0, "gradient check took {secs:.1}s");
    println!("criterion 1 (full-loss finite differences, {secs:.1}s): PASS");
}

#[test]
fn criterion_02_gradient_reversal_contract() {
    let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
    let c = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let r = x.grad_reverse(lambda).unwrap();
        assert_eq!(*r.data(), *x.data(), "forward identity must be bitwise");
        r.mul(&c).unwrap().sum().unwrap().backward().unwrap();
        let gx = x.grad().unwrap();
        for (i, g) in gx.iter().enumerate() {
            let upstream = c.data()[i];
            assert_eq!(*g, -lambda * upstream, "lambda={lambda} coord {i}");
            if lambda == 0.0 {
                assert_eq!(*g, 0.0);
            }
        }
        x.zero_grad();
    }
    println!("criterion 2 (gradient reversal contract): PASS");
}

#[test]
fn criterion_03_closed_form_loss_oracles() {
    for k in [3usize, 6, 48] {
        let logits = Tensor::zeros(&[2, k]);
        let l = logits.softmax_cross_entropy(&[0, k - 1]).unwrap().item();
        assert!(
            (l - (k as f64).ln()).abs() < 1e-9,
            "uniform CE for K={k}: {l}"
        );
    }
    let l_lang = Tensor::scalar(1.234567);
    let l_spk = Tensor::scalar(3.891011);
    let l_le = langemb::losses::le_loss(&l_lang, &l_spk).unwrap().item();
    assert!((l_le - (1.234567 + 3.891011)).abs() < 1e-12);
    println!("criterion 3 (closed-form loss oracles): PASS");
}

#[test]
fn criterion_04_multilingual_directional() {
    let ctx = &*CTX;
    let with_sat = &ctx.reports[&(true, true)];
    let without_sat = &ctx.reports[&(false, true)];
    assert!(
        with_sat.language_probe_accuracy >= 0.95,
        "language probe accuracy {:.4} < 0.95",
        with_sat.language_probe_accuracy
    );
    assert!(
        with_sat.token_error_rate <= without_sat.token_error_rate,
        "TER with SAT {:.4} > without {:.4}",
        with_sat.token_error_rate,
        without_sat.token_error_rate
    );
    println!(
        "criterion 4 (multilingual: lang probe {:.3}, TER {:.4} <= {:.4}): PASS",
        with_sat.language_probe_accuracy,
        with_sat.token_error_rate,
        without_sat.token_error_rate
    );
}

#[test]
fn criterion_05_speaker_disentanglement() {
    let ctx = &*CTX;
    let with_sat = &ctx.reports[&(true, true)];
    let without_sat = &ctx.reports[&(false, true)];
    let chance = 1.0 / TrainConfig::default().corpus.n_speakers as f64;
    assert!(
        with_sat.speaker_probe_accuracy <= chance + 0.10,
        "speaker probe with SAT {:.4} above chance+10 ({:.4})",
        with_sat.speaker_probe_accuracy,
        chance + 0.10
    );
    assert!(
        with_sat.speaker_probe_accuracy < without_sat.speaker_probe_accuracy,
        "speaker probe with SAT {:.4} not below without {:.4}",
        with_sat.speaker_probe_accuracy,
        without_sat.speaker_probe_accuracy
    );
    println!(
        "criterion 5 (speaker probe {:.3} <= chance+10, < {:.3} without SAT): PASS",
        with_sat.speaker_probe_accuracy, without_sat.speaker_probe_accuracy
    );
}

#[test]
fn criterion_06_projection_ablation() {
    let ctx = &*CTX;
    let proj_on = &ctx.reports[&(true, true)];
    let proj_off = &ctx.reports[&(true, false)];
    assert!(
        proj_on.silhouette_h_by_language > proj_off.silhouette_h_by_language,
        "silhouette with projection {:.4} not above truncated z {:.4}",
        proj_on.silhouette_h_by_language,
        proj_off.silhouette_h_by_language
    );
    let mut svgs = 0;
    for entry in std::fs::read_dir(ctx.out.join("plots")).unwrap().flatten() {
        if entry.file_name().to_string_lossy().ends_with(".svg") {
            svgs += 1;
        }
    }
    assert!(svgs >= 8, "expected 8 PCA SVGs, found {svgs}");
    println!(
        "criterion 6 (silhouette {:.3} > {:.3}, {svgs} SVGs): PASS",
        proj_on.silhouette_h_by_language, proj_off.silhouette_h_by_language
    );
}

#[test]
fn criterion_07_low_resource_transfer() {
    let ctx = &*CTX;
    for budget in [20usize, 120] {
        let (sat_on, sat_off, scratch) = ctx.transfer[&budget];
        assert!(
            sat_on < scratch,
            "budget {budget}: fine-tuned TER {sat_on:.4} not below scratch {scratch:.4}"
        );
        assert!(
            sat_on < sat_off,
            "budget {budget}: with-SAT TER {sat_on:.4} not below without-SAT {sat_off:.4}"
        );
    }
    assert!(
        ctx.baseline_unseen_is_hard_error,
        "language-ID baseline must hard-error on the unseen language"
    );
    let (b20, b120) = (ctx.transfer[&20], ctx.transfer[&120]);
    println!(
        "criterion 7 (transfer TER b20 {:.4}<{:.4}/{:.4}, b120 {:.4}<{:.4}/{:.4}, baseline errors): PASS",
        b20.0, b20.1, b20.2, b120.0, b120.1, b120.2
    );
}

#[test]
fn criterion_08_freezing_contract() {
    let ctx = &*CTX;
    for group in ["enc", "proj", "cls"] {
        assert_eq!(
            ctx.stage1_hashes[group], ctx.stage2_hashes[group],
            "group {group} changed between stage 1 and stage 2"
        );
    }
    assert_ne!(
        ctx.stage1_hashes["down"], ctx.stage2_hashes["down"],
        "the phoneme head should have trained in stage 2"
    );
    println!("criterion 8 (freeze hashes enc/proj/cls identical): PASS");
}

#[test]
fn criterion_09_determinism() {
    let mut cfg = small_corpus_config();
    cfg.stage1_steps = 60;
    cfg.stage2_steps = 30;
    cfg.pretrain_max_steps = 300;
    cfg.pretrain_accuracy_gate = 0.5;

    let run = |root: &std::path::Path| -> Vec<(String, String)> {
        let dataset = root.join("dataset");
        std::fs::create_dir_all(root.join("checkpoints")).unwrap();
        let manifest = build_corpus(&cfg, &dataset).unwrap();
        let data = TrainData::load(&dataset).unwrap();
        let enc = root.join("checkpoints/encoder.ldck");
        training::pretrain_encoder(&cfg, &data, &enc, &root.join("metrics_pretrain.csv")).unwrap();
        let s1 = root.join("checkpoints/stage1.ldck");
        training::train_stage1(&cfg, &data, &enc, &s1, &root.join("metrics.csv")).unwrap();
        let s2 = root.join("checkpoints/stage2.ldck");
        training::train_stage2(&cfg, &data, &s1, &s2, &root.join("metrics_stage2.csv")).unwrap();
        let tags = ConditionTags {
            sat_enabled: cfg.sat_enabled,
            projection_enabled: cfg.projection_enabled,
            budget: None,
        };
        let model = eval::load_condition_model(&cfg, &tags, &s1).unwrap();
        let report = eval::evaluate_condition(&model, &data, tags, cfg.seed).unwrap();
        report.save(&root.join("eval_report.json")).unwrap();

        let corpus = synthdata::corpus_hash(&dataset, &manifest).unwrap();
        let mut hashes = vec![("corpus".to_string(), langemb::config::hex(&corpus))];
        for rel in [
            "metrics_pretrain.csv",
            "metrics.csv",
            "metrics_stage2.csv",
            "checkpoints/encoder.ldck",
            "checkpoints/stage1.ldck",
            "checkpoints/stage2.ldck",
            "eval_report.json",
        ] {
            hashes.push((
                rel.to_string(),
                training::file_sha256(&root.join(rel)).unwrap(),
            ));
        }
        hashes
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run(dir_a.path());
    let b = run(dir_b.path());
    for ((name_a, hash_a), (_, hash_b)) in a.iter().zip(&b) {
        assert_eq!(hash_a, hash_b, "artifact {name_a} differs between runs");
    }
    println!("criterion 9 (determinism over {} artifacts): PASS", a.len());
}

#[test]
fn criterion_10_performance_envelope() {
    let ctx = &*CTX;
    assert!(
        ctx.pipeline_secs < 600.0,
        "single-threaded default pipeline took {:.0}s",
        ctx.pipeline_secs
    );
    println!(
        "criterion 10 (pipeline {:.0}s < 600s single-threaded): PASS",
        ctx.pipeline_secs
    );
}

fn mean_pooled_eval_frames(data: &TrainData) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let idx = data.manifest.indices(synthdata::Split::Eval, true);
    let mut feats = Vec::with_capacity(idx.len());
    let mut lang = Vec::with_capacity(idx.len());
    let mut spk = Vec::with_capacity(idx.len());
    for &i in &idx {
        let u = &data.utts[i];
        let mut mean = vec![0.0f64; u.feat_dim];
        for t in 0..u.n_frames {
            for d in 0..u.feat_dim {
                mean[d] += u.frames[t * u.feat_dim + d] / u.n_frames as f64;
            }
        }
        feats.push(mean);
        lang.push(u.y_lang);
        spk.push(u.y_spk);
    }
    (feats, lang, spk)
}

/// Corpus sanity: a probe on raw mean-pooled frames must see the speaker,
/// otherwise the adversarial branch has nothing to remove.
#[test]
fn corpus_exposes_speaker_information_in_raw_frames() {
    let ctx = &*CTX;
    let data = TrainData::load(&ctx.dataset).unwrap();
    let (feats, _, spk) = mean_pooled_eval_frames(&data);
    let chance = 1.0 / TrainConfig::default().corpus.n_speakers as f64;
    let r = eval::linear_probe(&feats, &spk, 424242).unwrap();
    assert!(
        r.accuracy >= chance + 0.20,
        "raw-frame speaker probe {:.4} does not beat chance ({:.4}) by 20 points",
        r.accuracy,
        chance
    );
    println!(
        "corpus check (raw-frame speaker probe {:.3} >= chance+20): PASS",
        r.accuracy
    );
}

/// Corpus sanity: the languages are linearly separable from raw mean-pooled
/// frames, so the corpus is learnable by construction.
#[test]
fn corpus_is_language_separable_from_raw_frames() {
    let ctx = &*CTX;
    let data = TrainData::load(&ctx.dataset).unwrap();
    let (feats, lang, _) = mean_pooled_eval_frames(&data);
    let r = eval::linear_probe(&feats, &lang, 424243).unwrap();
    assert!(
        r.accuracy >= 0.90,
        "raw-frame language probe {:.4} below 0.90",
        r.accuracy
    );
    println!(
        "corpus check (raw-frame language probe {:.3} >= 0.90): PASS",
        r.accuracy
    );
}
