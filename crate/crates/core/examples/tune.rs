//! Scratch diagnostics (not part of the deliverable).

use std::path::PathBuf;

use langemb::config::TrainConfig;
use langemb::eval::{self, linear_probe, silhouette, ConditionTags};
use langemb::par::set_parallel;
use langemb::synthdata::{self, build_corpus};
use langemb::training::{self, TrainData};

fn main() {
    set_parallel(true);
    let args: Vec<String> = std::env::args().collect();
    let cmd = args.get(1).map(|s| s.as_str()).unwrap_or("help");
    let root = PathBuf::from(
        std::env::var("TUNE_ROOT").unwrap_or_else(|_| "/tmp/tune".into()),
    );
    let mut cfg = TrainConfig::default();
    if let Ok(s) = std::env::var("TUNE_SEED") {
        cfg.seed = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("TUNE_RAMP") {
        cfg.grl_ramp_steps = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("TUNE_REFRESH") {
        cfg.stage1_head_refresh_steps = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("TUNE_HOLDOUT") {
        cfg.corpus.held_out_speakers_per_language = s.parse().unwrap();
    }
    match cmd {
        "prep" => {
            let mut cfg = cfg.clone();
            if let Some(steps) = args.get(2) {
                cfg.pretrain_max_steps = steps.parse().unwrap();
            }
            std::fs::create_dir_all(root.join("checkpoints")).unwrap();
            let dataset = root.join("dataset");
            if !dataset.join("manifest.json").exists() {
                build_corpus(&cfg, &dataset).unwrap();
                println!("corpus built");
            }
            let data = TrainData::load(&dataset).unwrap();
            let enc = root.join("checkpoints/encoder.ldck");
            if !enc.exists() {
                let t0 = std::time::Instant::now();
                let out = training::pretrain_encoder(
                    &cfg,
                    &data,
                    &enc,
                    &root.join("metrics_pretrain.csv"),
                )
                .unwrap();
                println!(
                    "pretrain: {} steps, acc {:.4}, {:.1}s",
                    out.steps_run,
                    out.final_accuracy,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "s1" => {
            // s1 <lambda> <sat:on|off> <proj:on|off> [tag]
            let lambda: f64 = args[2].parse().unwrap();
            let sat = args[3] == "on";
            let proj = args[4] == "on";
            let tag = args.get(5).cloned().unwrap_or_else(|| "x".into());
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let mut c = cfg.clone();
            c.grl_lambda = lambda;
            c.sat_enabled = sat;
            c.projection_enabled = proj;
            let enc = root.join("checkpoints/encoder.ldck");
            let ck = root.join(format!("checkpoints/s1_{tag}.ldck"));
            let t0 = std::time::Instant::now();
            let out = training::train_stage1(
                &c,
                &data,
                &enc,
                &ck,
                &root.join(format!("metrics_s1_{tag}.csv")),
            )
            .unwrap();
            // l_spk trajectory in 500-step windows
            let r = &out.reports;
            for w in (0..r.len()).step_by(500) {
                let end = (w + 500).min(r.len());
                let n = (end - w) as f64;
                let ms: f64 = r[w..end].iter().map(|x| x.l_spk).sum::<f64>() / n;
                let ml: f64 = r[w..end].iter().map(|x| x.l_lang).sum::<f64>() / n;
                let mt: f64 = r[w..end].iter().map(|x| x.l_task).sum::<f64>() / n;
                println!("  steps {w}..{end}: l_lang {ml:.3} l_spk {ms:.3} l_task {mt:.3}");
            }
            let tags = ConditionTags {
                sat_enabled: sat,
                projection_enabled: proj,
                budget: None,
            };
            let model = eval::load_condition_model(&c, &tags, &ck).unwrap();
            let eval_idx = data.manifest.indices(synthdata::Split::Eval, true);
            let emb = eval::extract_embeddings(&model, &data, &eval_idx).unwrap();
            let lp = linear_probe(&emb.h, &emb.lang, c.seed ^ 0x4C50).unwrap();
            let sp = linear_probe(&emb.h, &emb.spk, c.seed ^ 0x5350).unwrap();
            let spz = linear_probe(&emb.z, &emb.spk, c.seed ^ 0x5350).unwrap();
            let spks = synthdata::make_speaker_specs(c.corpus.n_speakers, c.seed);
            let pitch: Vec<usize> = emb
                .spk
                .iter()
                .map(|&s| (spks[s].pitch_offset + 2) as usize)
                .collect();
            let tilt: Vec<usize> = emb
                .spk
                .iter()
                .map(|&s| (spks[s].spectral_tilt > 0.0) as usize)
                .collect();
            let gain: Vec<usize> = emb
                .spk
                .iter()
                .map(|&s| (spks[s].gain > 0.0) as usize)
                .collect();
            let pp = linear_probe(&emb.h, &pitch, 99).unwrap();
            let tp = linear_probe(&emb.h, &tilt, 99).unwrap();
            let gp = linear_probe(&emb.h, &gain, 99).unwrap();
            println!(
                "  factor probes on h: pitch {:.4} tilt-sign {:.4} gain-sign {:.4}",
                pp.accuracy, tp.accuracy, gp.accuracy
            );
            let sil_h = silhouette(&emb.h, &emb.lang).unwrap();
            let sil_z = silhouette(&emb.z, &emb.lang).unwrap();
            let (ter, _) = eval::ter_over(&model, &data, &eval_idx, Some(48)).unwrap();
            println!(
                "s1_{tag} lam={lambda} sat={sat} proj={proj}: lang_probe {:.4} spk_probe_h {:.4} spk_probe_z {:.4} sil_h {:.4} sil_z {:.4} TER {:.4} ({:.0}s)",
                lp.accuracy,
                sp.accuracy,
                spz.accuracy,
                sil_h,
                sil_z,
                ter,
                t0.elapsed().as_secs_f64()
            );
        }
        "s1adv" => {
            // s1adv <lambda> <K extra adversary steps>
            use langemb::losses;
            use langemb::model::{Group, ModelDims, ModelGraph};
            use langemb::training::Adam;
            use langemb::tensor::Tensor;
            use rand::{Rng, SeedableRng};
            use rand_chacha::ChaCha8Rng;
            let lambda: f64 = args[2].parse().unwrap();
            let k_adv: usize = args[3].parse().unwrap();
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let mut c = cfg.clone();
            c.grl_lambda = lambda;
            let dims = ModelDims::from_corpus(&c.corpus);
            let model = ModelGraph::new(dims, true, true, c.seed);
            model
                .load_checkpoint(&root.join("checkpoints/encoder.ldck"))
                .unwrap();
            let train_idx = data.manifest.indices(synthdata::Split::Train, true);
            let mut z_cache: Vec<Option<Vec<f64>>> = vec![None; data.utts.len()];
            for &i in &train_idx {
                let z = model.encode(&data.frames_tensor(i)).unwrap();
                z_cache[i] = Some(z.data().clone());
            }
            let spk_params: Vec<Tensor> = model
                .params_in(Group::Classifiers)
                .into_iter()
                .filter(|(n, _)| n.contains("spk"))
                .map(|(_, t)| t)
                .collect();
            let main_params: Vec<Tensor> = [Group::Projection, Group::Classifiers, Group::Downstream]
                .iter()
                .flat_map(|g| model.params_in(*g))
                .filter(|(n, _)| !n.contains("spk"))
                .map(|(_, t)| t)
                .collect();
            let mut opt_main = Adam::from_config(main_params, &c);
            let mut adv_cfg = c.clone();
            adv_cfg.learning_rate *= args
                .get(4)
                .map(|s| s.parse::<f64>().unwrap())
                .unwrap_or(1.0);
            let mut opt_adv = Adam::from_config(spk_params, &adv_cfg);
            let mut batch_rng = ChaCha8Rng::seed_from_u64(synthdata::mix2(c.seed, 0x42415431));
            let t0 = std::time::Instant::now();
            let mut lspk_win = 0.0;
            for step in 0..c.stage1_steps {
                let batch: Vec<usize> = (0..c.batch_size)
                    .map(|_| train_idx[batch_rng.gen_range(0..train_idx.len())])
                    .collect();
                let mut hs = Vec::new();
                let mut task_terms = Vec::new();
                let mut y_lang = Vec::new();
                let mut y_spk = Vec::new();
                for &i in &batch {
                    let z = Tensor::from_vec(&[64], z_cache[i].clone().unwrap()).unwrap();
                    let h = model.project(&z).unwrap();
                    let frames = data.frames_tensor(i);
                    let logits = model.phoneme_logits(&frames, &h).unwrap();
                    task_terms.push(
                        logits
                            .softmax_cross_entropy(&data.global_phonemes(i))
                            .unwrap(),
                    );
                    hs.push(h);
                    y_lang.push(data.utts[i].y_lang);
                    y_spk.push(data.utts[i].y_spk);
                }
                let h_batch = Tensor::stack_rows(&hs).unwrap();
                let (lang_logits, spk_logits) =
                    model.forward_heads(&h_batch, true, lambda).unwrap();
                let l_lang = losses::language_loss(&lang_logits, &y_lang).unwrap();
                let l_spk = losses::speaker_loss(&spk_logits, &y_spk).unwrap();
                let l_le = losses::le_loss(&l_lang, &l_spk).unwrap();
                let mut acc = task_terms[0].clone();
                for t in &task_terms[1..] {
                    acc = acc.add(t).unwrap();
                }
                let l_task = acc.scale(1.0 / task_terms.len() as f64).unwrap();
                let total = l_task.add(&l_le).unwrap();
                lspk_win += l_spk.item();
                if (step + 1) % 500 == 0 {
                    println!("  step {}: l_spk(win) {:.3}", step + 1, lspk_win / 500.0);
                    lspk_win = 0.0;
                }
                total.backward().unwrap();
                opt_main.step().unwrap();
                opt_adv.step().unwrap();
                model.zero_grad();
                // extra adversary-only updates on fresh larger batches
                for _ in 0..k_adv {
                    let big: Vec<usize> = (0..256)
                        .map(|_| train_idx[batch_rng.gen_range(0..train_idx.len())])
                        .collect();
                    let mut hs = Vec::new();
                    let mut ys = Vec::new();
                    for &i in &big {
                        let z = Tensor::from_vec(&[64], z_cache[i].clone().unwrap()).unwrap();
                        let h = model.project(&z).unwrap();
                        hs.push(Tensor::from_vec(&[32], h.data().clone()).unwrap());
                        ys.push(data.utts[i].y_spk);
                    }
                    let hb = Tensor::stack_rows(&hs).unwrap();
                    let (_, spk_logits) = model.forward_heads(&hb, false, 0.0).unwrap();
                    let l = losses::speaker_loss(&spk_logits, &ys).unwrap();
                    l.backward().unwrap();
                    opt_adv.step().unwrap();
                    model.zero_grad();
                }
            }
            println!("  trained in {:.0}s", t0.elapsed().as_secs_f64());
            let eval_idx = data.manifest.indices(synthdata::Split::Eval, true);
            let emb = eval::extract_embeddings(&model, &data, &eval_idx).unwrap();
            let lp = linear_probe(&emb.h, &emb.lang, c.seed ^ 0x4C50).unwrap();
            let sp = linear_probe(&emb.h, &emb.spk, c.seed ^ 0x5350).unwrap();
            let sil_h = silhouette(&emb.h, &emb.lang).unwrap();
            let (ter, _) = eval::ter_over(&model, &data, &eval_idx, Some(48)).unwrap();
            println!(
                "s1adv lam={lambda} K={k_adv}: lang_probe {:.4} spk_probe_h {:.4} sil_h {:.4} TER {:.4}",
                lp.accuracy, sp.accuracy, sil_h, ter
            );
        }
        "consol" => {
            // consol <s1tag> <steps> [lr]: refresh the phoneme head on the
            // frozen stage-1 embedding using seen train batches, then report
            // seen-eval TER
            use langemb::model::Group;
            use langemb::tensor::Tensor;
            use langemb::training::Adam;
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            use rand_chacha::ChaCha8Rng;
            let tag = args[2].clone();
            let steps: usize = args[3].parse().unwrap();
            let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(cfg.learning_rate);
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let tags = ConditionTags {
                sat_enabled: true,
                projection_enabled: true,
                budget: None,
            };
            let m = eval::load_condition_model(
                &cfg,
                &tags,
                &root.join(format!("checkpoints/s1_{tag}.ldck")),
            )
            .unwrap();
            let train_idx = data.manifest.indices(synthdata::Split::Train, true);
            let params: Vec<Tensor> = m
                .params_in(Group::Downstream)
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            let mut opt = Adam::new(params, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0501);
            for _ in 0..steps {
                let batch: Vec<usize> = train_idx
                    .choose_multiple(&mut rng, cfg.batch_size)
                    .copied()
                    .collect();
                let (loss, _) =
                    training::stage1_batch_loss(&m, &data, &batch, false, 0.0).unwrap();
                loss.backward().unwrap();
                opt.step();
                m.zero_grad();
            }
            let eval_idx = data.manifest.indices(synthdata::Split::Eval, true);
            let n_seen = data.manifest.n_seen_languages * data.manifest.n_phonemes;
            let (ter, _) = eval::ter_over(&m, &data, &eval_idx, Some(n_seen)).unwrap();
            println!("consol_{tag} steps={steps} lr={lr}: seen-eval TER {ter:.8}");
        }
        "raw" => {
            // linear probes on raw mean-pooled eval frames (corpus invariants)
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let idx = data.manifest.indices(synthdata::Split::Eval, true);
            let mut feats = Vec::new();
            let mut lang = Vec::new();
            let mut spk = Vec::new();
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
            let rl = linear_probe(&feats, &lang, 424243).unwrap();
            let rs = linear_probe(&feats, &spk, 424242).unwrap();
            println!("raw-frame probes: lang {:.4} spk {:.4}", rl.accuracy, rs.accuracy);
        }
        "ter" => {
            // ter <s1tag>: seen-eval TER of an existing stage-1 checkpoint
            let tag = args[2].clone();
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let tags = ConditionTags {
                sat_enabled: true,
                projection_enabled: true,
                budget: None,
            };
            let m = eval::load_condition_model(
                &cfg,
                &tags,
                &root.join(format!("checkpoints/s1_{tag}.ldck")),
            )
            .unwrap();
            let eval_idx = data.manifest.indices(synthdata::Split::Eval, true);
            let n_seen = data.manifest.n_seen_languages * data.manifest.n_phonemes;
            let (ter, per) = eval::ter_over(&m, &data, &eval_idx, Some(n_seen)).unwrap();
            println!("s1_{tag}: seen-eval TER {ter:.8} per-lang {per:?}");
        }
        "diag" => {
            // diag <s1tag>: h statistics on unseen vs seen language
            let tag = args[2].clone();
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let tags = ConditionTags {
                sat_enabled: true,
                projection_enabled: true,
                budget: None,
            };
            let s1 = root.join(format!("checkpoints/s1_{tag}.ldck"));
            let m = eval::load_condition_model(&cfg, &tags, &s1).unwrap();
            for (name, idx) in [
                ("unseen-eval", data.manifest.unseen_eval_indices()),
                (
                    "seen-eval",
                    data.manifest.indices(synthdata::Split::Eval, true),
                ),
            ] {
                let roster = synthdata::make_speaker_specs(cfg.corpus.n_speakers, cfg.seed);
                let mut hs: Vec<Vec<f64>> = Vec::new();
                let mut spk: Vec<usize> = Vec::new();
                let mut shift: Vec<usize> = Vec::new();
                for &i in &idx {
                    let z = m.encode(&data.frames_tensor(i)).unwrap();
                    let h = m.project(&z).unwrap();
                    hs.push(h.data().clone());
                    spk.push(data.utts[i].y_spk);
                    shift
                        .push((roster[data.utts[i].y_spk].pitch_offset + 2) as usize);
                }
                let n = hs.len() as f64;
                let d = hs[0].len();
                let mean: Vec<f64> = (0..d)
                    .map(|j| hs.iter().map(|h| h[j]).sum::<f64>() / n)
                    .collect();
                let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                let avg_dev = hs
                    .iter()
                    .map(|h| {
                        h.iter()
                            .zip(&mean)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .sum::<f64>()
                    / n;
                let dead = (0..d).filter(|&j| hs.iter().all(|h| h[j] == 0.0)).count();
                let spk_acc = linear_probe(&hs, &spk, 77).unwrap().accuracy;
                let shift_acc = linear_probe(&hs, &shift, 78).unwrap().accuracy;
                println!(
                    "{name}: n {} mean-norm {mean_norm:.3} avg-dev {avg_dev:.3} dead-dims {dead} spk-probe {spk_acc:.3} shift-probe {shift_acc:.3}",
                    idx.len()
                );
                if name == "unseen-eval" {
                    // per-shift cluster geometry: center norms, within-cluster
                    // deviation, min distance between cluster centers
                    let mut centers: Vec<Vec<f64>> = Vec::new();
                    let mut devs: Vec<f64> = Vec::new();
                    for s in 0..5usize {
                        let members: Vec<&Vec<f64>> = hs
                            .iter()
                            .zip(&shift)
                            .filter(|(_, &sh)| sh == s)
                            .map(|(h, _)| h)
                            .collect();
                        if members.is_empty() {
                            continue;
                        }
                        let m = members.len() as f64;
                        let c: Vec<f64> = (0..d)
                            .map(|j| members.iter().map(|h| h[j]).sum::<f64>() / m)
                            .collect();
                        let dev = members
                            .iter()
                            .map(|h| {
                                h.iter()
                                    .zip(&c)
                                    .map(|(a, b)| (a - b) * (a - b))
                                    .sum::<f64>()
                                    .sqrt()
                            })
                            .sum::<f64>()
                            / m;
                        devs.push(dev);
                        centers.push(c);
                    }
                    let mut min_gap = f64::INFINITY;
                    for i in 0..centers.len() {
                        for j in i + 1..centers.len() {
                            let gap: f64 = centers[i]
                                .iter()
                                .zip(&centers[j])
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt();
                            min_gap = min_gap.min(gap);
                        }
                    }
                    println!(
                        "  shift clusters: within-dev {:?} min-center-gap {min_gap:.2}",
                        devs.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<f64>>()
                    );
                    // few-shot readout: train a probe on the 20-utterance
                    // budget's embeddings, score it on the eval embeddings
                    let budget = training::budget_indices(&data.manifest, 20);
                    let mut tr_h: Vec<Vec<f64>> = Vec::new();
                    let mut tr_y: Vec<usize> = Vec::new();
                    for &i in &budget {
                        let z = m.encode(&data.frames_tensor(i)).unwrap();
                        let h = m.project(&z).unwrap();
                        tr_h.push(h.data().clone());
                        tr_y.push((roster[data.utts[i].y_spk].pitch_offset + 2) as usize);
                    }
                    let acc = fewshot_probe(&tr_h, &tr_y, &hs, &shift);
                    println!("  few-shot shift readout from budget-20: {acc:.3}");
                }
            }
        }
        "s2" => {
            // s2 <budget> <s1tag> [steps]
            let budget: usize = args[2].parse().unwrap();
            let tag = args[3].clone();
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let mut c = cfg.clone();
            c.low_resource_budget = budget;
            if let Some(s) = args.get(4) {
                c.stage2_steps = s.parse().unwrap();
            }
            if let Some(s) = args.get(5) {
                c.learning_rate = s.parse().unwrap();
            }
            let s1 = root.join(format!("checkpoints/s1_{tag}.ldck"));
            let s2 = root.join(format!("checkpoints/s2_{tag}_b{budget}.ldck"));
            let t0 = std::time::Instant::now();
            training::train_stage2(
                &c,
                &data,
                &s1,
                &s2,
                &root.join(format!("metrics_s2_{tag}_b{budget}.csv")),
            )
            .unwrap();
            let tags = ConditionTags {
                sat_enabled: true,
                projection_enabled: true,
                budget: Some(budget),
            };
            let m = eval::load_condition_model(&c, &tags, &s2).unwrap();
            let train_idx = training::budget_indices(&data.manifest, budget);
            let (ter_tr, _) = eval::ter_over(&m, &data, &train_idx, None).unwrap();
            let idx = data.manifest.unseen_eval_indices();
            let (ter, _) = eval::ter_over(&m, &data, &idx, None).unwrap();
            println!(
                "s2_{tag}_b{budget}: train-TER {ter_tr:.4} eval-TER {ter:.4} ({:.0}s)",
                t0.elapsed().as_secs_f64()
            );
        }
        "scratch" => {
            let budget: usize = args[2].parse().unwrap();
            let data = TrainData::load(&root.join("dataset")).unwrap();
            let mut c = cfg.clone();
            c.low_resource_budget = budget;
            if let Some(s) = args.get(3) {
                c.stage2_steps = s.parse().unwrap();
            }
            if let Some(s) = args.get(4) {
                c.learning_rate = s.parse().unwrap();
            }
            let t0 = std::time::Instant::now();
            let m = training::train_scratch_lowresource(&c, &data).unwrap();
            let train_idx = training::budget_indices(&data.manifest, budget);
            let (ter_tr, _) = eval::ter_over(&m, &data, &train_idx, None).unwrap();
            let idx = data.manifest.unseen_eval_indices();
            let (ter, _) = eval::ter_over(&m, &data, &idx, None).unwrap();
            println!(
                "scratch_b{budget}: train-TER {ter_tr:.4} eval-TER {ter:.4} ({:.0}s)",
                t0.elapsed().as_secs_f64()
            );
        }
        other => {
            eprintln!("unknown command {other}");
            std::process::exit(1);
        }
    }
}

// softmax regression trained on a fixed tiny train set, scored on a fixed
// test set (the library probe does its own random split, which we don't want
// for the few-shot question)
fn fewshot_probe(
    tr_x: &[Vec<f64>],
    tr_y: &[usize],
    te_x: &[Vec<f64>],
    te_y: &[usize],
) -> f64 {
    let d = tr_x[0].len();
    let k = tr_y.iter().chain(te_y).max().unwrap() + 1;
    let mut w = vec![0.0f64; d * k];
    let mut b = vec![0.0f64; k];
    let lr = 0.1;
    for _ in 0..500 {
        let mut gw = vec![0.0f64; d * k];
        let mut gb = vec![0.0f64; k];
        for (x, &y) in tr_x.iter().zip(tr_y) {
            let mut logits = vec![0.0f64; k];
            for c in 0..k {
                logits[c] = b[c] + (0..d).map(|j| x[j] * w[j * k + c]).sum::<f64>();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in logits.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for c in 0..k {
                let err = logits[c] / sum - if c == y { 1.0 } else { 0.0 };
                gb[c] += err;
                for j in 0..d {
                    gw[j * k + c] += err * x[j];
                }
            }
        }
        let scale = lr / tr_x.len() as f64;
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= scale * gv;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= scale * gv;
        }
    }
    let mut correct = 0usize;
    for (x, &y) in te_x.iter().zip(te_y) {
        let mut best = 0;
        let mut bestv = f64::NEG_INFINITY;
        for c in 0..k {
            let v = b[c] + (0..d).map(|j| x[j] * w[j * k + c]).sum::<f64>();
            if v > bestv {
                bestv = v;
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / te_x.len() as f64
}
