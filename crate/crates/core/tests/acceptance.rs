//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to stderr
//! (uncaptured) before asserting, so `cargo test --test acceptance` shows
//! every verdict even when some fail.

mod common;

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use failsense::arbitration::{truth_table, vote, VoteConfig};
use failsense::backbone::{select_fs_layers, vocab, Backbone, BackboneConfig, Prompt};
use failsense::dataset::synth::{generate_control_failures, generate_smf, GenConfig};
use failsense::dataset::{sample_frames, sample_indices, tile, untile, Split};
use failsense::evalcli::{confusion, evaluate, f1_from, metrics, Mode};
use failsense::fs_blocks::{FsConfig, FsHeads};
use failsense::nn::{Mat, Params, Real};
use failsense::training::{
    evaluate_stage1, stage1_loss, stage1_loss_and_grad, stage2_loss_and_grad, train_stage1, train_stage2,
    FeatureCache, HeadInputs, PatchCache, Stage1Config, Stage2Config,
};
use failsense::worldgen::{Catalog, Frame, Pov, SceneSpec, World, WorldConfig};

const VOTE_SAMPLES: usize = 1000;
const VOTE_BUDGET: Duration = Duration::from_secs(1);
const LORA_IDENTITY_ABS: f64 = 1e-6;
const MERGE_REL: f64 = 1e-5;
const PROMPTS: usize = 20;
const STAGE2_STEPS: usize = 10;
const FD_STEP: f64 = 1e-5;
const FD_REL: f64 = 1e-4;
const FD_MIN_SCALARS: usize = 25;
const TILING_CASES: usize = 100;
const F1_PUBLISHED: f64 = 0.9132;
const F1_TOL: f64 = 0.0005;
const EASY_ACCURACY: f64 = 0.85;
const EASY_EPOCHS: usize = 20;
const EASY_BUDGET: Duration = Duration::from_secs(30 * 60);
const HARD_SEEDS: [u64; 3] = [0, 1, 2];
const HARD_STAGE1_EPOCHS: usize = 5;
const ABLATION_SLACK: f64 = 0.01;
const CONTROL_SET: usize = 200;
const DETECTION_CHANCE: f64 = 0.5;

/// The long training runs share the machine one at a time so wall-clock
/// budgets are not distorted by each other.
static HEAVY: Mutex<()> = Mutex::new(());

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] C{id:02} {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn random_frame(h: usize, w: usize, rng: &mut impl Rng) -> Frame {
    Frame {
        height: h,
        width: w,
        data: (0..3 * h * w).map(|_| rng.random()).collect(),
    }
}

fn instructions() -> Vec<String> {
    Catalog::full(3).unwrap().all_instructions()
}

fn tensor_hashes<T: Real>(m: &impl Params<T>, keep: impl Fn(&str) -> bool) -> Vec<(String, String)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, p| {
        if keep(&n) {
            let mut h = Sha256::new();
            for v in &p.value.data {
                h.update(v.to_f64().to_le_bytes());
            }
            out.push((n, hex::encode(h.finalize())));
        }
    });
    out
}

fn max_abs_diff(a: &Mat<f32>, b: &Mat<f32>) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

#[test]
fn c01_voting_truth_table() {
    let start = Instant::now();
    let cfg = VoteConfig::default();
    let table = truth_table(&cfg).unwrap();
    let mut table_ok = table.len() == 16;
    for (y_vlm, votes, _, y_hat) in &table {
        let blocks = votes.iter().filter(|&&v| v == 1).count();
        let expected = (*y_vlm == 1 && blocks >= 1) || blocks == 3;
        table_ok &= *y_hat == u8::from(expected);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut scaling_ok, mut monotone_ok) = (true, true);
    for _ in 0..VOTE_SAMPLES {
        let k = rng.random_range(1..=6);
        let cfg = VoteConfig {
            k,
            weights: (0..k).map(|_| rng.random_range(0.05..5.0)).collect(),
            vlm_weight: rng.random_range(0.05..5.0),
        };
        let y_vlm = rng.random_range(0..2u8);
        let votes: Vec<u8> = (0..k).map(|_| rng.random_range(0..2u8)).collect();
        let base = vote(y_vlm, &votes, &cfg).unwrap();
        let c = rng.random_range(0.01..100.0);
        let scaled = VoteConfig {
            k,
            weights: cfg.weights.iter().map(|w| w * c).collect(),
            vlm_weight: cfg.vlm_weight * c,
        };
        scaling_ok &= vote(y_vlm, &votes, &scaled).unwrap() == base;
        for i in 0..k {
            if votes[i] == 0 {
                let mut up = votes.clone();
                up[i] = 1;
                monotone_ok &= vote(y_vlm, &up, &cfg).unwrap() >= base;
            }
        }
        if y_vlm == 0 {
            monotone_ok &= vote(1, &votes, &cfg).unwrap() >= base;
        }
    }
    let elapsed = start.elapsed();
    let pass = table_ok && scaling_ok && monotone_ok && elapsed < VOTE_BUDGET;
    verdict(
        1,
        "voting truth table",
        pass,
        &format!("table={table_ok} scaling={scaling_ok} monotone={monotone_ok} samples={VOTE_SAMPLES} elapsed={elapsed:?}"),
    );
    assert!(pass);
}

#[test]
fn c02_lora_contracts() {
    let cfg = BackboneConfig::default();
    let base: Backbone<f32> = Backbone::new(cfg.clone()).unwrap();
    let mut bare = base.clone();
    for b in &mut bare.lm.blocks {
        for lin in b.kqv_mut() {
            lin.lora = None;
        }
    }
    let mut adapted = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in &mut adapted.lm.blocks {
        for lin in b.kqv_mut() {
            let l = lin.lora.as_mut().unwrap();
            l.b.value = Mat::randn(l.b.value.rows, l.b.value.cols, 0.05, &mut rng);
        }
    }
    let merged = adapted.merged().unwrap();

    let phrases = instructions();
    let (mut identity, mut merge) = (0.0f64, 0.0f64);
    for _ in 0..PROMPTS {
        let image = random_frame(32, 128, &mut rng);
        let text = &phrases[rng.random_range(0..phrases.len())];
        let p = base.build_prompt(&image, text).unwrap();
        let a = base.forward(&p).unwrap().logits;
        let b = bare.forward(&p).unwrap().logits;
        identity = identity.max(max_abs_diff(&a, &b));
        let x = adapted.forward(&p).unwrap().logits;
        let y = merged.forward(&p).unwrap().logits;
        let scale = x.data.iter().map(|v| v.abs() as f64).fold(0.0, f64::max).max(1e-12);
        merge = merge.max(max_abs_diff(&x, &y) / scale);
    }
    let pass = identity <= LORA_IDENTITY_ABS && merge <= MERGE_REL;
    verdict(
        2,
        "LoRA contracts",
        pass,
        &format!("zero-B max |diff| = {identity:.3e} (<= {LORA_IDENTITY_ABS:e}), merge max rel = {merge:.3e} (<= {MERGE_REL:e}) over {PROMPTS} prompts"),
    );
    assert!(pass);
}

#[test]
fn c03_freeze_contracts() {
    let data = GenConfig {
        demos: 16,
        ..GenConfig::smf_easy(3)
    };
    let m = generate_smf(&data).unwrap();
    let train = m.split(Split::Train);
    let mut model: Backbone<f32> = Backbone::new(BackboneConfig::default()).unwrap();
    model.set_stage1_trainable();
    let trainable = model.trainable_set();
    let frozen = |n: &str| !trainable.iter().any(|t| t == n);
    let before = tensor_hashes(&model, frozen);
    let trainable_before = tensor_hashes(&model, |n| !frozen(n));
    let cfg = Stage1Config {
        epochs: 1,
        batch_size: 8,
        ..Stage1Config::default()
    };
    train_stage1(&mut model, &train, &[], &cfg, 3, &mut |_| {}).unwrap();
    let after = tensor_hashes(&model, frozen);
    let stage1_ok = before == after;
    let moved = trainable_before != tensor_hashes(&model, |n| !frozen(n));
    let covers_base = before.iter().any(|(n, _)| n.starts_with("vision"))
        && before.iter().any(|(n, _)| n.starts_with("lm") && !n.contains("lora"));

    let hash = model.hash().unwrap();
    let everything = tensor_hashes(&model, |_| true);
    let s2 = Stage2Config {
        epochs: 1,
        batch_size: 2,
        ..Stage2Config::default()
    };
    let steps_train: Vec<_> = train.iter().copied().take(2 * STAGE2_STEPS).collect();
    let (heads, _) = train_stage2(&model, &hash, &steps_train, &[], &s2, 3, None, &mut |_| {}).unwrap();
    let stage2_ok = model.hash().unwrap() == hash && tensor_hashes(&model, |_| true) == everything;
    let pass = stage1_ok && moved && covers_base && stage2_ok && !heads.is_empty();
    verdict(
        3,
        "freeze contracts",
        pass,
        &format!(
            "stage 1: {} frozen tensors identical={stage1_ok}, trainable moved={moved}; stage 2: backbone identical after {STAGE2_STEPS} steps={stage2_ok}",
            before.len()
        ),
    );
    assert!(pass);
}

fn small_backbone() -> Backbone<f64> {
    let cfg = BackboneConfig {
        d_model: 16,
        n_layers: 3,
        n_heads: 2,
        d_ff: 24,
        vision_width: 12,
        vision_heads: 2,
        projector_hidden: 10,
        max_seq_len: 32,
        lora_rank: 2,
        seed: 11,
        ..BackboneConfig::default()
    };
    let mut m: Backbone<f64> = Backbone::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for b in &mut m.lm.blocks {
        for lin in b.kqv_mut() {
            let l = lin.lora.as_mut().unwrap();
            l.b.value = Mat::randn(l.b.value.rows, l.b.value.cols, 0.3, &mut rng);
        }
    }
    m.set_stage1_trainable();
    m
}

/// Perturbs one scalar of the parameter called `name`, returning its gradient.
fn nudge<T: Real, P: Params<T>>(m: &mut P, name: &str, idx: usize, delta: f64) -> f64 {
    let mut g = 0.0;
    m.visit_mut("", &mut |n, p| {
        if n == name {
            g = p.grad.data[idx].to_f64();
            p.value.data[idx] = T::from_f64(p.value.data[idx].to_f64() + delta);
        }
    });
    g
}

/// Worst relative error and number of informative scalars over `samples`
/// random draws.
fn fd_check<P: Params<f64> + Clone>(
    model: &P,
    loss: impl Fn(&P) -> f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    let mut names = Vec::new();
    model.visit("", &mut |n, p| {
        if p.trainable {
            names.push((n, p.value.len()))
        }
    });
    let (mut worst, mut checked) = (0.0f64, 0);
    for _ in 0..samples {
        let (name, len) = names[rng.random_range(0..names.len())].clone();
        let idx = rng.random_range(0..len);
        let mut probe = model.clone();
        let analytic = nudge(&mut probe, &name, idx, FD_STEP);
        let up = loss(&probe);
        nudge(&mut probe, &name, idx, -2.0 * FD_STEP);
        let fd = (up - loss(&probe)) / (2.0 * FD_STEP);
        let scale = fd.abs().max(analytic.abs());
        if scale > 1e-7 {
            worst = worst.max((fd - analytic).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn c04_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = small_backbone();
    let phrases = instructions();
    let prompts: Vec<Prompt<f64>> = (0..3)
        .map(|i| {
            let img = random_frame(16, 32, &mut rng);
            model.build_prompt(&img, &phrases[i * 5 % phrases.len()]).unwrap()
        })
        .collect();
    let refs: Vec<&Prompt<f64>> = prompts.iter().collect();
    let (s, f) = (model.vocab.special(vocab::SUCCESS), model.vocab.special(vocab::FAIL));
    let targets = vec![vec![s], vec![f], vec![s]];
    model.zero_grad();
    stage1_loss_and_grad(&mut model, &refs, &targets).unwrap();
    let (worst1, n1) = fd_check(&model, |m| stage1_loss(m, &refs, &targets).unwrap(), 40, &mut rng);

    let run = model.run_batch(&refs).unwrap();
    let layers = select_fs_layers(model.n_layers(), 3).unwrap();
    let inputs = HeadInputs {
        features: layers.iter().map(|&l| run.lm.hidden[l].clone()).collect(),
        seqs: run.seqs.clone(),
    };
    let fs = FsConfig {
        d_model: 16,
        pool_heads: 2,
        d_pool: 8,
        residual_blocks: 2,
        residual_hidden: 12,
        dropout: 0.0,
    };
    let mut heads: FsHeads<f64> = FsHeads::new(&fs, layers, &mut rng).unwrap();
    let labels = [1u8, 0, 1];
    heads.zero_grad();
    stage2_loss_and_grad(&mut heads, &inputs, &labels, None).unwrap();
    let loss2 = |h: &FsHeads<f64>| {
        let mut h = h.clone();
        stage2_loss_and_grad(&mut h, &inputs, &labels, None).unwrap().0
    };
    let (worst2, n2) = fd_check(&heads, loss2, 60, &mut rng);

    let pass = worst1 <= FD_REL && worst2 <= FD_REL && n1 >= FD_MIN_SCALARS && n2 >= FD_MIN_SCALARS;
    verdict(
        4,
        "gradient checks",
        pass,
        &format!("stage-1 CE worst rel {worst1:.2e} over {n1} scalars; FS path worst rel {worst2:.2e} over {n2} scalars (<= {FD_REL:e})"),
    );
    assert!(pass);
}

#[test]
fn c05_tiling_and_sampling_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut tile_ok, mut inverse_ok) = (true, true);
    for _ in 0..TILING_CASES {
        let (n, t) = (rng.random_range(1..=3), rng.random_range(1..=6));
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let grid: Vec<Vec<Frame>> = (0..n)
            .map(|_| (0..t).map(|_| random_frame(h, w, &mut rng)).collect())
            .collect();
        let tiled = tile(&grid).unwrap();
        let (th, tw) = (h * n, w * t);
        let mut naive = vec![0u8; 3 * th * tw];
        for c in 0..3 {
            for (p, row) in grid.iter().enumerate() {
                for (k, fr) in row.iter().enumerate() {
                    for i in 0..h {
                        for j in 0..w {
                            naive[(c * th + p * h + i) * tw + k * w + j] = fr.data[(c * h + i) * w + j];
                        }
                    }
                }
            }
        }
        tile_ok &= tiled.height == th && tiled.width == tw && tiled.data == naive;
        inverse_ok &= untile(&tiled, n, t).unwrap() == grid;
    }

    let world = World::new(WorldConfig::default());
    let catalog = Catalog::full(3).unwrap();
    let povs = Pov::for_count(2);
    let mut sampling_ok = true;
    for (i, task) in catalog.tasks().iter().enumerate().take(6) {
        let ep = world.generate_expert(task, i as u64, &SceneSpec::default(), &povs, 16, 16).unwrap();
        let len = ep.len();
        for count in [2, 3, 4, len.min(7)] {
            let picked = sample_frames(&ep, count).unwrap();
            let idx: Vec<usize> = (0..count)
                .map(|k| (k as f64 * (len - 1) as f64 / (count - 1) as f64).round() as usize)
                .collect();
            sampling_ok &= sample_indices(len, count).unwrap() == idx;
            for (p, row) in picked.iter().enumerate() {
                for (k, fr) in row.iter().enumerate() {
                    sampling_ok &= *fr == ep.frames[p][idx[k]];
                }
            }
        }
    }
    let pass = tile_ok && inverse_ok && sampling_ok;
    verdict(
        5,
        "tiling and sampling oracles",
        pass,
        &format!("tile == nested loops: {tile_ok}, untile(tile) == id: {inverse_ok} over {TILING_CASES} cases; sample_frames == round formula: {sampling_ok}"),
    );
    assert!(pass);
}

#[test]
fn c06_metrics_consistency() {
    use num_rational::Ratio;
    use num_traits::ToPrimitive;

    let f1 = f1_from(0.8850, 0.9434).unwrap();
    let published_ok = (f1 - F1_PUBLISHED).abs() <= F1_TOL;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut oracle_ok = true;
    let mut cases = 0;
    while cases < 1000 {
        let n = rng.random_range(1..400);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let c = confusion(&preds, &labels).unwrap();
        if c.tp == 0 {
            continue;
        }
        cases += 1;
        let m = metrics(&c);
        let q = |a: u64, b: u64| Ratio::new(a as i128, b as i128);
        let p = q(c.tp, c.tp + c.fp);
        let r = q(c.tp, c.tp + c.fn_);
        let f = Ratio::from_integer(2) * p * r / (p + r);
        oracle_ok &= m.accuracy.value == q(c.tp + c.tn, n as u64).to_f64()
            && m.precision.value == p.to_f64()
            && m.recall.value == r.to_f64()
            && m.f1.value == f.to_f64();
    }
    let pass = published_ok && oracle_ok;
    verdict(
        6,
        "metrics consistency",
        pass,
        &format!("F1(0.8850, 0.9434) = {f1:.4} vs {F1_PUBLISHED} +/- {F1_TOL}; rational oracle exact on {cases} tables: {oracle_ok}"),
    );
    assert!(pass);
}

#[test]
fn c07_smf_easy_learnability() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let m = generate_smf(&GenConfig::smf_easy(0)).unwrap();
    let (train, val, test) = (m.split(Split::Train), m.split(Split::Val), m.split(Split::Test));
    let mut model: Backbone<f32> = Backbone::new(BackboneConfig::default()).unwrap();
    let probe = PatchCache::build(&model, &val).unwrap();
    let (initial_ce, _) = evaluate_stage1(&model, &probe, &val, 32).unwrap();
    let cfg = Stage1Config {
        epochs: EASY_EPOCHS,
        ..Stage1Config::default()
    };
    let logs = train_stage1(&mut model, &train, &val, &cfg, 0, &mut |_| {}).unwrap();
    let cache = PatchCache::build(&model, &test).unwrap();
    let (_, accuracy) = evaluate_stage1(&model, &cache, &test, 32).unwrap();
    let elapsed = start.elapsed();
    let final_ce = logs.last().and_then(|l| l.val_loss).unwrap_or(f64::NAN);
    let pass = accuracy >= EASY_ACCURACY && elapsed <= EASY_BUDGET;
    verdict(
        7,
        "smf-easy learnability",
        pass,
        &format!(
            "test accuracy {accuracy:.4} (>= {EASY_ACCURACY}) on {} examples after {EASY_EPOCHS} epochs in {:.0} s (<= {} s); val CE {initial_ce:.4} -> {final_ce:.4}",
            test.len(),
            elapsed.as_secs_f64(),
            EASY_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

struct HardRuns {
    vlm_only: Vec<f64>,
    ensemble: Vec<f64>,
    /// Seed-0 backbone and heads, reused by the transfer check.
    model: Backbone<f32>,
    heads: FsHeads<f32>,
}

fn accuracy_of(reports: &[failsense::evalcli::MetricsReport], mode: Mode) -> f64 {
    let name = mode.to_string();
    reports.iter().find(|r| r.mode == name).unwrap().metrics.accuracy.value.unwrap()
}

fn hard_runs() -> &'static HardRuns {
    static RUNS: OnceLock<HardRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
        let mut vlm_only = Vec::new();
        let mut ensemble = Vec::new();
        let mut first = None;
        for seed in HARD_SEEDS {
            let m = generate_smf(&GenConfig::smf_hard(seed)).unwrap();
            let (train, val, test) = (m.split(Split::Train), m.split(Split::Val), m.split(Split::Test));
            let mut model: Backbone<f32> = Backbone::new(BackboneConfig {
                seed,
                ..BackboneConfig::default()
            })
            .unwrap();
            let s1 = Stage1Config {
                epochs: HARD_STAGE1_EPOCHS,
                ..Stage1Config::default()
            };
            train_stage1(&mut model, &train, &val, &s1, seed, &mut |_| {}).unwrap();
            let hash = model.hash().unwrap();
            let s2 = Stage2Config::default();
            let layers = select_fs_layers(model.n_layers(), s2.k).unwrap();
            let mut all = train.clone();
            all.extend_from_slice(&val);
            let cache = FeatureCache::build(&model, &hash, &layers, &all, s2.batch_size).unwrap();
            let (heads, _) = train_stage2(&model, &hash, &train, &val, &s2, seed, Some(&cache), &mut |_| {}).unwrap();
            let modes = [Mode::VlmOnly, Mode::Ensemble];
            let (_, reports) = evaluate(&model, &heads, &test, &VoteConfig::default(), &modes, 32).unwrap();
            vlm_only.push(accuracy_of(&reports, Mode::VlmOnly));
            ensemble.push(accuracy_of(&reports, Mode::Ensemble));
            if first.is_none() {
                first = Some((model, heads));
            }
        }
        let (model, heads) = first.unwrap();
        HardRuns {
            vlm_only,
            ensemble,
            model,
            heads,
        }
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

#[test]
fn c08_smf_hard_ablation() {
    let runs = hard_runs();
    let (vlm, ens) = (median(&runs.vlm_only), median(&runs.ensemble));
    let pass = ens >= vlm - ABLATION_SLACK;
    verdict(
        8,
        "smf-hard ablation",
        pass,
        &format!(
            "median ensemble accuracy {ens:.4} vs LoRA-only {vlm:.4} (slack {ABLATION_SLACK}); per seed vlm_only={:?} ensemble={:?}",
            runs.vlm_only, runs.ensemble
        ),
    );
    assert!(pass);
}

#[test]
fn c09_control_failure_transfer() {
    let runs = hard_runs();
    let control = generate_control_failures(&GenConfig::smf_hard(0), CONTROL_SET).unwrap();
    let examples: Vec<_> = control.examples.iter().collect();
    let modes = [Mode::VlmOnly, Mode::Ensemble];
    let (_, reports) = evaluate(&runs.model, &runs.heads, &examples, &VoteConfig::default(), &modes, 32).unwrap();
    let rate = |mode: Mode| {
        let name = mode.to_string();
        reports.iter().find(|r| r.mode == name).unwrap().metrics.detection_rate.value.unwrap()
    };
    let (ens, vlm) = (rate(Mode::Ensemble), rate(Mode::VlmOnly));
    let pass = examples.len() == CONTROL_SET && ens > DETECTION_CHANCE;
    verdict(
        9,
        "control-failure transfer",
        pass,
        &format!("ensemble detection rate {ens:.4} (> {DETECTION_CHANCE}) on {} control failures; vlm_only {vlm:.4}", examples.len()),
    );
    assert!(pass);
}

fn files_under(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_end_to_end_determinism() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = common::write_config(d.path(), common::TINY_TOML);
        common::pipeline(d.path(), &cfg);
    }
    let (a, b) = (dirs[0].path(), dirs[1].path());
    // Training logs carry wall-clock times and the stamp a generation time.
    let compared: Vec<_> = files_under(a)
        .into_iter()
        .filter(|p| {
            let s = p.to_string_lossy();
            !s.ends_with(".log.jsonl") && !s.ends_with(".stamp.json")
        })
        .collect();
    let same_set = compared.iter().all(|p| b.join(p).exists());
    let differing: Vec<_> = compared
        .iter()
        .filter(|p| std::fs::read(a.join(p)).ok() != std::fs::read(b.join(p)).ok())
        .collect();
    let covers = ["data/smf/manifest.jsonl", "bb.ckpt", "fs.ckpt", "report.json"]
        .iter()
        .all(|f| compared.iter().any(|p| p.as_path() == std::path::Path::new(f)));
    let pass = same_set && covers && differing.is_empty();
    verdict(
        10,
        "end-to-end determinism",
        pass,
        &format!("{} files compared (manifests, images, checkpoints, reports), {} differ", compared.len(), differing.len()),
    );
    assert!(pass, "differing files: {differing:?}");
}
