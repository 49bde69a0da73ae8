//! Acceptance checks, one pass/fail line per criterion.
//!
//! Criteria 6-8 train the reference network at the default settings
//! (three seeds, full curriculum and phase-III-only ablation), which takes
//! several minutes on a single core.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;

use cks::backbone::{batch_loss_and_grad, Backbone, BackboneSpec};
use cks::cli::{cmd_train, TrainArgs};
use cks::curriculum::{Curriculum, HistoryEntry, Phase, PhaseConfig, RunOptions, RunState};
use cks::ema::{CacheModel, SwitchMode};
use cks::geometry::{bbox_from_mask, crop, gaussian_smooth, paste_back, GaussianKernel};
use cks::losses::{loss_bce, loss_grad, loss_iou, loss_smoothed, loss_total, LossConfig};
use cks::rng::Rng64;
use cks::synthdata_io::{
    generate, load_checkpoint, load_dataset, save_checkpoint, save_dataset, CheckpointMeta, GenConfig,
};
use cks::types::{BBox, DatasetPhase, Image, LayoutId, Mask, ParamVector, ProbMap};
use cks::CksError;

const SEEDS: [u64; 3] = [0, 1, 2];
const TIME_LIMIT: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn random_pair(rng: &mut Rng64, h: usize, w: usize) -> (ProbMap, Mask) {
    let p = ProbMap::new(Array2::from_shape_fn((h, w), |_| rng.range(0.02, 0.98))).unwrap();
    let t = Mask::from_fn(h, w, |_| rng.uniform() < 0.35).unwrap();
    (p, t)
}

fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct per-pixel Gaussian blur with mirrored borders; the kernel is
/// rebuilt here from its formula.
fn naive_smooth(f: &Array2<f64>, sigma: f64, radius: usize) -> Array2<f64> {
    let r = radius as isize;
    let mut norm = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            norm += (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let (h, w) = f.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let wt = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / norm;
                acc += wt * f[[mirror(i as isize + dy, h), mirror(j as isize + dx, w)]];
            }
        }
        acc
    })
}

/// Loop implementations of the three loss terms.
fn naive_losses(p: &ProbMap, t: &Mask, eps: f64, sigma: f64, radius: usize) -> (f64, f64, f64) {
    let (h, w) = p.shape();
    let (mut inter, mut sum_t, mut sum_p, mut bce) = (0.0, 0.0, 0.0, 0.0);
    let tf = t.labels().mapv(f64::from);
    for i in 0..h {
        for j in 0..w {
            let (pv, tv) = (p.probs()[[i, j]], tf[[i, j]]);
            inter += pv * tv;
            sum_t += tv;
            sum_p += pv;
            let q = pv.clamp(eps, 1.0 - eps);
            bce -= tv * q.ln() + (1.0 - tv) * (1.0 - q).ln();
        }
    }
    let iou = 1.0 - inter / (sum_t + sum_p - inter + eps);
    let th = naive_smooth(&tf, sigma, radius);
    let ph = naive_smooth(p.probs(), sigma, radius);
    let mut agree = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (a, b) = (th[[i, j]], ph[[i, j]]);
            agree += (2.0 * a * b + eps) / (a * a + b * b + eps);
        }
    }
    (iou, bce, 1.0 - agree / (h * w) as f64)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let cfg = LossConfig::default();
    let mut rng = Rng64::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (1 + rng.below(8) as usize, 1 + rng.below(8) as usize);
        let (p, t) = random_pair(&mut rng, h, w);
        let (iou, bce, s) = naive_losses(&p, &t, 1e-7, 1.0, 3);
        let total = loss_total(&p, &t, &cfg).unwrap();
        for (got, want) in [
            (loss_iou(&p, &t, &cfg).unwrap(), iou),
            (loss_bce(&p, &t, &cfg).unwrap(), bce),
            (loss_smoothed(&p, &t, &cfg).unwrap(), s),
            (total.l_total, iou + bce + s),
        ] {
            worst = worst.max(rel(got, want));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-9 && secs < 5.0,
        format!("50 instances, worst relative error {worst:.2e}, {secs:.3}s"),
    )
}

fn fd_worst(f: &dyn Fn(&[f64]) -> f64, params: &[f64], grad: &[f64], h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut up = params.to_vec();
        up[i] += h;
        let mut dn = params.to_vec();
        dn[i] -= h;
        let num = (f(&up) - f(&dn)) / (2.0 * h);
        worst = worst.max((grad[i] - num).abs() / num.abs().max(floor));
    }
    worst
}

fn criterion_2() -> Outcome {
    let cfg = LossConfig::default();
    let mut rng = Rng64::new(2);
    let mut loss_worst: f64 = 0.0;
    for _ in 0..20 {
        let (p, t) = random_pair(&mut rng, 6, 6);
        let grad: Vec<f64> = loss_grad(&p, &t, &cfg).unwrap().iter().copied().collect();
        let params: Vec<f64> = p.probs().iter().copied().collect();
        let f = |v: &[f64]| {
            let q = ProbMap::new(Array2::from_shape_vec((6, 6), v.to_vec()).unwrap()).unwrap();
            loss_total(&q, &t, &cfg).unwrap().l_total
        };
        loss_worst = loss_worst.max(fd_worst(&f, &params, &grad, 1e-5, 1e-8));
    }

    // Miniature network: every parameter, five initializations.
    let spec = BackboneSpec::new(1, 2).unwrap();
    let (mut net_fine, mut net_coarse): (f64, f64) = (0.0, 0.0);
    for seed in 0..5 {
        let mut rng = Rng64::new(200 + seed);
        let params = spec.init_params_f64(seed);
        let x = Image::from_fn(8, 8, |_| rng.uniform()).unwrap();
        let t = Mask::from_fn(8, 8, |_| rng.uniform() < 0.3).unwrap();
        let batch = [(&x, &t)];
        let (_, grad) = batch_loss_and_grad(&spec, &params, &batch, &cfg).unwrap();
        let f = |v: &[f64]| batch_loss_and_grad(&spec, v, &batch, &cfg).unwrap().0.l_total;
        net_fine = net_fine.max(fd_worst(&f, &params, &grad, 1e-7, 1e-2));
        net_coarse = net_coarse.max(fd_worst(&f, &params, &grad, 1e-5, 1e-2));
    }
    Outcome::new(
        loss_worst < 1e-4 && net_coarse < 1e-4,
        format!(
            "h=1e-5: loss terms worst {loss_worst:.2e}, network ({} params) worst {net_coarse:.2e} \
             (h=1e-7: {net_fine:.2e})",
            spec.param_count()
        ),
    )
}

/// Closed-form weights of `theta_0 .. theta_n` after `n` updates, built by
/// telescoping consecutive powers of alpha.
fn closed_form_weights(alpha: f64, n: usize) -> Vec<f64> {
    let mut powers = vec![1.0f64];
    for _ in 0..n {
        let last = *powers.last().unwrap();
        powers.push(last * alpha);
    }
    let mut w = vec![powers[n]];
    w.extend((1..=n).map(|k| powers[n - k] - powers[n - k + 1]));
    w
}

fn criterion_3() -> Outcome {
    let layout = LayoutId("acceptance".into());
    let mut rng = Rng64::new(3);
    let (mut worst, mut sums_exact, mut degenerate_exact) = (0.0f64, true, true);
    for case in 0..200 {
        let n = rng.below(51) as usize;
        let alpha = match case % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.range(0.5, 1.0),
        };
        let len = 16;
        let snaps: Vec<ParamVector> = (0..=n)
            .map(|_| ParamVector::new((0..len).map(|_| rng.range(0.5, 1.5) as f32).collect(), layout.clone()).unwrap())
            .collect();
        let mut cache = CacheModel::new(&snaps[0], alpha, SwitchMode::Momentum).unwrap();
        for s in &snaps[1..] {
            cache.update(s).unwrap();
        }
        let w = closed_form_weights(alpha, n);
        sums_exact &= w.iter().sum::<f64>() == 1.0;
        if alpha == 0.0 || alpha == 1.0 {
            let expected = if alpha == 0.0 { &snaps[n] } else { &snaps[0] };
            degenerate_exact &= cache.theta_mu().bit_eq(expected);
        }
        for j in 0..len {
            let want: f64 = w.iter().zip(&snaps).map(|(wk, s)| wk * f64::from(s.values()[j])).sum();
            worst = worst.max(rel(f64::from(cache.theta_mu().values()[j]), want));
        }
    }
    Outcome::new(
        worst < 1e-6 && sums_exact && degenerate_exact,
        format!(
            "200 sequences of <= 50 updates: worst relative error {worst:.2e}, weights sum to exactly 1: {sums_exact}, \
             alpha in {{0,1}} bit-exact: {degenerate_exact}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = Rng64::new(4);
    let (mut bbox_ok, mut crop_ok, mut paste_ok, mut smooth_worst) = (true, true, true, 0.0f64);
    for _ in 0..100 {
        let (h, w) = (2 + rng.below(20) as usize, 2 + rng.below(20) as usize);
        let density = rng.range(0.0, 0.2);
        let m = Mask::from_fn(h, w, |_| rng.uniform() < density).unwrap();

        let mut brute: Option<(usize, usize, usize, usize)> = None;
        for r in 0..h {
            for c in 0..w {
                if m.labels()[[r, c]] == 1 {
                    let b = brute.get_or_insert((r, r, c, c));
                    *b = (b.0.min(r), b.1.max(r), b.2.min(c), b.3.max(c));
                }
            }
        }
        let got = bbox_from_mask(&m).map(|b| (b.row_min, b.row_max, b.col_min, b.col_max));
        bbox_ok &= got == brute;

        let img = Image::from_fn(h, w, |_| rng.uniform()).unwrap();
        let (r0, c0) = (rng.below(h as u64) as usize, rng.below(w as u64) as usize);
        let (r1, c1) = (
            r0 + rng.below((h - r0) as u64) as usize,
            c0 + rng.below((w - c0) as u64) as usize,
        );
        let (margin, align) = (rng.below(4) as usize, 1 + rng.below(8) as usize);
        let (cropped, rec) = crop(&img, BBox::new(r0, r1, c0, c1).unwrap(), margin, align).unwrap();
        let (top, left) = (r0.saturating_sub(margin), c0.saturating_sub(margin));
        let (bottom, right) = ((r1 + margin).min(h - 1), (c1 + margin).min(w - 1));
        let (ch, cw) = cropped.shape();
        crop_ok &= ch % align == 0 && cw % align == 0;
        crop_ok &= ch == (bottom - top + 1).div_ceil(align) * align && cw == (right - left + 1).div_ceil(align) * align;
        for i in 0..ch {
            for j in 0..cw {
                let inside = top + i <= bottom && left + j <= right;
                let want = if inside { img.pixels()[[top + i, left + j]] } else { 0.0 };
                crop_ok &= cropped.pixels()[[i, j]] == want;
            }
        }
        let probs = ProbMap::new(cropped.pixels().clone()).unwrap();
        let back = paste_back(&probs, &rec, 1.0).unwrap();
        for i in 0..h {
            for j in 0..w {
                let inside = (top..=bottom).contains(&i) && (left..=right).contains(&j);
                let want = if inside { img.pixels()[[i, j]] } else { 1.0 };
                paste_ok &= back.probs()[[i, j]] == want;
            }
        }

        let sigma = rng.range(0.5, 2.0);
        let radius = 1 + rng.below(4) as usize;
        let field = Array2::from_shape_fn((h, w), |_| rng.uniform());
        let fast = gaussian_smooth(&field, &GaussianKernel::new(sigma, radius).unwrap());
        let slow = naive_smooth(&field, sigma, radius);
        for (a, b) in fast.iter().zip(slow.iter()) {
            smooth_worst = smooth_worst.max((a - b).abs());
        }
    }
    Outcome::new(
        bbox_ok && crop_ok && paste_ok && smooth_worst < 1e-6,
        format!(
            "100 cases: bbox exact {bbox_ok}, crop exact {crop_ok}, paste-back exact {paste_ok}, \
             smoothing worst abs error {smooth_worst:.2e}"
        ),
    )
}

fn datasets(seed: u64) -> (DatasetPhase, DatasetPhase) {
    let train = generate(&GenConfig {
        seed: 2 * seed,
        ..GenConfig::default()
    })
    .unwrap();
    let val = generate(&GenConfig {
        count: 50,
        seed: 2 * seed + 1,
        ..GenConfig::default()
    })
    .unwrap();
    (train, val)
}

struct Trained {
    state: RunState,
    elapsed: Duration,
}

fn train(seed: u64, ablate: BTreeSet<Phase>) -> Trained {
    let (train, val) = datasets(seed);
    let spec = BackboneSpec::default();
    let cfg = PhaseConfig {
        seed,
        ..PhaseConfig::default()
    };
    let started = Instant::now();
    let mut cur = Curriculum::new(&spec, cfg, LossConfig::default()).unwrap();
    let opts = RunOptions {
        ablate,
        ..RunOptions::default()
    };
    let state = cur.run_full(&train, &val, &opts).unwrap();
    Trained {
        state,
        elapsed: started.elapsed(),
    }
}

fn final_dsc(history: &[HistoryEntry], phase: Phase) -> f64 {
    history
        .iter()
        .rev()
        .find(|e| e.phase == phase)
        .and_then(|e| e.val_dsc)
        .expect("phase ran with validation")
}

fn criterion_5(full: &Trained) -> Outcome {
    let s = &full.state.stats;
    let r = |x: &Option<cks::curriculum::SetStats>| x.as_ref().unwrap().mean_fg_ratio;
    let (d1, d2, d3) = (r(&s.d1), r(&s.d2), r(&s.d3));
    Outcome::new(
        d1 >= d2 && d2 >= d3 && d1 >= 2.0 * d3,
        format!("mean foreground ratio D1 {d1:.4}, D2 {d2:.4}, D3 {d3:.4} (200 items, 64x64, seed 0)"),
    )
}

fn criterion_6(fulls: &[Trained]) -> Outcome {
    let med = |p| median(fulls.iter().map(|t| final_dsc(&t.state.history, p)).collect());
    let (i, ii, iii) = (med(Phase::I), med(Phase::II), med(Phase::III));
    Outcome::new(
        i < ii && ii < iii,
        format!("median detection-cache DSC after phase I {i:.4}, II {ii:.4}, III {iii:.4}"),
    )
}

fn criterion_7(fulls: &[Trained], ablated: &[Trained]) -> Outcome {
    let seg = |t: &Trained| final_dsc(&t.state.history, Phase::Segmentation);
    let det = |t: &Trained| final_dsc(&t.state.history, Phase::III);
    let gains: Vec<f64> = fulls.iter().zip(ablated).map(|(f, a)| seg(f) - seg(a)).collect();
    let gain = median(gains.clone());
    let det_gain = median(fulls.iter().zip(ablated).map(|(f, a)| det(f) - det(a)).collect());
    let slowest = fulls.iter().chain(ablated).map(|t| t.elapsed).max().unwrap();
    let steps_equal = fulls.iter().zip(ablated).all(|(f, a)| {
        let detection_steps = |t: &Trained| {
            t.state
                .history
                .iter()
                .filter(|e| e.phase == Phase::III)
                .map(|e| e.steps)
                .max()
                .unwrap()
        };
        detection_steps(f) == detection_steps(a)
    });
    Outcome::new(
        gain >= 0.02 && slowest <= TIME_LIMIT && steps_equal,
        format!(
            "median end-to-end DSC gain of the curriculum over phase-III-only {:+.2} points (per seed {}); \
             detection-cache gain {:+.2} points; equal detection steps {steps_equal}; slowest run {:.0}s",
            100.0 * gain,
            gains
                .iter()
                .map(|g| format!("{:+.2}", 100.0 * g))
                .collect::<Vec<_>>()
                .join(", "),
            100.0 * det_gain,
            slowest.as_secs_f64()
        ),
    )
}

fn criterion_8(fulls: &[Trained]) -> Outcome {
    let scores: Vec<f64> = fulls
        .iter()
        .map(|t| final_dsc(&t.state.history, Phase::Segmentation))
        .collect();
    let m = median(scores.clone());
    Outcome::new(
        m >= 0.75,
        format!(
            "median end-to-end validation DSC {m:.4} (per seed {})",
            scores.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = datasets(0);
    save_dataset(&dir.path().join("train"), &train, None).unwrap();
    save_dataset(&dir.path().join("val"), &val, None).unwrap();
    // Same data and seed as the default runs, two epochs per phase to bound the cost.
    let config = "[phases.phase1]\nepochs = 2\n[phases.phase2]\nepochs = 2\n[phases.phase3]\nepochs = 2\n[phases.segmentation]\nepochs = 2\n";
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let run = |name: &str| {
        cmd_train(&TrainArgs {
            config: Some(dir.path().join("run.toml")),
            data: dir.path().join("train"),
            val: dir.path().join("val"),
            out: dir.path().join(name),
            ablate_phases: None,
            quiet: true,
        })
        .unwrap();
        tree(&dir.path().join(name))
    };
    let (a, b) = (run("a"), run("b"));
    let checkpoints = a.iter().filter(|(name, _)| name.ends_with(".ckpt")).count();
    Outcome::new(
        a == b && checkpoints == 8,
        format!(
            "{} files ({checkpoints} checkpoints, history, log) byte-identical: {}",
            a.len(),
            a == b
        ),
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng64::new(10);
    let mut values: Vec<f32> = (0..5000).map(|_| rng.normal() as f32).collect();
    values.extend([0.0, -0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, -f32::MIN_POSITIVE, 1e-38]);
    let theta = ParamVector::new(values, LayoutId("acceptance".into())).unwrap();
    let path = dir.path().join("theta.ckpt");
    save_checkpoint(&path, &theta, &CheckpointMeta::for_params(&theta, "I", 7)).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    let ckpt_exact = loaded.bit_eq(&theta) && meta.param_count == theta.len() as u64;

    let ds = generate(&GenConfig {
        count: 20,
        seed: 10,
        ..GenConfig::default()
    })
    .unwrap();
    save_dataset(&dir.path().join("ds"), &ds, None).unwrap();
    let back = load_dataset(&dir.path().join("ds")).unwrap();
    let data_exact = back == ds;

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    let bad_magic = matches!(load_checkpoint(&path), Err(CksError::BadMagic(_)));
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let truncated = matches!(load_checkpoint(&path), Err(CksError::CountMismatch { .. }));
    let missing = matches!(
        load_checkpoint(&dir.path().join("absent.ckpt")),
        Err(CksError::MissingFile(_))
    );
    let missing_ds = matches!(load_dataset(&dir.path().join("nowhere")), Err(CksError::MissingFile(_)));

    Outcome::new(
        ckpt_exact && data_exact && bad_magic && truncated && missing && missing_ds,
        format!(
            "checkpoint bit-exact {ckpt_exact}, dataset exact {data_exact}, BadMagic {bad_magic}, \
             CountMismatch {truncated}, MissingFile {}",
            missing && missing_ds
        ),
    )
}

fn report(id: u32, name: &str, outcome: &Outcome) {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id:>2} {name}: {}", outcome.detail);
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results = Vec::new();
    let mut record = |id: u32, name: &str, outcome: Outcome| {
        report(id, name, &outcome);
        results.push(outcome.pass);
    };

    record(1, "loss correctness", criterion_1());
    record(2, "gradient fidelity", criterion_2());
    record(3, "EMA algebra", criterion_3());
    record(4, "geometry oracles", criterion_4());
    record(10, "persistence", criterion_10());
    record(9, "determinism", criterion_9());

    let mut fulls = Vec::new();
    let mut ablated = Vec::new();
    for seed in SEEDS {
        let full = train(seed, BTreeSet::new());
        let only3 = train(seed, BTreeSet::from([Phase::I, Phase::II]));
        eprintln!(
            "  seed {seed}: curriculum {:.4} in {:.0}s, phase-III-only {:.4} in {:.0}s",
            final_dsc(&full.state.history, Phase::Segmentation),
            full.elapsed.as_secs_f64(),
            final_dsc(&only3.state.history, Phase::Segmentation),
            only3.elapsed.as_secs_f64()
        );
        fulls.push(full);
        ablated.push(only3);
    }
    record(5, "difficulty ordering", criterion_5(&fulls[0]));
    record(6, "curriculum trend", criterion_6(&fulls));
    record(7, "ablation trend", criterion_7(&fulls, &ablated));
    record(8, "end-to-end quality floor", criterion_8(&fulls));

    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "{passed}/{} criteria passed in {:.0}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
