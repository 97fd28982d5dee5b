//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Extra arguments filter
//! criteria by id, e.g. `cargo test --test acceptance -- c4 c5`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dvsa::alignment::{align_instance, class_prototypes, AlignmentDims, AlignmentParams};
use dvsa::data_io::{generate_synthetic, synthesize_candidates, NoiseProtocol, NoiseSpec, SyntheticData, SyntheticSpec};
use dvsa::diff_core::{softmax_rows, Tensor};
use dvsa::disambiguation::{correction_factor, pool_attributes, semantic_confidence, visual_predictions, SoftLabelState};
use dvsa::inference_metrics::{best_by_h, default_gamma_grid, harmonic_mean, GzslReport};
use dvsa::mi_estimation::{fit_critic, nwj_mi_value, CriticFit, CriticParams, PairBatch};
use dvsa::semantic_space::select_attributes;
use dvsa::trainer::{eval_split, grad_check_joint, MicroDims, TrainConfig, Trainer, ABLATION_ROWS};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const NOISE_Q: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn max_row_sum_error(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Default synthetic data with Bernoulli candidate noise on the training split.
fn noisy_data(seed: u64) -> SyntheticData {
    let mut d = generate_synthetic(&SyntheticSpec {
        seed,
        ..Default::default()
    })
    .unwrap();
    let noise = NoiseSpec {
        protocol: NoiseProtocol::QBernoulli(NOISE_Q),
        seed: seed + 100,
    };
    d.train.candidates = synthesize_candidates(&d.train.true_labels, d.semantic.num_classes(), &d.split.seen, &noise).unwrap();
    d
}

struct RowResult {
    disamb_acc: f64,
    test: GzslReport,
}

/// Trains one configuration, calibrates `γ` on validation and reports test.
fn train_and_score(d: &SyntheticData, cfg: &TrainConfig) -> RowResult {
    let mut t = Trainer::new(cfg, &d.semantic, &d.train).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let protos = t.prototypes().unwrap();
    let val = eval_split(&d.val, &t.split)
        .unwrap()
        .sweep(&protos, &default_gamma_grid(), cfg.inference_score)
        .unwrap();
    let gamma = best_by_h(&val).unwrap().gamma;
    let test = eval_split(&d.test, &t.split)
        .unwrap()
        .evaluate(&protos, gamma, cfg.inference_score)
        .unwrap();
    RowResult {
        disamb_acc: t.disambiguation_accuracy(),
        test,
    }
}

fn c1_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let report = grad_check_joint(MicroDims::default(), &cfg, 3, 1e-6, 1e-4).unwrap();
    let elapsed = start.elapsed();
    // 8 alignment matrices with a shared W_O plus 4 critic tensors
    let all_params = report.per_param.len() == 12;
    outcome(
        report.passed() && all_params && elapsed < Duration::from_secs(60),
        format!(
            "{} params, {} entries, max rel error {:.2e} (tol 1e-4), {:.1}s",
            report.per_param.len(),
            report.checked,
            report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (q, k, dv, d, regions, n) = (
            rng.random_range(2..8),
            rng.random_range(2..10),
            rng.random_range(2..12),
            rng.random_range(1..8),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let dw = rng.random_range(1..6);
        let scale = rng.random_range(0.1..20.0);
        let logits = uniform(n, q, -scale, scale, &mut rng);
        worst = worst.max(max_row_sum_error(&softmax_rows(&logits)));

        let dims = AlignmentDims {
            attributes: k,
            embed_dim: dw,
            visual_dim: dv,
            attn_dim: d,
            share_output_projection: true,
        };
        let params = AlignmentParams::init(dims, &mut rng).unwrap();
        let a = uniform(k, dw, -1.0, 1.0, &mut rng);
        let s = uniform(q, k, 0.0, 1.0, &mut rng);
        let protos = class_prototypes(&s, &params).unwrap();
        let mut a_hats = Vec::new();
        let mut v_hats = Vec::new();
        let mut pooled = Vec::new();
        for _ in 0..n {
            let f = uniform(regions, dv, -scale, scale, &mut rng);
            let out = align_instance(&a, &f, &params).unwrap();
            worst = worst.max(max_row_sum_error(&out.vta_attn));
            worst = worst.max(max_row_sum_error(&out.atv_attn));
            v_hats.push(dvsa::diff_core::gap(&out.v_hat).unwrap().into_data());
            pooled.push(dvsa::diff_core::gap(&f).unwrap().into_data());
            a_hats.push(out.a_hat);
        }
        let v = Tensor::from_rows(&pooled).unwrap();
        let m = visual_predictions(&v, &protos, 20.0).unwrap();
        worst = worst.max(max_row_sum_error(&m));
        let m_sem = semantic_confidence(&pool_attributes(&a_hats).unwrap(), &protos, 20.0).unwrap();
        worst = worst.max(max_row_sum_error(&m_sem));
        let omega = correction_factor(&Tensor::from_rows(&v_hats).unwrap(), &protos).unwrap();
        worst = worst.max(max_row_sum_error(&omega));

        let mut cand = Tensor::zeros(&[n, q]);
        for i in 0..n {
            cand.set(i, rng.random_range(0..q), 1.0);
            for c in 0..q {
                if rng.random_bool(0.3) {
                    cand.set(i, c, 1.0);
                }
            }
        }
        let mut labels = SoftLabelState::new(&cand, rng.random_range(0.05..1.0)).unwrap();
        for _ in 0..3 {
            labels.update(&m, &cand).unwrap();
            worst = worst.max(max_row_sum_error(&labels.l_tilde));
        }
    }
    outcome(worst <= 1e-9, format!("100 trials, max |row sum - 1| = {worst:.2e} (tol 1e-9)"))
}

fn c3_disambiguation_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, q, alpha, epochs) = (200, 12, 0.5, 30);
    let mut cand = Tensor::zeros(&[n, q]);
    for i in 0..n {
        cand.set(i, i % q, 1.0);
        for c in 0..q {
            if rng.random_bool(0.3) {
                cand.set(i, c, 1.0);
            }
        }
    }
    let m = softmax_rows(&uniform(n, q, -3.0, 3.0, &mut rng));
    let mut state = SoftLabelState::new(&cand, alpha).unwrap();
    let u0 = state.u.clone();
    let mut support_ok = true;
    for _ in 0..epochs {
        state.update(&m, &cand).unwrap();
        support_ok &= state
            .l_tilde
            .data()
            .iter()
            .zip(cand.data())
            .all(|(&l, &c)| c != 0.0 || l == 0.0);
    }
    let decay = (1.0 - alpha).powi(epochs);
    let (mut to_m, mut to_closed_form) = (0.0f64, 0.0f64);
    for idx in 0..n * q {
        if cand.data()[idx] == 0.0 {
            continue;
        }
        let (u, mv) = (state.u.data()[idx], m.data()[idx]);
        to_m = to_m.max((u - mv).abs());
        to_closed_form = to_closed_form.max((u - (decay * u0.data()[idx] + (1.0 - decay) * mv)).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        to_m < 1e-6 && to_closed_form < 1e-12 && support_ok && elapsed < Duration::from_secs(5),
        format!(
            "max |U - M| {to_m:.2e} (tol 1e-6), closed-form gap {to_closed_form:.1e}, support kept: {support_ok}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

struct SeedRuns {
    seed: u64,
    full: RowResult,
    no_mi: RowResult,
    plain: RowResult,
}

fn seed_runs() -> (Vec<SeedRuns>, Duration) {
    let mut full_time = Duration::ZERO;
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let d = noisy_data(seed);
            let base = TrainConfig {
                seed,
                ..Default::default()
            };
            let start = Instant::now();
            let full = train_and_score(&d, &base.clone().with_components(ABLATION_ROWS[6].1));
            full_time += start.elapsed();
            let no_mi = train_and_score(&d, &base.clone().with_components(ABLATION_ROWS[5].1));
            let plain = train_and_score(&d, &base.clone().with_components(ABLATION_ROWS[0].1));
            println!(
                "    seed {seed}: disamb {:.3} | H full {:.2} (γ {}) no-MI {:.2} (γ {}) plain-CE {:.2} (γ {})",
                full.disamb_acc, full.test.h, full.test.gamma, no_mi.test.h, no_mi.test.gamma, plain.test.h, plain.test.gamma
            );
            SeedRuns {
                seed,
                full,
                no_mi,
                plain,
            }
        })
        .collect();
    (runs, full_time)
}

fn c4_end_to_end(runs: &[SeedRuns], full_time: Duration) -> Outcome {
    let hits = runs.iter().filter(|r| r.full.disamb_acc >= 0.9).count();
    let accs: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.full.disamb_acc)).collect();
    outcome(
        hits >= 4 && full_time < Duration::from_secs(600),
        format!(
            "{hits}/5 seeds reach disambiguation accuracy >= 0.9 [{}], full-config training {:.0}s",
            accs.join(", "),
            full_time.as_secs_f64()
        ),
    )
}

fn c5_ablation_shape(runs: &[SeedRuns]) -> Outcome {
    let ok = |r: &SeedRuns| r.full.test.h - r.no_mi.test.h >= 1.0 && r.no_mi.test.h - r.plain.test.h >= 1.0;
    let hits = runs.iter().filter(|r| ok(r)).count();
    let gaps: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "s{}: {:+.2}/{:+.2}",
                r.seed,
                r.full.test.h - r.no_mi.test.h,
                r.no_mi.test.h - r.plain.test.h
            )
        })
        .collect();
    outcome(
        hits >= 4,
        format!("{hits}/5 seeds with both gaps >= 1 point (full-noMI/noMI-plain: {})", gaps.join(", ")),
    )
}

/// Positive pairs `(x_i, y_i)` and `neg` shuffled partners per positive.
fn gaussian_pairs(rho: f64, n: usize, neg: usize, rng: &mut ChaCha8Rng) -> PairBatch {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        x.push(a);
        y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    let mut na = Vec::with_capacity(n * neg);
    let mut no = Vec::with_capacity(n * neg);
    for _ in 0..neg {
        for &xi in &x {
            na.push(xi);
            no.push(y[rng.random_range(0..n)]);
        }
    }
    let col = |v: Vec<f64>| Tensor::matrix(v.len(), 1, v).unwrap();
    PairBatch::new(col(x), col(y), col(na), col(no)).unwrap()
}

fn trained_nwj(rho: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gaussian_pairs(rho, 10_000, 5, &mut rng);
    let held_out = gaussian_pairs(rho, 10_000, 5, &mut rng);
    let mut critic = CriticParams::init(1, 32, &mut rng).unwrap();
    fit_critic(&train, &mut critic, &CriticFit::default(), &mut rng).unwrap();
    nwj_mi_value(&held_out, &critic, 20.0).unwrap()
}

fn c6_mi_sanity() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, rho) in [0.5f64, 0.9].into_iter().enumerate() {
        let truth = -0.5 * (1.0 - rho * rho).ln();
        let est = trained_nwj(rho, 60 + i as u64);
        ok &= (est - truth).abs() <= 0.3 * truth;
        parts.push(format!("ρ={rho}: {est:.3} vs {truth:.3}"));
    }
    let indep = trained_nwj(0.0, 62);
    ok &= indep.abs() < 0.1;
    parts.push(format!("independent: {indep:.3}"));
    let elapsed = start.elapsed();
    outcome(
        ok && elapsed < Duration::from_secs(120),
        format!("{} (±30%, |indep| < 0.1), {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn c7_calibration_monotone() -> Outcome {
    let d = noisy_data(7);
    let cfg = TrainConfig {
        epochs: 10,
        seed: 7,
        use_mi: false,
        ..Default::default()
    };
    let mut t = Trainer::new(&cfg, &d.semantic, &d.train).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let protos = t.prototypes().unwrap();
    let split = eval_split(&d.test, &t.split).unwrap();
    let counts: Vec<usize> = default_gamma_grid()
        .into_iter()
        .map(|g| split.seen_prediction_count(&protos, g, cfg.inference_score).unwrap())
        .collect();
    let monotone = counts.windows(2).all(|w| w[1] <= w[0]);
    let h = harmonic_mean(75.0, 73.0);
    let h_ok = (h - 74.0).abs() < 0.05;
    outcome(
        monotone && h_ok,
        format!("seen predictions over γ grid {counts:?}, H(75, 73) = {h:.4}"),
    )
}

fn brute_force_selection(h: &[f64]) -> Vec<usize> {
    let mut sorted = h.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = sorted.len();
    let mu = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        (sorted[k / 2 - 1] + sorted[k / 2]) / 2.0
    };
    let picked: Vec<usize> = (0..k).filter(|&i| h[i] < mu).collect();
    if picked.is_empty() {
        (0..k / 2).collect()
    } else {
        picked
    }
}

fn c8_selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut agree, mut ties, mut even) = (0, 0, 0);
    for trial in 0..1000 {
        let k = rng.random_range(2..40);
        let h: Vec<f64> = match trial % 4 {
            0 => vec![rng.random_range(0.0..3.0); k],
            1 => (0..k).map(|_| rng.random_range(0..4) as f64 * 0.5).collect(),
            _ => (0..k).map(|_| rng.random_range(0.0..3.0)).collect(),
        };
        let mut sorted = h.clone();
        sorted.sort_by(f64::total_cmp);
        ties += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));
        even += usize::from(k % 2 == 0);
        let got = select_attributes(&Tensor::vector(h.clone())).unwrap().selected;
        agree += usize::from(got == brute_force_selection(&h));
    }
    outcome(
        agree == 1000,
        format!("{agree}/1000 agree ({even} even K, {ties} with ties)"),
    )
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dvsa")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "dvsa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    run_cli(&["gen-data", "--out", &p("data"), "--seed", "9", "--noise-q", "0.1"]);
    std::fs::write(p("run.cfg"), "epochs = 4\nseed = 9\n").unwrap();
    for run in ["a", "b"] {
        run_cli(&["train", "--config", &p("run.cfg"), "--data", &p("data"), "--out", &p(run)]);
    }
    let same = |f: &str| std::fs::read(Path::new(&p("a")).join(f)).unwrap() == std::fs::read(Path::new(&p("b")).join(f)).unwrap();
    let (history, ckpt) = (same("history.csv"), same("checkpoint.bin"));
    outcome(
        history && ckpt,
        format!("history.csv identical: {history}, checkpoint.bin identical: {ckpt}"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| id.contains(f.as_str()));
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut record = |id: &'static str, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(id) {
            let o = f();
            println!("[{}] {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((id, name, o));
        }
    };
    record("c1", "gradient fidelity", &c1_gradient_fidelity);
    record("c2", "normalization suite", &c2_normalization);
    record("c3", "disambiguation oracle", &c3_disambiguation_oracle);
    if wanted("c4") || wanted("c5") {
        let (runs, full_time) = seed_runs();
        record("c4", "end-to-end disambiguation", &|| c4_end_to_end(&runs, full_time));
        record("c5", "ablation shape", &|| c5_ablation_shape(&runs));
    }
    record("c6", "MI estimator sanity", &c6_mi_sanity);
    record("c7", "calibrated-stacking monotonicity", &c7_calibration_monotone);
    record("c8", "entropy selection oracle", &c8_selection_oracle);
    record("c9", "determinism", &c9_determinism);

    let failed: Vec<&str> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
