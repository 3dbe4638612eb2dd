//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dts_core::eval::compute_auroc;
use dts_core::losses::{
    consistency_grad, consistency_loss, logit_match_grad, logit_match_loss, seen_grad, seen_loss,
    supervised_grad, supervised_loss, unseen_grad, unseen_loss,
};
use dts_core::models::{HeadKind, TeacherStudentPair};
use dts_core::rng::{self, DtsRng};
use dts_core::soft_weighting::{reliability_gate, uncertainty_score, GateDecision};
use dts_core::tensor::{softmax_rows, Matrix};
use dts_core::trainer::{train_dts_iteration, StepInfo, TrainObserver, TrainState, TrainedModels};
use dts_core::{AblationMode, Benchmark, Result, TrainConfig, TrainOutcome};
use rand::Rng;
use rayon::prelude::*;

const SEEDS: [u64; 3] = [0, 1, 2];
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;

struct Verdict {
    id: u8,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn report(v: &Verdict) {
    println!(
        "criterion {}: {} {} ({:.1}s)",
        v.id,
        if v.passed { "PASS" } else { "FAIL" },
        v.detail,
        v.elapsed.as_secs_f64()
    );
}

fn timed(id: u8, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (passed, detail) = f();
    Verdict {
        id,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

// ---------------------------------------------------------------- criterion 1

fn random_logits(rows: usize, cols: usize, rng: &mut DtsRng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every logit entry.
fn fd_error(logits: &Matrix, analytic: &Matrix, loss: &dyn Fn(&Matrix) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..logits.data().len() {
        let mut plus = logits.clone();
        plus.data_mut()[idx] += FD_STEP;
        let mut minus = logits.clone();
        minus.data_mut()[idx] -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        let a = analytic.data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn random_gates(rng: &mut DtsRng, n: usize) -> Vec<GateDecision> {
    (0..n)
        .map(|_| {
            let pass = rng.random_bool(0.6);
            reliability_gate(&[1.0, 0.0], if pass { 0.0 } else { 2.0 }, 0.5)
        })
        .collect()
}

fn criterion_1() -> (bool, String) {
    let mut rng = rng::stream(101, 0);
    let (k, n) = (2usize, 3usize);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |name, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..100 {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=k)).collect();
        let gates = random_gates(&mut rng, n);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let teacher = softmax_rows(&random_logits(n, k, &mut rng));

        let z = random_logits(n, k, &mut rng);
        let g = supervised_grad(&labels, &softmax_rows(&z)).unwrap();
        bump("supervised", fd_error(&z, &g, &|z| supervised_loss(&labels, &softmax_rows(z)).unwrap()));

        let z1 = random_logits(n, k + 1, &mut rng);
        let g = supervised_grad(&labels, &softmax_rows(&z1)).unwrap();
        bump("supervised_k1", fd_error(&z1, &g, &|z| supervised_loss(&labels, &softmax_rows(z)).unwrap()));

        let g = seen_grad(&labels, &softmax_rows(&z), &gates, n).unwrap();
        bump("seen", fd_error(&z, &g, &|z| seen_loss(&labels, &softmax_rows(z), &gates, n).unwrap()));

        let g = logit_match_grad(&softmax_rows(&z), &teacher, &gates, n).unwrap();
        bump(
            "logit_match",
            fd_error(&z, &g, &|z| logit_match_loss(&softmax_rows(z), &teacher, &gates, n).unwrap()),
        );

        let g = unseen_grad(&softmax_rows(&z1), &weights, n, k).unwrap();
        bump("unseen", fd_error(&z1, &g, &|z| unseen_loss(&softmax_rows(z), &weights, n, k).unwrap()));

        let zw = random_logits(n, k, &mut rng);
        let (gw, gs) = consistency_grad(&softmax_rows(&zw), &softmax_rows(&z), n).unwrap();
        bump(
            "consistency_strong",
            fd_error(&z, &gs, &|z| consistency_loss(&softmax_rows(&zw), &softmax_rows(z), n).unwrap()),
        );
        bump(
            "consistency_weak",
            fd_error(&zw, &gw, &|w| consistency_loss(&softmax_rows(w), &softmax_rows(&z), n).unwrap()),
        );
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k}={v:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    (max < FD_REL_TOL, format!("100 trials, max rel err {max:.2e} < {FD_REL_TOL:e}: {detail}"))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> (bool, String) {
    const K: usize = 6;
    let maxes: Vec<f64> = (0..50).map(|i| 1.0 / K as f64 + (1.0 - 1.0 / K as f64) * i as f64 / 49.0).collect();
    let lasts: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
    let gammas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let p_its = |m: f64| {
        let mut p = vec![(1.0 - m) / (K - 1) as f64; K];
        p[0] = m;
        p
    };
    let p_ots = |last: f64| {
        let mut p = vec![(1.0 - last) / K as f64; K + 1];
        p[K] = last;
        p
    };
    let mut violations = Vec::new();
    let mut grid = vec![vec![vec![0.0; 11]; 50]; 50];
    for (i, &m) in maxes.iter().enumerate() {
        for (j, &l) in lasts.iter().enumerate() {
            for (g, &gamma) in gammas.iter().enumerate() {
                let s = uncertainty_score(&p_its(m), &p_ots(l), gamma).unwrap().value;
                grid[i][j][g] = s;
                if !(0.0..=1.0).contains(&s) {
                    violations.push(format!("range at ({m},{l},{gamma})"));
                }
                if gamma == 0.0 && (s - l).abs() > 1e-12 {
                    violations.push(format!("gamma=0 endpoint at ({m},{l})"));
                }
                if gamma == 1.0 && (s - (1.0 - m)).abs() > 1e-12 {
                    violations.push(format!("gamma=1 endpoint at ({m},{l})"));
                }
                let p = p_its(m);
                let top = p.iter().cloned().fold(f64::MIN, f64::max);
                for tau in [0.0, 0.3, 0.5, 0.85, 0.95] {
                    let gate = reliability_gate(&p, s, tau);
                    if gate.passed != (top > tau && top > s) {
                        violations.push(format!("gate at ({m},{s},{tau})"));
                    }
                }
            }
        }
    }
    for (g, &gamma) in gammas.iter().enumerate() {
        for a in 0..50 {
            for b in 1..50 {
                if gamma > 0.0 && grid[b][a][g] >= grid[b - 1][a][g] {
                    violations.push(format!("not decreasing in max at gamma={gamma}"));
                }
                if gamma < 1.0 && grid[a][b][g] <= grid[a][b - 1][g] {
                    violations.push(format!("not increasing in last at gamma={gamma}"));
                }
            }
        }
    }
    let uniform = uncertainty_score(&[1.0 / 6.0; 6], &[1.0 / 7.0; 7], 0.5).unwrap().value;
    let uniform_ok = (uniform - 0.488_095_238_095_238).abs() <= 1e-9;
    (
        violations.is_empty() && uniform_ok,
        format!(
            "50x50x11 grid, {} violations{}; uniform K=6 score {uniform:.9}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn pairwise_auroc(scores: &[f64], unseen: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in (0..scores.len()).filter(|&i| unseen[i]) {
        for j in (0..scores.len()).filter(|&j| !unseen[j]) {
            pairs += 1;
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn criterion_3() -> (bool, String) {
    let mut rng = rng::stream(303, 0);
    let mut mismatches = 0;
    let mut heavy_ties = 0;
    for trial in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = if trial % 2 == 0 { rng.random_range(1..=4) } else { 1_000_000 };
        heavy_ties += usize::from(levels <= 4);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut unseen: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        unseen[0] = true;
        unseen[1] = false;
        if compute_auroc(&scores, &unseen).unwrap() != pairwise_auroc(&scores, &unseen) {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("500 instances ({heavy_ties} with <= 4 distinct scores), {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------- criterion 4

#[derive(Default)]
struct StructureProbe {
    hashes: Vec<(usize, Vec<u64>)>,
    refresh_equal: Vec<bool>,
    probe: Option<Matrix>,
}

fn pair_outputs_equal(pair: &TeacherStudentPair, x: &Matrix) -> bool {
    [HeadKind::K, HeadKind::KPlusOne]
        .into_iter()
        .filter(|h| pair.student.has_head(*h))
        .all(|h| pair.teacher.forward(x, h).unwrap() == pair.student.forward(x, h).unwrap())
}

impl TrainObserver for StructureProbe {
    fn on_step(&mut self, info: &StepInfo, models: &TrainedModels) {
        let h = models.pairs().iter().map(|p| p.teacher.param_hash()).collect();
        self.hashes.push((info.iteration, h));
    }

    fn on_iteration_end(&mut self, _iteration: usize, models: &TrainedModels) -> Result<()> {
        let x = self.probe.as_ref().unwrap();
        self.refresh_equal.push(models.pairs().iter().all(|p| pair_outputs_equal(p, x)));
        Ok(())
    }
}

fn criterion_4() -> (bool, String) {
    let bench = Benchmark::desk(0);
    let split = bench.split().unwrap();
    let rows: Vec<&[f64]> = split.unlabeled.iter().map(|e| e.input.as_slice()).collect();
    let probe = Matrix::from_rows(&rows, split.dim).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in [AblationMode::Full, AblationMode::SupervisedOnly] {
        let config = TrainConfig {
            iterations: 2,
            epochs_per_iteration: 5,
            ..bench.config(mode)
        };
        let mut obs = StructureProbe {
            probe: Some(probe.clone()),
            ..Default::default()
        };
        let mut state = TrainState::new(config.clone(), &split).unwrap();
        while state.iteration < config.iterations {
            train_dts_iteration(&mut state, &split, &mut obs).unwrap();
        }
        let frozen = (0..config.iterations).all(|it| {
            let h: Vec<_> = obs.hashes.iter().filter(|s| s.0 == it).map(|s| &s.1).collect();
            !h.is_empty() && h.windows(2).all(|w| w[0] == w[1])
        });
        let refreshed = obs.refresh_equal.len() == 2 && obs.refresh_equal.iter().all(|e| *e);
        let epochs = state.history.len();
        let forwards = state.history.last().unwrap().unlabeled_forwards;
        let containment = mode != AblationMode::SupervisedOnly || forwards == 0;
        ok &= frozen && refreshed && epochs == 10 && containment;
        notes.push(format!(
            "{mode}: frozen={frozen} refresh_equal={refreshed} epochs={epochs}/10 unlabeled_forwards={forwards}"
        ));
    }
    (ok, notes.join("; "))
}

// ---------------------------------------------------------- criteria 5 to 9

#[derive(Clone)]
struct Run {
    label: String,
    seed: u64,
    outcome: TrainOutcome,
}

fn run_jobs(jobs: Vec<(String, TrainConfig)>) -> Vec<Run> {
    jobs.into_par_iter()
        .map(|(label, config)| {
            let split = Benchmark::desk(config.seed).split().unwrap();
            Run {
                seed: config.seed,
                outcome: dts_core::run_training(&config, &split).unwrap(),
                label,
            }
        })
        .collect()
}

fn mode_jobs(modes: &[AblationMode]) -> Vec<(String, TrainConfig)> {
    modes
        .iter()
        .flat_map(|&m| SEEDS.map(|s| (m.name().to_string(), Benchmark::desk(s).config(m))))
        .collect()
}

fn by_label<'a>(runs: &'a [Run], label: &str) -> Vec<&'a Run> {
    let mut v: Vec<&Run> = runs.iter().filter(|r| r.label == label).collect();
    v.sort_by_key(|r| r.seed);
    v
}

fn mean_accuracy(runs: &[Run], label: &str) -> f64 {
    mean(&by_label(runs, label).iter().map(|r| r.outcome.final_eval.accuracy).collect::<Vec<_>>())
}

fn late_auroc_std(run: &Run) -> f64 {
    let h = &run.outcome.history;
    let late: Vec<f64> = h[h.len() / 2..].iter().map(|r| r.auroc).collect();
    population_std(&late)
}

fn metrics_stream(run: &Run) -> String {
    let o = &run.outcome;
    let mut lines: Vec<String> = o.pretrain_history.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    lines.extend(o.history.iter().map(|r| serde_json::to_string(r).unwrap()));
    lines.push(serde_json::to_string(&o.final_eval).unwrap());
    lines.join("\n")
}

fn criterion_5(runs: &[Run], elapsed: Duration) -> (bool, String) {
    let full = mean_accuracy(runs, "full");
    let sup = mean_accuracy(runs, "supervised_only");
    let aurocs: Vec<f64> = by_label(runs, "full").iter().map(|r| r.outcome.final_eval.auroc).collect();
    let auroc = mean(&aurocs);
    let within_time = elapsed < Duration::from_secs(600);
    (
        full >= sup + 0.02 && auroc >= 0.80 && within_time,
        format!(
            "full acc {full:.4} vs supervised {sup:.4} (+{:.2} pts, need +2.00); full AUROC {auroc:.4} (per seed {:?}, need >= 0.80); runs {:.0}s of 600s",
            100.0 * (full - sup),
            aurocs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6(runs: &[Run]) -> (bool, String) {
    let full: Vec<f64> = by_label(runs, "full").into_iter().map(late_auroc_std).collect();
    let ablated: Vec<f64> = by_label(runs, "no_k1_ots").into_iter().map(late_auroc_std).collect();
    let (f, a) = (mean(&full), mean(&ablated));
    (
        f <= a,
        format!("late-epoch AUROC std full {f:.4} vs no_k1_ots {a:.4} (per seed {full:.4?} vs {ablated:.4?})"),
    )
}

fn criterion_7(runs: &[Run], elapsed: Duration) -> (bool, String) {
    let full = mean_accuracy(runs, "full");
    let mut exceed = Vec::new();
    let mut notes = Vec::new();
    for mode in ["no_its", "no_soft_weighting", "no_k1_its", "no_k1_ots"] {
        let acc = mean_accuracy(runs, mode);
        notes.push(format!("{mode} {acc:.4}"));
        if acc > full {
            exceed.push(acc - full);
        }
    }
    // One ablation may edge past full DTS by at most half a point.
    let ties_ok = exceed.is_empty() || (exceed.len() == 1 && exceed[0] <= 0.005);
    let within_time = elapsed < Duration::from_secs(1500);
    (
        ties_ok && within_time,
        format!(
            "full {full:.4} vs {}; {} above full; runs {:.0}s of 1500s",
            notes.join(", "),
            exceed.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_8(base: &[Run], variants: &[Run]) -> (bool, String) {
    let full = mean_accuracy(base, "full");
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let mut labels: Vec<&str> = variants.iter().map(|r| r.label.as_str()).collect();
    labels.dedup();
    for label in labels {
        let delta = 100.0 * (mean_accuracy(variants, label) - full);
        worst = worst.max(delta.abs());
        notes.push(format!("{label} {delta:+.2}"));
    }
    (worst < 3.0, format!("max |change| {worst:.2} pts < 3 ({})", notes.join(", ")))
}

fn criterion_9(base: &[Run], repeat: &[Run]) -> (bool, String) {
    let mut identical = 0;
    for r in by_label(repeat, "full") {
        let original = by_label(base, "full").into_iter().find(|b| b.seed == r.seed).unwrap();
        identical += usize::from(metrics_stream(original) == metrics_stream(r));
    }
    (
        identical == SEEDS.len(),
        format!("{identical}/{} seeds produced bit-identical metrics streams", SEEDS.len()),
    )
}

fn robustness_jobs() -> Vec<(String, TrainConfig)> {
    type Tweak = fn(&mut TrainConfig, f64);
    let knobs: [(&str, Tweak); 3] = [
        ("lambda_seen", |c, d| c.lambda_seen += d),
        ("lambda_unseen", |c, d| c.lambda_unseen += d),
        ("tau", |c, d| c.tau += d),
    ];
    let mut jobs = Vec::new();
    for (name, tweak) in knobs {
        for delta in [-0.1, 0.1] {
            for seed in SEEDS {
                let mut c = Benchmark::desk(seed).config(AblationMode::Full);
                tweak(&mut c, delta);
                jobs.push((format!("{name}{delta:+}"), c));
            }
        }
    }
    jobs
}

fn main() {
    let mut verdicts = Vec::new();
    for (id, f) in [(1u8, criterion_1 as fn() -> (bool, String)), (2, criterion_2), (3, criterion_3), (4, criterion_4)] {
        let v = timed(id, f);
        report(&v);
        verdicts.push(v);
    }

    let start = Instant::now();
    let mut runs = run_jobs(mode_jobs(&[
        AblationMode::Full,
        AblationMode::SupervisedOnly,
        AblationMode::NoK1Ots,
    ]));
    let c5_time = start.elapsed();
    let v = timed(5, || criterion_5(&runs, c5_time));
    report(&v);
    verdicts.push(v);
    let v = timed(6, || criterion_6(&runs));
    report(&v);
    verdicts.push(v);

    runs.extend(run_jobs(mode_jobs(&[
        AblationMode::NoIts,
        AblationMode::NoSoftWeighting,
        AblationMode::NoK1Its,
    ])));
    let c7_time = start.elapsed();
    let v = timed(7, || criterion_7(&runs, c7_time));
    report(&v);
    verdicts.push(v);

    let v = timed(8, || {
        let variants = run_jobs(robustness_jobs());
        criterion_8(&runs, &variants)
    });
    report(&v);
    verdicts.push(v);

    let v = timed(9, || {
        let repeat = run_jobs(mode_jobs(&[AblationMode::Full]));
        criterion_9(&runs, &repeat)
    });
    report(&v);
    verdicts.push(v);

    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", verdicts.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
