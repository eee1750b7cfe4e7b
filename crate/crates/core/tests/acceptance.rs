//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the binary
//! exits nonzero if any fails.

use std::collections::VecDeque;
use std::path::Path;
use std::time::{Duration, Instant};

use mcmf_core::data::{generate_synthetic, SynthConfig};
use mcmf_core::harness::{
    run_ablation, run_experiment, simulate, sweep_sparsity, Condition, ConstraintMode, ControllerKind, ExperimentSpec,
    LogSource, BENCHMARK_ADEQUATE_BUDGET, BENCHMARK_TIGHT_BUDGET,
};
use mcmf_core::mcmf::{
    init_controller, logistic, partial_j1, partial_j2, sigmoid_layer_grads, BudgetErrorMode, FeatureSet, Matrix,
    McmfConfig,
};
use mcmf_core::sim::{apply_dropout, Decision, Observation, PeriodDiagnostics};
use mcmf_core::{
    run_campaign, BidController, BidRecord, ConstraintSet, Counters, FixedController, McmfController, PeriodFeedback,
    PeriodMode, PidConfig, PidController, SimConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Nonzero magnitude in `[0.1, 2)` with a random sign.
fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(0.1..2.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let w: Vec<f64> = (0..n).map(|_| away_from_zero(&mut rng)).collect();
        let mut h: Vec<f64> = (0..n).map(|_| away_from_zero(&mut rng)).collect();
        // Keep the logit in the unsaturated range.
        let a: f64 = w.iter().zip(&h).map(|(p, q)| p * q).sum();
        if a.abs() > 4.0 {
            h.iter_mut().for_each(|v| *v *= 4.0 / a.abs());
        }
        let u_max = rng.random_range(0.5..2.0);
        let u = |w: &[f64], h: &[f64]| u_max * logistic(w.iter().zip(h).map(|(p, q)| p * q).sum());
        let (du_dh, du_dw) = sigmoid_layer_grads(&w, &h, u_max);
        for k in 0..n {
            let fd_h = central(
                |v| {
                    let mut hh = h.clone();
                    hh[k] = v;
                    u(&w, &hh)
                },
                h[k],
            );
            let fd_w = central(
                |v| {
                    let mut ww = w.clone();
                    ww[k] = v;
                    u(&ww, &h)
                },
                w[k],
            );
            worst = worst.max(rel_err(du_dh[k], fd_h)).max(rel_err(du_dw[k], fd_w));
        }

        let (q, z) = (rng.random_range(0.1..5.0), rng.random_range(0.1..3.0));
        let x = z + away_from_zero(&mut rng);
        let fd = central(|v| q * (v - z).powi(2), x);
        worst = worst.max(rel_err(partial_j1(q, x, z), fd));

        let (r, up) = (rng.random_range(0.1..5.0), rng.random_range(0.0..1.0));
        let uc = up + away_from_zero(&mut rng);
        let fd = central(|v| r * (v - up).powi(2), uc);
        worst = worst.max(rel_err(partial_j2(r, uc, up), fd));
    }
    check(worst < 1e-5, format!("max relative error {worst:.3e} over 1000 inputs"))
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn random_counters(rng: &mut ChaCha8Rng) -> Counters {
    let imp = rng.random_range(0..500);
    let clk = rng.random_range(0..=imp);
    Counters {
        bids_participated: 1000,
        impressions: imp,
        clicks: clk,
        conversions: rng.random_range(0..=clk.min(20)),
        cost: rng.random_range(0..20_000),
        sum_pctr: rng.random_range(0.0..100.0),
        sum_pcvr: rng.random_range(0.0..100.0),
    }
}

fn chain_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cs = ConstraintSet::single(1800.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for i in 0..100u64 {
        let config = McmfConfig {
            hidden_dim: 1,
            feature_set: FeatureSet::Ng,
            output_scale: rng.random_range(0.5..2.0),
            control_weight: rng.random_range(0.1..3.0),
            rng_seed: i,
            ..McmfConfig::default()
        };
        let q = 1.0;
        let mut st = init_controller(&config, 2);
        st.w_enc = Matrix::from_rows(&[vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]]);
        st.w_dec = vec![rng.random_range(-2.0..2.0)];
        st.h_curr = vec![rng.random_range(-2.0..2.0)];
        st.h_prev = vec![if i % 10 == 0 { st.h_curr[0] } else { rng.random_range(-2.0..2.0) }];
        st.u_curr = rng.random_range(0.05..0.95) * config.output_scale;
        st.u_prev = rng.random_range(0.05..0.95) * config.output_scale;
        st.x_curr = vec![1.0, rng.random_range(0.0..3.0)];
        st.x_prev = vec![1.0, rng.random_range(0.0..3.0)];
        let prev_fb = rng.random_range(0.0..5.0);
        st.fb_curr = vec![prev_fb];
        st.forwards = 2;
        st.observed = 1;
        st.grad_log_enc = VecDeque::new();
        st.grad_log_dec = VecDeque::new();

        let period = random_counters(&mut rng);
        let mut cumulative = random_counters(&mut rng);
        cumulative.cost += period.cost;
        cumulative.conversions += period.conversions;
        let feedback = PeriodFeedback { period, cumulative };
        let before = st.clone();
        let g = st.backward(&cs, &feedback, 0.5, &config).unwrap();

        // Hand expansion of the chain for one hidden unit and one constraint.
        let ppc = |c: &Counters| c.cost as f64 / (c.conversions.max(1) as f64) / 1800.0;
        let du = before.u_curr - before.u_prev;
        let dj2 = 2.0 * config.control_weight * du;
        let dj1 = 2.0 * q * (ppc(&cumulative) - 1.0);
        let dxdu = sgn((ppc(&period) - prev_fb) * du);
        let chain = dj1 * dxdu + dj2;
        let a = before.w_dec[0] * before.h_curr[0];
        let s = (-a).exp() / (1.0 + (-a).exp()).powi(2);
        let du_dh = config.output_scale * s * before.w_dec[0];
        let du_dwd = config.output_scale * s * before.h_curr[0];
        let hebb = sgn((before.h_curr[0] - before.h_prev[0]) * du);
        let expect_dec = chain * du_dwd;
        let expect_enc = [
            chain * du_dh * before.x_curr[0] * hebb,
            chain * du_dh * before.x_curr[1] * hebb,
        ];
        let diff = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        worst = worst
            .max(diff(g.chain, chain))
            .max(diff(g.dec[0], expect_dec))
            .max(diff(g.enc.get(0, 0), expect_enc[0]))
            .max(diff(g.enc.get(0, 1), expect_enc[1]));
        nonzero += usize::from(expect_enc[0] != 0.0);
    }
    check(
        worst <= 1e-12,
        format!("max deviation {worst:.3e} over 100 states ({nonzero} with nonzero encoder gradient)"),
    )
}

/// Wraps the learning controller and measures every weight step.
struct StepProbe {
    inner: McmfController,
    steps: Vec<f64>,
    skipped_moves: usize,
}

fn flat(c: &McmfController) -> (Vec<f64>, Vec<f64>) {
    let s = c.state();
    (s.w_enc.as_slice().to_vec(), s.w_dec.clone())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl BidController for StepProbe {
    fn name(&self) -> &str {
        "probe"
    }
    fn decide(&mut self, d: &Decision<'_>) -> f64 {
        self.inner.decide(d)
    }
    fn observe(&mut self, o: &Observation<'_>) -> PeriodDiagnostics {
        let (e0, d0) = flat(&self.inner);
        let diag = self.inner.observe(o);
        let (e1, d1) = flat(&self.inner);
        let report = self.inner.last_update();
        for (applied, a, b) in [(report.enc_applied, &e0, &e1), (report.dec_applied, &d0, &d1)] {
            if applied {
                self.steps.push(dist(a, b));
            } else if a != b {
                self.skipped_moves += 1;
            }
        }
        diag
    }
}

fn normalized_step() -> Outcome {
    let spec = ExperimentSpec::synthetic_benchmark();
    let log = generate_synthetic(&SynthConfig {
        n_records: 500_000,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut steps = Vec::new();
    let mut skipped_moves = 0;
    for (mode, budget_mode) in [
        (ConstraintMode::Multi, BudgetErrorMode::PaperLiteral),
        (ConstraintMode::Multi, BudgetErrorMode::Paced),
        (ConstraintMode::Single, BudgetErrorMode::PaperLiteral),
    ] {
        let budget = 10_000_000;
        let cs = spec.constraint_set(&Condition::new("c", budget, mode)).unwrap();
        let config = McmfConfig {
            budget_error_mode: budget_mode,
            ..spec.mcmf.clone()
        };
        let mut probe = StepProbe {
            inner: McmfController::new(config, &cs).unwrap(),
            steps: Vec::new(),
            skipped_moves: 0,
        };
        let res = run_campaign(&log, &mut probe, &cs, &SimConfig { budget, ..SimConfig::default() });
        assert_eq!(res.trace.len(), 500);
        steps.extend(probe.steps);
        skipped_moves += probe.skipped_moves;
    }
    let worst = steps.iter().map(|s| (s - 0.01).abs()).fold(0.0, f64::max);
    check(
        worst <= 1e-9 && skipped_moves == 0 && !steps.is_empty(),
        format!(
            "{} applied updates over three 500-period runs, max |‖ΔW‖−0.01| = {worst:.3e}, {skipped_moves} moves without an applied update",
            steps.len()
        ),
    )
}

/// Per-record replay under a piecewise-constant multiplier that stops bidding
/// once spend reaches the budget; the reference accounting.
#[derive(Debug, Default, PartialEq)]
struct Naive {
    imp: u64,
    clk: u64,
    conv: u64,
    cost: u64,
}

fn naive_replay(log: &[BidRecord], u_of: impl Fn(usize) -> f64, ppc_e: f64, budget: u64) -> Naive {
    let mut n = Naive::default();
    for (i, r) in log.iter().enumerate() {
        if n.cost >= budget {
            break;
        }
        let bid = 1000.0 * r.pctr * r.pcvr * ppc_e * u_of(i);
        if bid > r.market_price as f64 {
            n.imp += 1;
            n.cost += r.market_price;
            n.clk += u64::from(r.click);
            n.conv += u64::from(r.conversion);
        }
    }
    n
}

fn random_controller(rng: &mut ChaCha8Rng, cs: &ConstraintSet, seed: u64) -> Box<dyn BidController> {
    let u_max = rng.random_range(0.0005..0.01);
    match rng.random_range(0..3) {
        0 => Box::new(
            McmfController::new(
                McmfConfig {
                    output_scale: u_max,
                    encoder_init: rng.random_range(0.0..3.0),
                    feature_set: FeatureSet::ALL[rng.random_range(0..4)],
                    budget_error_mode: if rng.random_bool(0.5) {
                        BudgetErrorMode::Paced
                    } else {
                        BudgetErrorMode::PaperLiteral
                    },
                    rng_seed: seed,
                    ..McmfConfig::default()
                },
                cs,
            )
            .unwrap(),
        ),
        1 => Box::new(PidController::new(PidConfig {
            u_min: u_max / 100.0,
            u_max,
            u_init: u_max / 2.0,
            kp: rng.random_range(0.0..2.0),
            ..PidConfig::default()
        })),
        _ => Box::new(FixedController::new(u_max * rng.random_range(0.01..1.0))),
    }
}

fn budget_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut failures = 0;
    let mut binding = 0;
    for i in 0..1000u64 {
        let n = rng.random_range(0..5000);
        let log = generate_synthetic(&SynthConfig {
            n_records: n,
            seed: i,
            price_log_sigma: rng.random_range(0.0..1.5),
            ..SynthConfig::default()
        })
        .unwrap();
        let budget = rng.random_range(0..n as u64 * 12 + 1);
        let cs = if rng.random_bool(0.5) && budget > 0 {
            ConstraintSet::multi(1800.0, budget, 1.0, 1.0).unwrap()
        } else {
            ConstraintSet::single(1800.0, 1.0).unwrap()
        };
        let period = rng.random_range(1..1500);
        let sim = SimConfig {
            budget,
            period: PeriodMode::Count(period),
            dropout_p: if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 0.0 },
            dropout_seed: i,
        };
        let mut controller = random_controller(&mut rng, &cs, i);
        let res = run_campaign(&log, &mut controller, &cs, &sim);

        let thinned = apply_dropout(&log, sim.dropout_p, sim.dropout_seed);
        let max_price = thinned.iter().map(|r| r.market_price).max().unwrap_or(0);
        let us: Vec<f64> = res.trace.iter().map(|t| t.u).collect();
        let replayed = us.len() * period;
        let reference = naive_replay(
            &thinned[..replayed.min(thinned.len())],
            |k| us[k / period],
            1800.0,
            budget,
        );
        let m = &res.metrics;
        let ok = m.cost <= budget + max_price
            && (reference.imp, reference.clk, reference.conv, reference.cost) == (m.imp, m.clk, m.conv, m.cost)
            && (m.cost < budget || res.terminated);
        failures += usize::from(!ok);
        binding += usize::from(res.terminated);
    }
    check(
        failures == 0,
        format!("{failures} violations in 1000 campaigns ({binding} hit the budget)"),
    )
}

fn replay_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut mismatches = 0;
    for i in 0..50u64 {
        let log = generate_synthetic(&SynthConfig {
            n_records: 1000,
            seed: 500 + i,
            ..SynthConfig::default()
        })
        .unwrap();
        let u = rng.random_range(0.0002..0.01);
        let budget = if i % 2 == 0 { u64::MAX / 2 } else { rng.random_range(0..10_000) };
        let cs = ConstraintSet::single(1800.0, 1.0).unwrap();
        let period = rng.random_range(1..400);
        let sim = SimConfig {
            budget,
            period: PeriodMode::Count(period),
            ..SimConfig::default()
        };
        let res = run_campaign(&log, &mut FixedController::new(u), &cs, &sim);
        let reference = naive_replay(&log, |_| u, 1800.0, budget);
        let m = &res.metrics;
        let ppc = (reference.conv > 0).then(|| reference.cost as f64 / reference.conv as f64);
        if (m.imp, m.clk, m.conv, m.cost, m.ppc) != (reference.imp, reference.clk, reference.conv, reference.cost, ppc) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches on 50 logs of 1000 records"))
}

fn closed_loop_spec(condition: Condition, controllers: Vec<ControllerKind>) -> ExperimentSpec {
    let mut spec = ExperimentSpec::synthetic_benchmark();
    spec.conditions = vec![condition];
    spec.controllers = controllers;
    spec.trials = 20;
    spec.resample_log = true;
    spec
}

fn closed_loop_tracking() -> Outcome {
    let spec = closed_loop_spec(
        Condition::new("adequate-multi", BENCHMARK_ADEQUATE_BUDGET, ConstraintMode::Multi),
        vec![ControllerKind::Mcmf],
    );
    let runs = simulate(&spec, 0.0, spec.trials).unwrap();
    let mut good = 0;
    let mut worst_final = Vec::new();
    for run in &runs {
        let trace = &run.result.trace;
        let tail = &trace[trace.len() * 3 / 4..];
        let dev = tail
            .iter()
            .map(|t| (t.cumulative.cost as f64 / t.cumulative.conversions.max(1) as f64 / 1800.0 - 1.0).abs())
            .fold(0.0, f64::max);
        worst_final.push(format!("{dev:.2}"));
        good += usize::from(trace.len() == 200 && dev <= 0.15);
    }
    check(
        good >= 16,
        format!(
            "{good}/20 seeds within ±15% over the last 50 of 200 periods; worst deviation per seed [{}]",
            worst_final.join(" ")
        ),
    )
}

fn tight_ordering() -> Outcome {
    let spec = closed_loop_spec(
        Condition::new("tight-single", BENCHMARK_TIGHT_BUDGET, ConstraintMode::Single),
        vec![ControllerKind::Mcmf, ControllerKind::Pid],
    );
    let runs = simulate(&spec, 0.0, spec.trials).unwrap();
    let pairs: Vec<(u64, u64)> = runs
        .chunks(2)
        .map(|c| {
            assert_eq!((c[0].controller, c[1].controller), (ControllerKind::Mcmf, ControllerKind::Pid));
            (c[0].result.metrics.conv, c[1].result.metrics.conv)
        })
        .collect();
    let wins = pairs.iter().filter(|(m, p)| m >= p).count();
    let total = |f: fn(&(u64, u64)) -> u64| pairs.iter().map(f).sum::<u64>();
    check(
        wins * 10 >= 7 * pairs.len(),
        format!(
            "learning controller ≥ PID in {wins}/20 seeds (total conversions {} vs {})",
            total(|p| p.0),
            total(|p| p.1)
        ),
    )
}

fn sparsity_behaviour() -> Outcome {
    let mut spec = ExperimentSpec::synthetic_benchmark();
    spec.conditions = vec![
        Condition::new("adequate-multi", BENCHMARK_ADEQUATE_BUDGET, ConstraintMode::Multi),
        Condition::new("tight-single", BENCHMARK_TIGHT_BUDGET, ConstraintMode::Single),
    ];
    spec.resample_log = true;
    let dir = tempfile::tempdir().unwrap();
    spec.output_dir = dir.path().to_path_buf();
    let summary = sweep_sparsity(&spec).unwrap();
    let unsafe_trials: usize = summary.iter().map(|r| r.trials - r.budget_safe).sum();
    let mut violations = Vec::new();
    for cond in &spec.conditions {
        for kind in &spec.controllers {
            let cells: Vec<_> = summary
                .iter()
                .filter(|r| r.condition == cond.name && r.controller == kind.as_str())
                .collect();
            for w in cells.windows(2) {
                let (a, b) = (w[0], w[1]);
                if b.mean_conv > a.mean_conv && b.ci_low > a.ci_high {
                    violations.push(format!("{}/{} p={}→{}", cond.name, kind.as_str(), a.p, b.p));
                }
            }
        }
    }
    let trials: usize = summary.iter().map(|r| r.trials).sum();
    check(
        unsafe_trials == 0 && violations.is_empty() && summary.iter().all(|r| r.trials == 100),
        format!(
            "{trials} trials over p=0.1..0.9, {unsafe_trials} over budget, monotonicity violations beyond CI overlap: {violations:?}"
        ),
    )
}

fn read_all(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::synthetic_benchmark();
    spec.trials = 2;
    spec.sweep.trials = 5;
    spec.sweep.p_list = vec![0.0, 0.3, 0.7];
    spec.log = LogSource::Synthetic(SynthConfig {
        n_records: 50_000,
        ..SynthConfig::default()
    });
    let mut same = true;
    let files = [
        ("run", vec!["metrics.csv", "trace.csv"]),
        ("sweep", vec!["sweep_raw.csv", "sweep_summary.csv"]),
        ("ablation", vec!["ablation.csv"]),
    ];
    for (label, names) in &files {
        let first = root.path().join(format!("{label}-a"));
        let again = root.path().join(format!("{label}-b"));
        let mut s = spec.clone();
        s.output_dir = first.clone();
        match *label {
            "run" => drop(run_experiment(&s).unwrap()),
            "sweep" => drop(sweep_sparsity(&s).unwrap()),
            _ => drop(run_ablation(&s).unwrap()),
        }
        mcmf_core::harness::rerun_manifest(&first.join("manifest.toml"), Some(&again)).unwrap();
        same &= read_all(&first, names) == read_all(&again, names);
    }
    check(same, "run, sweep and ablation outputs re-run from their manifests byte-identically".into())
}

fn throughput() -> Outcome {
    let log = generate_synthetic(&SynthConfig {
        n_records: 2_000_000,
        ..SynthConfig::default()
    })
    .unwrap();
    let cs = ConstraintSet::single(1800.0, 1.0).unwrap();
    let sim = SimConfig {
        budget: u64::MAX / 2,
        ..SimConfig::default()
    };
    let mut best = Duration::MAX;
    for _ in 0..3 {
        let start = Instant::now();
        let res = run_campaign(&log, &mut FixedController::new(0.001), &cs, &sim);
        best = best.min(start.elapsed());
        assert_eq!(res.trace.len(), 2000);
    }
    let rate = log.len() as f64 / best.as_secs_f64();
    check(rate >= 500_000.0, format!("{:.1}M records/s single-threaded", rate / 1e6))
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 gradient oracle", Duration::from_secs(5), gradient_oracle),
        ("2 one-dimensional chain oracle", Duration::from_secs(5), chain_oracle),
        ("3 normalized step", Duration::MAX, normalized_step),
        ("4 budget safety", Duration::from_secs(120), budget_safety),
        ("5 brute-force replay equivalence", Duration::from_secs(30), replay_equivalence),
        ("6 closed-loop tracking", Duration::from_secs(120), closed_loop_tracking),
        ("7 tight-budget ordering vs PID", Duration::from_secs(300), tight_ordering),
        ("8 sparsity behaviour", Duration::from_secs(600), sparsity_behaviour),
        ("9 determinism", Duration::MAX, determinism),
        ("10 throughput", Duration::MAX, throughput),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let in_time = took < limit;
        let pass = outcome.pass && in_time;
        failed += usize::from(!pass);
        let budget = if limit == Duration::MAX {
            String::new()
        } else {
            format!(", limit {}s", limit.as_secs())
        };
        println!(
            "criterion {name}: {} ({}; {:.2}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
