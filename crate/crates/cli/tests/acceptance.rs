//! Acceptance criteria 1-8. Each test writes one `PASS`/`FAIL` line to
//! stderr (uncaptured) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use elmeta::distfit::{default_t_grid, f_hat, f_tilde, g_hat, g_tilde_cdf};
use elmeta::estimation::{fit_both, FitReport};
use elmeta::inference::{ParamId, Profiler};
use elmeta::likelihood::{cond_loglik, el_weights_phi, h1_argmax, selection_probs, solve_lambda, LambdaStatus};
use elmeta::model::{f1_select_given_study, f3_select_given_se};
use elmeta::simulate::{
    gen_dataset, mc_replicates, qq_stats, summarize, Hypothesis, Method, QqTable, ReplicateOutcome, SimConfig,
    SimSummary,
};
use elmeta::special::{chi2_cdf, chi2_quantile, ks_pvalue, ks_statistic, std_normal_cdf};
use elmeta::{MetaDataset, SelectionParams, StudyRecord};
use elmeta_cli::fit::{run_fit, FitArgs, REPORT_ROWS};
use elmeta_cli::input::read_studies;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const RATE_DRAWS: usize = 100_000;
const RATE_TOL: f64 = 0.02;
const RATE_RUNTIME: Duration = Duration::from_secs(5);
// criterion 2
const TABLE_REPS: usize = 500;
const FL_THETA_BIAS: f64 = -0.0007;
const CL_THETA_BIAS: f64 = -0.0339;
const BIAS_TOL: f64 = 0.01;
const FL_THETA_RMSE: f64 = 0.0812;
const RMSE_REL_TOL: f64 = 0.25;
const CP_RANGE: (f64, f64) = (0.92, 0.98);
const TABLE_RUNTIME: Duration = Duration::from_secs(30 * 60);
// criterion 3
const N_CP_MARGIN: f64 = 0.02;
// criteria 4 and 5
const QQ_REPS: usize = 500;
const KS_LEVEL: f64 = 0.01;
const LR_DF: f64 = 7.0;
// criterion 6
const LAMBDA_DATASETS: usize = 100;
const LAMBDA_TOL: f64 = 1e-5;
const ARGMAX_CASES: usize = 200;
const CI_DATASETS: usize = 20;
const CI_GRID_STEPS: usize = 40;
const ORACLE_RUNTIME: Duration = Duration::from_secs(120);
// criterion 7
const INVARIANT_DATASETS: u64 = 40;
const SUM_TOL: f64 = 1e-10;
const MOMENT_TOL: f64 = 1e-8;
const REDUCTION_TOL: f64 = 1e-12;

const SEED: u64 = 20_240_601;

fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn gamma(g1: f64, g2: f64, rho: f64, tau: f64, theta: f64) -> SelectionParams {
    SelectionParams::new(g1, g2, rho, tau, theta).unwrap()
}

fn table_config() -> SimConfig {
    let mut cfg = SimConfig::new(100, gamma(-0.6, 0.8, 0.2, 0.5, 0.4), TABLE_REPS, SEED);
    cfg.ci_params = vec![ParamId::Theta, ParamId::NTotal];
    cfg
}

fn qq_config() -> SimConfig {
    SimConfig::new(50, gamma(-0.6, 0.8, 0.2, 1.0, 0.2), QQ_REPS, SEED + 1)
}

struct TableRun {
    outcomes: Vec<ReplicateOutcome>,
    summary: SimSummary,
    elapsed: Duration,
}

fn table_run() -> &'static TableRun {
    static RUN: OnceLock<TableRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = table_config();
        let t = Instant::now();
        let outcomes = mc_replicates(&cfg).unwrap();
        let summary = summarize(&cfg, &outcomes);
        TableRun { outcomes, summary, elapsed: t.elapsed() }
    })
}

fn qq_run() -> &'static QqTable {
    static RUN: OnceLock<QqTable> = OnceLock::new();
    RUN.get_or_init(|| qq_stats(&qq_config()).unwrap())
}

#[test]
fn criterion_1_publishing_rate() {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (g1, g2, target) in [(-0.6, 0.8, 0.80), (-1.0, 0.6, 0.64)] {
        let cfg = SimConfig::new(100, gamma(g1, g2, 0.2, 0.5, 0.4), 1, SEED);
        let rate = elmeta::simulate::empirical_publishing_rate(&cfg, RATE_DRAWS).unwrap();
        ok &= (rate - target).abs() <= RATE_TOL;
        parts.push(format!("({g1}, {g2}): {rate:.4} vs {target}"));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < RATE_RUNTIME;
    report(1, ok, &format!("{}; {:.2}s", parts.join(", "), elapsed.as_secs_f64()));
    assert!(ok);
}

#[test]
fn criterion_2_table_row() {
    let run = table_run();
    let s = &run.summary;
    let fl = s.row(Method::FL, ParamId::Theta).unwrap();
    let cl = s.row(Method::CL, ParamId::Theta).unwrap();
    let fl_cp = fl.cp.unwrap_or(f64::NAN);
    let checks = [
        ((fl.bias - FL_THETA_BIAS).abs() <= BIAS_TOL, format!("FL bias {:.4}", fl.bias)),
        ((fl.rmse - FL_THETA_RMSE).abs() <= RMSE_REL_TOL * FL_THETA_RMSE, format!("FL rmse {:.4}", fl.rmse)),
        ((CP_RANGE.0..=CP_RANGE.1).contains(&fl_cp), format!("FL cp {fl_cp:.3} ({} intervals)", fl.n_intervals)),
        ((cl.bias - CL_THETA_BIAS).abs() <= BIAS_TOL, format!("CL bias {:.4}", cl.bias)),
        (fl.bias.abs() < cl.bias.abs(), "|FL bias| < |CL bias|".to_string()),
        (run.elapsed < TABLE_RUNTIME, format!("{:.0}s", run.elapsed.as_secs_f64())),
    ];
    let ok = checks.iter().all(|c| c.0);
    let detail: Vec<String> = checks.iter().map(|(p, d)| format!("{d}{}", if *p { "" } else { " [fail]" })).collect();
    report(
        2,
        ok,
        &format!(
            "{}; used CL {}/{} FL {}/{}",
            detail.join(", "),
            cl.n_estimates,
            s.replicates,
            fl.n_estimates,
            s.replicates
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_3_n_coverage() {
    let run = table_run();
    let s = &run.summary;
    let fl = s.row(Method::FL, ParamId::NTotal).unwrap();
    let cl = s.row(Method::CL, ParamId::NTotal).unwrap();
    let (fl_cp, cl_cp) = (fl.cp.unwrap_or(f64::NAN), cl.cp.unwrap_or(f64::NAN));
    let mut with_ci = 0;
    let mut below_n = 0;
    for o in &run.outcomes {
        if let Some(ci) = o.fl.as_ref().ok().and_then(|m| m.interval(ParamId::NTotal)) {
            with_ci += 1;
            if ci.lower < o.n_published as f64 {
                below_n += 1;
            }
        }
    }
    let ok = fl_cp - cl_cp >= N_CP_MARGIN && below_n == 0 && with_ci > 0;
    report(
        3,
        ok,
        &format!(
            "FL cp {fl_cp:.3} ({}), CL cp {cl_cp:.3} ({}), lower < n in {below_n}/{with_ci}",
            fl.n_intervals, cl.n_intervals
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_4_chi2_calibration() {
    let q = qq_run();
    let r: Vec<f64> = q.lr_truth.iter().map(|&(_, v)| v).collect();
    let d = ks_statistic(&r, |x| chi2_cdf(LR_DF, x));
    let p = ks_pvalue(r.len(), d);
    let ok = p >= KS_LEVEL && !r.is_empty();
    report(4, ok, &format!("KS vs chi2_7: D {d:.4}, p {p:.4}, {} of {QQ_REPS} replicates", r.len()));
    assert!(ok);
}

#[test]
fn criterion_5_qq() {
    let q = qq_run();
    let mut parts = Vec::new();
    let mut ok = true;
    for h in Hypothesis::ALL {
        let v = q.lr(h);
        let p = ks_pvalue(v.len(), ks_statistic(&v, std_normal_cdf));
        ok &= p >= KS_LEVEL && !v.is_empty();
        parts.push(format!("LR {h:?} p {p:.4} (m {})", v.len()));
    }
    let w = q.wald(Hypothesis::H03);
    let pw = ks_pvalue(w.len(), ks_statistic(&w, std_normal_cdf));
    ok &= pw < KS_LEVEL && !w.is_empty();
    parts.push(format!("Wald H03 p {pw:.4} (m {}, must reject)", w.len()));
    report(5, ok, &parts.join(", "));
    assert!(ok);
}

/// Root of the multiplier equation located by successive grid refinement.
fn lambda_by_grid(alpha: f64, phis: &[f64]) -> f64 {
    let d: Vec<f64> = phis.iter().map(|p| p - alpha).collect();
    let resid = |l: f64| d.iter().map(|di| di / (1.0 + l * di)).sum::<f64>();
    let dmax = d.iter().cloned().fold(f64::MIN, f64::max);
    let dmin = d.iter().cloned().fold(f64::MAX, f64::min);
    let (mut lo, mut hi) = (-1.0 / dmax, -1.0 / dmin);
    for _ in 0..12 {
        // the residual is +inf at lo and -inf at hi
        let pts: Vec<f64> = (0..=100).map(|k| lo + (hi - lo) * k as f64 / 100.0).collect();
        let k = (1..100).find(|&k| resid(pts[k]) < 0.0).unwrap_or(100);
        lo = pts[k - 1];
        hi = pts[k];
    }
    0.5 * (lo + hi)
}

fn log_choose(big: u64, n: usize) -> f64 {
    (1..=n as u64).map(|k| ((big - n as u64 + k) as f64).ln() - (k as f64).ln()).sum()
}

#[test]
fn criterion_6_oracles() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);

    let mut lambda_worst = 0.0f64;
    let mut lambda_done = 0;
    while lambda_done < LAMBDA_DATASETS {
        let n = rng.gen_range(2..=6);
        let studies: Vec<StudyRecord> =
            (0..n).map(|_| StudyRecord::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.05..1.0)).unwrap()).collect();
        let g12 = (rng.gen_range(-1.5..0.5), rng.gen_range(0.0..1.0));
        let phis = selection_probs(g12.0, g12.1, &studies);
        let (lo, hi) = phis.iter().fold((1.0f64, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        if hi - lo < 1e-3 {
            continue;
        }
        let alpha = rng.gen_range(lo + 0.05 * (hi - lo)..hi - 0.05 * (hi - lo));
        let sol = solve_lambda(alpha, g12, &studies).unwrap();
        assert_eq!(sol.status, LambdaStatus::Interior);
        lambda_worst = lambda_worst.max((sol.lambda - lambda_by_grid(alpha, &phis)).abs());
        lambda_done += 1;
    }

    let mut argmax_bad = 0;
    for _ in 0..ARGMAX_CASES {
        let n = rng.gen_range(1..=60usize);
        let alpha = rng.gen_range(0.02..0.98);
        let cap = (n as f64 / alpha) as u64 * 3 + 50;
        let (mut best, mut arg) = (f64::NEG_INFINITY, n as u64);
        for big in n as u64..=cap {
            let v = log_choose(big, n) + (big - n as u64) as f64 * (1.0 - alpha).ln();
            if v >= best - 1e-12 * v.abs().max(1.0) {
                if v > best {
                    best = v;
                }
                arg = big;
            }
        }
        if h1_argmax(alpha, n).unwrap() != arg {
            argmax_bad += 1;
        }
    }

    let cfg = SimConfig::new(50, gamma(-0.6, 0.8, 0.5, 0.5, 0.4), 1, SEED + 60);
    let q = chi2_quantile(1.0, 0.95);
    let mut ci_bad = Vec::new();
    let mut ci_done = 0;
    let mut rep = 0u64;
    while ci_done < CI_DATASETS {
        let data = gen_dataset(&cfg, rep).unwrap().data;
        rep += 1;
        let Ok((_, fl)) = fit_both(&data, &Default::default()) else { continue };
        let Ok(prof) = Profiler::new(&data, &fl) else { continue };
        let ci = prof.lr_ci(ParamId::Theta, 0.95).unwrap();
        if ci.lower_open || ci.upper_open {
            continue;
        }
        ci_done += 1;
        let est = ci.estimate;
        let reach = 2.0 * (ci.upper - ci.lower);
        let step = reach / CI_GRID_STEPS as f64;
        // first grid point outward where the deviance reaches the threshold
        for (dir, end) in [(-1.0, ci.lower), (1.0, ci.upper)] {
            let crossing = (1..=CI_GRID_STEPS)
                .map(|k| est + dir * step * k as f64)
                .find(|&psi| prof.deviance(ParamId::Theta, psi) >= q);
            match crossing {
                Some(psi) if (psi - end).abs() <= step => {}
                other => ci_bad.push(format!("rep {rep}: endpoint {end:.4}, grid {other:?}")),
            }
        }
    }
    let elapsed = t.elapsed();

    let ok = lambda_worst <= LAMBDA_TOL && argmax_bad == 0 && ci_bad.is_empty() && elapsed < ORACLE_RUNTIME;
    report(
        6,
        ok,
        &format!(
            "lambda max |diff| {lambda_worst:.2e} over {LAMBDA_DATASETS}, h1 argmax mismatches {argmax_bad}/{ARGMAX_CASES}, \
             CI endpoint mismatches {}/{} {:?}; {:.1}s",
            ci_bad.len(),
            2 * CI_DATASETS,
            ci_bad,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

fn monotone_unit(v: &[f64]) -> bool {
    v.iter().all(|x| (0.0..=1.0).contains(x)) && v.windows(2).all(|w| w[0] <= w[1])
}

/// Violations of the EL constraints, CDF shape and `ρ = 0` identities on one fit.
fn invariant_violations(data: &MetaDataset, cl: &FitReport, fl: &FitReport) -> Vec<String> {
    let mut bad = Vec::new();
    let alpha = fl.alpha.unwrap();
    let phis = selection_probs(fl.gamma.gamma1, fl.gamma.gamma2, data);
    let w = el_weights_phi(alpha, &phis, fl.c_n).unwrap();
    let sum: f64 = w.p.iter().sum();
    let moment: f64 = w.p.iter().zip(&phis).map(|(p, f)| p * f).sum::<f64>() - alpha;
    if !(w.p.iter().all(|&p| p > 0.0) && (sum - 1.0).abs() <= SUM_TOL && moment.abs() <= MOMENT_TOL) {
        bad.push(format!("EL constraints: sum {sum}, moment {moment:e}"));
    }

    let fh = f_hat(data, fl).unwrap();
    let (ft, _) = f_tilde(data, &cl.gamma).unwrap();
    for (name, f) in [("F_hat", &fh), ("F_tilde", &ft)] {
        let v: Vec<f64> = f.support.iter().map(|&x| f.eval(x)).collect();
        if !monotone_unit(&v) || (v.last().unwrap() - 1.0).abs() > 1e-12 {
            bad.push(name.into());
        }
    }
    let gh = g_hat(data, fl, &default_t_grid(data, &fl.gamma)).unwrap();
    let gt = g_tilde_cdf(data, &cl.gamma, &default_t_grid(data, &cl.gamma)).unwrap();
    for (name, v) in [("G_hat", &gh), ("G_tilde", &gt)] {
        if !monotone_unit(v) {
            bad.push(name.into());
        }
    }

    let g0 = SelectionParams { rho: 0.0, ..fl.gamma };
    for s in data.iter() {
        let (a, b) = (f1_select_given_study(&g0, s).unwrap(), f3_select_given_se(&g0, s).unwrap());
        if (a - b).abs() > REDUCTION_TOL {
            bad.push(format!("f1 - f3 = {:e}", a - b));
        }
    }
    let closed: f64 = data
        .iter()
        .map(|s| {
            let v = g0.tau * g0.tau + s.se * s.se;
            -0.5 * v.ln() - (s.effect - g0.theta).powi(2) / (2.0 * v)
        })
        .sum();
    let lc = cond_loglik(&g0, data).unwrap();
    if (lc - closed).abs() > REDUCTION_TOL * closed.abs().max(1.0) {
        bad.push(format!("rho = 0 conditional log-likelihood off by {:e}", lc - closed));
    }
    bad
}

#[test]
fn criterion_7_constraint_invariants() {
    let mut datasets = Vec::new();
    for (k, g) in [gamma(-0.6, 0.8, 0.2, 0.5, 0.4), gamma(-1.0, 0.6, 0.8, 0.5, 0.4)].into_iter().enumerate() {
        let cfg = SimConfig::new(50, g, 1, SEED + 70 + k as u64);
        datasets.extend((0..INVARIANT_DATASETS / 2).map(|r| gen_dataset(&cfg, r).unwrap().data));
    }
    datasets.push(read_studies(&synthetic_csv()).unwrap());
    let mut fitted = 0;
    let mut bad = Vec::new();
    for (i, data) in datasets.iter().enumerate() {
        let Ok((cl, fl)) = fit_both(data, &Default::default()) else { continue };
        if !(cl.converged && fl.converged) {
            continue;
        }
        fitted += 1;
        bad.extend(invariant_violations(data, &cl, &fl).into_iter().map(|b| format!("dataset {i}: {b}")));
    }
    let ok = bad.is_empty() && fitted > 0;
    report(7, ok, &format!("{fitted}/{} datasets with converged fits, violations {bad:?}", datasets.len()));
    assert!(ok);
}

fn synthetic_csv() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic_14_studies.csv")
}

#[test]
fn criterion_8_table_report() {
    let data = read_studies(&synthetic_csv()).unwrap();
    let out = run_fit(&data, &FitArgs::default()).unwrap();
    let rows_ok = REPORT_ROWS.iter().all(|name| {
        out.row(name)
            .is_some_and(|r| r.cl.is_some() && r.fl.as_ref().is_some_and(|i| i.lower.is_some() && i.upper.is_some()))
    });
    let failed: Vec<&str> = out.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let ok = data.n() == 14 && rows_ok && failed.is_empty() && out.errors.is_empty() && out.checks.len() >= 7;
    report(
        8,
        ok,
        &format!(
            "{} studies, rows complete {rows_ok}, {} checks, failed {failed:?}, errors {:?}",
            data.n(),
            out.checks.len(),
            out.errors
        ),
    );
    assert!(ok);
}
