//! Acceptance suite: one pass/fail line per criterion.
//!
//! Lines go straight to stdout so they survive the test harness capture.
//! Tolerances are pinned below and never adjusted to the outcome.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use mldl_core::dlmc::EstimatorResult;
use mldl_core::forward_models::{
    assemble_system, closed_form_eig, recovered_currents, solve_cem, ConstantModel, EitModel, EitModelSpec, Electrode,
    Experiment, LinearGaussianModel, MeshHierarchy, NoiseSpec, PriorSpec, Side, ToyModel,
};
use mldl_core::mldlmc::{
    dlmc_at_tol, level_study, mldlmc_estimate, pilot_run, select_parameters, theoretical_variance_bound, MPolicy,
    MldlmcConfig, PilotConfig, PilotEstimates, RateConstants,
};
use mldl_core::mldlsc::{mldlsc_estimate, MldlscConfig};
use mldl_core::sparse_grid::{
    cc_rule, combination_estimate, gh_rule, tensor_quadrature, IndexSet, MultiIndex, QuadratureRule1D,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const ORACLE_TOL: f64 = 0.01;
const ORACLE_SE_FACTOR: f64 = 3.0;
// criterion 2
const NULL_TOL: f64 = 1e-12;
// criterion 3
const GUARANTEE_TOL: f64 = 0.05;
const GUARANTEE_RUNS: u64 = 100;
const GUARANTEE_MIN_HITS: usize = 93;
const REFERENCE_TOL: f64 = GUARANTEE_TOL / 10.0;
// criterion 4
const DECAY_LEVELS: usize = 3;
const DECAY_SAMPLES: usize = 200;
const DECAY_INNER: usize = 10;
const DECAY_BAND: f64 = 0.5;
/// Level means within this many standard errors of zero are left out of
/// the `|E_ℓ|` fit, matching the pilot.
const DECAY_SIGNIFICANCE: f64 = 2.0;
// criterion 5
const WORK_TOLS: [f64; 4] = [0.2, 0.1, 0.05, 0.02];
const WORK_SLOPE: (f64, f64) = (-2.6, -1.8);
const WORK_RATIO: f64 = 5.0;
// criterion 6
const LSTAR_TUPLES: usize = 20;
const L_SLOPE_TARGET: f64 = 1.4;
const L_SLOPE_BAND: f64 = 0.5;
// criterion 8
const FEM_TOL: f64 = 1e-10;
const FEM_ASYM_TOL: f64 = 1e-12;
// criterion 9
const IDENTITY_TOL: f64 = 1e-12;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    let line = format!(
        "criterion {id} [{name}]: {} | {}\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn unit_linear() -> Experiment {
    Experiment::new(
        Arc::new(LinearGaussianModel::new(DMatrix::from_element(1, 1, 1.0)).unwrap()),
        PriorSpec::gaussian(&[0.0], &[1.0]).unwrap(),
        NoiseSpec::new(vec![1.0], 1).unwrap(),
    )
    .unwrap()
}

fn constant() -> Experiment {
    Experiment::new(
        Arc::new(ConstantModel::new(vec![1.0, 2.0], 2)),
        PriorSpec::uniform(&[(0.0, 1.0), (-1.0, 1.0)]).unwrap(),
        NoiseSpec::new(vec![0.5, 0.5], 1).unwrap(),
    )
    .unwrap()
}

fn toy_prior() -> (PriorSpec, NoiseSpec) {
    (
        PriorSpec::gaussian(&[0.0, 0.0], &[0.25, 0.25]).unwrap(),
        NoiseSpec::new(vec![0.01, 0.01], 1).unwrap(),
    )
}

fn toy() -> Experiment {
    let (p, n) = toy_prior();
    Experiment::new(Arc::new(ToyModel::default_model()), p, n).unwrap()
}

fn toy_limit() -> Experiment {
    let (p, n) = toy_prior();
    Experiment::new(Arc::new(ToyModel::default_model().limit()), p, n).unwrap()
}

fn eit() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| {
        let model = EitModel::new(EitModelSpec::laminate()).unwrap();
        let prior = model.spec().prior.clone();
        Experiment::new(Arc::new(model), prior, NoiseSpec::new(vec![1e-4; 9], 1).unwrap()).unwrap()
    })
}

fn eit_pilot() -> &'static Result<PilotEstimates, String> {
    static PILOT: OnceLock<Result<PilotEstimates, String>> = OnceLock::new();
    PILOT.get_or_init(|| {
        pilot_run(
            eit(),
            &PilotConfig {
                levels: DECAY_LEVELS,
                samples: 40,
                seed: 0,
            },
        )
        .map_err(|e| e.to_string())
    })
}

/// Ordinary least-squares slope of `y` on `x`.
fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn criterion_1() -> Outcome {
    let exp = unit_linear();
    let one = DMatrix::identity(1, 1);
    let exact = closed_form_eig(&one, &one, &one, 1).unwrap();
    let mut pass = true;
    let mut parts = vec![format!("oracle {exact:.5}")];
    let mut check = |name: &str, r: Result<EstimatorResult, mldl_core::Error>, stochastic: bool| match r {
        Ok(r) => {
            let err = (r.value - exact).abs();
            let ok =
                err <= ORACLE_TOL && (!stochastic || err <= ORACLE_SE_FACTOR * r.stat_error.max(f64::MIN_POSITIVE));
            pass &= ok;
            parts.push(format!(
                "{name} {:.5} (err {err:.1e}, stat {:.1e}, {:.1}s)",
                r.value, r.stat_error, r.wall_time
            ));
        }
        Err(e) => {
            pass = false;
            parts.push(format!("{name} error: {e}"));
        }
    };
    let cfg = MldlmcConfig::new(ORACLE_TOL, 11);
    check("dlmcis", dlmc_at_tol(&exp, &cfg, true, None), true);
    check("mldlmc", mldlmc_estimate(&exp, &cfg, None), true);
    check("mldlsc", mldlsc_estimate(&exp, &MldlscConfig::new(ORACLE_TOL)), false);
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_2() -> Outcome {
    let exp = constant();
    let cfg = MldlmcConfig::new(0.05, 2);
    let runs = [
        ("dlmc", dlmc_at_tol(&exp, &cfg, false, None)),
        ("dlmcis", dlmc_at_tol(&exp, &cfg, true, None)),
        ("mldlmc", mldlmc_estimate(&exp, &cfg, None)),
        ("mldlsc", mldlsc_estimate(&exp, &MldlscConfig::new(0.05))),
    ];
    let mut pass = true;
    let parts: Vec<String> = runs
        .into_iter()
        .map(|(name, r)| match r {
            Ok(r) => {
                pass &= r.value.abs() <= NULL_TOL;
                format!("{name} {:e}", r.value)
            }
            Err(e) => {
                pass = false;
                format!("{name} error: {e}")
            }
        })
        .collect();
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_3() -> Outcome {
    let reference = match dlmc_at_tol(&toy_limit(), &MldlmcConfig::new(REFERENCE_TOL, 99), true, None) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("reference run failed: {e}"),
            }
        }
    };
    let exp = toy();
    let mut hits = 0;
    let mut errors = 0;
    for seed in 0..GUARANTEE_RUNS {
        let mut cfg = MldlmcConfig::new(GUARANTEE_TOL, seed);
        cfg.pilot.seed = seed;
        match mldlmc_estimate(&exp, &cfg, None) {
            Ok(r) if (r.value - reference.value).abs() <= GUARANTEE_TOL => hits += 1,
            Ok(_) => {}
            Err(_) => errors += 1,
        }
    }
    Outcome {
        pass: hits >= GUARANTEE_MIN_HITS,
        detail: format!(
            "{hits}/{GUARANTEE_RUNS} within TOL={GUARANTEE_TOL} of reference {:.4} (stat {:.4}, N={}, M={}); {errors} runs errored; need >= {GUARANTEE_MIN_HITS}",
            reference.value, reference.stat_error, reference.per_level[0].samples, reference.per_level[0].inner
        ),
    }
}

fn criterion_4() -> Outcome {
    let pilot = match eit_pilot() {
        Ok(p) => p,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("pilot failed: {e}"),
            }
        }
    };
    let study = match level_study(eit(), DECAY_LEVELS, DECAY_SAMPLES, DECAY_INNER, 4242) {
        Ok(s) => s,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("level study failed: {e}"),
            }
        }
    };
    let mut xe = vec![];
    let mut ye = vec![];
    let mut xv = vec![];
    let mut yv = vec![];
    for s in &study[1..] {
        let l = s.level as f64;
        let se = (s.variance / s.samples as f64).sqrt();
        if s.mean.abs() > DECAY_SIGNIFICANCE * se {
            xe.push(l);
            ye.push(s.mean.abs().log2());
        }
        if s.variance > 0.0 {
            xv.push(l);
            yv.push(s.variance.log2());
        }
    }
    let weak = ols_slope(&xe, &ye).map(|s| -s);
    let strong = ols_slope(&xv, &yv).map(|s| -s);
    let target_v = (2.0 * pilot.eta_s).min(2.0 * pilot.eta_w);
    let ok_w = weak.is_some_and(|w| (w - pilot.eta_w).abs() <= DECAY_BAND);
    let ok_v = strong.is_some_and(|v| (v - target_v).abs() <= DECAY_BAND);
    let levels: Vec<String> = study
        .iter()
        .map(|s| format!("l{} E={:.4} V={:.2e}", s.level, s.mean, s.variance))
        .collect();
    Outcome {
        pass: ok_w && ok_v,
        detail: format!(
            "|E| slope {} vs eta_w {:.2}; V slope {} vs min(2eta_s, 2eta_w) {:.2} (2eta_s {:.2}); {}",
            weak.map_or("n/a".into(), |w| format!("{w:.2}")),
            pilot.eta_w,
            strong.map_or("n/a".into(), |v| format!("{v:.2}")),
            target_v,
            2.0 * pilot.eta_s,
            levels.join(", ")
        ),
    }
}

fn criterion_5() -> Outcome {
    let exp = toy();
    let pilot = match pilot_run(
        &exp,
        &PilotConfig {
            levels: 5,
            samples: 20,
            seed: 0,
        },
    ) {
        Ok(p) => p,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("pilot failed: {e}"),
            }
        }
    };
    let mut ml = vec![];
    let mut is = vec![];
    for &tol in &WORK_TOLS {
        let cfg = MldlmcConfig::new(tol, 5);
        match (
            mldlmc_estimate(&exp, &cfg, Some(&pilot)),
            dlmc_at_tol(&exp, &cfg, true, Some(&pilot)),
        ) {
            (Ok(a), Ok(b)) => {
                ml.push(a.total_work);
                is.push(b.total_work);
            }
            (a, b) => {
                return Outcome {
                    pass: false,
                    detail: format!("run failed at TOL={tol}: {:?} {:?}", a.err(), b.err()),
                }
            }
        }
    }
    let x: Vec<f64> = WORK_TOLS.iter().map(|t| t.ln()).collect();
    let slope = |w: &[f64]| ols_slope(&x, &w.iter().map(|v| v.ln()).collect::<Vec<_>>()).unwrap();
    let (s_ml, s_is) = (slope(&ml), slope(&is));
    let ratio = is[3] / ml[3];
    let in_band = s_ml >= WORK_SLOPE.0 && s_ml <= WORK_SLOPE.1;
    let ordered = s_is < s_ml || ratio >= WORK_RATIO;
    Outcome {
        pass: in_band && ordered,
        detail: format!(
            "MLDLMC work slope {s_ml:.2} (band [{}, {}]); DLMCIS slope {s_is:.2}, work ratio at TOL={} is {ratio:.1}; MLDLMC work {:?}",
            WORK_SLOPE.0,
            WORK_SLOPE.1,
            WORK_TOLS[3],
            ml.iter().map(|w| format!("{w:.2e}")).collect::<Vec<_>>()
        ),
    }
}

/// Smallest `L ≥ 0` with `2 C₂ h_L^{η_w} ≤ TOL`, by search.
fn hand_lstar(c2: f64, h0: f64, eta: f64, beta: u32, tol: f64) -> usize {
    (0..)
        .find(|&l| 2.0 * c2 * (h0 / (beta as f64).powi(l as i32)).powf(eta) <= tol)
        .unwrap()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = vec![];
    for _ in 0..LSTAR_TUPLES {
        let c2 = rng.random_range(0.01..10.0);
        let h0 = rng.random_range(0.1..2.0);
        let eta = rng.random_range(0.5..3.0);
        let beta = rng.random_range(2..5u32);
        let tol = 10f64.powf(rng.random_range(-4.0..-0.5));
        let hierarchy = MeshHierarchy::new(h0, beta, 2.0, eta, eta).unwrap();
        let constants = RateConstants {
            c1: 0.1,
            c2,
            c3: 1.0,
            c4: 0.0,
        };
        let got = select_parameters(tol, 0.05, &constants, &hierarchy, &[1.0], MPolicy::Constant)
            .map(|p| p.levels)
            .unwrap_or(usize::MAX);
        let want = hand_lstar(c2, h0, eta, beta, tol);
        if got != want {
            mismatches.push(format!(
                "(C2={c2:.3}, h0={h0:.3}, eta={eta:.3}, beta={beta}, TOL={tol:.2e}): {got} vs {want}"
            ));
        }
    }
    let pilot = match eit_pilot() {
        Ok(p) => p,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("pilot failed: {e}"),
            }
        }
    };
    let hierarchy = pilot.hierarchy(eit().hierarchy());
    let constants = pilot.constants();
    let tols: Vec<f64> = (0..=12).map(|k| 10f64.powf(-k as f64 / 4.0)).collect();
    let levels: Vec<f64> = tols
        .iter()
        .map(|&t| {
            select_parameters(t, 0.05, &constants, &hierarchy, &pilot.variance[1], MPolicy::Constant)
                .unwrap()
                .levels as f64
        })
        .collect();
    let x: Vec<f64> = tols.iter().map(|t| (1.0 / t).ln()).collect();
    let slope = ols_slope(&x, &levels).unwrap();
    let ok_slope = (slope - L_SLOPE_TARGET).abs() <= L_SLOPE_BAND;
    Outcome {
        pass: mismatches.is_empty() && ok_slope,
        detail: format!(
            "L* exact on {}/{LSTAR_TUPLES} tuples{}; EIT L vs ln(1/TOL) slope {slope:.2} (target {L_SLOPE_TARGET} +- {L_SLOPE_BAND}, eta_w {:.2}, L {:?})",
            LSTAR_TUPLES - mismatches.len(),
            if mismatches.is_empty() { String::new() } else { format!(" [{}]", mismatches.join("; ")) },
            pilot.eta_w,
            levels
        ),
    }
}

/// `(k−1)!!` for even `k`, zero for odd: moments of a standard normal.
fn normal_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|j| j as f64).product()
}

fn criterion_7() -> Outcome {
    let mut failures = vec![];
    for beta in 1..7u32 {
        let (coarse, fine) = (cc_rule(beta), cc_rule(beta + 1));
        let nested = coarse
            .points
            .iter()
            .all(|p| fine.points.iter().any(|q| (p - q).abs() < 1e-14));
        if !nested {
            failures.push(format!("CC level {beta} not nested in {}", beta + 1));
        }
    }
    for beta in 1..7u32 {
        let rule = cc_rule(beta);
        for k in 0..rule.len() as u32 {
            let exact = if k % 2 == 0 { 1.0 / (k as f64 + 1.0) } else { 0.0 };
            let got = rule.integrate(|x| x.powi(k as i32));
            if (got - exact).abs() > 1e-13 {
                failures.push(format!("CC level {beta} degree {k}: {got} vs {exact}"));
            }
        }
    }
    for beta in 1..7u32 {
        let rule = gh_rule(beta);
        for k in 0..(2 * rule.len() as u32) {
            let exact = normal_moment(k);
            let got = rule.integrate(|x| x.powi(k as i32));
            let scale: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(p, w)| w * p.abs().powi(k as i32))
                .sum();
            if (got - exact).abs() > 1e-12 * scale.max(1.0) {
                failures.push(format!("GH level {beta} degree {k}: {got} vs {exact}"));
            }
        }
    }
    let f = |x: &[f64]| (x[0] + 0.5 * x[1]).exp() * (1.0 + x[0] * x[1] * x[1]);
    let rules = |idx: &MultiIndex| -> Vec<QuadratureRule1D> { idx.0.iter().map(|&b| cc_rule(b)).collect() };
    for corner in [[3u32, 2], [4, 4], [2, 5]] {
        let set = IndexSet::full_box(vec![1, 1], &corner);
        let combined = combination_estimate(&set, |idx| Ok(tensor_quadrature(&rules(idx), f))).unwrap();
        let full = tensor_quadrature(&rules(&MultiIndex(corner.to_vec())), f);
        if (combined - full).abs() > 1e-12 * full.abs() {
            failures.push(format!("box {corner:?}: combination {combined} vs tensor {full}"));
        }
    }
    for w in 0..5 {
        if !IndexSet::total_degree(vec![0, 1, 1], w).is_downward_closed() {
            failures.push(format!("total-degree set {w} not downward closed"));
        }
    }
    let mut gap = IndexSet::new(vec![1, 1]);
    let _ = gap.insert(MultiIndex(vec![1, 1]));
    let rejected = gap.insert(MultiIndex(vec![1, 3])).is_err() || !gap.is_downward_closed();
    if !rejected {
        failures.push("set with a gap accepted".into());
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "CC nesting, CC/GH exactness, combination collapse and downward closure hold".into()
        } else {
            failures.join("; ")
        },
    }
}

fn criterion_8() -> Outcome {
    use std::f64::consts::PI;
    let theta = [PI / 3.0, PI / 4.0, PI / 5.0, PI / 6.0];
    let spec = EitModelSpec::laminate();
    let mut failures = vec![];
    for level in 0..=2 {
        let sol = solve_cem(&spec, &theta, level).unwrap();
        let ground: f64 = sol.electrode_potentials.iter().sum();
        if ground.abs() > FEM_TOL {
            failures.push(format!("level {level} ground sum {ground:e}"));
        }
        let a = assemble_system(&spec, &theta, level).unwrap().to_dense();
        let asym = (&a - a.transpose()).amax() / a.amax();
        if asym > FEM_ASYM_TOL {
            failures.push(format!("level {level} asymmetry {asym:e}"));
        }
        let rec = recovered_currents(&spec, &sol).unwrap();
        let flux: f64 = rec.iter().sum();
        let mismatch = rec
            .iter()
            .zip(&spec.currents)
            .map(|(r, i)| (r - i).abs())
            .fold(0.0, f64::max);
        if flux.abs() > FEM_TOL || mismatch > FEM_TOL {
            failures.push(format!(
                "level {level} flux sum {flux:e}, current mismatch {mismatch:e}"
            ));
        }
    }
    let mut mirror = EitModelSpec::laminate();
    mirror.sigma = [0.02, 0.01, 0.02];
    mirror.electrodes = [5.0, 15.0]
        .iter()
        .map(|&c| Electrode {
            side: Side::Top,
            center: c,
            width: 2.0,
            impedance: 0.1,
        })
        .collect();
    mirror.currents = vec![0.1, -0.1];
    for level in 0..=2 {
        let u = solve_cem(&mirror, &theta, level).unwrap().electrode_potentials;
        if (u[0] + u[1]).abs() > FEM_TOL * u[0].abs().max(1.0) {
            failures.push(format!("level {level} mirror pair {u:?}"));
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "ground constraint, symmetry, flux conservation and mirror antisymmetry hold on levels 0-2".into()
        } else {
            failures.join("; ")
        },
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(1..10_000usize);
        let h = rng.random_range(1e-4..1.0);
        let es = rng.random_range(0.1..3.0);
        let ew = rng.random_range(0.1..3.0);
        let got = theoretical_variance_bound(m, m, h, es, ew);
        let want = h.powf(2.0 * es) / m as f64 + h.powf(2.0 * ew);
        worst = worst.max((got - want).abs() / want);
    }
    Outcome {
        pass: worst <= IDENTITY_TOL,
        detail: format!("worst relative deviation {worst:e} over 1000 random inputs"),
    }
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", criterion_1),
        ("trivial null", criterion_2),
        ("probability guarantee", criterion_3),
        ("decay rates", criterion_4),
        ("work complexity", criterion_5),
        ("level schedule", criterion_6),
        ("quadrature suite", criterion_7),
        ("FEM suite", criterion_8),
        ("variance identity", criterion_9),
    ];
    let mut failed = vec![];
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        report(i + 1, name, &o);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
