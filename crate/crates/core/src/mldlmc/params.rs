//! Level, split and sample-size selection from the bias/variance/work models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_models::MeshHierarchy;
use crate::stats::c_alpha;

/// Upper cap on the bias/statistics split when the coarsest level already
/// meets the bias budget by a wide margin.
pub const KAPPA_MAX: f64 = 0.99;

/// How inner sample sizes vary across levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MPolicy {
    /// `M_ℓ = M_L` on every level.
    #[default]
    Constant,
    /// `M_ℓ ≤ M_L` chosen per level by minimizing the work bound.
    Optimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlParameters {
    pub levels: usize,
    pub kappa: f64,
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    pub tol: f64,
    pub alpha: f64,
    pub c_alpha: f64,
}

impl MlParameters {
    pub fn finest(&self) -> usize {
        self.levels
    }
}

/// Theorem-1 bound on `V_ℓ` with unit constants:
/// `M_ℓ(1/M_ℓ − 1/M_{ℓ−1})² + h^{2η_s}/M_{ℓ−1} + (M_ℓ − M_{ℓ−1})/M_{ℓ−1}² + h^{2η_w}`.
pub fn theoretical_variance_bound(m_ell: usize, m_prev: usize, h_ell: f64, eta_s: f64, eta_w: f64) -> f64 {
    let (m, mp) = (m_ell as f64, m_prev as f64);
    let d = 1.0 / m - 1.0 / mp;
    m * d * d + h_ell.powf(2.0 * eta_s) / mp + (m - mp) / (mp * mp) + h_ell.powf(2.0 * eta_w)
}

/// `L* = ⌈η_w⁻¹(log_β(2C₂h₀^{η_w}) + log_β(TOL⁻¹))⌉`, at least 0.
pub fn optimal_level(tol: f64, c2: f64, hierarchy: &MeshHierarchy) -> usize {
    let ln_beta = (hierarchy.beta as f64).ln();
    let eta = hierarchy.eta_w;
    let raw = ((2.0 * c2 * hierarchy.h0.powf(eta)).ln() / ln_beta + (1.0 / tol).ln() / ln_beta) / eta;
    let snapped = if (raw - raw.round()).abs() < 1e-12 {
        raw.round()
    } else {
        raw
    };
    snapped.ceil().max(0.0) as usize
}

/// `κ* = 1 − C₂h_L^{η_w}/TOL`, capped at [`KAPPA_MAX`].
pub fn optimal_kappa(tol: f64, c2: f64, hierarchy: &MeshHierarchy, level: usize) -> f64 {
    (1.0 - c2 * hierarchy.h(level).powf(hierarchy.eta_w) / tol).min(KAPPA_MAX)
}

/// `M_L* = ⌈C₁ / ((1 − κ*) TOL)⌉`, at least 1.
pub fn optimal_inner(tol: f64, c1: f64, kappa: f64) -> usize {
    ((c1 / ((1.0 - kappa) * tol)).ceil().max(1.0)) as usize
}

/// `N_ℓ* = ⌈(C_α/(κTOL))² √(V_ℓ/(M_ℓW_ℓ)) Σ_k √(V_k M_k W_k)⌉`, at least 1.
pub fn allocate_outer(tol: f64, kappa: f64, c_alpha: f64, v: &[f64], m: &[usize], work: &[f64]) -> Vec<usize> {
    let scale = (c_alpha / (kappa * tol)).powi(2);
    let total: f64 = v
        .iter()
        .zip(m)
        .zip(work)
        .map(|((&vl, &ml), &wl)| (vl * ml as f64 * wl).sqrt())
        .sum();
    v.iter()
        .zip(m)
        .zip(work)
        .map(|((&vl, &ml), &wl)| {
            let n = scale * (vl / (ml as f64 * wl)).sqrt() * total;
            (n.ceil().max(1.0)) as usize
        })
        .collect()
}

/// Fills variances for levels beyond `v` (or flagged unreliable with NaN)
/// by scaling the last reliable level `k ≥ 1` with the Theorem-1 bound:
/// `V_ℓ = V_k · B(h_ℓ)/B(h_k)`.
pub fn extend_variances(v: &[f64], levels: usize, m: &[usize], hierarchy: &MeshHierarchy) -> Vec<f64> {
    let bound = |l: usize| {
        let mp = if l == 0 { m[0] } else { m[l - 1] };
        theoretical_variance_bound(m[l], mp, hierarchy.h(l), hierarchy.eta_s, hierarchy.eta_w)
    };
    let mut out = Vec::with_capacity(levels + 1);
    let mut anchor: Option<(usize, f64)> = None;
    for l in 0..=levels {
        let known = v.get(l).copied().filter(|x| x.is_finite());
        match known {
            Some(x) => {
                if l >= 1 || anchor.is_none() {
                    anchor = Some((l, x));
                }
                out.push(x);
            }
            None => {
                let (k, vk) = anchor.unwrap_or((0, 1.0));
                out.push(vk * bound(l) / bound(k));
            }
        }
    }
    out
}

/// Per-evaluation work `h_ℓ^{-γ}` for levels `0..=levels`.
pub fn level_work(hierarchy: &MeshHierarchy, levels: usize) -> Vec<f64> {
    (0..=levels).map(|l| hierarchy.work(l)).collect()
}

/// Inputs to [`select_parameters`] beyond the tolerance.
#[derive(Debug, Clone)]
pub struct RateConstants {
    pub c1: f64,
    pub c2: f64,
    /// Optional `V₀ ≈ C₃ + C₄/M` model used by the optimized inner policy.
    pub c3: f64,
    pub c4: f64,
}

/// Level, split, inner and outer sample sizes for one tolerance.
pub fn select_parameters(
    tol: f64,
    alpha: f64,
    constants: &RateConstants,
    hierarchy: &MeshHierarchy,
    v: &[f64],
    policy: MPolicy,
) -> Result<MlParameters> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("TOL must be positive, got {tol}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(constants.c2 > 0.0) || !(constants.c1 >= 0.0) {
        return Err(Error::Config("rate constants must be positive".into()));
    }
    let mut levels = optimal_level(tol, constants.c2, hierarchy);
    let mut kappa = optimal_kappa(tol, constants.c2, hierarchy, levels);
    while !(kappa > 0.0 && kappa < 1.0) {
        levels += 1;
        kappa = optimal_kappa(tol, constants.c2, hierarchy, levels);
    }
    Ok(parameters_for(
        tol, alpha, levels, kappa, constants, hierarchy, v, policy,
    ))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn parameters_for(
    tol: f64,
    alpha: f64,
    levels: usize,
    kappa: f64,
    constants: &RateConstants,
    hierarchy: &MeshHierarchy,
    v: &[f64],
    policy: MPolicy,
) -> MlParameters {
    let m_l = optimal_inner(tol, constants.c1, kappa);
    let ca = c_alpha(alpha);
    let work = level_work(hierarchy, levels);
    let constant_m = vec![m_l; levels + 1];
    let base_v = extend_variances(v, levels, &constant_m, hierarchy);
    let m = match policy {
        MPolicy::Constant => constant_m,
        MPolicy::Optimized => optimize_inner(tol, kappa, ca, &base_v, m_l, constants, hierarchy),
    };
    let vm = rescale_variances(&base_v, m_l, &m, constants, hierarchy);
    let n = allocate_outer(tol, kappa, ca, &vm, &m, &work);
    MlParameters {
        levels,
        kappa,
        m,
        n,
        tol,
        alpha,
        c_alpha: ca,
    }
}

/// Variances observed at constant `M_L`, rescaled to another inner schedule
/// through the Theorem-1 bound (and `C₃ + C₄/M` on level 0).
fn rescale_variances(
    v: &[f64],
    m_l: usize,
    m: &[usize],
    constants: &RateConstants,
    hierarchy: &MeshHierarchy,
) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(l, &vl)| {
            if m.iter().all(|&x| x == m_l) {
                return vl;
            }
            if l == 0 {
                let base = constants.c3 + constants.c4 / m_l as f64;
                let now = constants.c3 + constants.c4 / m[0] as f64;
                return if base > 0.0 { vl * now / base } else { vl };
            }
            let (es, ew, h) = (hierarchy.eta_s, hierarchy.eta_w, hierarchy.h(l));
            vl * theoretical_variance_bound(m[l], m[l - 1], h, es, ew) / theoretical_variance_bound(m_l, m_l, h, es, ew)
        })
        .collect()
}

fn work_bound(tol: f64, kappa: f64, ca: f64, v: &[f64], m: &[usize], w: &[f64]) -> f64 {
    let s: f64 = v
        .iter()
        .zip(m)
        .zip(w)
        .map(|((&a, &b), &c)| (a * b as f64 * c).sqrt())
        .sum();
    (ca / (kappa * tol)).powi(2) * s * s + m.iter().zip(w).map(|(&b, &c)| b as f64 * c).sum::<f64>()
}

/// Coordinate descent on `M_0..M_{L−1}` (non-decreasing, `≤ M_L`).
fn optimize_inner(
    tol: f64,
    kappa: f64,
    ca: f64,
    v: &[f64],
    m_l: usize,
    constants: &RateConstants,
    hierarchy: &MeshHierarchy,
) -> Vec<usize> {
    let levels = v.len() - 1;
    let w = level_work(hierarchy, levels);
    let mut m = vec![m_l; levels + 1];
    let cost = |m: &[usize]| {
        let vm = rescale_variances(v, m_l, m, constants, hierarchy);
        work_bound(tol, kappa, ca, &vm, m, &w)
    };
    let mut best = cost(&m);
    loop {
        let mut improved = false;
        for l in 0..levels {
            let lo = if l == 0 { 1 } else { m[l - 1] };
            let hi = m[l + 1];
            for cand in lo..=hi {
                if cand == m[l] {
                    continue;
                }
                let mut trial = m.clone();
                trial[l] = cand;
                let c = cost(&trial);
                if c < best * (1.0 - 1e-12) {
                    best = c;
                    m = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            return m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hier(h0: f64, beta: u32, eta_w: f64) -> MeshHierarchy {
        MeshHierarchy::new(h0, beta, 2.0, eta_w, eta_w).unwrap()
    }

    fn consts(c1: f64, c2: f64) -> RateConstants {
        RateConstants {
            c1,
            c2,
            c3: 1.0,
            c4: 0.0,
        }
    }

    #[test]
    fn bound_examples() {
        let b = theoretical_variance_bound(2, 1, 1.0, 1.0, 1.0);
        assert!((b - 3.5).abs() < 1e-15);
        let b = theoretical_variance_bound(4, 4, 0.5, 1.5, 1.0);
        assert!((b - (0.5f64.powf(3.0) / 4.0 + 0.25)).abs() < 1e-15);
        assert!(theoretical_variance_bound(3, 3, 1e-9, 1.0, 1.0) < 1e-17);
    }

    #[test]
    fn level_and_split_example() {
        let h = hier(1.0, 2, 1.0);
        let p = select_parameters(0.5, 0.05, &consts(0.005, 1.0), &h, &[1.0, 0.1, 0.01], MPolicy::Constant).unwrap();
        assert_eq!(p.levels, 2);
        assert!((p.kappa - 0.5).abs() < 1e-15);
        assert_eq!(p.m, vec![1, 1, 1]);
    }

    #[test]
    fn single_level_unit_allocation() {
        // (C_α/(κ TOL))² = 1 with V₀ = M = W = 1
        let n = allocate_outer(1.0, 1.0, 1.0, &[1.0], &[1], &[1.0]);
        assert_eq!(n, vec![1]);
    }

    #[test]
    fn inner_size_grows_with_c1() {
        assert_eq!(optimal_inner(0.1, 0.005, 0.5), 1);
        assert_eq!(optimal_inner(0.1, 0.2, 0.5), 4);
    }

    #[test]
    fn optimized_policy_never_costs_more() {
        let h = hier(1.0, 2, 1.0);
        let c = RateConstants {
            c1: 0.3,
            c2: 1.0,
            c3: 0.5,
            c4: 2.0,
        };
        let v = [2.0, 0.4, 0.1, 0.03];
        let a = select_parameters(0.05, 0.05, &c, &h, &v, MPolicy::Constant).unwrap();
        let b = select_parameters(0.05, 0.05, &c, &h, &v, MPolicy::Optimized).unwrap();
        assert_eq!(a.levels, b.levels);
        assert_eq!(a.m.last(), b.m.last());
        assert!(b.m.windows(2).all(|w| w[0] <= w[1]));
        let w = level_work(&h, a.levels);
        let cost = |p: &MlParameters| {
            p.n.iter()
                .zip(&p.m)
                .zip(&w)
                .map(|((&n, &m), &w)| (n * m) as f64 * w)
                .sum::<f64>()
        };
        assert!(cost(&b) <= cost(&a) * 1.05);
    }

    #[test]
    fn extrapolated_variances_follow_bound() {
        let h = hier(1.0, 2, 1.5);
        let v = extend_variances(&[1.0, 0.2], 3, &[1, 1, 1, 1], &h);
        let b = |l: usize| theoretical_variance_bound(1, 1, h.h(l), 1.5, 1.5);
        assert_eq!(v[..2], [1.0, 0.2]);
        assert!((v[3] - 0.2 * b(3) / b(1)).abs() < 1e-15);
        let v = extend_variances(&[1.0, f64::NAN, 0.05], 2, &[1, 1, 1], &h);
        assert!((v[1] - b(1) / b(0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bound_cancels_for_equal_inner_sizes(m in 1usize..1000, h in 1e-4f64..4.0, es in 0.1f64..3.0, ew in 0.1f64..3.0) {
            let lhs = theoretical_variance_bound(m, m, h, es, ew);
            let rhs = h.powf(2.0 * es) / m as f64 + h.powf(2.0 * ew);
            prop_assert!((lhs - rhs).abs() <= 1e-14 * rhs.max(1e-300));
        }

        #[test]
        fn allocation_ratio_identity(v in proptest::collection::vec(1e-4f64..10.0, 2..6), tol in 0.01f64..0.5) {
            let h = hier(1.0, 2, 1.0);
            let levels = v.len() - 1;
            let m = vec![1; levels + 1];
            let w = level_work(&h, levels);
            let n = allocate_outer(tol, 0.7, 1.96, &v, &m, &w);
            let scale = (1.96 / (0.7 * tol)).powi(2);
            let total: f64 = v.iter().zip(&w).map(|(a, b)| (a * b).sqrt()).sum();
            for l in 0..=levels {
                let exact = scale * (v[l] / w[l]).sqrt() * total;
                prop_assert!((n[l] as f64 - exact.max(1.0)).abs() <= 1.0);
            }
        }
    }
}
