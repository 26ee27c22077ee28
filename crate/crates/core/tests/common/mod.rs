//! Checks shared by the property suites and the acceptance harness. Each
//! returns `Err` with a description of the first violation.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survref::fit_full::{full_log_likelihood, full_log_likelihood_gradient};
use survref::referral::{censored_joint_density, inclusion_probability, selection_probability};
use survref::{
    apply_selection, fit_hybrid, generate_community, weighted_kaplan_meier, Dataset, EvalPath, EventModel,
    ReferralPartition, SelectionContext, SimulationDesign, SubjectRecord,
};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random partition with `1..=max_components` components and interior
/// knots at least 1e-3 apart.
pub fn random_partition(rng: &mut impl Rng, max_components: usize) -> ReferralPartition {
    let m = rng.random_range(1..=max_components);
    let mut knots = vec![0.0, 1.0];
    while knots.len() < m + 1 {
        let k: f64 = rng.random_range(0.02..0.98);
        if knots.iter().all(|v| (v - k).abs() > 1e-3) {
            knots.push(k);
        }
    }
    knots.sort_by(f64::total_cmp);
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ReferralPartition::new(knots, raw.iter().map(|v| v / total).collect()).unwrap()
}

pub fn random_weibull(rng: &mut impl Rng) -> (EventModel, Vec<f64>) {
    let gamma = rng.random_range(1.2..=8.0);
    let beta = vec![
        rng.random_range(2.5..5.0),
        rng.random_range(-0.05..0.05),
        rng.random_range(-1.0..1.0),
    ];
    let z = vec![1.0, rng.random_range(10.0..40.0), f64::from(rng.random_range(0..2u8))];
    (EventModel::weibull(gamma, beta), z)
}

/// Largest closed-form vs quadrature discrepancy over `configs` random
/// configurations of both the selection probability and the censored
/// joint density.
pub fn closed_form_vs_quadrature(seed: u64, configs: usize) -> Result<f64, String> {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let (model, z) = random_weibull(&mut rng);
        let part = random_partition(&mut rng, 8);
        let u = rng.random_range(1.0..40.0);
        let ctx = SelectionContext { u, z };
        let r = rng.random_range(0.001..0.99) * u;
        let x = rng.random_range(r..=u);
        let pair = |path| -> Result<(f64, f64), String> {
            let s = selection_probability(&ctx, &model, &part, path).map_err(|e| e.to_string())?;
            let c = censored_joint_density(r, x, &ctx, &model, &part, path).map_err(|e| e.to_string())?;
            Ok((s, c))
        };
        let (s1, c1) = pair(EvalPath::ClosedForm)?;
        let (s2, c2) = pair(EvalPath::Quadrature)?;
        worst = worst.max((s1 - s2).abs()).max((c1 - c2).abs());
    }
    Ok(worst)
}

pub fn simulated_cohort(scenario: &str, seed: u64, rep: u64) -> (Dataset, SimulationDesign) {
    let design = SimulationDesign::preset(scenario).unwrap();
    let community = generate_community(&design, seed, rep).unwrap();
    let data = apply_selection(&community, design.recruitment_cutoff, design.censoring_time).unwrap();
    (data, design)
}

/// Largest normwise relative error of the log-likelihood gradient against
/// central differences over `points` random parameter points.
/// Returns the worst normwise relative error and the number of draws
/// rejected because the likelihood underflows there.
pub fn gradient_vs_central_differences(seed: u64, points: usize) -> Result<(f64, usize), String> {
    let (data, design) = simulated_cohort("table1-weibull", seed, 0);
    let knots = design.working_knots.clone();
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let (mut accepted, mut rejected) = (0, 0);
    while accepted < points {
        let mut natural = vec![
            rng.random_range(2.0..6.0),
            rng.random_range(4.0..5.2),
            rng.random_range(-0.05..-0.01),
            rng.random_range(-0.8..0.0),
        ];
        let raw: Vec<f64> = (0..knots.len() - 1).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        natural.extend(raw[1..].iter().map(|v| v / total));
        let loglik = |nat: &[f64]| -> Result<f64, String> {
            let model = EventModel::weibull(nat[0], nat[1..4].to_vec());
            let probs: Vec<f64> = std::iter::once(1.0 - nat[4..].iter().sum::<f64>())
                .chain(nat[4..].iter().copied())
                .collect();
            let part = ReferralPartition::new(knots.clone(), probs).map_err(|e| e.to_string())?;
            full_log_likelihood(&model, &part, &data, EvalPath::Auto).map_err(|e| e.to_string())
        };
        let model = EventModel::weibull(natural[0], natural[1..4].to_vec());
        let probs: Vec<f64> = std::iter::once(1.0 - natural[4..].iter().sum::<f64>())
            .chain(natural[4..].iter().copied())
            .collect();
        let part = ReferralPartition::new(knots.clone(), probs).unwrap();
        if !full_log_likelihood(&model, &part, &data, EvalPath::Auto).is_ok_and(f64::is_finite) {
            rejected += 1;
            continue;
        }
        accepted += 1;
        let grad = full_log_likelihood_gradient(&model, &part, &data, EvalPath::Auto).map_err(|e| e.to_string())?;
        let mut fd = Vec::with_capacity(natural.len());
        // Richardson-extrapolated central differences: the covariates are
        // large (age), so the plain O(h²) error would dominate in β1.
        for i in 0..natural.len() {
            let h = 1e-5 * (natural[i].abs() + 1.0) * if i >= 4 { 0.1 } else { 1.0 };
            let central = |h: f64| -> Result<f64, String> {
                let mut up = natural.clone();
                let mut down = natural.clone();
                up[i] += h;
                down[i] -= h;
                Ok((loglik(&up)? - loglik(&down)?) / (2.0 * h))
            };
            fd.push((4.0 * central(h / 2.0)? - central(h)?) / 3.0);
        }
        let scale = grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        let err = grad.iter().zip(&fd).fold(0.0f64, |m, (g, f)| m.max((g - f).abs()));
        worst = worst.max(err / scale);
    }
    Ok((worst, rejected))
}

/// `∫₀^t` of the referral conditional density, integrated exactly piece by
/// piece (the density is constant between the scaled knots).
pub fn mixture_density_normalization(part: &ReferralPartition, t: f64) -> Check {
    let mut total = 0.0;
    for w in part.knots().windows(2) {
        let (a, b) = (w[0] * t, w[1] * t);
        let mid = 0.5 * (a + b);
        total += part.conditional_density(mid, t).map_err(|e| e.to_string())? * (b - a);
    }
    if (total - 1.0).abs() < 1e-10 {
        Ok(())
    } else {
        Err(format!("conditional density integrates to {total} at t = {t}"))
    }
}

/// `∫₀^∞ f(t) dt` by the trapezoid rule on `y = ln t`.
pub fn event_density_integral(model: &EventModel, z: &[f64]) -> Result<f64, String> {
    let centre = model.beta[0];
    // Wide enough for the heavy log-scale tails of the generalized gamma.
    let (lo, hi) = (centre - 120.0, centre + 120.0);
    let n = 240_000;
    let h = (hi - lo) / n as f64;
    let mut total = 0.0;
    for k in 0..=n {
        let y = lo + k as f64 * h;
        let t = y.exp();
        let f = model.density(t, z).map_err(|e| e.to_string())? * t;
        total += if k == 0 || k == n { 0.5 * f } else { f };
    }
    Ok(total * h)
}

pub fn event_density_normalization(model: &EventModel, z: &[f64]) -> Check {
    let total = event_density_integral(model, z)?;
    if (total - 1.0).abs() > 1e-6 {
        return Err(format!("{model:?}: density integrates to {total}"));
    }
    let mut last = 0.0;
    for k in -60..=60 {
        let t = (model.beta[0] + k as f64 * 0.25).exp();
        let f = model.density(t, z).map_err(|e| e.to_string())?;
        let c = model.cdf(t, z).map_err(|e| e.to_string())?;
        if f < 0.0 || c < last - 1e-15 || !(0.0..=1.0).contains(&c) {
            return Err(format!("{model:?}: density {f} / cdf {c} invalid at t = {t}"));
        }
        last = c;
    }
    let lo = model.cdf((model.beta[0] - 200.0).exp(), z).map_err(|e| e.to_string())?;
    let hi = model.cdf((model.beta[0] + 200.0).exp(), z).map_err(|e| e.to_string())?;
    if lo > 1e-6 || hi < 1.0 - 1e-6 {
        return Err(format!("{model:?}: cdf limits {lo}, {hi}"));
    }
    Ok(())
}

fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// KS distance between `V = R/T` among pairs with `T` below and above the
/// median, over `n` simulated pairs.
pub fn v_t_independence(part: &ReferralPartition, model: &EventModel, n: usize, seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let z = vec![1.0; model.beta.len()];
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let t = model.sample_event_time(&z, &mut rng).map_err(|e| e.to_string())?;
            Ok((t, part.sample_referral_time(t, &mut rng) / t))
        })
        .collect::<Result<_, String>>()?;
    let mut times: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    times.sort_by(f64::total_cmp);
    let median = times[n / 2];
    let (low, high): (Vec<&(f64, f64)>, Vec<_>) = pairs.iter().partition(|p| p.0 < median);
    Ok(ks_two_sample(
        low.iter().map(|p| p.1).collect(),
        high.iter().map(|p| p.1).collect(),
    ))
}

/// `p ∈ (0, 1]` on a grid of `x` values in `(r, u]`, nonincreasing in `x`.
pub fn weight_bounds(model: &EventModel, part: &ReferralPartition, z: &[f64], r: f64, u: f64) -> Check {
    let mut last = f64::INFINITY;
    for k in 1..=20 {
        let x = r + (u - r) * k as f64 / 20.0;
        let rec = SubjectRecord {
            id: "w".into(),
            r,
            x,
            delta: false,
            u,
            z: z.to_vec(),
        };
        let p = inclusion_probability(&rec, model, part).map_err(|e| e.to_string())?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(format!("p = {p} outside (0, 1] at x = {x}"));
        }
        if p > last * (1.0 + 1e-10) {
            return Err(format!("p increased from {last} to {p} at x = {x}"));
        }
        last = p;
        let event = SubjectRecord { delta: true, ..rec };
        if inclusion_probability(&event, model, part).map_err(|e| e.to_string())? != 1.0 {
            return Err("event record has p != 1".into());
        }
    }
    Ok(())
}

pub fn km_monotone(times: &[f64], events: &[bool], weights: &[f64]) -> Check {
    let curve = weighted_kaplan_meier(times, events, weights).map_err(|e| e.to_string())?;
    let mut last = 1.0;
    for (t, s) in curve.times.iter().zip(&curve.survival) {
        if !(0.0..=1.0).contains(s) || *s > last + 1e-15 {
            return Err(format!("survival {s} after {last} at t = {t}"));
        }
        last = *s;
    }
    if curve.survival_at(0.0) != 1.0 && times.iter().all(|t| *t > 0.0) {
        return Err("curve does not start at 1".into());
    }
    for w in curve.times.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if curve.survival_at(mid) != curve.survival_at(w[0]) {
            return Err("curve is not right-continuous between jumps".into());
        }
    }
    Ok(())
}

/// Hybrid fit on a simulated cohort: weights ≥ 1, exactly 1 for events,
/// and fixed-point residuals small.
pub fn hybrid_fixed_point(seed: u64, rep: u64) -> Check {
    let (data, design) = simulated_cohort("table1-weibull", seed, rep);
    let config = design.fit_config();
    let fit = fit_hybrid(&data, &config).map_err(|e| e.to_string())?;
    for (rec, w) in data.records().iter().zip(&fit.state.weights) {
        if *w < 1.0 || (rec.delta && *w != 1.0) {
            return Err(format!("record {}: weight {w}", rec.id));
        }
    }
    let n_hat: f64 = fit.state.weights.iter().sum();
    if fit.state.max_change >= config.cycle_tol {
        return Err(format!("final change {}", fit.state.max_change));
    }
    if fit.state.pseudo_score_residual > 1e-3 * n_hat || fit.state.profile_residual > 1e-3 * data.len() as f64 {
        return Err(format!(
            "residuals {} / {}",
            fit.state.pseudo_score_residual, fit.state.profile_residual
        ));
    }
    Ok(())
}

pub fn community_determinism(seed: u64, rep: u64) -> Check {
    let design = SimulationDesign::preset("table1-weibull").unwrap();
    let a = generate_community(&design, seed, rep).map_err(|e| e.to_string())?;
    let b = generate_community(&design, seed, rep).map_err(|e| e.to_string())?;
    if a != b {
        return Err("same seed produced different communities".into());
    }
    Ok(())
}
