//! Numerical checks of the overlap-geometry theory and of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{
    categorical_entropy, categorical_entropy_grad, categorical_log_prob_grad, gaussian_log_prob,
    gaussian_log_prob_grad, log_softmax, standard_normal,
};
use crate::error::Result;
use crate::geometry::{
    adaptive_simpson, clip, gaussian_bc, gaussian_kl, gaussian_window, saturate_log_ratio, tail_bound,
    taylor_residual, GaussianSpec, LogRatio, RegularizerKind, SurrogateConfig,
};
use crate::learners::{policy_loss, Algorithm, Policy};
use crate::nets::Mlp;

/// Knobs for the verification run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Relative perturbation applied to the closed-form Bhattacharyya
    /// coefficient. Nonzero values exist to show the checks can fail.
    pub bc_perturbation: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            bc_perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(&VerifyOptions) -> Result<(bool, String)>;

/// `(name, description, check)`
pub const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("bc_quadrature", "closed-form Gaussian BC against adaptive Simpson quadrature", check_bc_quadrature),
    ("kl_monte_carlo", "closed-form Gaussian KL against a Monte-Carlo estimate", check_kl_monte_carlo),
    ("bc_kl_equivalence", "|(1 - BC) - KL/4| <= KL^1.5 with shrinking relative error", check_bc_kl),
    ("tail_bound", "empirical Pr(r >= t) under the Chebyshev-style bound", check_tail_bound),
    ("second_moment", "E[(q - 1)^2] = 2 (1 - BC)", check_second_moment),
    ("taylor_residual", "q^2 - 1 - 2(q - 1) = (q - 1)^2", check_taylor),
    ("clip_correspondence", "clip(q, 1-eps, 1+eps)^2 stays inside [(1-eps)^2, (1+eps)^2]", check_clip),
    ("boundedness", "saturated multipliers stay below e^c and e^(c/2)", check_boundedness),
    ("grad_distributions", "log-density and entropy gradients against finite differences", check_grad_distributions),
    ("grad_nets", "MLP backward pass against finite differences", check_grad_nets),
    ("grad_learners", "policy-loss gradients on a Gaussian bandit, every algorithm", check_grad_learners),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs the named checks (all of them when `only` is empty).
pub fn run_checks(opts: &VerifyOptions, only: &[String]) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, _, _)| only.is_empty() || only.iter().any(|o| o == name))
        .map(|&(name, _, f)| {
            let (passed, detail) = match f(opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn bc(opts: &VerifyOptions, p: &GaussianSpec, g: &GaussianSpec) -> Result<f64> {
    Ok(gaussian_bc(p, g)? * (1.0 + opts.bc_perturbation))
}

fn unit_pair(gap: f64) -> Result<(GaussianSpec, GaussianSpec)> {
    Ok((GaussianSpec::scalar(0.0, 1.0)?, GaussianSpec::scalar(gap, 1.0)?))
}

fn check_bc_quadrature(opts: &VerifyOptions) -> Result<(bool, String)> {
    let pairs = [(0.0, 1.0, 2.0, 1.0), (0.0, 1.0, 0.2, 1.0), (0.3, 0.5, -0.4, 1.7), (1.0, 2.0, 1.0, 0.25)];
    let mut worst: f64 = 0.0;
    for (m1, s1, m2, s2) in pairs {
        let (p, g) = (GaussianSpec::scalar(m1, s1)?, GaussianSpec::scalar(m2, s2)?);
        let (a, b) = gaussian_window(&[m1, m2], &[s1, s2]);
        let numeric = adaptive_simpson(|x| (0.5 * (p.log_density(&[x]) + g.log_density(&[x]))).exp(), a, b, 1e-10);
        worst = worst.max((bc(opts, &p, &g)? - numeric).abs());
    }
    Ok((worst <= 1e-8, format!("max |closed - quadrature| = {worst:.2e}")))
}

fn check_kl_monte_carlo(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst_z: f64 = 0.0;
    for (gap, s2) in [(1.0, 1.0), (0.2, 1.0), (0.5, 1.5)] {
        let p = GaussianSpec::scalar(0.0, 1.0)?;
        let g = GaussianSpec::scalar(gap, s2)?;
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let x = standard_normal(&mut rng);
                p.log_density(&[x]) - g.log_density(&[x])
            })
            .collect();
        let (mean, se) = mean_se(&samples);
        worst_z = worst_z.max((mean - gaussian_kl(&p, &g)?).abs() / se);
    }
    Ok((worst_z <= 3.0, format!("max deviation {worst_z:.2} standard errors")))
}

fn check_bc_kl(opts: &VerifyOptions) -> Result<(bool, String)> {
    let gaps = [0.2, 0.1, 0.05, 0.02, 0.01];
    let mut ok = true;
    let mut rel = Vec::new();
    for d in gaps {
        let (p, g) = unit_pair(d)?;
        let kl = gaussian_kl(&p, &g)?;
        let err = ((1.0 - bc(opts, &p, &g)?) - kl / 4.0).abs();
        ok &= err <= kl.powf(1.5);
        rel.push(err / (kl / 4.0));
    }
    let monotone = rel.windows(2).all(|w| w[1] < w[0]);
    Ok((
        ok && monotone,
        format!(
            "relative errors {} (gap 0.2 -> 0.01)",
            rel.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

/// Mean and standard error of the mean.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Log-ratios `log g(x) - log p(x)` for `x ~ p`.
fn log_ratios(p: &GaussianSpec, g: &GaussianSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x = p.mean[0] + p.std[0] * standard_normal(rng);
            g.log_density(&[x]) - p.log_density(&[x])
        })
        .collect()
}

fn check_tail_bound(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let n = 1_000_000;
    let mut ok = true;
    let mut worst_slack = f64::INFINITY;
    for gap in [0.5, 1.0] {
        let (p, g) = unit_pair(gap)?;
        let deltas = log_ratios(&p, &g, n, &mut rng);
        let b = bc(opts, &p, &g)?.min(1.0);
        for t in [1.5, 2.0, 4.0] {
            let ln_t = f64::ln(t);
            let hits = deltas.iter().filter(|&&d| d >= ln_t).count() as f64;
            let freq = hits / n as f64;
            let se = (freq * (1.0 - freq) / n as f64).sqrt();
            let bound = tail_bound(t, b)?;
            let slack = bound + 3.0 * se - freq;
            ok &= slack >= 0.0;
            worst_slack = worst_slack.min(slack);
        }
    }
    Ok((ok, format!("smallest slack {worst_slack:.3e}")))
}

fn check_second_moment(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut worst_z: f64 = 0.0;
    for gap in [0.5, 1.0] {
        let (p, g) = unit_pair(gap)?;
        let terms: Vec<f64> = log_ratios(&p, &g, 1_000_000, &mut rng)
            .into_iter()
            .map(|d| {
                let q = (0.5 * d).exp();
                (q - 1.0) * (q - 1.0)
            })
            .collect();
        let (mean, se) = mean_se(&terms);
        worst_z = worst_z.max((mean - 2.0 * (1.0 - bc(opts, &p, &g)?)).abs() / se);
    }
    Ok((worst_z <= 3.0, format!("max deviation {worst_z:.2} standard errors")))
}

fn check_taylor(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let worst = (0..10_000)
        .map(|_| {
            let q: f64 = rng.gen_range(0.0..10.0);
            (taylor_residual(q) - (q - 1.0) * (q - 1.0)).abs()
        })
        .fold(0.0, f64::max);
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e}")))
}

fn check_clip(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let mut ok = true;
    for eps in [0.1, 0.2, 0.5] {
        let (lo, hi) = ((1.0 - eps) * (1.0 - eps), (1.0 + eps) * (1.0 + eps));
        for _ in 0..10_000 {
            let q: f64 = rng.gen_range(0.0..5.0);
            let c = clip(q, 1.0 - eps, 1.0 + eps);
            ok &= (lo..=hi).contains(&(c * c));
        }
    }
    Ok((ok, "eps in {0.1, 0.2, 0.5}, 10^4 draws each".into()))
}

fn check_boundedness(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(5));
    let mut ok = true;
    for c in [1.0f64, 2.0, 10.0] {
        for _ in 0..10_000 {
            let d = saturate_log_ratio(LogRatio::new(rng.gen_range(-1e6..1e6))?, c)?.value();
            ok &= d.exp() <= c.exp() && (0.5 * d).exp() <= (0.5 * c).exp();
        }
    }
    Ok((ok, "c in {1, 2, 10}, 10^4 draws each".into()))
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

const FD_STEP: f64 = 1e-5;

fn check_grad_distributions(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(6));
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..4);
        let mean: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let log_std: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let action: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut dm = vec![0.0; k];
        let mut ds = vec![0.0; k];
        gaussian_log_prob_grad(&mean, &log_std, &action, &mut dm, &mut ds);
        for j in 0..k {
            let mut m = mean.clone();
            m[j] += FD_STEP;
            let up = gaussian_log_prob(&m, &log_std, &action);
            m[j] -= 2.0 * FD_STEP;
            let down = gaussian_log_prob(&m, &log_std, &action);
            worst = worst.max(rel_err(dm[j], (up - down) / (2.0 * FD_STEP)));
            let mut s = log_std.clone();
            s[j] += FD_STEP;
            let up = gaussian_log_prob(&mean, &s, &action);
            s[j] -= 2.0 * FD_STEP;
            let down = gaussian_log_prob(&mean, &s, &action);
            worst = worst.max(rel_err(ds[j], (up - down) / (2.0 * FD_STEP)));
        }
        cases += 1;

        let n = rng.gen_range(2..6);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a = rng.gen_range(0..n);
        let mut lp = vec![0.0; n];
        log_softmax(&logits, &mut lp);
        let mut g = vec![0.0; n];
        let mut gh = vec![0.0; n];
        categorical_log_prob_grad(&lp, a, &mut g);
        categorical_entropy_grad(&lp, &mut gh);
        let eval = |l: &[f64]| {
            let mut out = vec![0.0; l.len()];
            log_softmax(l, &mut out);
            (out[a], categorical_entropy(&out))
        };
        for j in 0..n {
            let mut l = logits.clone();
            l[j] += FD_STEP;
            let up = eval(&l);
            l[j] -= 2.0 * FD_STEP;
            let down = eval(&l);
            worst = worst.max(rel_err(g[j], (up.0 - down.0) / (2.0 * FD_STEP)));
            worst = worst.max(rel_err(gh[j], (up.1 - down.1) / (2.0 * FD_STEP)));
        }
        cases += 1;
    }
    Ok((worst <= 1e-4, format!("{cases} cases, max relative error {worst:.2e}")))
}

fn check_grad_nets(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(7));
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.gen_range(2..5);
        let dims: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..17)).collect();
        let net = Mlp::new(&dims, 1.0, &mut rng)?;
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let og: Vec<f64> = (0..dims[depth - 1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads = net.backward(&x, &og)?;
        let objective = |n: &Mlp| -> Result<f64> {
            Ok(n.forward(&x)?.iter().zip(&og).map(|(y, g)| y * g).sum())
        };
        // a handful of coordinates per net keeps the check fast
        for _ in 0..8 {
            let k = rng.gen_range(0..net.n_params());
            let mut n = net.clone();
            n.params_mut()[k] += FD_STEP;
            let up = objective(&n)?;
            n.params_mut()[k] -= 2.0 * FD_STEP;
            let down = objective(&n)?;
            worst = worst.max(rel_err(grads[k], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok((worst <= 1e-4, format!("100 nets, max relative error {worst:.2e}")))
}

fn check_grad_learners(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(8));
    let mut worst: f64 = 0.0;
    let mut n_cases = 0;
    let mut configs = Vec::new();
    for alg in Algorithm::ALL {
        let kinds: Vec<RegularizerKind> = if alg.is_regularized() {
            RegularizerKind::ALL.into_iter().filter(|k| *k != RegularizerKind::None).collect()
        } else {
            vec![RegularizerKind::None]
        };
        for kind in kinds {
            let mut s = SurrogateConfig::default();
            s.regularizer_kind = kind;
            s.entropy_coef = 0.01;
            configs.push((alg, s));
        }
    }
    let rows = 6;
    for (alg, s) in configs {
        let mut done = false;
        for _ in 0..50 {
            let net = Mlp::new(&[1, 1], 1.0, &mut rng)?;
            let policy = Policy::from_parts(net, vec![rng.gen_range(-0.5..0.5)], false)?;
            let obs = vec![1.0; rows];
            let actions: Vec<f64> = (0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let adv: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let mut logp_old = Vec::with_capacity(rows);
            for a in &actions {
                logp_old.push(policy.log_prob(&[1.0], &[*a])? + rng.gen_range(-0.6..0.6));
            }
            let loss_of = |p: &Policy| -> Result<crate::learners::PolicyLoss> {
                let ev = p.evaluate(&obs, &actions, rows)?;
                policy_loss(alg, &adv, &logp_old, &ev.logp, &ev.entropy, &s)
            };
            let base = loss_of(&policy)?;
            let eps = s.epsilon;
            let near_kink = base
                .r
                .iter()
                .chain(&base.q)
                .any(|v| (v - (1.0 - eps)).abs() < 1e-3 || (v - (1.0 + eps)).abs() < 1e-3);
            if near_kink {
                continue;
            }
            let ev = policy.evaluate(&obs, &actions, rows)?;
            let mut g_net = vec![0.0; policy.net.n_params()];
            let mut g_ls = vec![0.0; 1];
            policy.backward(&ev, &actions, &base.dlogp, &vec![base.dentropy; rows], &mut g_net, &mut g_ls)?;
            for k in 0..g_net.len() + 1 {
                let shifted = |h: f64| -> Result<f64> {
                    let mut p = policy.clone();
                    if k < g_net.len() {
                        p.net.params_mut()[k] += h;
                    } else {
                        p.log_std[0] += h;
                    }
                    Ok(loss_of(&p)?.loss)
                };
                let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
                let analytic = if k < g_net.len() { g_net[k] } else { g_ls[0] };
                worst = worst.max(rel_err(analytic, fd));
            }
            done = true;
            n_cases += 1;
            break;
        }
        if !done {
            return Ok((false, format!("{alg}: no sample batch away from the clip kinks")));
        }
    }
    Ok((worst <= 1e-4, format!("{n_cases} configurations, max relative error {worst:.2e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_suite_passes() {
        for r in run_checks(&VerifyOptions::default(), &[]) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn perturbed_bc_is_caught() {
        let opts = VerifyOptions {
            bc_perturbation: 0.01,
            ..VerifyOptions::default()
        };
        let only = vec!["bc_kl_equivalence".to_string(), "bc_quadrature".to_string()];
        let results = run_checks(&opts, &only);
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|r| !r.passed));
    }

    #[test]
    fn names_are_unique() {
        let mut names = check_names();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }
}
