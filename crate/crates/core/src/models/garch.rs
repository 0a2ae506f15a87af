use serde::{Deserialize, Serialize};

use super::ModelError;

const MIN_LEN: usize = 50;
const MAX_ITER: usize = 4000;
/// 95% quantile of the chi-squared distribution with 2 degrees of freedom.
const LR_CRITICAL: f64 = 5.991;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GarchParams {
    pub fn persistence(&self) -> f64 {
        self.alpha + self.beta
    }

    pub fn is_valid(&self) -> bool {
        self.omega > 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.persistence() < 1.0
            && [self.omega, self.alpha, self.beta].iter().all(|v| v.is_finite())
    }

    /// Unconditional variance `omega / (1 - alpha - beta)`.
    pub fn long_run_variance(&self) -> f64 {
        self.omega / (1.0 - self.persistence())
    }

    /// Unconstrained coordinates: `(ln omega, logit(alpha + beta), logit(alpha / (alpha + beta)))`.
    fn to_free(self) -> [f64; 3] {
        let logit = |p: f64| {
            let p = p.clamp(1e-9, 1.0 - 1e-9);
            (p / (1.0 - p)).ln()
        };
        let p = self.persistence();
        let share = if p > 0.0 { self.alpha / p } else { 0.5 };
        [self.omega.ln(), logit(p), logit(share)]
    }

    fn from_free(u: [f64; 3]) -> Self {
        let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
        let p = logistic(u[1]);
        let share = logistic(u[2]);
        Self { omega: u[0].exp(), alpha: p * share, beta: p * (1.0 - share) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub params: GarchParams,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best log-likelihood after each simplex iteration.
    pub trace: Vec<f64>,
}

fn sample_variance(r: &[f64]) -> f64 {
    let m = r.iter().sum::<f64>() / r.len() as f64;
    r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64
}

/// `sigma^2` for each return given everything before it, plus the one-step
/// variance after the last return (`returns.len() + 1` values).
pub fn conditional_variances(params: &GarchParams, returns: &[f64], initial: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(returns.len() + 1);
    let mut s2 = initial;
    v.push(s2);
    for r in returns {
        s2 = params.omega + params.alpha * r * r + params.beta * s2;
        v.push(s2);
    }
    v
}

/// Gaussian log-likelihood without the constant term.
fn log_likelihood(params: &GarchParams, returns: &[f64], initial: f64) -> f64 {
    let mut s2 = initial;
    let mut ll = 0.0;
    for r in returns {
        ll -= 0.5 * (s2.ln() + r * r / s2);
        s2 = params.omega + params.alpha * r * r + params.beta * s2;
    }
    ll
}

/// Maximum-likelihood GARCH(1,1) by Nelder-Mead over unconstrained
/// coordinates. `sigma^2_0` is the sample variance. Without `init`, the
/// simplex starts from the best point of a small persistence grid. The
/// constant-variance model is returned when a 5% likelihood-ratio test
/// does not reject it.
pub fn garch_fit(returns: &[f64], init: Option<GarchParams>) -> Result<GarchFit, ModelError> {
    if returns.len() < MIN_LEN {
        return Err(ModelError::TooShort { len: returns.len(), min: MIN_LEN });
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    let var = sample_variance(returns);
    if !(var > 0.0) {
        return Err(ModelError::DegenerateSeries);
    }
    let objective = |u: &[f64; 3]| {
        let p = GarchParams::from_free(*u);
        let ll = log_likelihood(&p, returns, var);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };
    let start = match init {
        Some(p) if p.is_valid() => p.to_free(),
        Some(p) => return Err(ModelError::InvalidGarch(p)),
        None => {
            let mut best = (f64::INFINITY, [0.0; 3]);
            for persistence in [0.05, 0.5, 0.8, 0.9, 0.95, 0.98] {
                for alpha_share in [0.1, 0.3] {
                    let alpha = persistence * alpha_share;
                    let p = GarchParams { omega: var * (1.0 - persistence), alpha, beta: persistence - alpha };
                    let u = p.to_free();
                    let f = objective(&u);
                    if f < best.0 {
                        best = (f, u);
                    }
                }
            }
            best.1
        }
    };
    let (u, f, iterations, converged, trace) = nelder_mead(objective, start);
    let mut params = GarchParams::from_free(u);
    let mut ll = -f;
    let constant = GarchParams { omega: var, alpha: 0.0, beta: 0.0 };
    let ll_constant = log_likelihood(&constant, returns, var);
    if 2.0 * (ll - ll_constant) < LR_CRITICAL {
        params = constant;
        ll = ll_constant;
    }
    Ok(GarchFit { params, log_likelihood: ll, iterations, converged, trace: trace.into_iter().map(|v| -v).collect() })
}

fn nelder_mead<F: Fn(&[f64; 3]) -> f64>(f: F, start: [f64; 3]) -> ([f64; 3], f64, usize, bool, Vec<f64>) {
    const STEP: f64 = 0.5;
    const TOL: f64 = 1e-10;
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((start, f(&start)));
    for i in 0..3 {
        let mut p = start;
        p[i] += STEP;
        simplex.push((p, f(&p)));
    }
    let mut trace = Vec::new();
    let blend = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] { std::array::from_fn(|i| a[i] + t * (b[i] - a[i])) };
    for iter in 0..MAX_ITER {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(simplex[0].1);
        let spread = (simplex[3].1 - simplex[0].1).abs();
        if spread <= TOL * (1.0 + simplex[0].1.abs()) {
            return (simplex[0].0, simplex[0].1, iter, true, trace);
        }
        let centroid: [f64; 3] = std::array::from_fn(|i| simplex[..3].iter().map(|p| p.0[i]).sum::<f64>() / 3.0);
        let worst = simplex[3];
        let reflected = blend(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = blend(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let (target, ft) = if fr < worst.1 { (reflected, fr) } else { (worst.0, worst.1) };
            let contracted = blend(&centroid, &target, 0.5);
            let fc = f(&contracted);
            if fc < ft {
                simplex[3] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for p in simplex.iter_mut().skip(1) {
                    p.0 = blend(&best, &p.0, 0.5);
                    p.1 = f(&p.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    trace.push(simplex[0].1);
    (simplex[0].0, simplex[0].1, MAX_ITER, false, trace)
}

/// `sqrt(sum_{k=1..h} E[sigma^2_{+k}])` from the one-step variance `next`,
/// using `E[sigma^2_{+k+1}] = omega + (alpha + beta) E[sigma^2_{+k}]`.
pub fn horizon_forecast(params: &GarchParams, next: f64, horizon_steps: usize) -> f64 {
    let mut s2 = next;
    let mut total = 0.0;
    for _ in 0..horizon_steps {
        total += s2;
        s2 = params.omega + params.persistence() * s2;
    }
    total.sqrt()
}

/// Runs the variance recursion through `returns` (from the sample variance,
/// or `omega` for an empty series) and forecasts `horizon_steps` ahead.
pub fn garch_forecast(params: &GarchParams, returns: &[f64], horizon_steps: usize) -> Result<f64, ModelError> {
    if !params.is_valid() {
        return Err(ModelError::InvalidGarch(*params));
    }
    let initial = if returns.is_empty() { params.omega } else { sample_variance(returns).max(f64::MIN_POSITIVE) };
    let next = if returns.is_empty() {
        params.omega
    } else {
        *conditional_variances(params, returns, initial).last().expect("non-empty")
    };
    Ok(horizon_forecast(params, next, horizon_steps))
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    pub(crate) fn simulate(p: &GarchParams, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s2 = p.long_run_variance();
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let r = s2.sqrt() * z;
                s2 = p.omega + p.alpha * r * r + p.beta * s2;
                r
            })
            .collect()
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(garch_fit(&[0.0; 100], None), Err(ModelError::DegenerateSeries)));
        assert!(matches!(garch_fit(&[0.1; 10], None), Err(ModelError::TooShort { len: 10, min: 50 })));
    }

    #[test]
    fn constant_variance_forecasts() {
        let p = GarchParams { omega: 0.1, alpha: 0.0, beta: 0.0 };
        assert!((garch_forecast(&p, &[0.3, -0.2], 1).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        assert!((garch_forecast(&p, &[0.3, -0.2], 4).unwrap() - 0.4f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn iid_returns_have_low_persistence() {
        let r = simulate(&GarchParams { omega: 2.0, alpha: 0.0, beta: 0.0 }, 10_000, 3);
        let fit = garch_fit(&r, None).unwrap();
        let var = sample_variance(&r);
        assert!((fit.params.omega - var).abs() / var < 0.1, "{:?} vs {var}", fit.params);
        assert!(fit.params.persistence() < 0.1, "{:?}", fit.params);
    }

    #[test]
    fn recovers_parameters_and_trace_is_monotone() {
        let truth = GarchParams { omega: 0.05, alpha: 0.10, beta: 0.85 };
        let r = simulate(&truth, 50_000, 11);
        let fit = garch_fit(&r, None).unwrap();
        assert!(fit.converged);
        let p = fit.params;
        assert!(
            (p.omega - 0.05).abs() < 0.05 && (p.alpha - 0.10).abs() < 0.05 && (p.beta - 0.85).abs() < 0.05,
            "{p:?}"
        );
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn forecast_matches_monte_carlo() {
        let p = GarchParams { omega: 0.05, alpha: 0.10, beta: 0.85 };
        let next = 2.5;
        let h = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let paths = 200_000;
        let mut total = 0.0;
        for _ in 0..paths {
            let mut s2 = next;
            for _ in 0..h {
                total += s2;
                let z: f64 = StandardNormal.sample(&mut rng);
                s2 = p.omega + p.alpha * s2 * z * z + p.beta * s2;
            }
        }
        let mc = total / paths as f64;
        let f = horizon_forecast(&p, next, h).powi(2);
        assert!((mc - f).abs() / f < 0.01, "{mc} vs {f}");
    }
}
