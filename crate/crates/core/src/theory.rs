//! Win-rate calculus for the first versus second order statistic.
//!
//! A positive image (`y_0 = 1`) and a negative image (`y_0 = 0`) each carry
//! `m` co-occurring classes whose labels are drawn with rate `rho` (positive)
//! or `q` (negative) and then flipped with probability `nu`. The target label
//! itself is observed through the joint distribution `pi` of
//! `(y~_0^+, y~_0^-)`. Noiseless pair scores are `max + delta * min` of the
//! target and co-occurring labels. `W_k` is the event that the positive
//! image's `k`-th largest score beats the negative image's, ties counting
//! one half.

use std::ops::RangeInclusive;

use rayon::prelude::*;

use crate::error::{Result, SparcError};
use crate::rng::{domain, Stream};

/// Trials per Monte Carlo chunk. Each chunk owns one random stream, so the
/// estimate does not depend on how chunks are scheduled.
pub const MC_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    pub rho: f64,
    pub q: f64,
    pub nu: f64,
    /// Number of co-occurring classes (compound prompts) per image.
    pub m: usize,
    pub pi00: f64,
    pub pi11: f64,
    pub pi01: f64,
    pub pi10: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SparcError::invalid(msg));
        if !(self.q > 0.0 && self.q < self.rho && self.rho < 1.0) {
            return bad(format!(
                "need 0 < q < rho < 1, got q = {}, rho = {}",
                self.q, self.rho
            ));
        }
        if !(self.nu >= 0.0 && self.nu < 0.5) {
            return bad(format!("need 0 <= nu < 1/2, got {}", self.nu));
        }
        let pis = [self.pi00, self.pi11, self.pi01, self.pi10];
        if pis.iter().any(|p| !(*p >= 0.0)) {
            return bad(format!("pi entries must be non-negative, got {pis:?}"));
        }
        let total: f64 = pis.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("pi entries must sum to 1, got {total}"));
        }
        if self.m < 1 {
            return bad("m must be at least 1".into());
        }
        Ok(())
    }

    pub fn with_m(self, m: usize) -> Self {
        Self { m, ..self }
    }

    /// The noise-robust `pi` of the worked example: `y~_0^+` keeps its label
    /// with probability 0.55 and `y~_0^-` with probability 0.45, independently.
    pub fn worked_example(nu: f64, m: usize) -> Self {
        Self {
            rho: 0.15,
            q: 0.01,
            nu,
            m,
            pi00: 0.55 * 0.45,
            pi11: 0.55 * 0.45,
            pi01: 0.45 * 0.45,
            pi10: 0.55 * 0.55,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedQuantities {
    pub rho_prime: f64,
    pub q_prime: f64,
    pub a: f64,
    pub gamma: f64,
    /// `m rho' a^(m-1)`: probability that exactly one positive-image label is on.
    pub big_a: f64,
    /// `m q' (1 - q')^(m-1)`: the same for the negative image.
    pub big_g: f64,
}

fn pow_log(base: f64, exponent: f64) -> f64 {
    if exponent == 0.0 {
        1.0
    } else {
        (exponent * base.ln()).exp()
    }
}

pub fn derive_quantities(params: &TheoryParams) -> Result<DerivedQuantities> {
    params.validate()?;
    let nu = params.nu;
    let rho_prime = params.rho + nu - 2.0 * nu * params.rho;
    let q_prime = params.q + nu - 2.0 * nu * params.q;
    let a = 1.0 - rho_prime;
    let gamma = (1.0 - q_prime) / a;
    let m = params.m as f64;
    Ok(DerivedQuantities {
        rho_prime,
        q_prime,
        a,
        gamma,
        big_a: m * rho_prime * pow_log(a, m - 1.0),
        big_g: m * q_prime * pow_log(1.0 - q_prime, m - 1.0),
    })
}

/// `Delta / G`: same sign as `Delta` and free of the `G` factor that
/// underflows for large `m`.
pub fn scaled_win_rate_difference(params: &TheoryParams) -> Result<f64> {
    if params.m < 2 {
        return Err(SparcError::invalid("the win-rate difference needs m >= 2"));
    }
    let d = derive_quantities(params)?;
    let (rp, qp, a) = (d.rho_prime, d.q_prime, d.a);
    let m = params.m as f64;
    // A / G without forming either
    let a_over_g = (rp / qp) * ((m - 1.0) * (a.ln() - (1.0 - qp).ln())).exp();
    let am1 = pow_log(a, m - 1.0);
    let bq = pow_log(1.0 - qp, m - 1.0);
    let b = 1.0 - rp + m * rp + rp * (1.0 - qp) / qp;
    let c = qp / rp + (1.0 - qp) / (1.0 - rp);
    Ok(0.5 * (params.pi00 + params.pi11) * (1.0 - a_over_g)
        + 0.5 * params.pi01 * (1.0 - am1 * b)
        + 0.5 * params.pi10 * a_over_g * (d.big_g + a * bq * c - 1.0))
}

/// `Delta = Pr(W_2) - Pr(W_1)` in closed form. Requires `m >= 2`.
pub fn win_rate_difference_closed_form(params: &TheoryParams) -> Result<f64> {
    let scaled = scaled_win_rate_difference(params)?;
    Ok(derive_quantities(params)?.big_g * scaled)
}

/// `Pr(X_2) Pr(Y_2) - Pr(X_1) Pr(Y_1)` for `X, Y` in {High, Low} order-statistic
/// events, where the first factor is the positive image (rate `rho'`) and the
/// second the negative image (rate `q'`), both with the target label off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentDifferences {
    pub d_hh: f64,
    pub d_hl: f64,
    pub d_lh: f64,
    pub d_ll: f64,
}

impl ComponentDifferences {
    pub fn sum(&self) -> f64 {
        self.d_hh + self.d_hl + self.d_lh + self.d_ll
    }
}

/// Valid for any `m >= 1`; at `m = 1` the second order statistic does not
/// exist and the values are only of algebraic interest.
pub fn component_differences(params: &TheoryParams) -> Result<ComponentDifferences> {
    let d = derive_quantities(params)?;
    let m = params.m as f64;
    let (big_a, big_g) = (d.big_a, d.big_g);
    let am = pow_log(d.a, m);
    let gam = pow_log(d.gamma * d.a, m);
    Ok(ComponentDifferences {
        d_hh: big_a * big_g - (1.0 - am) * big_g - (1.0 - gam) * big_a,
        d_hl: (1.0 - am) * big_g - big_a * big_g - gam * big_a,
        d_lh: (1.0 - gam) * big_a - big_a * big_g - am * big_g,
        d_ll: big_a * big_g + am * big_g + gam * big_a,
    })
}

/// Lower bounds on `m` beyond which `Delta > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MBounds {
    pub bound1: f64,
    pub bound2: f64,
}

impl MBounds {
    pub fn max(&self) -> f64 {
        self.bound1.max(self.bound2)
    }
}

pub fn theorem1_m_bounds(params: &TheoryParams) -> Result<MBounds> {
    let d = derive_quantities(params)?;
    let mass = params.pi00 + params.pi11 + 0.5 * params.pi01;
    if !(mass > 0.0) {
        return Err(SparcError::HypothesisViolated(
            "the observed target label must disagree with the truth with positive probability \
             (pi00 + pi11 + pi01/2 > 0)"
                .into(),
        ));
    }
    let (rp, qp) = (d.rho_prime, d.q_prime);
    let neg_log_a = -(1.0 - rp).ln();
    let step =
        |m: f64| 1.0 + (2f64.ln() + (1.0 - rp + m * rp + rp * (1.0 - qp) / qp).ln()) / neg_log_a;
    // contraction: the slope rho' / ((1 - rho' + m rho' + ...) * -ln(1 - rho')) is below 1
    let mut m = 2.0;
    for _ in 0..1_000_000 {
        let next = step(m);
        let done = (next - m).abs() <= 1e-12 * next.abs().max(1.0);
        m = next;
        if done {
            break;
        }
    }
    let bound2 = 1.0
        + (rp.ln() - qp.ln() + (1.0 - params.pi01).ln() - mass.ln())
            / ((1.0 - qp).ln() - (1.0 - rp).ln());
    Ok(MBounds { bound1: m, bound2 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub nu: f64,
    pub m: usize,
    pub delta: f64,
}

pub const WORKED_EXAMPLE_NUS: [f64; 2] = [0.05, 0.2];

/// `Delta(m)` for the worked example at both flip rates.
pub fn theorem2_example_sweep(m_range: RangeInclusive<usize>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for nu in WORKED_EXAMPLE_NUS {
        for m in m_range.clone() {
            let delta = win_rate_difference_closed_form(&TheoryParams::worked_example(nu, m))?;
            rows.push(SweepRow { nu, m, delta });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloOptions {
    pub trials: u64,
    pub seed: u64,
    /// Weight of the smaller label in a pair score, in `(0, 1)`.
    pub delta: f64,
    /// SD of additive Gaussian score noise; 0 scores ties as one half.
    pub sigma: f64,
}

impl MonteCarloOptions {
    pub fn new(trials: u64, seed: u64) -> Self {
        Self {
            trials,
            seed,
            delta: 0.5,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub trials: u64,
}

/// Top two of the `m` pair scores of one image.
fn top_two(
    stream: &mut Stream,
    target: bool,
    rate: f64,
    params: &TheoryParams,
    opts: &MonteCarloOptions,
) -> (f64, f64) {
    let y0 = if target { 1.0 } else { 0.0 };
    let (mut r1, mut r2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..params.m {
        let true_label = stream.bernoulli(rate);
        let flipped = stream.bernoulli(params.nu);
        let yi = if true_label != flipped { 1.0 } else { 0.0 };
        let mut s = f64::max(y0, yi) + opts.delta * f64::min(y0, yi);
        if opts.sigma > 0.0 {
            s += opts.sigma * stream.normal();
        }
        if s > r1 {
            r2 = r1;
            r1 = s;
        } else if s > r2 {
            r2 = s;
        }
    }
    (r1, r2)
}

/// Twice the win score: 2 for a win, 1 for a tie, 0 for a loss.
fn doubled_win(pos: f64, neg: f64) -> i64 {
    if pos > neg {
        2
    } else if pos == neg {
        1
    } else {
        0
    }
}

/// Estimate `Delta` by simulating the generative process directly.
pub fn win_rate_monte_carlo(
    params: &TheoryParams,
    trials: u64,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    win_rate_monte_carlo_with(params, &MonteCarloOptions::new(trials, seed))
}

pub fn win_rate_monte_carlo_with(
    params: &TheoryParams,
    opts: &MonteCarloOptions,
) -> Result<MonteCarloEstimate> {
    params.validate()?;
    if params.m < 2 {
        return Err(SparcError::invalid(
            "the second order statistic needs m >= 2",
        ));
    }
    if opts.trials < 1 {
        return Err(SparcError::invalid("trials must be at least 1"));
    }
    if !(opts.delta > 0.0 && opts.delta < 1.0) {
        return Err(SparcError::invalid(format!(
            "delta must lie in (0, 1), got {}",
            opts.delta
        )));
    }
    if !(opts.sigma >= 0.0 && opts.sigma.is_finite()) {
        return Err(SparcError::invalid(format!(
            "sigma must be finite and >= 0, got {}",
            opts.sigma
        )));
    }
    let chunks = opts.trials.div_ceil(MC_CHUNK);
    let cum = [
        params.pi00,
        params.pi00 + params.pi11,
        params.pi00 + params.pi11 + params.pi01,
    ];
    // integer sums of 2D and (2D)^2 keep the reduction exact and order-free
    let (sum, sum_sq) = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut stream = Stream::for_domain(opts.seed, domain::MONTE_CARLO, chunk);
            let n = MC_CHUNK.min(opts.trials - chunk * MC_CHUNK);
            let (mut s, mut s2) = (0i64, 0i64);
            for _ in 0..n {
                let u = stream.uniform();
                let (pos_target, neg_target) = if u < cum[0] {
                    (false, false)
                } else if u < cum[1] {
                    (true, true)
                } else if u < cum[2] {
                    (false, true)
                } else {
                    (true, false)
                };
                let (p1, p2) = top_two(&mut stream, pos_target, params.rho, params, opts);
                let (n1, n2) = top_two(&mut stream, neg_target, params.q, params, opts);
                let d = doubled_win(p2, n2) - doubled_win(p1, n1);
                s += d;
                s2 += d * d;
            }
            (s, s2)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = opts.trials as f64;
    let mean = sum as f64 / (2.0 * n);
    let second = sum_sq as f64 / (4.0 * n);
    let var = if opts.trials > 1 {
        (second - mean * mean).max(0.0) * n / (n - 1.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        estimate: mean,
        standard_error: (var / n).sqrt(),
        trials: opts.trials,
    })
}
