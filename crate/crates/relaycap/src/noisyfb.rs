//! Two-use transmission with noisy channel-output feedback through a
//! single-tap relay: closed-loop code design maximizing the
//! post-processed SNR at the destination.
//!
//! Over two uses the source sends `x[1] = g1 theta` and
//! `x[2] = g2 theta + f21 (z[1] + n[1])`, the relay forwards
//! `h1 (x[1] + w[1])`, and the destination combines both outputs with
//! the optimal linear estimator. The design variables `(g1, g2, f21,
//! h1)` are bound by per-use source power `rho` and the relay budget
//! `h1^2 <= gamma rho / (rho + sigma_w^2)`. The solver follows the
//! stationarity system of the maximization: `g1 = sqrt(rho)` at its
//! boundary, the second power constraint tight, `g2` eliminated through
//! the stationarity relation, and the relay gain either interior (its
//! own stationarity condition, solved jointly by alternation) or at the
//! budget boundary — whichever of the two branches wins. Limit cases
//! (noiseless or infinitely noisy links) are dispatched to their exact
//! closed forms instead of large finite surrogates.

use std::error::Error;
use std::fmt;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

/// Errors from problem construction and sweep preconditions.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisyFbError {
    Invalid(String),
}

impl fmt::Display for NoisyFbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoisyFbError::Invalid(msg) => write!(f, "invalid feedback problem: {msg}"),
        }
    }
}

impl Error for NoisyFbError {}

/// Problem data: source power, relay observation noise, feedback-link
/// noise, and the relay power multiplier. The two noise variances accept
/// `f64::INFINITY` as exact symbolic limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyFbProblem {
    rho: f64,
    sigma_w2: f64,
    sigma_n2: f64,
    gamma: f64,
}

impl NoisyFbProblem {
    pub fn new(rho: f64, sigma_w2: f64, sigma_n2: f64, gamma: f64) -> Result<Self, NoisyFbError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(NoisyFbError::Invalid("source power must be positive and finite".into()));
        }
        if !(sigma_w2 >= 0.0) {
            return Err(NoisyFbError::Invalid(
                "relay noise variance must be nonnegative (infinity allowed)".into(),
            ));
        }
        if !(sigma_n2 >= 0.0) {
            return Err(NoisyFbError::Invalid(
                "feedback noise variance must be nonnegative (infinity allowed)".into(),
            ));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(NoisyFbError::Invalid(
                "relay budget multiplier must be finite and nonnegative".into(),
            ));
        }
        Ok(NoisyFbProblem { rho, sigma_w2, sigma_n2, gamma })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    pub fn sigma_n2(&self) -> f64 {
        self.sigma_n2
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Upper limit of the relay gain, `sqrt(gamma rho / (rho + sigma_w^2))`
    /// (zero in the infinitely-noisy-relay limit).
    pub fn h1_cap(&self) -> f64 {
        if self.sigma_w2.is_infinite() {
            0.0
        } else {
            (self.gamma * self.rho / (self.rho + self.sigma_w2)).sqrt()
        }
    }
}

/// How a solution was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Interior relay gain from the joint stationarity alternation.
    KktIteration,
    /// Relay gain pinned at the power boundary.
    BoundaryCase,
    /// One of the exact limit-case formulas.
    ClosedForm,
    /// Exhaustive grid evaluation (fallback or oracle).
    GridOracle,
}

impl fmt::Display for SolveMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveMethod::KktIteration => "kkt_iteration",
            SolveMethod::BoundaryCase => "boundary_case",
            SolveMethod::ClosedForm => "closed_form",
            SolveMethod::GridOracle => "grid_oracle",
        };
        f.write_str(s)
    }
}

/// A designed two-use code: the four gains, the attained SNR, and the
/// multipliers of the two power constraints recovered from the
/// stationarity system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyFbSolution {
    pub g1: f64,
    pub g2: f64,
    pub f21: f64,
    pub h1: f64,
    pub snr: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub relay_power_saturated: bool,
    pub method: SolveMethod,
}

/// `sigma^2 x^2` with the exact-zero guard so symbolic infinite
/// variances multiplied by a structurally-zero gain contribute nothing.
fn noise_term(sigma2: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        sigma2 * x * x
    }
}

/// Effective noise power of the combined second observation,
/// `1 + sigma_n^2 f21^2 + sigma_w^2 h1^2`.
fn beta(problem: &NoisyFbProblem, f21: f64, h1: f64) -> f64 {
    1.0 + noise_term(problem.sigma_n2, f21) + noise_term(problem.sigma_w2, h1)
}

/// Post-processed SNR of the two-use scheme for arbitrary gains.
///
/// With both noise variances finite this assembles the vector form —
/// signal direction `[g1, g2 + h1 g1]` against the combined noise
/// covariance `(I+F)(I+F)' + sigma_n^2 F F' + sigma_w^2 B B'` — and
/// evaluates the matched-filter SNR `g' C^{-1} g`. In the symbolic
/// limit cases the algebraically reduced form is used instead.
pub fn post_snr(g1: f64, g2: f64, f21: f64, h1: f64, problem: &NoisyFbProblem) -> f64 {
    if problem.sigma_n2.is_finite() && problem.sigma_w2.is_finite() {
        let g = Vector2::new(g1, g2 + h1 * g1);
        let i_plus_f = Matrix2::new(1.0, 0.0, f21, 1.0);
        let f = Matrix2::new(0.0, 0.0, f21, 0.0);
        let b = Matrix2::new(0.0, 0.0, h1, 0.0);
        let c = i_plus_f * i_plus_f.transpose()
            + f * f.transpose() * problem.sigma_n2
            + b * b.transpose() * problem.sigma_w2;
        let ci = c.try_inverse().expect("combined noise covariance is positive definite");
        (g.transpose() * ci * g)[(0, 0)]
    } else {
        snr_reduced(g1, g2, f21, h1, problem)
    }
}

/// The reduced SNR expression `g1^2 + (g1 (h1 - f21) + g2)^2 / beta`,
/// valid for all gains and exact in the symbolic limits.
fn snr_reduced(g1: f64, g2: f64, f21: f64, h1: f64, problem: &NoisyFbProblem) -> f64 {
    let b = beta(problem, f21, h1);
    if b.is_infinite() {
        return g1 * g1;
    }
    let a = g1 * (h1 - f21) + g2;
    g1 * g1 + a * a / b
}

/// Stationarity elimination of `g2` given `(f21, h1)` (finite noises).
fn g2_of(problem: &NoisyFbProblem, f21: f64, h1: f64) -> f64 {
    let sn2 = problem.sigma_n2;
    let sw2 = problem.sigma_w2;
    let num = sn2 * problem.rho + (1.0 + sn2) * (1.0 + sw2 * h1 * h1);
    let den = 1.0 + sw2 * h1 * h1 + sn2 * f21 * h1;
    -(num / den) * f21 / problem.rho.sqrt()
}

/// Root of the tight second power constraint in `f21 < 0` at fixed
/// `h1`, using the eliminated `g2`. The left-hand side is monotone as
/// `f21` decreases inside the admissible region, so bisection applies.
fn solve_f21(problem: &NoisyFbProblem, h1: f64) -> f64 {
    let rho = problem.rho;
    let sn2 = problem.sigma_n2;
    let sw2 = problem.sigma_w2;
    let num = sn2 * rho + (1.0 + sn2) * (1.0 + sw2 * h1 * h1);
    let lhs = |f: f64| -> f64 {
        let den = 1.0 + sw2 * h1 * h1 + sn2 * f * h1;
        let r = num / den * f;
        r * r / rho + (1.0 + sn2) * f * f
    };
    // Lower end of the bracket: whichever is closer to zero of (a) just
    // inside the pole of the eliminated g2 and (b) just past the
    // power-ball radius. The root satisfies the tight power constraint,
    // so it lies inside the ball, and the left-hand side exceeds the
    // budget at either clamp.
    let ball = (rho / (1.0 + sn2)).sqrt() * (1.0 + 1e-6);
    let mut lo = if sn2 * h1 > 0.0 {
        (-(1.0 + sw2 * h1 * h1) / (sn2 * h1) * (1.0 - 1e-13)).max(-ball)
    } else {
        -ball
    };
    let mut hi = 0.0f64;
    debug_assert!(lhs(lo) >= rho);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lhs(mid) >= rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= 1e-12 * lo.abs().max(1e-6) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Multiplier of the source power constraint from the first
/// stationarity condition, `mu2 = A / (beta g2)`.
fn recover_mu2(problem: &NoisyFbProblem, g2: f64, f21: f64, h1: f64) -> f64 {
    if g2 == 0.0 {
        return 0.0;
    }
    let a = problem.rho.sqrt() * (h1 - f21) + g2;
    a / (beta(problem, f21, h1) * g2)
}

/// Multiplier of the relay power constraint from the third stationarity
/// condition (zero at an interior relay gain).
fn recover_mu3(problem: &NoisyFbProblem, g2: f64, f21: f64, h1: f64, saturated: bool) -> f64 {
    if !saturated {
        return 0.0;
    }
    let b = beta(problem, f21, h1);
    if !b.is_finite() {
        return 0.0;
    }
    let a = problem.rho.sqrt() * (h1 - f21) + g2;
    let sw2h = if h1 == 0.0 { 0.0 } else { problem.sigma_w2 * h1 };
    (a * (b * problem.rho.sqrt() - a * sw2h) / (b * b)).max(0.0)
}

fn build_solution(
    problem: &NoisyFbProblem,
    g2: f64,
    f21: f64,
    h1: f64,
    saturated: bool,
    method: SolveMethod,
) -> NoisyFbSolution {
    let g1 = problem.rho.sqrt();
    NoisyFbSolution {
        g1,
        g2,
        f21,
        h1,
        snr: snr_reduced(g1, g2, f21, h1, problem),
        mu2: recover_mu2(problem, g2, f21, h1),
        mu3: recover_mu3(problem, g2, f21, h1, saturated),
        relay_power_saturated: saturated,
        method,
    }
}

/// Maximize the post-processed SNR over `(g1, g2, f21, h1)`.
///
/// `g1 = sqrt(rho)` always. The limit cases (noiseless feedback,
/// infinitely noisy feedback, infinitely noisy relay link) return their
/// exact closed forms. Otherwise both relay-gain branches are solved —
/// the interior stationarity alternation and the power boundary — and
/// the better one is returned. If the alternation fails to settle, the
/// exhaustive grid takes over and the result is flagged accordingly.
pub fn solve(problem: &NoisyFbProblem) -> NoisyFbSolution {
    let rho = problem.rho;
    let sw2 = problem.sigma_w2;
    let sn2 = problem.sigma_n2;
    let cap = problem.h1_cap();

    // Infinitely noisy feedback: the side information is worthless, so
    // f21 = 0, all second-use power goes to g2, and the relay gain is
    // the lesser of its own optimum and the budget.
    if sn2.is_infinite() {
        let h_unc = if sw2 == 0.0 { f64::INFINITY } else { 1.0 / sw2 };
        let h1 = cap.min(h_unc);
        return build_solution(problem, rho.sqrt(), 0.0, h1, cap <= h_unc, SolveMethod::ClosedForm);
    }
    // Infinitely noisy relay observation: the relay is turned off and
    // the problem reduces to pure (noisy-)feedback coding.
    if sw2.is_infinite() {
        let d = (1.0 + (1.0 + rho) * sn2).powi(2) + rho * (1.0 + sn2);
        let g2 = (rho / d).sqrt() * (sn2 * rho + 1.0 + sn2);
        let f21 = -rho / d.sqrt();
        return build_solution(problem, g2, f21, 0.0, true, SolveMethod::ClosedForm);
    }
    // Noiseless feedback: (g2, f21) have h1-free closed forms and the
    // relay gain is the lesser of its unconstrained optimum and the cap.
    if sn2 == 0.0 {
        let g2 = (rho / (1.0 + rho)).sqrt();
        let f21 = -rho / (1.0 + rho).sqrt();
        let h_unc =
            if sw2 == 0.0 { f64::INFINITY } else { 1.0 / (sw2 * (1.0 + rho).sqrt()) };
        let h1 = cap.min(h_unc);
        return build_solution(problem, g2, f21, h1, cap <= h_unc, SolveMethod::ClosedForm);
    }

    // Boundary branch: relay gain at the cap.
    let f_b = solve_f21(problem, cap);
    let g_b = g2_of(problem, f_b, cap);
    let boundary = build_solution(problem, g_b, f_b, cap, true, SolveMethod::BoundaryCase);

    // Interior branch: alternate the relay-gain stationarity condition
    // with the tight-power root, seeded from the boundary values. Only
    // meaningful when the relay link carries any noise at all.
    let mut interior: Option<NoisyFbSolution> = None;
    let mut diverged = false;
    if sw2 > 0.0 && cap > 0.0 {
        let mut h1 = cap;
        let mut f21 = f_b;
        let mut g2 = g_b;
        let mut converged = false;
        for _ in 0..10_000 {
            let h_next = rho.sqrt() * (1.0 + sn2 * f21 * f21) / (sw2 * (g2 - rho.sqrt() * f21));
            if !h_next.is_finite() || h_next <= 0.0 {
                diverged = true;
                break;
            }
            let f_next = solve_f21(problem, h_next);
            let g_next = g2_of(problem, f_next, h_next);
            let delta = (h_next - h1).abs().max((f_next - f21).abs());
            h1 = h_next;
            f21 = f_next;
            g2 = g_next;
            if delta <= 1e-12 {
                converged = true;
                break;
            }
        }
        if converged && h1 < cap {
            // Verify the joint residuals before trusting the point.
            let h_res =
                h1 - rho.sqrt() * (1.0 + sn2 * f21 * f21) / (sw2 * (g2 - rho.sqrt() * f21));
            let c2_res = g2 * g2 + (1.0 + sn2) * f21 * f21 - rho;
            if h_res.abs() <= 1e-10 * h1.max(1.0) && c2_res.abs() <= 1e-9 * rho {
                interior =
                    Some(build_solution(problem, g2, f21, h1, false, SolveMethod::KktIteration));
            } else {
                diverged = true;
            }
        } else if !converged {
            diverged = true;
        }
    }

    if diverged && interior.is_none() {
        // The alternation failed; fall back to brute force rather than
        // trusting the boundary branch alone.
        let grid = grid_oracle(problem, 1e-4);
        if grid.snr > boundary.snr + 1e-9 {
            return grid;
        }
        return boundary;
    }
    match interior {
        Some(sol) if sol.snr >= boundary.snr => sol,
        _ => boundary,
    }
}

/// Exhaustive evaluation on a grid of step `resolution` over the relay
/// gain and the feedback gain, with the second-use source gain
/// eliminated by the (always tight) power constraint. Serves as the
/// independent verification oracle for [`solve`].
pub fn grid_oracle(problem: &NoisyFbProblem, resolution: f64) -> NoisyFbSolution {
    assert!(resolution > 0.0 && resolution <= 1e-2, "grid resolution out of range");
    let rho = problem.rho;
    let sn2 = problem.sigma_n2;
    let cap = problem.h1_cap();
    let f_max = if sn2.is_infinite() { 0.0 } else { (rho / (1.0 + sn2)).sqrt() };
    let nh = (cap / resolution).ceil() as usize;
    let nf = (f_max / resolution).ceil() as usize;

    let best = (0..=nh)
        .into_par_iter()
        .map(|ih| {
            let h1 = if nh == 0 { 0.0 } else { cap * ih as f64 / nh as f64 };
            let mut row_best = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
            for jf in 0..=nf {
                let f21 = if nf == 0 { 0.0 } else { -f_max * jf as f64 / nf as f64 };
                let g2 = (rho - (1.0 + sn2) * f21 * f21).max(0.0).sqrt();
                let snr = snr_reduced(rho.sqrt(), g2, f21, h1, problem);
                if snr > row_best.0 {
                    row_best = (snr, f21, g2);
                }
            }
            (ih, row_best)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .max_by(|(ia, a), (ib, b)| a.0.partial_cmp(&b.0).unwrap().then(ib.cmp(ia)))
        .expect("grid is nonempty");

    let (ih, (_, f21, g2)) = best;
    let h1 = if nh == 0 { 0.0 } else { cap * ih as f64 / nh as f64 };
    let saturated = ih == nh;
    let mut sol = build_solution(problem, g2, f21, h1, saturated, SolveMethod::GridOracle);
    sol.method = SolveMethod::GridOracle;
    sol
}

/// One point of a relay-gain sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub h1: f64,
    pub snr: f64,
    pub g2: f64,
    pub f21: f64,
    /// Whether this gain sits at the relay power boundary.
    pub saturated: bool,
}

/// For each relay gain in `h1_grid`, optimize the two source gains only
/// and report the attained SNR. This is the machinery behind the
/// SNR-versus-relay-gain plots; the no-feedback reference curve is the
/// same sweep at `sigma_n^2 = infinity`.
pub fn sweep_h1(problem: &NoisyFbProblem, h1_grid: &[f64]) -> Result<Vec<SweepPoint>, NoisyFbError> {
    let cap = problem.h1_cap();
    if h1_grid.is_empty() {
        return Err(NoisyFbError::Invalid("empty relay-gain grid".into()));
    }
    for &h1 in h1_grid {
        if !(h1 >= 0.0 && h1 <= cap * (1.0 + 1e-12) + 1e-300) {
            return Err(NoisyFbError::Invalid(format!(
                "relay gain {h1} outside [0, {cap}]"
            )));
        }
    }
    let rho = problem.rho;
    let sn2 = problem.sigma_n2;
    Ok(h1_grid
        .par_iter()
        .map(|&h1| {
            let (f21, g2) = if sn2.is_infinite() {
                (0.0, rho.sqrt())
            } else if sn2 == 0.0 {
                (-rho / (1.0 + rho).sqrt(), (rho / (1.0 + rho)).sqrt())
            } else {
                let f = solve_f21(problem, h1);
                (f, g2_of(problem, f, h1))
            };
            SweepPoint {
                h1,
                snr: snr_reduced(rho.sqrt(), g2, f21, h1, problem),
                g2,
                f21,
                saturated: h1 >= cap * (1.0 - 1e-12),
            }
        })
        .collect())
}

/// Residuals of the three stationarity conditions at a candidate point,
/// for certification. Returns `[r1, r2, r3]`.
pub fn kkt_residuals(problem: &NoisyFbProblem, sol: &NoisyFbSolution) -> [f64; 3] {
    let rho = problem.rho;
    let sn2 = problem.sigma_n2;
    let sw2 = problem.sigma_w2;
    let b = beta(problem, sol.f21, sol.h1);
    let a = rho.sqrt() * (sol.h1 - sol.f21) + sol.g2;
    let r1 = -a / b + sol.mu2 * sol.g2;
    let sn2f = if sol.f21 == 0.0 { 0.0 } else { sn2 * sol.f21 };
    let r2 = (b * rho.sqrt() * a + a * a * sn2f) / (b * b)
        + sol.mu2 * (1.0 + sn2) * sol.f21;
    let sw2h = if sol.h1 == 0.0 { 0.0 } else { sw2 * sol.h1 };
    let r3 = -(b * rho.sqrt() * a - a * a * sw2h) / (b * b) + sol.mu3;
    [r1, r2, r3]
}
