//! The saturating creep law `a · (1 − exp(−b · t^c))` and its
//! Levenberg-Marquardt fit.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of daily points in a standardized series (days 1..=160).
pub const DAILY_POINTS: usize = 160;
/// Largest exponent accepted as a converged fit.
pub const MAX_EXPONENT: f64 = 2.0;

const EVAL_BUDGET: usize = 10_000;
const STEP_TOL: f64 = 1e-10;
const COST_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreepCurveParams {
    /// Asymptotic creep, microstrain.
    pub a: f64,
    /// Rate, day^-c.
    pub b: f64,
    pub c: f64,
    pub r2: f64,
    pub n_evals: usize,
    pub converged: bool,
}

impl CreepCurveParams {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self {
            a,
            b,
            c,
            r2: 1.0,
            n_evals: 0,
            converged: true,
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        creep_at(self.a, self.b, self.c, t)
    }

    /// Values at days 1..=160.
    pub fn resample_daily(&self) -> Vec<f64> {
        (1..=DAILY_POINTS).map(|d| curve(self.a, self.b, self.c, d as f64)).collect()
    }
}

fn curve(a: f64, b: f64, c: f64, t: f64) -> f64 {
    a * -(-b * t.powf(c)).exp_m1()
}

/// Creep at `t` days; errors on negative or non-finite `t`.
pub fn creep_at(a: f64, b: f64, c: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Input(format!("time must be a finite non-negative day count, got {t}")));
    }
    Ok(curve(a, b, c, t))
}

struct Problem<'a> {
    times: &'a [f64],
    ys: &'a [f64],
    evals: usize,
}

impl Problem<'_> {
    fn cost(&mut self, th: &Vector3<f64>) -> f64 {
        self.evals += 1;
        let (a, b, c) = (th[0].exp(), th[1].exp(), th[2].exp());
        self.times
            .iter()
            .zip(self.ys)
            .map(|(&t, &y)| (curve(a, b, c, t) - y).powi(2))
            .sum::<f64>()
    }

    /// Normal equations `JᵀJ` and gradient `Jᵀr` in log-parameters.
    fn linearize(&mut self, th: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        self.evals += 1;
        let (a, b, c) = (th[0].exp(), th[1].exp(), th[2].exp());
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&t, &y) in self.times.iter().zip(self.ys) {
            let tc = if t > 0.0 { t.powf(c) } else { 0.0 };
            let e = (-b * tc).exp();
            let f = a * (1.0 - e);
            let d_rate = a * e * b * tc;
            let d_exp = if t > 0.0 { d_rate * t.ln() * c } else { 0.0 };
            let j = Vector3::new(f, d_rate, d_exp);
            jtj += j * j.transpose();
            jtr += j * (f - y);
        }
        (jtj, jtr)
    }
}

struct Run {
    theta: Vector3<f64>,
    cost: f64,
    converged: bool,
}

fn levenberg_marquardt(p: &mut Problem<'_>, start: Vector3<f64>, budget: usize) -> Run {
    let mut theta = start;
    let mut cost = p.cost(&theta);
    let mut lambda = 1e-3;
    let limit = p.evals + budget;
    if cost == 0.0 {
        return Run { theta, cost, converged: true };
    }
    while p.evals < limit {
        let (jtj, jtr) = p.linearize(&theta);
        let mut accepted = false;
        while p.evals < limit {
            let mut a = jtj;
            for i in 0..3 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = theta + step;
            let new_cost = p.cost(&cand);
            if new_cost.is_finite() && new_cost <= cost {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                theta = cand;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-15);
                accepted = true;
                if step.norm() < STEP_TOL || rel < COST_TOL || cost == 0.0 {
                    return Run { theta, cost, converged: true };
                }
                break;
            }
            lambda *= 2.0;
            if lambda > 1e16 {
                // No descent direction left at this point: a stationary point.
                return Run { theta, cost, converged: true };
            }
        }
        if !accepted {
            break;
        }
    }
    Run {
        theta,
        cost,
        converged: false,
    }
}

/// Least-squares fit of the creep law in `(ln a, ln b, ln c)`. Starts at
/// `a = 1.2·max`, `b = 0.05`, `c = 1` and retries from three perturbed
/// starts if that run fails. The 10,000-evaluation budget is shared by all
/// starts; a result that exhausts it carries the best point and
/// `converged = false`.
pub fn fit_creep_curve(times: &[f64], creeps: &[f64]) -> Result<CreepCurveParams> {
    if times.len() != creeps.len() {
        return Err(Error::Fit(format!("{} times but {} creep values", times.len(), creeps.len())));
    }
    if times.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 points, got {}", times.len())));
    }
    if times.iter().chain(creeps).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite input".into()));
    }
    if times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Fit("times must be non-negative and strictly increasing".into()));
    }
    let peak = creeps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Fit("degenerate curve: no positive creep values".into()));
    }

    let mut problem = Problem {
        times,
        ys: creeps,
        evals: 0,
    };
    let base = Vector3::new((1.2 * peak).ln(), 0.05f64.ln(), 0.0);
    let perturbations = [(0.0, 0.0, 0.0), (0.5, -1.5, -0.3), (-0.3, 1.5, 0.3), (1.0, -3.0, -0.6)];
    let mut best: Option<Run> = None;
    for (da, db, dc) in perturbations {
        let remaining = EVAL_BUDGET.saturating_sub(problem.evals);
        if remaining == 0 {
            break;
        }
        let run = levenberg_marquardt(&mut problem, base + Vector3::new(da, db, dc), remaining);
        let done = run.converged && run.theta[2].exp() <= MAX_EXPONENT;
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
        if done {
            break;
        }
    }
    let run = best.expect("at least one start");
    let (a, b, c) = (run.theta[0].exp(), run.theta[1].exp(), run.theta[2].exp());
    if ![a, b, c].iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::Fit("fit left the admissible parameter range".into()));
    }
    let mean = creeps.iter().sum::<f64>() / creeps.len() as f64;
    let ss_tot: f64 = creeps.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - run.cost / ss_tot
    } else if run.cost == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(CreepCurveParams {
        a,
        b,
        c,
        r2,
        n_evals: problem.evals.min(EVAL_BUDGET),
        converged: run.converged && c <= MAX_EXPONENT,
    })
}
