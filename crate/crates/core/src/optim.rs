//! Limited-memory BFGS ascent with a backtracking Armijo line search.
//!
//! The objective may fail at some points (a covariance that stays singular
//! after jitter, for instance). Such points are treated like a failed
//! sufficient-increase test: the step shrinks and the search continues.

use std::collections::VecDeque;

use log::debug;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Status {
    Converged,
    MaxIters,
    LineSearchStalled,
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub gtol: f64,
    /// Stop when an accepted step improves the value by less than
    /// `ftol · max(1, |f|)`. Zero disables the test.
    pub ftol: f64,
    /// Curvature pairs kept.
    pub history: usize,
    /// Cap on the infinity norm of a trial step.
    pub max_step: f64,
    /// Sufficient-increase constant.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            gtol: 1e-5,
            ftol: 0.0,
            history: 10,
            max_step: 2.0,
            armijo: 1e-4,
            max_backtracks: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    /// Best point visited.
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
    /// Objective at the start and after each accepted step; non-decreasing.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion on the negated problem; returns an ascent direction.
fn direction(grad: &[f64], pairs: &VecDeque<Pair>) -> Vec<f64> {
    // work with g = -grad so the usual minimization formulas apply
    let mut q: Vec<f64> = grad.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(p) = pairs.back() {
        let gamma = dot(&p.s, &p.y) / dot(&p.y, &p.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

fn cap(d: &mut [f64], max_step: f64) {
    let n = inf_norm(d);
    if n > max_step {
        let s = max_step / n;
        d.iter_mut().for_each(|v| *v *= s);
    }
}

/// Maximizes `f`, which returns the value and its gradient.
///
/// Fails only if `f` fails at the starting point. Later failures shrink the
/// step; when no step is accepted the best point so far is returned with
/// [`Status::LineSearchStalled`].
pub fn maximize<F>(mut f: F, x0: &[f64], cfg: &OptimConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(x0)?;
    let mut x = x0.to_vec();
    let mut evaluations = 1;
    let mut trace = vec![fx];
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.history);
    let mut iterations = 0;

    let status = loop {
        if inf_norm(&g) <= cfg.gtol {
            break Status::Converged;
        }
        if iterations >= cfg.max_iters {
            break Status::MaxIters;
        }

        let mut accepted = None;
        // second attempt drops the curvature history and goes uphill along the gradient
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let mut d = direction(&g, &pairs);
            let mut slope = dot(&g, &d);
            if !(slope > 0.0) {
                pairs.clear();
                d = g.clone();
                slope = dot(&g, &d);
            }
            if pairs.is_empty() {
                // unit-free first step
                let s = 1.0 / inf_norm(&d).max(1.0);
                d.iter_mut().for_each(|v| *v *= s);
                slope *= s;
            }
            cap(&mut d, cfg.max_step);
            slope = slope.min(dot(&g, &d));

            let mut step = 1.0;
            for _ in 0..cfg.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
                evaluations += 1;
                match f(&trial) {
                    Ok((ft, gt)) if ft.is_finite() && gt.iter().all(|v| v.is_finite()) => {
                        if ft >= fx + cfg.armijo * step * slope {
                            accepted = Some((trial, ft, gt));
                            break;
                        }
                    }
                    Ok(_) => {}
                    Err(e) => debug!("objective failed during line search: {e}"),
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((xn, fn_, gn)) = accepted else {
            break Status::LineSearchStalled;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        // curvature of the negated objective
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == cfg.history {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        let gain = fn_ - fx;
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        debug!("iter {iterations}: value {fx:.6}, |g|inf {:.3e}", inf_norm(&g));
        if cfg.ftol > 0.0 && gain <= cfg.ftol * fx.abs().max(1.0) {
            break Status::Converged;
        }
    };

    Ok(OptimResult {
        x,
        value: fx,
        grad: g,
        status,
        iterations,
        trace,
        evaluations,
    })
}
