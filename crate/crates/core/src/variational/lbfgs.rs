//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The inverse Hessian is applied with the usual two-loop recursion, seeded by
//! `gamma * I` with `gamma = s'y / y'y` from the latest pair. The line search
//! brackets and zooms with cubic interpolation; an objective value that is not
//! finite (for instance a model run that overflowed) is treated as "too far"
//! and the trial step is cut by a factor of ten.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// A differentiable scalar function.
///
/// `evaluate` writes the gradient into `grad` and returns the value; a
/// non-finite return marks the point as infeasible.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsOptions {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Budget of objective evaluations, line-search trials included.
    pub max_evals: usize,
    /// Stop once the max-norm of the gradient drops below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Trials per line search before giving up.
    pub max_line_search: usize,
    /// Cap on the max-norm of the first trial step taken without curvature
    /// information (the first iteration, or after a history reset).
    pub max_initial_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 150,
            max_evals: 150,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            max_initial_step: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    MaxEvaluations,
    LineSearchFailed,
    /// The starting point itself could not be evaluated.
    InfeasibleStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub f: f64,
    /// Objective at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub n_iterations: usize,
    pub n_evaluations: usize,
    pub termination: Termination,
}

impl LbfgsReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g`.
fn search_direction(grad: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let a = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (pair, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimiser of the cubic matching values and slopes at `a` and `b`, if it exists.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

struct Trial {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, O: Objective> {
    objective: &'a mut O,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    opts: &'a LbfgsOptions,
    evals: &'a mut usize,
    evals_left: usize,
    best: Option<Trial>,
}

impl<O: Objective> LineSearch<'_, O> {
    fn eval(&mut self, alpha: f64) -> Option<Trial> {
        if self.evals_left == 0 {
            return None;
        }
        self.evals_left -= 1;
        *self.evals += 1;
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(xi, di)| xi + alpha * di).collect();
        let mut g = vec![0.0; x.len()];
        let f = self.objective.evaluate(&x, &mut g);
        let slope = if f.is_finite() { dot(&g, self.dir) } else { f64::NAN };
        let trial = Trial { alpha, f, slope, x, g };
        if trial.f.is_finite() && trial.f < self.best.as_ref().map_or(self.f0, |b| b.f) {
            self.best = Some(Trial {
                x: trial.x.clone(),
                g: trial.g.clone(),
                ..trial
            });
        }
        Some(trial)
    }

    fn armijo(&self, t: &Trial) -> bool {
        t.f.is_finite() && t.f <= self.f0 + self.opts.c1 * t.alpha * self.slope0
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.opts.c2 * self.slope0
    }

    /// Returns a step satisfying the strong Wolfe conditions, if one is found in budget.
    fn run(&mut self, alpha_init: f64) -> Option<Trial> {
        let mut prev = Trial {
            alpha: 0.0,
            f: self.f0,
            slope: self.slope0,
            x: Vec::new(),
            g: Vec::new(),
        };
        let mut alpha = alpha_init;
        for i in 0..self.opts.max_line_search {
            let t = self.eval(alpha)?;
            if !t.f.is_finite() {
                alpha *= 0.1;
                continue;
            }
            if !self.armijo(&t) || (i > 0 && t.f >= prev.f) {
                return self.zoom(prev, t);
            }
            if self.curvature(&t) {
                return Some(t);
            }
            if t.slope >= 0.0 {
                return self.zoom(t, prev);
            }
            alpha = 2.0 * t.alpha;
            prev = t;
        }
        None
    }

    fn zoom(&mut self, mut lo: Trial, mut hi: Trial) -> Option<Trial> {
        for _ in 0..self.opts.max_line_search {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= f64::EPSILON * b.max(1e-300) {
                return None;
            }
            let guess = if hi.f.is_finite() {
                cubic_min(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope)
            } else {
                None
            };
            let alpha = match guess {
                Some(c) if c > a + 0.1 * width && c < b - 0.1 * width => c,
                _ if !hi.f.is_finite() => lo.alpha + 0.1 * (hi.alpha - lo.alpha),
                _ => 0.5 * (a + b),
            };
            let t = self.eval(alpha)?;
            if !self.armijo(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if self.curvature(&t) {
                    return Some(t);
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        None
    }
}

pub fn minimize<O: Objective>(objective: &mut O, x_init: &[f64], opts: &LbfgsOptions) -> LbfgsReport {
    let n = x_init.len();
    let mut x = x_init.to_vec();
    let mut g = vec![0.0; n];
    let mut n_evaluations = 1;
    let mut f = objective.evaluate(&x, &mut g);
    let mut report = LbfgsReport {
        x: x.clone(),
        f,
        cost_trace: vec![f],
        grad_norm_trace: vec![max_norm(&g)],
        n_iterations: 0,
        n_evaluations,
        termination: Termination::InfeasibleStart,
    };
    if !f.is_finite() {
        return report;
    }
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let termination = loop {
        if max_norm(&g) < opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if report.n_iterations >= opts.max_iter {
            break Termination::MaxIterations;
        }
        if n_evaluations >= opts.max_evals {
            break Termination::MaxEvaluations;
        }
        let mut dir = search_direction(&g, &history);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let evals_left = opts.max_evals.saturating_sub(n_evaluations);
        let mut ls = LineSearch {
            objective: &mut *objective,
            x: &x,
            dir: &dir,
            f0: f,
            slope0: slope,
            opts,
            evals: &mut n_evaluations,
            evals_left,
            best: None,
        };
        let alpha_init = if history.is_empty() {
            (opts.max_initial_step / max_norm(&dir)).min(1.0)
        } else {
            1.0
        };
        let accepted = ls.run(alpha_init);
        let best = ls.best.take();
        report.n_evaluations = n_evaluations;
        // A step that only lowers the objective is still taken; curvature pairs
        // with s'y <= 0 are discarded below.
        let (step, wolfe) = match (accepted, best) {
            (Some(t), _) => (t, true),
            (None, Some(b)) => (b, false),
            (None, None) if n_evaluations >= opts.max_evals => break Termination::MaxEvaluations,
            (None, None) => break Termination::LineSearchFailed,
        };
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * (dot(&s, &s) * dot(&y, &y)).sqrt() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = step.x;
        g = step.g;
        f = step.f;
        report.n_iterations += 1;
        report.cost_trace.push(f);
        report.grad_norm_trace.push(max_norm(&g));
        report.x.clone_from(&x);
        report.f = f;
        if !wolfe && n_evaluations >= opts.max_evals {
            break Termination::MaxEvaluations;
        }
    };
    report.termination = termination;
    report.n_evaluations = n_evaluations;
    report
}
