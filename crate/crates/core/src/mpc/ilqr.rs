//! Iterative LQR over fixed-size state and control dimensions.

use nalgebra::{SMatrix, SVector};

use crate::error::{CoreError, Result};

/// Second-order expansion of a stage cost.
#[derive(Clone, Debug)]
pub struct StageQuadratic<const N: usize, const M: usize> {
    pub lx: SVector<f64, N>,
    pub lu: SVector<f64, M>,
    pub lxx: SMatrix<f64, N, N>,
    pub luu: SMatrix<f64, M, M>,
    pub lux: SMatrix<f64, M, N>,
}

impl<const N: usize, const M: usize> StageQuadratic<N, M> {
    pub fn zeros() -> Self {
        Self {
            lx: SVector::zeros(),
            lu: SVector::zeros(),
            lxx: SMatrix::zeros(),
            luu: SMatrix::zeros(),
            lux: SMatrix::zeros(),
        }
    }
}

/// A finite-horizon problem `min Σ l_t(x_t, u_t) + l_H(x_H)` subject to
/// `x_{t+1} = f(x_t, u_t)`.
pub trait TrajectoryProblem<const N: usize, const M: usize> {
    fn horizon(&self) -> usize;
    fn step(&self, x: &SVector<f64, N>, u: &SVector<f64, M>) -> SVector<f64, N>;
    fn linearize(
        &self,
        x: &SVector<f64, N>,
        u: &SVector<f64, M>,
    ) -> (SMatrix<f64, N, N>, SMatrix<f64, N, M>);
    fn stage_cost(&self, t: usize, x: &SVector<f64, N>, u: &SVector<f64, M>) -> f64;
    fn stage_quadratic(&self, t: usize, x: &SVector<f64, N>, u: &SVector<f64, M>) -> StageQuadratic<N, M>;
    fn terminal_cost(&self, x: &SVector<f64, N>) -> f64;
    fn terminal_quadratic(&self, x: &SVector<f64, N>) -> (SVector<f64, N>, SMatrix<f64, N, N>);
}

#[derive(Clone, Debug, PartialEq)]
pub struct IlqrOptions {
    pub max_iters: usize,
    /// Converged once an accepted step (or the predicted one) lowers the
    /// cost by less than this.
    pub tolerance: f64,
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_factor: f64,
    /// Step fractions tried are `s, s/2, …, s/2^backtracks`, where `s` is 1
    /// on the first iteration and twice the last accepted fraction after.
    pub backtracks: u32,
}

impl Default for IlqrOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tolerance: 1e-9,
            mu_init: 1e-9,
            mu_min: 1e-9,
            mu_max: 1e10,
            mu_factor: 10.0,
            backtracks: 10,
        }
    }
}

impl IlqrOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(CoreError::Config("iLQR tolerance must be positive".into()));
        }
        if !(0.0 < self.mu_min && self.mu_min < self.mu_max) {
            return Err(CoreError::Config(format!(
                "regularization bounds must satisfy 0 < min < max, got [{}, {}]",
                self.mu_min, self.mu_max
            )));
        }
        if !(self.mu_factor > 1.0) {
            return Err(CoreError::Config("regularization factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IlqrSolution<const N: usize, const M: usize> {
    pub xs: Vec<SVector<f64, N>>,
    pub us: Vec<SVector<f64, M>>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after the initial rollout and after every accepted step.
    pub accepted_costs: Vec<f64>,
}

fn rollout<P, const N: usize, const M: usize>(
    problem: &P,
    x0: &SVector<f64, N>,
    us: &[SVector<f64, M>],
) -> (Vec<SVector<f64, N>>, f64)
where
    P: TrajectoryProblem<N, M> + ?Sized,
{
    let mut xs = Vec::with_capacity(us.len() + 1);
    xs.push(*x0);
    let mut cost = 0.0;
    for (t, u) in us.iter().enumerate() {
        cost += problem.stage_cost(t, &xs[t], u);
        let next = problem.step(&xs[t], u);
        xs.push(next);
    }
    cost += problem.terminal_cost(&xs[us.len()]);
    (xs, cost)
}

struct Gains<const N: usize, const M: usize> {
    k: Vec<SVector<f64, M>>,
    big_k: Vec<SMatrix<f64, M, N>>,
    /// Predicted decrease terms: `ΔJ(α) = α·d1 + α²·d2`.
    d1: f64,
    d2: f64,
}

fn backward<const N: usize, const M: usize>(
    quads: &[StageQuadratic<N, M>],
    jac: &[(SMatrix<f64, N, N>, SMatrix<f64, N, M>)],
    terminal: &(SVector<f64, N>, SMatrix<f64, N, N>),
    mu: f64,
) -> Option<Gains<N, M>> {
    let h = quads.len();
    let mut vx = terminal.0;
    let mut vxx = terminal.1;
    let mut k = vec![SVector::<f64, M>::zeros(); h];
    let mut big_k = vec![SMatrix::<f64, M, N>::zeros(); h];
    let (mut d1, mut d2) = (0.0, 0.0);
    for t in (0..h).rev() {
        let (a, b) = &jac[t];
        let q = &quads[t];
        let qx = q.lx + a.transpose() * vx;
        let qu = q.lu + b.transpose() * vx;
        let vxx_a = vxx * a;
        let qxx = q.lxx + a.transpose() * vxx_a;
        let quu = q.luu + b.transpose() * vxx * b;
        let qux = q.lux + b.transpose() * vxx_a;
        let quu_reg = quu + SMatrix::<f64, M, M>::identity() * mu;
        let chol = quu_reg.cholesky()?;
        let kt = -chol.solve(&qu);
        let kk = -chol.solve(&qux);
        d1 += kt.dot(&qu);
        d2 += 0.5 * kt.dot(&(quu * kt));
        vx = qx + kk.transpose() * quu * kt + kk.transpose() * qu + qux.transpose() * kt;
        vxx = qxx + kk.transpose() * quu * kk + kk.transpose() * qux + qux.transpose() * kk;
        vxx = 0.5 * (vxx + vxx.transpose());
        k[t] = kt;
        big_k[t] = kk;
    }
    Some(Gains { k, big_k, d1, d2 })
}

/// Solve from `x0` starting at the control sequence `u_init`.
///
/// Accepted iterations never raise the cost. If the iteration budget or the
/// regularization ceiling is hit, the best trajectory so far is returned with
/// `converged = false`.
pub fn solve<P, const N: usize, const M: usize>(
    problem: &P,
    x0: &SVector<f64, N>,
    u_init: Vec<SVector<f64, M>>,
    opts: &IlqrOptions,
) -> Result<IlqrSolution<N, M>>
where
    P: TrajectoryProblem<N, M> + ?Sized,
{
    opts.validate()?;
    let h = problem.horizon();
    if u_init.len() != h {
        return Err(CoreError::Dimension(format!(
            "initial controls have length {}, horizon is {h}",
            u_init.len()
        )));
    }
    let mut us = u_init;
    let (mut xs, mut cost) = rollout(problem, x0, &us);
    if !cost.is_finite() {
        return Err(CoreError::Numeric(format!("initial rollout cost {cost}")));
    }
    let mut accepted = vec![cost];
    let mut mu = opts.mu_init.clamp(opts.mu_min, opts.mu_max);
    let mut converged = false;
    let mut iterations = 0;
    let mut relinearize = true;
    // Line searches start from twice the last accepted step.
    let mut alpha_start: f64 = 1.0;
    let mut quads = Vec::new();
    let mut jac = Vec::new();
    let mut terminal = (SVector::zeros(), SMatrix::zeros());

    while iterations < opts.max_iters {
        iterations += 1;
        if relinearize {
            quads = (0..h).map(|t| problem.stage_quadratic(t, &xs[t], &us[t])).collect();
            jac = (0..h).map(|t| problem.linearize(&xs[t], &us[t])).collect();
            terminal = problem.terminal_quadratic(&xs[h]);
            relinearize = false;
        }
        let gains = loop {
            match backward(&quads, &jac, &terminal, mu) {
                Some(g) => break Some(g),
                None if mu < opts.mu_max => mu = (mu * opts.mu_factor).min(opts.mu_max),
                None => break None,
            }
        };
        let Some(gains) = gains else { break };
        if -(gains.d1 + gains.d2) < opts.tolerance {
            converged = true;
            break;
        }

        let mut step_taken = false;
        let mut alpha = alpha_start;
        for _ in 0..=opts.backtracks {
            let mut new_xs = Vec::with_capacity(h + 1);
            let mut new_us = Vec::with_capacity(h);
            new_xs.push(*x0);
            let mut new_cost = 0.0;
            for t in 0..h {
                let dx = new_xs[t] - xs[t];
                let u = us[t] + gains.k[t] * alpha + gains.big_k[t] * dx;
                new_cost += problem.stage_cost(t, &new_xs[t], &u);
                let next = problem.step(&new_xs[t], &u);
                new_xs.push(next);
                new_us.push(u);
            }
            new_cost += problem.terminal_cost(&new_xs[h]);
            if new_cost.is_nan() {
                return Err(CoreError::Numeric(format!(
                    "cost became NaN in line search (iteration {iterations}, step {alpha})"
                )));
            }
            if new_cost < cost {
                let decrease = cost - new_cost;
                xs = new_xs;
                us = new_us;
                cost = new_cost;
                accepted.push(cost);
                step_taken = true;
                relinearize = true;
                alpha_start = (2.0 * alpha).min(1.0);
                if decrease < opts.tolerance {
                    converged = true;
                }
                break;
            }
            alpha *= 0.5;
        }
        if step_taken {
            mu = (mu / opts.mu_factor).max(opts.mu_min);
            if converged {
                break;
            }
        } else {
            if mu >= opts.mu_max {
                break;
            }
            mu = (mu * opts.mu_factor).min(opts.mu_max);
        }
    }
    Ok(IlqrSolution {
        xs,
        us,
        cost,
        iterations,
        converged,
        accepted_costs: accepted,
    })
}
