//! Lorenz96 dynamics on a periodic 1-D grid, advanced with classical RK4.
//!
//! Besides the forward map this module provides the exact tangent-linear and
//! adjoint of the *discrete* RK4 step, so gradients computed by
//! [`DiscreteModel::adjoint_sweep`] are consistent with [`DiscreteModel::integrate`]
//! to rounding error.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Smallest grid for which the `n+1, n-1, n-2` stencil is non-degenerate.
pub const MIN_SPACE: usize = 4;

/// A finite state on the periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < MIN_SPACE {
            return Err(Error::invalid(format!(
                "state dimension {} is below the minimum of {MIN_SPACE}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: 0 });
        }
        Ok(Self(values))
    }

    /// The constant state `value * 1`.
    pub fn constant(n_space: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_space])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for StateVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub n_space: usize,
    pub dt: f64,
    pub forcing: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            n_space: 40,
            dt: 0.1,
            forcing: 8.0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_space < MIN_SPACE {
            return Err(Error::invalid(format!(
                "n_space must be at least {MIN_SPACE}, got {}",
                self.n_space
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.forcing.is_finite() {
            return Err(Error::invalid("forcing must be finite"));
        }
        Ok(())
    }
}

/// States `X_0..=X_T` of one model run, stored row-major `[time][space]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_space: usize,
    dt: f64,
    states: Vec<f64>,
}

impl Trajectory {
    /// Wraps already-computed states. `states.len()` must be a positive multiple of `n_space`.
    pub fn from_states(n_space: usize, dt: f64, states: Vec<f64>) -> Result<Self> {
        if n_space == 0 || states.is_empty() || !states.len().is_multiple_of(n_space) {
            return Err(Error::DimensionMismatch {
                expected: n_space,
                found: states.len(),
            });
        }
        Ok(Self {
            n_space,
            dt,
            states,
        })
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of steps `T`; there are `T + 1` states.
    pub fn steps(&self) -> usize {
        self.states.len() / self.n_space - 1
    }

    pub fn n_times(&self) -> usize {
        self.states.len() / self.n_space
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.n_space..(t + 1) * self.n_space]
    }

    pub fn initial(&self) -> &[f64] {
        self.state(0)
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.steps())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.states
    }

    pub fn into_states(self) -> Vec<f64> {
        self.states
    }
}

/// A discrete-time model `X_{t+1} = M(X_t)` together with its exact linearisation.
pub trait DiscreteModel: Sync {
    fn dim(&self) -> usize;

    fn time_step(&self) -> f64;

    fn step(&self, x: &[f64], out: &mut [f64]);

    /// `(dM/dx)(x_lin) * u`
    fn tangent_step(&self, x_lin: &[f64], u: &[f64], out: &mut [f64]);

    /// `(dM/dx)(x_lin)^T * lam`
    fn adjoint_step(&self, x_lin: &[f64], lam: &[f64], out: &mut [f64]);

    /// Runs `steps` model steps from `x0`, failing on the first non-finite state.
    fn integrate(&self, x0: &[f64], steps: usize) -> Result<Trajectory> {
        let n = self.dim();
        check_len(n, x0.len())?;
        if steps == 0 {
            return Err(Error::invalid("integrate needs at least one step"));
        }
        let mut states = vec![0.0; n * (steps + 1)];
        states[..n].copy_from_slice(x0);
        for t in 0..steps {
            let (head, tail) = states.split_at_mut((t + 1) * n);
            let out = &mut tail[..n];
            self.step(&head[t * n..], out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: t + 1 });
            }
        }
        Ok(Trajectory {
            n_space: n,
            dt: self.time_step(),
            states,
        })
    }

    /// Returns `sum_t (dM_{0->t}/dX_0)^T forcings[t]` by one backward pass
    /// `lam_t = forcings[t] + M'(X_t)^T lam_{t+1}`.
    ///
    /// `forcings` is laid out like the trajectory, `[time][space]`.
    fn adjoint_sweep(&self, traj: &Trajectory, forcings: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        check_len(n, traj.n_space())?;
        check_len(traj.as_slice().len(), forcings.len())?;
        let steps = traj.steps();
        let mut lam = forcings[steps * n..].to_vec();
        let mut back = vec![0.0; n];
        for t in (0..steps).rev() {
            self.adjoint_step(traj.state(t), &lam, &mut back);
            for ((l, b), f) in lam.iter_mut().zip(&back).zip(&forcings[t * n..(t + 1) * n]) {
                *l = b + f;
            }
        }
        Ok(lam)
    }
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Lorenz96 right-hand side `(x[n+1] - x[n-2]) x[n-1] - x[n] + F` with cyclic indices.
pub fn tendency(x: &[f64], forcing: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    tendency_into(x, forcing, &mut out);
    out
}

pub fn tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let ii = i as isize;
        let xp1 = x[wrap(ii + 1, n)];
        let xm1 = x[wrap(ii - 1, n)];
        let xm2 = x[wrap(ii - 2, n)];
        out[i] = (xp1 - xm2) * xm1 - x[i] + forcing;
    }
}

/// Jacobian of the tendency at `x` applied to `u`.
fn tendency_jvp(x: &[f64], u: &[f64], out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let ii = i as isize;
        let (p1, m1, m2) = (wrap(ii + 1, n), wrap(ii - 1, n), wrap(ii - 2, n));
        out[i] = (u[p1] - u[m2]) * x[m1] + (x[p1] - x[m2]) * u[m1] - u[i];
    }
}

/// Transposed Jacobian of the tendency at `x` applied to `v`.
fn tendency_vjp(x: &[f64], v: &[f64], out: &mut [f64]) {
    let n = x.len();
    for m in 0..n {
        let mm = m as isize;
        let (p1, p2, m1, m2) = (
            wrap(mm + 1, n),
            wrap(mm + 2, n),
            wrap(mm - 1, n),
            wrap(mm - 2, n),
        );
        out[m] = v[m1] * x[m2] - v[p2] * x[p1] + v[p1] * (x[p2] - x[m1]) - v[m];
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96 {
    cfg: DynamicsConfig,
}

impl Lorenz96 {
    pub fn new(cfg: DynamicsConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Skips validation so `dt = 0` can be used as an identity map.
    pub fn new_unchecked(cfg: DynamicsConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.cfg
    }

    /// Intermediate RK4 stage points `x, x + dt/2 k1, x + dt/2 k2, x + dt k3` and the slopes.
    fn stages(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let dt = self.cfg.dt;
        let coeff = [0.5 * dt, 0.5 * dt, dt];
        let mut points = Vec::with_capacity(4);
        let mut slopes = Vec::with_capacity(4);
        let mut point = x.to_vec();
        for s in 0..4 {
            let k = tendency(&point, self.cfg.forcing);
            let next = if s < 3 {
                x.iter().zip(&k).map(|(xi, ki)| xi + coeff[s] * ki).collect()
            } else {
                Vec::new()
            };
            points.push(point);
            slopes.push(k);
            point = next;
        }
        (points, slopes)
    }
}

impl DiscreteModel for Lorenz96 {
    fn dim(&self) -> usize {
        self.cfg.n_space
    }

    fn time_step(&self) -> f64 {
        self.cfg.dt
    }

    fn step(&self, x: &[f64], out: &mut [f64]) {
        let dt = self.cfg.dt;
        let (_, k) = self.stages(x);
        for i in 0..x.len() {
            out[i] = x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }

    fn tangent_step(&self, x_lin: &[f64], u: &[f64], out: &mut [f64]) {
        let n = x_lin.len();
        let dt = self.cfg.dt;
        let (points, _) = self.stages(x_lin);
        let coeff = [0.5 * dt, 0.5 * dt, dt];
        let mut dk: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        let mut z = u.to_vec();
        for s in 0..4 {
            tendency_jvp(&points[s], &z, &mut dk[s]);
            if s < 3 {
                for i in 0..n {
                    z[i] = u[i] + coeff[s] * dk[s][i];
                }
            }
        }
        for i in 0..n {
            out[i] = u[i] + dt / 6.0 * (dk[0][i] + 2.0 * dk[1][i] + 2.0 * dk[2][i] + dk[3][i]);
        }
    }

    fn adjoint_step(&self, x_lin: &[f64], lam: &[f64], out: &mut [f64]) {
        let n = x_lin.len();
        let dt = self.cfg.dt;
        let (points, _) = self.stages(x_lin);
        let weights = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
        // coefficient with which stage s feeds the input of stage s + 1
        let coeff = [0.5 * dt, 0.5 * dt, dt];
        out.copy_from_slice(lam);
        let mut dk_bar = vec![0.0; n];
        let mut z_bar = vec![0.0; n];
        for s in (0..4).rev() {
            for i in 0..n {
                dk_bar[i] = weights[s] * lam[i];
                if s < 3 {
                    dk_bar[i] += coeff[s] * z_bar[i];
                }
            }
            tendency_vjp(&points[s], &dk_bar, &mut z_bar);
            for i in 0..n {
                out[i] += z_bar[i];
            }
        }
    }
}

/// Cyclic shift `out[i] = x[(i - k) mod n]`.
pub fn rotate(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    out.rotate_right(k % x.len().max(1));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn model(n: usize) -> Lorenz96 {
        Lorenz96::new(DynamicsConfig {
            n_space: n,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn tendency_fixed_point_and_rest_state() {
        assert!(tendency(&[8.0; 40], 8.0).iter().all(|&v| v == 0.0));
        assert!(tendency(&[0.0; 40], 8.0).iter().all(|&v| v == 8.0));
    }

    #[test]
    fn tendency_hand_evaluated_n5() {
        // n=0: (2-4)*5-1+8, n=1: (3-5)*1-2+8, n=2: (4-1)*2-3+8, n=3: (5-2)*3-4+8, n=4: (1-3)*4-5+8
        let got = tendency(&[1.0, 2.0, 3.0, 4.0, 5.0], 8.0);
        assert_eq!(got, vec![-3.0, 4.0, 11.0, 13.0, -5.0]);
    }

    #[test]
    fn rk4_identity_and_fixed_point() {
        let m = model(40);
        let mut out = vec![0.0; 40];
        m.step(&[8.0; 40], &mut out);
        assert!(out.iter().all(|&v| v == 8.0));

        let zero_dt = Lorenz96::new_unchecked(DynamicsConfig {
            dt: 0.0,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, 40, 5.0);
        zero_dt.step(&x, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn integrate_shapes_and_determinism() {
        let m = model(40);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random_vec(&mut rng, 40, 5.0);
        let traj = m.integrate(&x0, 1).unwrap();
        assert_eq!(traj.n_times(), 2);
        let mut one = vec![0.0; 40];
        m.step(&x0, &mut one);
        assert_eq!(traj.state(1), &one[..]);

        let fixed = m.integrate(&[8.0; 40], 10).unwrap();
        for t in 0..=10 {
            assert_eq!(fixed.state(t), &[8.0; 40][..]);
        }

        let a = m.integrate(&x0, 25).unwrap();
        let b = m.integrate(&x0, 25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn integrate_reports_blow_up() {
        let m = Lorenz96::new(DynamicsConfig {
            dt: 5.0,
            ..Default::default()
        })
        .unwrap();
        let mut x0 = vec![8.0; 40];
        x0[3] = 50.0;
        assert!(matches!(m.integrate(&x0, 50), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn tangent_matches_central_differences() {
        let m = model(40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..20 {
            let x = random_vec(&mut rng, 40, 6.0);
            let u = random_vec(&mut rng, 40, 1.0);
            let mut tl = vec![0.0; 40];
            m.tangent_step(&x, &u, &mut tl);
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
            let (mut fp, mut fm) = (vec![0.0; 40], vec![0.0; 40]);
            m.step(&xp, &mut fp);
            m.step(&xm, &mut fm);
            let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let err: f64 = fd.iter().zip(&tl).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = tl.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / norm < 1e-6, "relative error {}", err / norm);
        }
    }

    #[test]
    fn tangent_is_linear() {
        let m = model(12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_vec(&mut rng, 12, 6.0);
        let u = random_vec(&mut rng, 12, 1.0);
        let u2: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let (mut a, mut b, mut z) = (vec![0.0; 12], vec![0.0; 12], vec![1.0; 12]);
        m.tangent_step(&x, &u, &mut a);
        m.tangent_step(&x, &u2, &mut b);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(2.0 * p, *q);
        }
        m.tangent_step(&x, &[0.0; 12], &mut z);
        assert!(z.iter().all(|&v| v == 0.0));
        m.adjoint_step(&x, &[0.0; 12], &mut z);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_is_transpose_of_tangent() {
        let m = model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = random_vec(&mut rng, 8, 6.0);
            let u = random_vec(&mut rng, 8, 1.0);
            let v = random_vec(&mut rng, 8, 1.0);
            let (mut tu, mut av) = (vec![0.0; 8], vec![0.0; 8]);
            m.tangent_step(&x, &u, &mut tu);
            m.adjoint_step(&x, &v, &mut av);
            let (lhs, rhs) = (dot(&tu, &v), dot(&u, &av));
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn dense_jacobian_assembly_agrees() {
        let n = 6;
        let m = model(n);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_vec(&mut rng, n, 6.0);
        let mut jac = vec![vec![0.0; n]; n]; // jac[row][col]
        let mut col = vec![0.0; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            m.tangent_step(&x, &e, &mut col);
            for i in 0..n {
                jac[i][j] = col[i];
            }
        }
        let mut row = vec![0.0; n];
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            m.adjoint_step(&x, &e, &mut row);
            for j in 0..n {
                assert!((row[j] - jac[i][j]).abs() < 1e-13 * (1.0 + jac[i][j].abs()));
            }
        }
    }

    #[test]
    fn adjoint_sweep_edge_cases() {
        let m = model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let traj = m.integrate(&random_vec(&mut rng, 8, 5.0), 5).unwrap();
        let zeros = vec![0.0; 8 * 6];
        assert!(m.adjoint_sweep(&traj, &zeros).unwrap().iter().all(|&v| v == 0.0));

        let mut only_first = zeros.clone();
        let f0 = random_vec(&mut rng, 8, 1.0);
        only_first[..8].copy_from_slice(&f0);
        assert_eq!(m.adjoint_sweep(&traj, &only_first).unwrap(), f0);

        assert!(matches!(
            m.adjoint_sweep(&traj, &zeros[..40]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn adjoint_sweep_matches_finite_differences() {
        // scalar objective  sum_t <c_t, X_t>  has gradient sum_t (dX_t/dX_0)^T c_t
        let (n, steps) = (8, 5);
        let m = model(n);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = random_vec(&mut rng, n, 5.0);
        let c = random_vec(&mut rng, n * (steps + 1), 1.0);
        let objective = |x: &[f64]| -> f64 { dot(m.integrate(x, steps).unwrap().as_slice(), &c) };
        let traj = m.integrate(&x0, steps).unwrap();
        let grad = m.adjoint_sweep(&traj, &c).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let mut p = x0.clone();
                let mut q = x0.clone();
                p[i] += h;
                q[i] -= h;
                (objective(&p) - objective(&q)) / (2.0 * h)
            })
            .collect();
        let err: f64 = fd.iter().zip(&grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-6, "relative error {}", err / norm);
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let base = DynamicsConfig::default();
        let spin = model(40)
            .integrate(&random_vec(&mut ChaCha8Rng::seed_from_u64(9), 40, 1.0), 300)
            .unwrap();
        let x0 = spin.last().to_vec();
        let run = |dt: f64| -> Vec<f64> {
            let m = Lorenz96::new(DynamicsConfig { dt, ..base }).unwrap();
            let steps = (1.0 / dt).round() as usize;
            m.integrate(&x0, steps).unwrap().last().to_vec()
        };
        let reference = run(0.1 / 100.0);
        let dist = |a: &[f64]| -> f64 {
            a.iter().zip(&reference).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        };
        let e1 = dist(&run(0.1));
        let e2 = dist(&run(0.05));
        let order = (e1 / e2).log2();
        assert!(order >= 3.9, "observed order {order}");
    }

    #[test]
    fn small_perturbations_grow() {
        let m = model(40);
        let spin = m
            .integrate(&random_vec(&mut ChaCha8Rng::seed_from_u64(10), 40, 1.0), 500)
            .unwrap();
        let a = spin.last().to_vec();
        let mut b = a.clone();
        b[0] += 1e-6;
        let initial_rms = 1e-6 / 40f64.sqrt();
        let ta = m.integrate(&a, 100).unwrap();
        let tb = m.integrate(&b, 100).unwrap();
        let rms_at = |t: usize| -> f64 {
            (ta.state(t)
                .iter()
                .zip(tb.state(t))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                / 40.0)
                .sqrt()
        };
        // leading exponent is about 1.7 per time unit
        assert!(rms_at(50) > 100.0 * initial_rms, "rms at t=5: {}", rms_at(50));
        assert!(rms_at(100) > 1e-2, "rms at t=10: {}", rms_at(100));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cyclic_equivariance(x in prop::collection::vec(-10.0f64..10.0, 8..24), k in 0usize..24) {
                let m = model(x.len());
                let shifted = rotate(&x, k);
                prop_assert_eq!(tendency(&shifted, 8.0), rotate(&tendency(&x, 8.0), k));
                let (mut a, mut b) = (vec![0.0; x.len()], vec![0.0; x.len()]);
                m.step(&shifted, &mut a);
                m.step(&x, &mut b);
                prop_assert_eq!(a, rotate(&b, k));
            }
        }
    }
}
