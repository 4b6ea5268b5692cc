//! The structured vector field `phi(t, s) = eta(t) * Q(s0) * s`, its
//! divergence, forward-Euler transport, density transport and rounding.
//!
//! `Q` depends on the starting point only, so along one trajectory the field is
//! linear in the state with a fixed matrix. Its divergence is therefore
//! `eta(t) * tr Q(s0)`, independent of the current state, and the log-density
//! change over `[0, T]` is `-tr Q(s0) * integral(eta)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseNet, Gradients};
use crate::rng::Rng;
use crate::valuations::Bundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Final time `T`.
    pub horizon: f64,
    pub euler_steps: usize,
    /// Number of uniform nodes for the trapezoidal integral of `eta`.
    pub eta_grid: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            euler_steps: 8,
            eta_grid: 33,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("flow.horizon", "must be positive"));
        }
        if self.euler_steps == 0 {
            return Err(Error::config("flow.euler_steps", "must be at least 1"));
        }
        if self.eta_grid < 2 {
            return Err(Error::config("flow.eta_grid", "must be at least 2"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.euler_steps as f64
    }
}

/// Hidden-layer widths of the two networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldArchitecture {
    pub q_hidden: Vec<usize>,
    pub eta_hidden: Vec<usize>,
}

impl FieldArchitecture {
    /// Three 128-wide hidden layers for `Q` (the last widened to 256 when
    /// `m > 100`) and two 128-wide hidden layers for `eta`.
    pub fn standard(m: usize) -> Self {
        let last = if m > 100 { 256 } else { 128 };
        Self {
            q_hidden: vec![128, 128, last],
            eta_hidden: vec![128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    m: usize,
    qnet: DenseNet,
    etanet: DenseNet,
}

/// Forward-Euler output. `trajectory` holds `euler_steps + 1` states
/// including the start when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub final_state: Vec<f64>,
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// Quantities of a frozen field that do not depend on the start point:
/// `eta` at the Euler left endpoints and the integral of `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSchedule {
    pub dt: f64,
    pub eta_steps: Vec<f64>,
    pub eta_integral: f64,
}

/// Per-point transport result used by menu evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transported {
    pub final_state: Vec<f64>,
    pub trace: f64,
}

impl VectorField {
    pub fn new(m: usize, arch: &FieldArchitecture, rng: &mut Rng) -> Self {
        let q_dims: Vec<usize> = std::iter::once(m)
            .chain(arch.q_hidden.iter().copied())
            .chain(std::iter::once(m * m))
            .collect();
        let eta_dims: Vec<usize> = std::iter::once(1)
            .chain(arch.eta_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        Self {
            m,
            qnet: DenseNet::new(&q_dims, rng),
            etanet: DenseNet::new(&eta_dims, rng),
        }
    }

    pub fn from_nets(qnet: DenseNet, etanet: DenseNet) -> Result<Self> {
        let m = qnet.input_dim();
        Error::check_dim("Q network output", m * m, qnet.output_dim())?;
        Error::check_dim("eta network input", 1, etanet.input_dim())?;
        Error::check_dim("eta network output", 1, etanet.output_dim())?;
        Ok(Self { m, qnet, etanet })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn qnet(&self) -> &DenseNet {
        &self.qnet
    }

    pub fn etanet(&self) -> &DenseNet {
        &self.etanet
    }

    pub fn param_count(&self) -> usize {
        self.qnet.param_count() + self.etanet.param_count()
    }

    /// `Q` parameters followed by `eta` parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.qnet.flat_params();
        p.extend(self.etanet.flat_params());
        p
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        Error::check_dim("vector field parameters", self.param_count(), params.len())?;
        let nq = self.qnet.param_count();
        self.qnet.set_flat_params(&params[..nq])?;
        self.etanet.set_flat_params(&params[nq..])
    }

    pub fn flat_gradients(q: &Gradients, eta: &Gradients) -> Vec<f64> {
        let mut g = q.flat();
        g.extend(eta.flat());
        g
    }

    pub fn q_matrix(&self, s0: &[f64]) -> Result<Array2<f64>> {
        Error::check_dim("q_matrix start point", self.m, s0.len())?;
        let flat = self.qnet.forward(s0)?;
        Ok(Array2::from_shape_vec((self.m, self.m), flat).expect("m*m outputs"))
    }

    /// `Q(s0)` for every row of `points`, row-major per matrix.
    pub fn q_matrices(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Error::check_dim("q_matrices start points", self.m, points.ncols())?;
        self.qnet.forward_batch(points)
    }

    pub fn eta(&self, t: f64) -> f64 {
        self.etanet.forward(&[t]).expect("eta takes one input")[0]
    }

    pub fn eta_many(&self, ts: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((ts.len(), 1), ts).expect("column view");
        self.etanet
            .forward_batch(view)
            .expect("eta takes one input")
            .into_raw_vec_and_offset()
            .0
    }

    pub fn vector_field(&self, t: f64, s_t: &[f64], s0: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("vector_field state", self.m, s_t.len())?;
        let q = self.q_matrix(s0)?;
        let eta = self.eta(t);
        Ok(mat_vec(&q, s_t).into_iter().map(|x| eta * x).collect())
    }

    pub fn divergence(&self, t: f64, s0: &[f64]) -> Result<f64> {
        let q = self.q_matrix(s0)?;
        Ok(self.eta(t) * q.diag().sum())
    }

    /// Trapezoidal integral of `eta` over `cfg.eta_grid` uniform nodes on `[0, T]`.
    pub fn eta_integral(&self, cfg: &FlowConfig) -> f64 {
        self.eta_integral_between(0.0, cfg.horizon, cfg.eta_grid)
    }

    pub fn eta_integral_between(&self, t0: f64, t1: f64, nodes: usize) -> f64 {
        assert!(nodes >= 2, "trapezoid needs two nodes");
        let h = (t1 - t0) / (nodes - 1) as f64;
        let ts: Vec<f64> = (0..nodes).map(|i| t0 + h * i as f64).collect();
        let etas = self.eta_many(&ts);
        let interior: f64 = etas[1..nodes - 1].iter().sum();
        h * (0.5 * (etas[0] + etas[nodes - 1]) + interior)
    }

    pub fn schedule(&self, cfg: &FlowConfig) -> FieldSchedule {
        let dt = cfg.dt();
        let ts: Vec<f64> = (0..cfg.euler_steps).map(|k| k as f64 * dt).collect();
        FieldSchedule {
            dt,
            eta_steps: self.eta_many(&ts),
            eta_integral: self.eta_integral(cfg),
        }
    }

    pub fn ode_solve(&self, cfg: &FlowConfig, s0: &[f64], keep_trajectory: bool) -> Result<OdeSolution> {
        let q = self.q_matrix(s0)?;
        let schedule = self.schedule(cfg);
        euler_with_q(&q, &schedule, s0, keep_trajectory)
    }

    pub fn log_density_transport(&self, cfg: &FlowConfig, log_alpha0: f64, s0: &[f64]) -> Result<f64> {
        let q = self.q_matrix(s0)?;
        Ok(log_alpha0 - q.diag().sum() * self.eta_integral(cfg))
    }

    /// Transports every row of `points` with one batched `Q` evaluation.
    pub fn transport_batch(
        &self,
        schedule: &FieldSchedule,
        points: ArrayView2<'_, f64>,
    ) -> Result<Vec<Transported>> {
        let qs = self.q_matrices(points)?;
        let m = self.m;
        points
            .rows()
            .into_iter()
            .zip(qs.rows())
            .map(|(s0, qrow)| {
                let q = ArrayView2::from_shape((m, m), qrow.as_slice().expect("contiguous row"))
                    .expect("m*m row");
                let s0 = s0.to_vec();
                let sol = euler_with_q(&q.to_owned(), schedule, &s0, false)?;
                Ok(Transported {
                    final_state: sol.final_state,
                    trace: q.diag().sum(),
                })
            })
            .collect()
    }
}

pub(crate) fn mat_vec(q: &Array2<f64>, s: &[f64]) -> Vec<f64> {
    q.rows()
        .into_iter()
        .map(|row| row.iter().zip(s).map(|(a, b)| a * b).sum())
        .collect()
}

/// Forward Euler with a pinned matrix:
/// `s <- s + dt * eta(t_k) * Q s` for each left endpoint `t_k`.
pub fn euler_with_q(
    q: &Array2<f64>,
    schedule: &FieldSchedule,
    s0: &[f64],
    keep_trajectory: bool,
) -> Result<OdeSolution> {
    Error::check_dim("euler start point", q.ncols(), s0.len())?;
    let mut s = s0.to_vec();
    let mut trajectory = keep_trajectory.then(|| vec![s.clone()]);
    for (k, &eta) in schedule.eta_steps.iter().enumerate() {
        let qs = mat_vec(q, &s);
        let scale = schedule.dt * eta;
        for (si, qi) in s.iter_mut().zip(qs) {
            *si += scale * qi;
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite state after Euler step {}",
                k + 1
            )));
        }
        if let Some(traj) = trajectory.as_mut() {
            traj.push(s.clone());
        }
    }
    Ok(OdeSolution {
        final_state: s,
        trajectory,
    })
}

/// Reverse pass through [`euler_with_q`]: given `upstream = dL/ds_T`, returns
/// `dL/ds0` along the explicit path and `dL/dQ` accumulated over the steps.
/// `trajectory` must hold every state including the start.
pub fn euler_vjp(
    q: &Array2<f64>,
    schedule: &FieldSchedule,
    trajectory: &[Vec<f64>],
    upstream: &[f64],
) -> (Vec<f64>, Array2<f64>) {
    let m = q.ncols();
    let mut adj = upstream.to_vec();
    let mut grad_q = Array2::<f64>::zeros((m, m));
    for k in (0..schedule.eta_steps.len()).rev() {
        let scale = schedule.dt * schedule.eta_steps[k];
        let s_k = &trajectory[k];
        for i in 0..m {
            for j in 0..m {
                grad_q[[i, j]] += scale * adj[i] * s_k[j];
            }
        }
        let qt_adj: Vec<f64> = (0..m)
            .map(|j| (0..m).map(|i| q[[i, j]] * adj[i]).sum())
            .collect();
        for (a, b) in adj.iter_mut().zip(qt_adj) {
            *a += scale * b;
        }
    }
    (adj, grad_q)
}

/// Entry-wise indicator `s_i >= 0.5`.
pub fn round_bundle(s: &[f64]) -> Result<Bundle> {
    let mut b = Bundle::empty(s.len());
    for (i, &x) in s.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("entry {i} is {x}, cannot round")));
        }
        if x >= 0.5 {
            b.set(i, true);
        }
    }
    Ok(b)
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::nn::Dense;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn zero_qnet_gives_zero_matrix() {
        let vf = VectorField::from_nets(DenseNet::zeros(&[2, 3, 4]), DenseNet::zeros(&[1, 1])).unwrap();
        assert_eq!(vf.q_matrix(&[0.3, 0.9]).unwrap(), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn linear_qnet_reshapes_row_major() {
        // Q(s0) = reshape(W s0); with s0 = e_1 this is the first column of W.
        let w = array![[1.0, 5.0], [2.0, 6.0], [3.0, 7.0], [4.0, 8.0]];
        let qnet = DenseNet::from_layers(vec![Dense {
            weights: w,
            bias: Array1::zeros(4),
        }])
        .unwrap();
        let vf = VectorField::from_nets(qnet, DenseNet::zeros(&[1, 1])).unwrap();
        let q = vf.q_matrix(&[1.0, 0.0]).unwrap();
        assert_eq!(q, array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(q.diag().sum(), 1.0 + 4.0);
        assert!(vf.q_matrix(&[1.0]).is_err());
    }

    #[test]
    fn vector_field_and_divergence_hand_values() {
        let vf = constant_field(array![[1.0, 0.0], [0.0, 3.0]], 2.0, 0.0);
        assert_eq!(vf.vector_field(0.3, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![2.0, 6.0]);
        assert_eq!(vf.vector_field(0.3, &[0.0, 0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(vf.divergence(0.7, &[0.2, 0.1]).unwrap(), 8.0);

        let zero_eta = constant_field(array![[1.0, 4.0], [2.0, 3.0]], 0.0, 0.0);
        assert_eq!(zero_eta.vector_field(0.5, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);

        let traceless = constant_field(array![[1.0, 4.0], [2.0, -1.0]], 1.5, 0.3);
        for t in [0.0, 0.25, 1.0] {
            assert_eq!(traceless.divergence(t, &[0.0, 1.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn divergence_matches_finite_difference_jacobian_trace() {
        for seed in 0..10 {
            let vf = small_random_field(3, seed);
            let mut r = crate::rng::stream(seed, 9);
            let s0: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
            let st: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..2.0)).collect();
            let t = r.random_range(0.0..1.0);
            let h = 1e-5;
            let mut fd = 0.0;
            for i in 0..3 {
                let mut up = st.clone();
                up[i] += h;
                let mut down = st.clone();
                down[i] -= h;
                let fu = vf.vector_field(t, &up, &s0).unwrap()[i];
                let fdn = vf.vector_field(t, &down, &s0).unwrap()[i];
                fd += (fu - fdn) / (2.0 * h);
            }
            let div = vf.divergence(t, &s0).unwrap();
            assert!((div - fd).abs() < 1e-6, "seed {seed}: {div} vs {fd}");
        }
    }

    #[test]
    fn eta_integral_exact_cases() {
        let c = constant_field(Array2::eye(2), 1.7, 0.0);
        let cfg = FlowConfig {
            horizon: 2.0,
            ..FlowConfig::default()
        };
        assert!((c.eta_integral(&cfg) - 3.4).abs() < 1e-14);

        let linear = constant_field(Array2::eye(2), 0.0, 1.0);
        let cfg = FlowConfig {
            eta_grid: 2,
            ..FlowConfig::default()
        };
        assert_eq!(linear.eta_integral(&cfg), 0.5);
    }

    #[test]
    fn eta_integral_refinement_shrinks_quadratically() {
        let vf = small_random_field(2, 3);
        let coarse = vf.eta_integral_between(0.0, 1.0, 9);
        let fine = vf.eta_integral_between(0.0, 1.0, 17);
        let finer = vf.eta_integral_between(0.0, 1.0, 33);
        let e1 = (coarse - fine).abs();
        let e2 = (fine - finer).abs();
        // Halving h divides the trapezoid error by about four.
        assert!(e2 < e1 / 3.0 || e1 < 1e-14, "{e1} {e2}");
    }

    #[test]
    fn ode_zero_field_is_identity() {
        let vf = VectorField::from_nets(DenseNet::zeros(&[3, 4, 9]), DenseNet::zeros(&[1, 2, 1])).unwrap();
        let s0 = [0.2, 0.8, -0.3];
        let sol = vf.ode_solve(&FlowConfig::default(), &s0, true).unwrap();
        assert_eq!(sol.final_state, s0.to_vec());
        assert_eq!(sol.trajectory.unwrap().len(), FlowConfig::default().euler_steps + 1);
    }

    #[test]
    fn ode_identity_field_matches_compound_growth() {
        let vf = constant_field(Array2::eye(2), 1.0, 0.0);
        for n in [1, 4, 8, 100] {
            let cfg = FlowConfig {
                euler_steps: n,
                ..FlowConfig::default()
            };
            let sol = vf.ode_solve(&cfg, &[1.0, 0.5], false).unwrap();
            let g = (1.0 + 1.0 / n as f64).powi(n as i32);
            assert!((sol.final_state[0] - g).abs() < 1e-12);
            assert!((sol.final_state[1] - 0.5 * g).abs() < 1e-12);
        }
    }

    #[test]
    fn ode_overflow_names_step() {
        let vf = constant_field(Array2::eye(1) * 1e300, 1e300, 0.0);
        let err = vf.ode_solve(&FlowConfig::default(), &[1.0], false).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref msg) if msg.contains("step 1")), "{err}");
    }

    #[test]
    fn log_density_hand_values() {
        // trace 2, integral of eta = 1.
        let vf = constant_field(Array2::eye(2), 1.0, 0.0);
        let got = vf.log_density_transport(&FlowConfig::default(), 0.0, &[0.1, 0.2]).unwrap();
        assert!((got + 2.0).abs() < 1e-14);

        let traceless = constant_field(array![[2.0, 1.0], [0.0, -2.0]], 0.4, 1.1);
        let got = traceless
            .log_density_transport(&FlowConfig::default(), -1.25, &[0.1, 0.2])
            .unwrap();
        assert_eq!(got, -1.25);
    }

    #[test]
    fn round_bundle_cases() {
        assert_eq!(round_bundle(&[0.7, 0.49]).unwrap().bits(), vec![1, 0]);
        assert_eq!(round_bundle(&[0.5, 0.5]).unwrap().bits(), vec![1, 1]);
        assert_eq!(round_bundle(&[1.0, 0.0, 1.0]).unwrap().bits(), vec![1, 0, 1]);
        assert!(round_bundle(&[f64::NAN]).is_err());
    }

    #[test]
    fn transport_batch_matches_single_solves() {
        let vf = small_random_field(3, 12);
        let cfg = FlowConfig::default();
        let pts = array![[0.1, 0.5, 0.9], [0.7, 0.2, 0.4]];
        let batch = vf.transport_batch(&vf.schedule(&cfg), pts.view()).unwrap();
        for (row, tr) in pts.rows().into_iter().zip(&batch) {
            let single = vf.ode_solve(&cfg, row.as_slice().unwrap(), false).unwrap();
            for (a, b) in single.final_state.iter().zip(&tr.final_state) {
                assert!((a - b).abs() < 1e-14);
            }
            let q = vf.q_matrix(row.as_slice().unwrap()).unwrap();
            assert!((q.diag().sum() - tr.trace).abs() < 1e-14);
        }
    }

    #[test]
    fn euler_vjp_matches_finite_differences() {
        let vf = small_random_field(3, 4);
        let cfg = FlowConfig::default();
        let sched = vf.schedule(&cfg);
        let q = vf.q_matrix(&[0.2, 0.6, 0.9]).unwrap();
        let s0 = vec![0.3, -0.2, 0.8];
        let w = [0.5, -1.0, 2.0];
        let f = |q: &Array2<f64>, s: &[f64]| -> f64 {
            let sol = euler_with_q(q, &sched, s, false).unwrap();
            sol.final_state.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let traj = euler_with_q(&q, &sched, &s0, true).unwrap().trajectory.unwrap();
        let (gs, gq) = euler_vjp(&q, &sched, &traj, &w);
        let h = 1e-6;
        for i in 0..3 {
            let mut up = s0.clone();
            up[i] += h;
            let mut dn = s0.clone();
            dn[i] -= h;
            let fd = (f(&q, &up) - f(&q, &dn)) / (2.0 * h);
            assert!((fd - gs[i]).abs() < 1e-7);
            for j in 0..3 {
                let mut qu = q.clone();
                qu[[i, j]] += h;
                let mut qd = q.clone();
                qd[[i, j]] -= h;
                let fd = (f(&qu, &s0) - f(&qd, &s0)) / (2.0 * h);
                assert!((fd - gq[[i, j]]).abs() < 1e-7);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn divergence_ignores_state(seed in 0u64..500, t in 0.0f64..1.0) {
            let vf = small_random_field(3, seed);
            let s0 = [0.3, 0.1, 0.8];
            let d = vf.divergence(t, &s0).unwrap();
            // Numerical divergence at two different states agrees with the closed form.
            for st in [[0.0, 0.0, 0.0], [2.0, -1.0, 0.5]] {
                let h = 1e-5;
                let mut fd = 0.0;
                for i in 0..3 {
                    let mut up = st;
                    up[i] += h;
                    let mut dn = st;
                    dn[i] -= h;
                    fd += (vf.vector_field(t, &up, &s0).unwrap()[i]
                        - vf.vector_field(t, &dn, &s0).unwrap()[i]) / (2.0 * h);
                }
                prop_assert!((fd - d).abs() < 1e-6);
            }
        }

        #[test]
        fn log_density_is_additive_in_time(seed in 0u64..500) {
            let vf = small_random_field(2, seed);
            let s0 = [0.4, 0.7];
            let tr = vf.q_matrix(&s0).unwrap().diag().sum();
            let whole = -tr * vf.eta_integral_between(0.0, 1.0, 33);
            let halves = -tr * vf.eta_integral_between(0.0, 0.5, 17)
                - tr * vf.eta_integral_between(0.5, 1.0, 17);
            prop_assert!((whole - halves).abs() < 1e-10);
        }

        #[test]
        fn pinned_euler_is_positively_homogeneous(seed in 0u64..500, c in 0.01f64..10.0) {
            let vf = small_random_field(3, seed);
            let sched = vf.schedule(&FlowConfig::default());
            let s0 = [0.2, 0.9, 0.4];
            let q = vf.q_matrix(&s0).unwrap();
            let base = euler_with_q(&q, &sched, &s0, true).unwrap().trajectory.unwrap();
            let scaled_start: Vec<f64> = s0.iter().map(|x| c * x).collect();
            let scaled = euler_with_q(&q, &sched, &scaled_start, true).unwrap().trajectory.unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((c * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }

        #[test]
        fn rounding_is_idempotent(xs in prop::collection::vec(-1.0f64..2.0, 1..12)) {
            let once = round_bundle(&xs).unwrap();
            let twice = round_bundle(&once.to_f64()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
