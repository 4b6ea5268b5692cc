//! Flow initialization: fit the vector field with the rectified-flow loss so
//! that starting points drawn from a fixed Gaussian mixture are carried onto
//! feasible bundles.
//!
//! The target distribution (a Gaussian bump of width `sigma_z` around each of
//! the `2^m` bundles) is never enumerated. Each training pair instead rounds
//! its own start point to the nearest bundle and jitters it.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{round_bundle, FieldArchitecture, FlowConfig, VectorField};
use crate::nn::Adam;
use crate::rng::{self, Rng};

/// Fixed mixture of isotropic Gaussians over starting points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
}

impl GaussianMixture {
    /// `components` equally weighted components with means drawn from
    /// `U[0,1]^m` and a shared standard deviation.
    pub fn spread(m: usize, components: usize, sigma: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::purpose::MIXTURE);
        let means = (0..components)
            .map(|_| (0..m).map(|_| r.random::<f64>()).collect())
            .collect();
        Self {
            weights: vec![1.0 / components as f64; components],
            means,
            sigmas: vec![sigma; components],
        }
    }

    pub fn m(&self) -> usize {
        self.means.first().map(Vec::len).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if d == 0 {
            return Err(Error::config("stage1.mixture", "needs at least one component"));
        }
        if self.means.len() != d || self.sigmas.len() != d {
            return Err(Error::config(
                "stage1.mixture",
                "weights, means and sigmas must have the same length",
            ));
        }
        let m = self.m();
        if m == 0 || self.means.iter().any(|mu| mu.len() != m) {
            return Err(Error::config("stage1.mixture", "means must share a positive dimension"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::config("stage1.mixture", "weights must be non-negative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("stage1.mixture", format!("weights sum to {total}, not 1")));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("stage1.mixture", "sigmas must be positive"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut d = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                d = i;
                break;
            }
        }
        self.means[d]
            .iter()
            .map(|mu| {
                let z: f64 = StandardNormal.sample(rng);
                mu + self.sigmas[d] * z
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub mixture: GaussianMixture,
    pub sigma_z: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Stage1Config {
    pub const DEFAULT_COMPONENTS: usize = 8;
    pub const DEFAULT_SIGMA: f64 = 0.3;
    pub const DEFAULT_SIGMA_Z: f64 = 0.05;
    pub const DEFAULT_LR: f64 = 5e-3;

    pub fn with_defaults(m: usize, iterations: usize, seed: u64) -> Self {
        Self {
            mixture: GaussianMixture::spread(m, Self::DEFAULT_COMPONENTS, Self::DEFAULT_SIGMA, seed),
            sigma_z: Self::DEFAULT_SIGMA_Z,
            batch_size: 256,
            iterations,
            lr: Self::DEFAULT_LR,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if !(self.sigma_z > 0.0) {
            return Err(Error::config("stage1.sigma_z", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("stage1.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("stage1.lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub s0: Vec<f64>,
    pub target: Vec<f64>,
    pub t: f64,
    pub s_t: Vec<f64>,
}

impl TrainingPair {
    /// Builds the interpolated point `s_t = (t/T) target + (1 - t/T) s0`.
    pub fn interpolate(s0: Vec<f64>, target: Vec<f64>, t: f64, horizon: f64) -> Self {
        let a = t / horizon;
        let s_t = s0
            .iter()
            .zip(&target)
            .map(|(x0, x1)| a * x1 + (1.0 - a) * x0)
            .collect();
        Self { s0, target, t, s_t }
    }

    /// Velocity the field should reproduce along the straight path.
    pub fn velocity(&self, horizon: f64) -> Vec<f64> {
        self.target
            .iter()
            .zip(&self.s0)
            .map(|(a, b)| (a - b) / horizon)
            .collect()
    }
}

pub fn sample_training_pair(cfg: &Stage1Config, horizon: f64, rng: &mut Rng) -> TrainingPair {
    let s0 = cfg.mixture.sample(rng);
    let bundle = round_bundle(&s0).expect("mixture samples are finite");
    let target = bundle
        .to_f64()
        .into_iter()
        .map(|b| {
            let z: f64 = StandardNormal.sample(rng);
            b + cfg.sigma_z * z
        })
        .collect();
    let t = rng.random::<f64>() * horizon;
    TrainingPair::interpolate(s0, target, t, horizon)
}

pub fn sample_batch(cfg: &Stage1Config, horizon: f64, n: usize, rng: &mut Rng) -> Vec<TrainingPair> {
    (0..n).map(|_| sample_training_pair(cfg, horizon, rng)).collect()
}

/// Mean over the batch of `|v - phi(t, s_t)|^2`.
pub fn flow_loss(vf: &VectorField, batch: &[TrainingPair], horizon: f64) -> Result<f64> {
    Ok(flow_loss_terms(vf, batch, horizon, false)?.0)
}

/// Loss and its gradient with respect to the field parameters, laid out as
/// [`VectorField::flat_params`].
pub fn flow_loss_and_grad(vf: &VectorField, batch: &[TrainingPair], horizon: f64) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = flow_loss_terms(vf, batch, horizon, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn flow_loss_terms(
    vf: &VectorField,
    batch: &[TrainingPair],
    horizon: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Domain("flow loss needs a non-empty batch".into()));
    }
    let m = vf.m();
    let n = batch.len();
    let mut starts = Array2::<f64>::zeros((n, m));
    let mut times = Array2::<f64>::zeros((n, 1));
    for (i, p) in batch.iter().enumerate() {
        Error::check_dim("training pair", m, p.s0.len())?;
        starts.row_mut(i).assign(&ndarray::ArrayView1::from(&p.s0[..]));
        times[[i, 0]] = p.t;
    }
    let q_cache = vf.qnet().forward_cached(starts.view())?;
    let eta_cache = vf.etanet().forward_cached(times.view())?;
    let qs = q_cache.output();
    let etas = eta_cache.output();

    let mut loss = 0.0;
    let mut q_up = Array2::<f64>::zeros((n, m * m));
    let mut eta_up = Array2::<f64>::zeros((n, 1));
    let inv_n = 1.0 / n as f64;
    for (i, p) in batch.iter().enumerate() {
        let q = ArrayView2::from_shape((m, m), qs.row(i).to_slice().expect("contiguous")).expect("m*m");
        let eta = etas[[i, 0]];
        let velocity = p.velocity(horizon);
        let qs_t: Vec<f64> = q
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&p.s_t).map(|(a, b)| a * b).sum())
            .collect();
        let mut d_eta = 0.0;
        for r in 0..m {
            let resid = eta * qs_t[r] - velocity[r];
            loss += resid * resid;
            let d_phi = 2.0 * resid * inv_n;
            d_eta += d_phi * qs_t[r];
            for c in 0..m {
                q_up[[i, r * m + c]] = eta * d_phi * p.s_t[c];
            }
        }
        eta_up[[i, 0]] = d_eta;
    }
    loss *= inv_n;
    if !want_grad {
        return Ok((loss, None));
    }
    let (gq, _) = vf.qnet().backward(&q_cache, q_up.view())?;
    let (geta, _) = vf.etanet().backward(&eta_cache, eta_up.view())?;
    Ok((loss, Some(VectorField::flat_gradients(&gq, &geta))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Everything needed to continue Stage-1 training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1State {
    pub field: VectorField,
    pub adam: Adam,
    pub iteration: usize,
    pub log: Vec<LossRecord>,
}

impl Stage1State {
    pub fn init(m: usize, arch: &FieldArchitecture, cfg: &Stage1Config) -> Self {
        let field = VectorField::new(m, arch, &mut rng::stream(cfg.seed, rng::purpose::INIT));
        let adam = Adam::new(cfg.lr, field.param_count());
        Self {
            field,
            adam,
            iteration: 0,
            log: Vec::new(),
        }
    }
}

/// Runs Stage-1 iterations until `until` (capped at `cfg.iterations`).
/// `on_iteration` sees the state after each completed step.
pub fn train_flow_steps(
    state: &mut Stage1State,
    cfg: &Stage1Config,
    flow: &FlowConfig,
    until: usize,
    mut on_iteration: impl FnMut(&Stage1State) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    flow.validate()?;
    Error::check_dim("stage1 mixture", state.field.m(), cfg.mixture.m())?;
    let start = Instant::now();
    let mut params = state.field.flat_params();
    let until = until.min(cfg.iterations);
    while state.iteration < until {
        let it = state.iteration;
        let mut r = rng::iteration(cfg.seed, it);
        let batch = sample_batch(cfg, flow.horizon, cfg.batch_size, &mut r);
        let (loss, grad) = flow_loss_and_grad(&state.field, &batch, flow.horizon)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration: it,
                message: format!("flow loss is {loss}"),
            });
        }
        state.adam.step(&mut params, &grad)?;
        state.field.set_flat_params(&params)?;
        state.iteration += 1;
        state.log.push(LossRecord {
            iteration: it,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        on_iteration(state)?;
    }
    Ok(())
}

pub fn train_flow(
    m: usize,
    arch: &FieldArchitecture,
    cfg: &Stage1Config,
    flow: &FlowConfig,
) -> Result<Stage1State> {
    let mut state = Stage1State::init(m, arch, cfg);
    train_flow_steps(&mut state, cfg, flow, cfg.iterations, |_| Ok(()))?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub probes: usize,
    pub reached: usize,
    pub total: usize,
    pub fraction: f64,
    /// Probe count per bundle, indexed by the bundle's bit pattern.
    pub counts: Vec<u64>,
}

pub const MAX_COVERAGE_ITEMS: usize = 20;

/// Transports `probes` mixture samples and counts the rounded bundles.
pub fn coverage_report(
    vf: &VectorField,
    cfg: &Stage1Config,
    flow: &FlowConfig,
    probes: usize,
    seed: u64,
) -> Result<CoverageReport> {
    let m = vf.m();
    if m > MAX_COVERAGE_ITEMS {
        return Err(Error::TooLarge(format!(
            "coverage enumerates 2^m bundles; m = {m} exceeds {MAX_COVERAGE_ITEMS}. \
             Project onto a subset of items or sample bundles instead"
        )));
    }
    let total = 1usize << m;
    let mut counts = vec![0u64; total];
    let mut r = rng::stream(seed, rng::purpose::PROBE);
    let schedule = vf.schedule(flow);
    const CHUNK: usize = 1024;
    let mut remaining = probes;
    while remaining > 0 {
        let n = remaining.min(CHUNK);
        let mut pts = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            let s0 = cfg.mixture.sample(&mut r);
            pts.row_mut(i).assign(&ndarray::ArrayView1::from(&s0[..]));
        }
        for t in vf.transport_batch(&schedule, pts.view())? {
            counts[round_bundle(&t.final_state)?.index() as usize] += 1;
        }
        remaining -= n;
    }
    let reached = counts.iter().filter(|&&c| c > 0).count();
    Ok(CoverageReport {
        probes,
        reached,
        total,
        fraction: reached as f64 / total as f64,
        counts,
    })
}
