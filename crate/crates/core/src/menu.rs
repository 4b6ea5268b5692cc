//! Stage two: menus of Dirac-mixture elements pushed through a frozen flow.
//!
//! Each trainable element holds a price and `D` Dirac points with softmax
//! weights. Transporting the points through the flow and rounding gives the
//! element's finite bundle support, so its expected value for any XOR
//! valuation is an exact finite sum. Training maximizes the soft-selected
//! revenue; deployment selects by hard argmax over exact utilities.
//!
//! Gradients reach the Dirac means only through the density factor
//! `exp(-tr Q(mu) * integral(eta))`. The rounding indicator is piecewise
//! constant and contributes nothing unless the straight-through option is on.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{euler_vjp, euler_with_q, round_bundle, FieldSchedule, FlowConfig, VectorField};
use crate::nn::Adam;
use crate::rng;
use crate::valuations::{Bundle, XorValuation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweightMode {
    /// Weights `w_d exp(-tr Q(mu_d) I)` renormalized to sum to one.
    #[default]
    Normalized,
    /// Raw weights `w_d exp(-tr Q(mu_d) I)`.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiracMixture {
    pub logits: Vec<f64>,
    pub means: Vec<Vec<f64>>,
}

impl DiracMixture {
    pub fn support_size(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MenuElement {
    pub price: f64,
    pub mixture: DiracMixture,
}

impl MenuElement {
    /// Zero price, empty allocation.
    pub fn null() -> Self {
        Self {
            price: 0.0,
            mixture: DiracMixture {
                logits: Vec::new(),
                means: Vec::new(),
            },
        }
    }

    pub fn is_null(&self) -> bool {
        self.mixture.logits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Menu {
    pub m: usize,
    pub elements: Vec<MenuElement>,
    pub null_index: usize,
}

impl Menu {
    /// A null element at index 0 followed by `k - 1` random elements with
    /// means in `U[0,1]^m`, zero logits and prices in `U[0, 0.1 v_max]`.
    pub fn init(m: usize, k: usize, d: usize, v_max: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::config("menu.k", "menu needs the null element and at least one more"));
        }
        if d == 0 {
            return Err(Error::config("menu.d", "support size must be at least 1"));
        }
        let mut r = rng::stream(seed, rng::purpose::INIT);
        let mut elements = vec![MenuElement::null()];
        for _ in 1..k {
            let means = (0..d)
                .map(|_| (0..m).map(|_| r.random::<f64>()).collect())
                .collect();
            elements.push(MenuElement {
                price: r.random::<f64>() * 0.1 * v_max,
                mixture: DiracMixture {
                    logits: vec![0.0; d],
                    means,
                },
            });
        }
        Ok(Self {
            m,
            elements,
            null_index: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn prices(&self) -> Vec<f64> {
        self.elements.iter().map(|e| e.price).collect()
    }

    fn trainable(&self) -> impl Iterator<Item = (usize, &MenuElement)> {
        self.elements
            .iter()
            .enumerate()
            .filter(move |(k, _)| *k != self.null_index)
    }

    fn validate(&self) -> Result<()> {
        if self.null_index >= self.elements.len() || !self.elements[self.null_index].is_null() {
            return Err(Error::Domain("menu lacks a null element at null_index".into()));
        }
        if self.elements[self.null_index].price != 0.0 {
            return Err(Error::Domain("null element must have price 0".into()));
        }
        for (k, e) in self.trainable() {
            if e.is_null() {
                return Err(Error::Domain(format!("element {k} has an empty support")));
            }
            if e.mixture.means.len() != e.mixture.logits.len() {
                return Err(Error::Domain(format!("element {k} has mismatched logits and means")));
            }
            for mu in &e.mixture.means {
                Error::check_dim("dirac mean", self.m, mu.len())?;
            }
        }
        Ok(())
    }

    /// `[prices, logits, means]` over trainable elements in index order.
    pub fn flat_params(&self) -> MenuParams {
        let mut p = MenuParams::default();
        for (_, e) in self.trainable() {
            p.prices.push(e.price);
            p.logits.extend(&e.mixture.logits);
            for mu in &e.mixture.means {
                p.means.extend(mu);
            }
        }
        p
    }

    pub fn set_flat_params(&mut self, p: &MenuParams) -> Result<()> {
        let expected = self.flat_params();
        Error::check_dim("menu prices", expected.prices.len(), p.prices.len())?;
        Error::check_dim("menu logits", expected.logits.len(), p.logits.len())?;
        Error::check_dim("menu means", expected.means.len(), p.means.len())?;
        let m = self.m;
        let null = self.null_index;
        let (mut pi, mut li, mut mi) = (0, 0, 0);
        for (k, e) in self.elements.iter_mut().enumerate() {
            if k == null {
                continue;
            }
            e.price = p.prices[pi];
            pi += 1;
            for l in e.mixture.logits.iter_mut() {
                *l = p.logits[li];
                li += 1;
            }
            for mu in e.mixture.means.iter_mut() {
                mu.copy_from_slice(&p.means[mi..mi + m]);
                mi += m;
            }
        }
        Ok(())
    }
}

/// Trainable menu parameters split by group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MenuParams {
    pub prices: Vec<f64>,
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
}

impl MenuParams {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.prices.clone();
        v.extend(&self.logits);
        v.extend(&self.means);
        v
    }

    pub fn split_like(&self, flat: &[f64]) -> Self {
        let (a, b) = (self.prices.len(), self.logits.len());
        Self {
            prices: flat[..a].to_vec(),
            logits: flat[a..a + b].to_vec(),
            means: flat[a + b..].to_vec(),
        }
    }
}

/// Numerically stable `softmax(lambda * x)`.
pub fn softmax(x: &[f64], lambda: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let max = x.iter().map(|v| lambda * v).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (lambda * v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Transported Dirac points of one element: rounded bundle and `tr Q` per point.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementPoints {
    pub bundles: Vec<Bundle>,
    pub traces: Vec<f64>,
}

/// Effective per-point weights from logits and traces.
pub fn effective_weights(
    logits: &[f64],
    traces: &[f64],
    eta_integral: f64,
    mode: ReweightMode,
) -> Result<Vec<f64>> {
    for (d, &tr) in traces.iter().enumerate() {
        if !(tr * eta_integral).is_finite() {
            return Err(Error::Numeric(format!(
                "density factor for Dirac point {d} is not finite (trace {tr}, eta integral {eta_integral})"
            )));
        }
    }
    match mode {
        ReweightMode::Normalized => {
            let shifted: Vec<f64> = logits
                .iter()
                .zip(traces)
                .map(|(l, tr)| l - tr * eta_integral)
                .collect();
            Ok(softmax(&shifted, 1.0))
        }
        ReweightMode::PaperLiteral => {
            let w = softmax(logits, 1.0);
            w.iter()
                .zip(traces)
                .enumerate()
                .map(|(d, (w, tr))| {
                    let raw = w * (-tr * eta_integral).exp();
                    if raw.is_finite() {
                        Ok(raw)
                    } else {
                        Err(Error::Numeric(format!("weight of Dirac point {d} overflowed")))
                    }
                })
                .collect()
        }
    }
}

/// Transports every Dirac point of every element in one batch.
pub fn transport_menu(menu: &Menu, vf: &VectorField, schedule: &FieldSchedule) -> Result<Vec<ElementPoints>> {
    menu.validate()?;
    Error::check_dim("menu item count", vf.m(), menu.m)?;
    let rows: Vec<&Vec<f64>> = menu
        .elements
        .iter()
        .flat_map(|e| e.mixture.means.iter())
        .collect();
    let m = menu.m;
    let mut pts = Array2::<f64>::zeros((rows.len(), m));
    for (i, mu) in rows.iter().enumerate() {
        pts.row_mut(i).assign(&ndarray::ArrayView1::from(&mu[..]));
    }
    let transported = if rows.is_empty() {
        Vec::new()
    } else {
        vf.transport_batch(schedule, pts.view())?
    };
    let mut it = transported.into_iter();
    menu.elements
        .iter()
        .map(|e| {
            let d = e.mixture.support_size();
            let mut bundles = Vec::with_capacity(d);
            let mut traces = Vec::with_capacity(d);
            for t in it.by_ref().take(d) {
                bundles.push(round_bundle(&t.final_state)?);
                traces.push(t.trace);
            }
            Ok(ElementPoints { bundles, traces })
        })
        .collect()
}

fn merge_support(bundles: &[Bundle], weights: &[f64]) -> Vec<(Bundle, f64)> {
    let mut merged: BTreeMap<&Bundle, f64> = BTreeMap::new();
    for (b, w) in bundles.iter().zip(weights) {
        *merged.entry(b).or_insert(0.0) += w;
    }
    merged.into_iter().map(|(b, w)| (b.clone(), w)).collect()
}

/// The element's bundle distribution, duplicate bundles merged. Empty for the
/// null element.
pub fn element_support(
    elem: &MenuElement,
    vf: &VectorField,
    cfg: &FlowConfig,
    mode: ReweightMode,
) -> Result<Vec<(Bundle, f64)>> {
    if elem.is_null() {
        return Ok(Vec::new());
    }
    let m = vf.m();
    let d = elem.mixture.support_size();
    let flat: Vec<f64> = elem.mixture.means.iter().flatten().copied().collect();
    Error::check_dim("dirac means", d * m, flat.len())?;
    let pts = ArrayView2::from_shape((d, m), &flat).expect("d x m");
    let schedule = vf.schedule(cfg);
    let transported = vf.transport_batch(&schedule, pts)?;
    let bundles = transported
        .iter()
        .map(|t| round_bundle(&t.final_state))
        .collect::<Result<Vec<_>>>()?;
    let traces: Vec<f64> = transported.iter().map(|t| t.trace).collect();
    let weights = effective_weights(&elem.mixture.logits, &traces, schedule.eta_integral, mode)?;
    Ok(merge_support(&bundles, &weights))
}

/// Weighted value over the element's support. A true expectation in
/// normalized mode.
pub fn element_value(
    elem: &MenuElement,
    v: &XorValuation,
    vf: &VectorField,
    cfg: &FlowConfig,
    mode: ReweightMode,
) -> Result<f64> {
    let support = element_support(elem, vf, cfg, mode)?;
    let mut total = 0.0;
    for (b, w) in &support {
        total += w * v.evaluate(b)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityVector {
    pub values: Vec<f64>,
    pub utilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub soft: Vec<f64>,
    pub hard: usize,
    pub payment: f64,
}

pub fn soft_select(utilities: &[f64], lambda: f64) -> Vec<f64> {
    softmax(utilities, lambda)
}

/// Index of the largest utility, lowest index on ties.
pub fn hard_select(utilities: &[f64]) -> usize {
    let mut best = 0;
    for (k, &u) in utilities.iter().enumerate().skip(1) {
        if u > utilities[best] {
            best = k;
        }
    }
    best
}

pub fn select(utilities: &UtilityVector, prices: &[f64], lambda: f64) -> SelectionResult {
    let hard = hard_select(&utilities.utilities);
    SelectionResult {
        soft: soft_select(&utilities.utilities, lambda),
        hard,
        payment: prices[hard],
    }
}

/// A menu with its supports resolved against a frozen field. Pure: evaluating
/// a bid never changes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledMenu {
    pub m: usize,
    pub prices: Vec<f64>,
    pub supports: Vec<Vec<(Bundle, f64)>>,
    pub null_index: usize,
}

impl CompiledMenu {
    pub fn compile(menu: &Menu, vf: &VectorField, cfg: &FlowConfig, mode: ReweightMode) -> Result<Self> {
        let schedule = vf.schedule(cfg);
        let points = transport_menu(menu, vf, &schedule)?;
        let supports = menu
            .elements
            .iter()
            .zip(&points)
            .map(|(e, p)| {
                if e.is_null() {
                    return Ok(Vec::new());
                }
                let w = effective_weights(&e.mixture.logits, &p.traces, schedule.eta_integral, mode)?;
                Ok(merge_support(&p.bundles, &w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            m: menu.m,
            prices: menu.prices(),
            supports,
            null_index: menu.null_index,
        })
    }

    pub fn utilities(&self, v: &XorValuation) -> Result<UtilityVector> {
        Error::check_dim("valuation items", self.m, v.m())?;
        let values: Vec<f64> = self
            .supports
            .iter()
            .map(|s| s.iter().map(|(b, w)| w * v.value(b)).sum())
            .collect();
        let utilities = values
            .iter()
            .zip(&self.prices)
            .enumerate()
            .map(|(k, (val, p))| if k == self.null_index { 0.0 } else { val - p })
            .collect();
        Ok(UtilityVector { values, utilities })
    }

    pub fn payment(&self, bid: &XorValuation) -> Result<(usize, f64)> {
        let u = self.utilities(bid)?;
        let k = hard_select(&u.utilities);
        Ok((k, self.prices[k]))
    }
}

pub fn utilities(
    menu: &Menu,
    v: &XorValuation,
    vf: &VectorField,
    cfg: &FlowConfig,
    mode: ReweightMode,
) -> Result<UtilityVector> {
    CompiledMenu::compile(menu, vf, cfg, mode)?.utilities(v)
}

pub fn menu_payment(
    menu: &Menu,
    bid: &XorValuation,
    vf: &VectorField,
    cfg: &FlowConfig,
    mode: ReweightMode,
) -> Result<(usize, f64)> {
    CompiledMenu::compile(menu, vf, cfg, mode)?.payment(bid)
}

/// Gradient of the revenue loss with respect to the trainable parameters and
/// the per-point traces (before chaining into the means).
#[derive(Debug, Clone, PartialEq)]
pub struct RevenueGrad {
    pub prices: Vec<f64>,
    pub logits: Vec<f64>,
    /// `dL/d tr Q(mu)` per trainable point, element-major.
    pub traces: Vec<f64>,
    /// `dL/d value` per (trainable point, valuation-averaged), used by the
    /// straight-through path: `sum_v dL/du_k(v) * w_kd * grad v(b_kd)`.
    pub bundle_upstream: Option<Vec<Vec<f64>>>,
}

/// Revenue loss `-(1/|V|) sum_v sum_k z_k(v) beta_k` for fixed transported
/// points, with the analytic gradient when requested.
pub fn revenue_loss_given_points(
    menu: &Menu,
    points: &[ElementPoints],
    batch: &[&XorValuation],
    lambda: f64,
    eta_integral: f64,
    mode: ReweightMode,
    want_grad: bool,
    straight_through: bool,
) -> Result<(f64, Option<RevenueGrad>)> {
    if batch.is_empty() {
        return Err(Error::Domain("revenue loss needs a non-empty batch".into()));
    }
    let k_total = menu.len();
    let prices = menu.prices();
    let weights: Vec<Vec<f64>> = menu
        .elements
        .iter()
        .zip(points)
        .map(|(e, p)| {
            if e.is_null() {
                Ok(Vec::new())
            } else {
                effective_weights(&e.mixture.logits, &p.traces, eta_integral, mode)
            }
        })
        .collect::<Result<_>>()?;

    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut g_price = vec![0.0; k_total];
    let mut g_weight: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut g_bundle: Vec<Vec<Vec<f64>>> = if straight_through {
        weights
            .iter()
            .map(|w| vec![vec![0.0; menu.m]; w.len()])
            .collect()
    } else {
        Vec::new()
    };
    let mut point_values: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut utils = vec![0.0; k_total];

    for v in batch {
        Error::check_dim("valuation items", menu.m, v.m())?;
        for k in 0..k_total {
            if k == menu.null_index {
                utils[k] = 0.0;
                continue;
            }
            let mut value = 0.0;
            for (d, b) in points[k].bundles.iter().enumerate() {
                let pv = v.value(b);
                point_values[k][d] = pv;
                value += weights[k][d] * pv;
            }
            utils[k] = value - prices[k];
        }
        let z = softmax(&utils, lambda);
        let mean_price: f64 = z.iter().zip(&prices).map(|(a, b)| a * b).sum();
        loss -= mean_price * inv_b;
        if !want_grad {
            continue;
        }
        for k in 0..k_total {
            if k == menu.null_index {
                continue;
            }
            let g_u = -lambda * z[k] * (prices[k] - mean_price);
            g_price[k] += (-z[k] - g_u) * inv_b;
            for d in 0..weights[k].len() {
                g_weight[k][d] += g_u * point_values[k][d] * inv_b;
            }
            if straight_through && g_u != 0.0 {
                for (d, b) in points[k].bundles.iter().enumerate() {
                    let scale = g_u * weights[k][d] * inv_b;
                    let mut probe = b.clone();
                    for i in 0..menu.m {
                        probe.set(i, true);
                        let hi = v.value(&probe);
                        probe.set(i, false);
                        let lo = v.value(&probe);
                        probe.set(i, b.get(i));
                        g_bundle[k][d][i] += scale * (hi - lo);
                    }
                }
            }
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = RevenueGrad {
        prices: Vec::new(),
        logits: Vec::new(),
        traces: Vec::new(),
        bundle_upstream: straight_through.then(Vec::new),
    };
    for (k, e) in menu.elements.iter().enumerate() {
        if k == menu.null_index {
            continue;
        }
        grad.prices.push(g_price[k]);
        let w = &weights[k];
        let g = &g_weight[k];
        match mode {
            ReweightMode::Normalized => {
                // w = softmax(a), a_d = logit_d - I tr_d
                let dot: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
                for d in 0..w.len() {
                    let g_a = w[d] * (g[d] - dot);
                    grad.logits.push(g_a);
                    grad.traces.push(-eta_integral * g_a);
                }
            }
            ReweightMode::PaperLiteral => {
                let base = e.mixture.weights();
                let factors: Vec<f64> = points[k]
                    .traces
                    .iter()
                    .map(|tr| (-tr * eta_integral).exp())
                    .collect();
                let g_base: Vec<f64> = g.iter().zip(&factors).map(|(a, b)| a * b).collect();
                let dot: f64 = base.iter().zip(&g_base).map(|(a, b)| a * b).sum();
                for d in 0..w.len() {
                    grad.logits.push(base[d] * (g_base[d] - dot));
                    grad.traces.push(-eta_integral * g[d] * w[d]);
                }
            }
        }
        if let Some(up) = grad.bundle_upstream.as_mut() {
            up.extend(g_bundle[k].iter().cloned());
        }
    }
    Ok((loss, Some(grad)))
}

/// Revenue loss for the current means (bundles re-derived by transport).
pub fn revenue_loss(
    menu: &Menu,
    batch: &[&XorValuation],
    vf: &VectorField,
    cfg: &FlowConfig,
    lambda: f64,
    mode: ReweightMode,
) -> Result<f64> {
    let schedule = vf.schedule(cfg);
    let points = transport_menu(menu, vf, &schedule)?;
    Ok(revenue_loss_given_points(menu, &points, batch, lambda, schedule.eta_integral, mode, false, false)?.0)
}

/// Revenue loss and gradient with respect to `[prices, logits, means]`,
/// treating the rounded bundles as fixed at the current means. The returned
/// points are the bundles the loss was evaluated with.
pub fn revenue_loss_and_grad(
    menu: &Menu,
    batch: &[&XorValuation],
    vf: &VectorField,
    schedule: &FieldSchedule,
    lambda: f64,
    mode: ReweightMode,
    straight_through: bool,
) -> Result<(f64, MenuParams, Vec<ElementPoints>)> {
    let points = transport_menu(menu, vf, schedule)?;
    let (loss, grad) = revenue_loss_given_points(
        menu,
        &points,
        batch,
        lambda,
        schedule.eta_integral,
        mode,
        true,
        straight_through,
    )?;
    let grad = grad.expect("gradient requested");
    let means_grad = chain_means(menu, vf, schedule, &grad)?;
    Ok((
        loss,
        MenuParams {
            prices: grad.prices,
            logits: grad.logits,
            means: means_grad,
        },
        points,
    ))
}

/// Loss with bundles pinned to `points`; traces are recomputed from the given
/// means. Used to check gradients with the rounding held fixed.
pub fn revenue_loss_pinned(
    menu: &Menu,
    points: &[ElementPoints],
    batch: &[&XorValuation],
    vf: &VectorField,
    eta_integral: f64,
    lambda: f64,
    mode: ReweightMode,
) -> Result<f64> {
    let mut pinned = points.to_vec();
    for (e, p) in menu.elements.iter().zip(pinned.iter_mut()) {
        for (d, mu) in e.mixture.means.iter().enumerate() {
            p.traces[d] = vf.q_matrix(mu)?.diag().sum();
        }
    }
    Ok(revenue_loss_given_points(menu, &pinned, batch, lambda, eta_integral, mode, false, false)?.0)
}

fn chain_means(menu: &Menu, vf: &VectorField, schedule: &FieldSchedule, grad: &RevenueGrad) -> Result<Vec<f64>> {
    let m = menu.m;
    let means: Vec<&Vec<f64>> = menu
        .trainable()
        .flat_map(|(_, e)| e.mixture.means.iter())
        .collect();
    let n = means.len();
    let mut pts = Array2::<f64>::zeros((n, m));
    for (i, mu) in means.iter().enumerate() {
        pts.row_mut(i).assign(&ndarray::ArrayView1::from(&mu[..]));
    }
    let cache = vf.qnet().forward_cached(pts.view())?;
    let mut upstream = Array2::<f64>::zeros((n, m * m));
    let mut direct = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            upstream[[i, j * m + j]] = grad.traces[i];
        }
    }
    if let Some(bundle_up) = &grad.bundle_upstream {
        let qs = cache.output();
        for i in 0..n {
            if bundle_up[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let q = Array2::from_shape_vec((m, m), qs.row(i).to_vec()).expect("m*m");
            let traj = euler_with_q(&q, schedule, means[i], true)?
                .trajectory
                .expect("trajectory requested");
            let (g_s0, g_q) = euler_vjp(&q, schedule, &traj, &bundle_up[i]);
            for (a, b) in upstream.row_mut(i).iter_mut().zip(g_q.iter()) {
                *a += b;
            }
            direct[i * m..(i + 1) * m].copy_from_slice(&g_s0);
        }
    }
    let (_, input_grad) = vf.qnet().backward(&cache, upstream.view())?;
    Ok(input_grad
        .iter()
        .zip(&direct)
        .map(|(a, b)| a + b)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub start: f64,
    pub end: f64,
}

impl LambdaSchedule {
    pub fn constant(lambda: f64) -> Self {
        Self {
            start: lambda,
            end: lambda,
        }
    }

    /// Linear in the iteration index, reaching `end` on the last iteration.
    pub fn at(&self, iteration: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.start;
        }
        let frac = (iteration as f64 / (total - 1) as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            start: 0.001,
            end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MenuTrainConfig {
    /// Menu size including the null element.
    pub k: usize,
    pub d: usize,
    pub lr: f64,
    /// Learning rate for the Dirac means; `lr` when absent.
    pub means_lr: Option<f64>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lambda: LambdaSchedule,
    pub mode: ReweightMode,
    pub straight_through: bool,
    /// Evaluate test revenue every this many iterations (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for MenuTrainConfig {
    fn default() -> Self {
        Self {
            k: 64,
            d: 8,
            lr: 0.3,
            means_lr: None,
            iterations: 2000,
            batch_size: 256,
            lambda: LambdaSchedule::default(),
            mode: ReweightMode::Normalized,
            straight_through: false,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl MenuTrainConfig {
    /// Menu size used at full scale: 5000 for `m <= 100`, 20000 beyond.
    pub fn paper_k(m: usize) -> usize {
        if m <= 100 {
            5000
        } else {
            20000
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("menu.k", "needs at least 2 elements including null"));
        }
        if self.d == 0 {
            return Err(Error::config("menu.d", "must be at least 1"));
        }
        if !(self.lr > 0.0) || self.means_lr.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::config("menu.lr", "learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("menu.batch_size", "must be at least 1"));
        }
        if self.lambda.start < 0.0 || self.lambda.end < 0.0 {
            return Err(Error::config("menu.lambda", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MenuLogRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub loss: f64,
    pub test_revenue: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MenuState {
    pub menu: Menu,
    pub adam_prices: Adam,
    pub adam_logits: Adam,
    pub adam_means: Adam,
    pub iteration: usize,
    pub log: Vec<MenuLogRecord>,
}

impl MenuState {
    pub fn init(m: usize, v_max: f64, cfg: &MenuTrainConfig) -> Result<Self> {
        let menu = Menu::init(m, cfg.k, cfg.d, v_max, cfg.seed)?;
        let p = menu.flat_params();
        Ok(Self {
            adam_prices: Adam::new(cfg.lr, p.prices.len()),
            adam_logits: Adam::new(cfg.lr, p.logits.len()),
            adam_means: Adam::new(cfg.means_lr.unwrap_or(cfg.lr), p.means.len()),
            menu,
            iteration: 0,
            log: Vec::new(),
        })
    }
}

pub fn mean_revenue(menu: &CompiledMenu, set: &[XorValuation]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for v in set {
        total += menu.payment(v)?.1;
    }
    Ok(total / set.len() as f64)
}

/// Runs Stage-2 iterations up to `until` (capped at `cfg.iterations`). The
/// field is borrowed immutably and never updated.
pub fn train_menu_steps(
    state: &mut MenuState,
    cfg: &MenuTrainConfig,
    vf: &VectorField,
    flow: &FlowConfig,
    train: &[XorValuation],
    test: &[XorValuation],
    until: usize,
    mut on_iteration: impl FnMut(&MenuState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    flow.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("menu training needs training valuations".into()));
    }
    let schedule = vf.schedule(flow);
    let start = Instant::now();
    let until = until.min(cfg.iterations);
    while state.iteration < until {
        let it = state.iteration;
        let lambda = cfg.lambda.at(it, cfg.iterations);
        let mut r = rng::iteration(cfg.seed, it);
        let batch: Vec<&XorValuation> = if cfg.batch_size >= train.len() {
            train.iter().collect()
        } else {
            index::sample(&mut r, train.len(), cfg.batch_size)
                .into_iter()
                .map(|i| &train[i])
                .collect()
        };
        let (loss, grad, _) =
            revenue_loss_and_grad(&state.menu, &batch, vf, &schedule, lambda, cfg.mode, cfg.straight_through)?;
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !loss.is_finite() || !finite(&grad.prices) || !finite(&grad.logits) || !finite(&grad.means) {
            return Err(Error::Training {
                iteration: it,
                message: format!("revenue loss is {loss}"),
            });
        }
        let mut p = state.menu.flat_params();
        state.adam_prices.step(&mut p.prices, &grad.prices)?;
        state.adam_logits.step(&mut p.logits, &grad.logits)?;
        state.adam_means.step(&mut p.means, &grad.means)?;
        state.menu.set_flat_params(&p)?;
        state.iteration += 1;

        let evaluate = cfg.eval_every > 0 && (state.iteration % cfg.eval_every == 0 || state.iteration == cfg.iterations);
        let test_revenue = if evaluate && !test.is_empty() {
            Some(mean_revenue(&CompiledMenu::compile(&state.menu, vf, flow, cfg.mode)?, test)?)
        } else {
            None
        };
        state.log.push(MenuLogRecord {
            iteration: it,
            lambda,
            loss,
            test_revenue,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        on_iteration(state)?;
    }
    Ok(())
}

pub fn train_menu(
    m: usize,
    v_max: f64,
    cfg: &MenuTrainConfig,
    vf: &VectorField,
    flow: &FlowConfig,
    train: &[XorValuation],
    test: &[XorValuation],
) -> Result<MenuState> {
    let mut state = MenuState::init(m, v_max, cfg)?;
    train_menu_steps(&mut state, cfg, vf, flow, train, test, cfg.iterations, |_| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::testing::{constant_field, small_random_field};
    use crate::nn::{finite_diff_check, GradCheckOptions};
    use ndarray::array;

    fn identity_field(m: usize) -> VectorField {
        constant_field(Array2::zeros((m, m)), 0.0, 0.0)
    }

    fn element(price: f64, logits: Vec<f64>, means: Vec<Vec<f64>>) -> MenuElement {
        MenuElement {
            price,
            mixture: DiracMixture { logits, means },
        }
    }

    #[test]
    fn single_point_support_has_unit_weight() {
        let vf = small_random_field(3, 1);
        let e = element(1.0, vec![0.3], vec![vec![0.2, 0.7, 0.9]]);
        let s = element_support(&e, &vf, &FlowConfig::default(), ReweightMode::Normalized).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn traceless_field_keeps_mixture_weights() {
        let vf = constant_field(array![[0.0, 1.0], [-1.0, 0.0]], 0.1, 0.0);
        let e = element(0.0, vec![0.0, 0.0], vec![vec![0.9, 0.1], vec![0.1, 0.9]]);
        let s = element_support(&e, &vf, &FlowConfig::default(), ReweightMode::Normalized).unwrap();
        assert_eq!(s.len(), 2);
        for (_, w) in &s {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_q_weights_hand_computed() {
        // Q = I, eta = 1, T = 1: both points get raw weight 0.5 e^{-2}.
        let vf = constant_field(Array2::eye(2), 1.0, 0.0);
        let e = element(0.0, vec![0.0, 0.0], vec![vec![0.9, 0.0], vec![0.0, 0.9]]);
        let cfg = FlowConfig::default();
        let raw = element_support(&e, &vf, &cfg, ReweightMode::PaperLiteral).unwrap();
        assert_eq!(raw.len(), 2);
        for (_, w) in &raw {
            assert!((w - 0.5 * (-2.0f64).exp()).abs() < 1e-15);
        }
        let norm = element_support(&e, &vf, &cfg, ReweightMode::Normalized).unwrap();
        for (_, w) in &norm {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_bundles_are_merged() {
        let vf = identity_field(2);
        let e = element(0.0, vec![0.0, 0.0, 0.0], vec![vec![0.9, 0.0], vec![0.8, 0.1], vec![0.0, 0.9]]);
        let s = element_support(&e, &vf, &FlowConfig::default(), ReweightMode::Normalized).unwrap();
        assert_eq!(s.len(), 2);
        let total: f64 = s.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn element_value_hand_expectation() {
        let vf = identity_field(3);
        let v = XorValuation::from_item_lists(3, &[(&[1], 4.0), (&[2], 2.0)]).unwrap();
        let e = element(0.0, vec![0.0, 0.0], vec![vec![0.0, 0.9, 0.0], vec![0.0, 0.0, 0.9]]);
        let val = element_value(&e, &v, &vf, &FlowConfig::default(), ReweightMode::Normalized).unwrap();
        assert!((val - 3.0).abs() < 1e-15);
        let null = element_value(&MenuElement::null(), &v, &vf, &FlowConfig::default(), ReweightMode::Normalized).unwrap();
        assert_eq!(null, 0.0);
    }

    fn two_element_menu() -> Menu {
        Menu {
            m: 2,
            elements: vec![
                MenuElement::null(),
                element(5.0, vec![0.0], vec![vec![0.9, 0.9]]),
            ],
            null_index: 0,
        }
    }

    #[test]
    fn utilities_subtract_prices() {
        let vf = identity_field(2);
        let cfg = FlowConfig::default();
        let v = XorValuation::from_item_lists(2, &[(&[0, 1], 7.0)]).unwrap();
        let mut menu = two_element_menu();
        let u = utilities(&menu, &v, &vf, &cfg, ReweightMode::Normalized).unwrap();
        assert_eq!(u.utilities, vec![0.0, 2.0]);
        menu.elements[1].price = 3.0;
        let u = utilities(&menu, &v, &vf, &cfg, ReweightMode::Normalized).unwrap();
        assert_eq!(u.utilities, vec![0.0, 4.0]);
        menu.elements[1].price = 0.0;
        let u = utilities(&menu, &v, &vf, &cfg, ReweightMode::Normalized).unwrap();
        assert_eq!(u.utilities[1], u.values[1]);
    }

    #[test]
    fn payment_cases() {
        let vf = identity_field(2);
        let cfg = FlowConfig::default();
        let menu = two_element_menu();
        let v = XorValuation::from_item_lists(2, &[(&[0, 1], 7.0)]).unwrap();
        assert_eq!(menu_payment(&menu, &v, &vf, &cfg, ReweightMode::Normalized).unwrap(), (1, 5.0));
        assert_eq!(menu_payment(&menu, &v, &vf, &cfg, ReweightMode::Normalized).unwrap(), (1, 5.0));
        let zero = XorValuation::from_item_lists(2, &[(&[0], 0.0)]).unwrap();
        assert_eq!(menu_payment(&menu, &zero, &vf, &cfg, ReweightMode::Normalized).unwrap(), (0, 0.0));
    }

    #[test]
    fn soft_select_cases() {
        assert_eq!(soft_select(&[1.0, 5.0, -2.0], 0.0), vec![1.0 / 3.0; 3]);
        let z = soft_select(&[0.0, 1.0], 1.0);
        let e = std::f64::consts::E;
        assert!((z[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((z[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((z[0] - 0.2689).abs() < 1e-4);
        let z = soft_select(&[0.0, 1.0], 1e4);
        assert!(z[1] > 1.0 - 1e-12);
        let shifted = soft_select(&[3.0, 4.0], 1.0);
        assert!((shifted[0] - z_of(&[0.0, 1.0])[0]).abs() < 1e-15);
    }

    fn z_of(u: &[f64]) -> Vec<f64> {
        soft_select(u, 1.0)
    }

    #[test]
    fn hard_select_cases() {
        assert_eq!(hard_select(&[0.0, -1.0, -0.5]), 0);
        assert_eq!(hard_select(&[0.0, 2.0, 2.0]), 1);
        assert_eq!(hard_select(&[10.0, 12.0, 12.0]), 1);
        let u = UtilityVector {
            values: vec![0.0, 1.0, 3.0],
            utilities: vec![0.0, -1.0, -2.0],
        };
        let sel = select(&u, &[0.0, 2.0, 5.0], 1.0);
        assert_eq!((sel.hard, sel.payment), (0, 0.0));
        assert!((sel.soft.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn revenue_loss_limits() {
        let vf = identity_field(2);
        let cfg = FlowConfig::default();
        let menu = two_element_menu();
        let v = XorValuation::from_item_lists(2, &[(&[0, 1], 7.0)]).unwrap();
        let loss = revenue_loss(&menu, &[&v], &vf, &cfg, 0.0, ReweightMode::Normalized).unwrap();
        assert!((loss + 2.5).abs() < 1e-15);
        let loss = revenue_loss(&menu, &[&v], &vf, &cfg, 1e3, ReweightMode::Normalized).unwrap();
        assert!((loss + 5.0).abs() < 1e-9);
    }

    fn random_menu(m: usize, k: usize, d: usize, seed: u64) -> Menu {
        let mut menu = Menu::init(m, k, d, 10.0, seed).unwrap();
        let mut r = rng::stream(seed, 42);
        for e in menu.elements.iter_mut().skip(1) {
            for l in e.mixture.logits.iter_mut() {
                *l = r.random_range(-1.0..1.0);
            }
        }
        menu
    }

    fn gradient_check(mode: ReweightMode, seed: u64) {
        let m = 3;
        let vf = small_random_field(m, seed);
        let flow = FlowConfig::default();
        let schedule = vf.schedule(&flow);
        let menu = random_menu(m, 3, 2, seed);
        let spec = crate::valuations::SyntheticSpec::new(
            crate::valuations::AuctionConfig::new(m, 10.0).unwrap(),
            crate::valuations::PriceDistribution::Uniform,
            3,
        );
        let ds = crate::valuations::generate_synthetic(&spec, 6, seed).unwrap();
        let batch: Vec<&XorValuation> = ds.samples.iter().collect();
        let lambda = 0.7;
        let (_, grad, points) =
            revenue_loss_and_grad(&menu, &batch, &vf, &schedule, lambda, mode, false).unwrap();
        let base = menu.flat_params();
        let mut probe = menu.clone();
        let report = finite_diff_check(
            |flat| {
                probe.set_flat_params(&base.split_like(flat)).unwrap();
                revenue_loss_pinned(&probe, &points, &batch, &vf, schedule.eta_integral, lambda, mode).unwrap()
            },
            &base.concat(),
            &grad.concat(),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{mode:?} seed {seed}: {report:?}");
    }

    #[test]
    fn revenue_gradient_matches_finite_differences() {
        for seed in 0..5 {
            gradient_check(ReweightMode::Normalized, seed);
            gradient_check(ReweightMode::PaperLiteral, seed);
        }
    }

    #[test]
    fn zero_iterations_and_frozen_field() {
        let vf = small_random_field(3, 2);
        let before = vf.clone();
        let flow = FlowConfig::default();
        let spec = crate::valuations::SyntheticSpec::new(
            crate::valuations::AuctionConfig::new(3, 10.0).unwrap(),
            crate::valuations::PriceDistribution::Uniform,
            3,
        );
        let ds = crate::valuations::generate_synthetic(&spec, 40, 1).unwrap();
        let mut cfg = MenuTrainConfig {
            k: 4,
            d: 2,
            iterations: 0,
            batch_size: 16,
            eval_every: 5,
            ..MenuTrainConfig::default()
        };
        let init = MenuState::init(3, 10.0, &cfg).unwrap();
        let trained = train_menu(3, 10.0, &cfg, &vf, &flow, &ds.samples, &ds.samples).unwrap();
        assert_eq!(init, trained);

        cfg.iterations = 20;
        let a = train_menu(3, 10.0, &cfg, &vf, &flow, &ds.samples, &ds.samples).unwrap();
        let b = train_menu(3, 10.0, &cfg, &vf, &flow, &ds.samples, &ds.samples).unwrap();
        assert_eq!(vf, before);
        assert_eq!(a.menu, b.menu);
        assert_eq!(a.menu.elements[0], MenuElement::null());
        assert_eq!(a.log.iter().filter(|r| r.test_revenue.is_some()).count(), 4);
    }

    #[test]
    fn straight_through_gradient_is_finite_and_moves_means() {
        let vf = small_random_field(3, 5);
        let schedule = vf.schedule(&FlowConfig::default());
        let menu = random_menu(3, 4, 2, 5);
        let v = XorValuation::from_item_lists(3, &[(&[0, 1], 6.0), (&[2], 3.0)]).unwrap();
        let (_, plain, _) =
            revenue_loss_and_grad(&menu, &[&v], &vf, &schedule, 1.0, ReweightMode::Normalized, false).unwrap();
        let (_, st, _) =
            revenue_loss_and_grad(&menu, &[&v], &vf, &schedule, 1.0, ReweightMode::Normalized, true).unwrap();
        assert_eq!(plain.prices, st.prices);
        assert!(st.means.iter().all(|g| g.is_finite()));
        assert_ne!(plain.means, st.means);
    }

    #[test]
    fn lambda_schedule_is_linear() {
        let s = LambdaSchedule::default();
        assert_eq!(s.at(0, 11), 0.001);
        assert!((s.at(10, 11) - 0.2).abs() < 1e-15);
        assert!((s.at(5, 11) - 0.1005).abs() < 1e-15);
        assert_eq!(LambdaSchedule::constant(2.0).at(3, 10), 2.0);
    }
}
