//! Comparison mechanisms: posted grand-bundle price, fixed-allocation menus
//! with learned prices, and a product-distribution menu trained with binary
//! Gumbel-SoftMax samples.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::menu::{softmax, LambdaSchedule, MenuLogRecord};
use crate::nn::Adam;
use crate::rng::{self, Rng};
use crate::valuations::{AuctionConfig, Bundle, XorValuation};

/// Largest `m` for which product expectations are computed by enumeration.
pub const MAX_EXACT_ITEMS: usize = 20;

/// Tolerance for calling a product menu binary.
pub const BINARY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandBundleResult {
    pub price: f64,
    /// Mean payment on the training set.
    pub train_revenue: f64,
    pub test_revenue: f64,
}

fn posted_revenue(values: &[f64], price: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let sales = values.iter().filter(|&&v| v >= price).count();
    price * sales as f64 / values.len() as f64
}

/// Best posted price for the grand bundle over the grid of observed training
/// values. Buyers with value equal to the price buy. Ties between candidate
/// prices go to the lower price.
pub fn grand_bundle_search(train: &[XorValuation], test: &[XorValuation]) -> Result<GrandBundleResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Domain("grand bundle search needs non-empty train and test sets".into()));
    }
    let mut values: Vec<f64> = train.iter().map(|v| v.grand_value()).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut best = (0.0, 0.0);
    let mut i = 0;
    while i < n {
        let price = values[i];
        // values are sorted, so everyone from i on buys
        let revenue = price * (n - i) as f64 / n as f64;
        if revenue > best.1 {
            best = (price, revenue);
        }
        while i < n && values[i] == price {
            i += 1;
        }
    }
    let test_values: Vec<f64> = test.iter().map(|v| v.grand_value()).collect();
    Ok(GrandBundleResult {
        price: best.0,
        train_revenue: best.1,
        test_revenue: posted_revenue(&test_values, best.0),
    })
}

/// A menu of frozen deterministic allocations with trainable prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedAllocationMenu {
    pub m: usize,
    pub allocations: Vec<Bundle>,
    pub prices: Vec<f64>,
    /// Index of the zero-price empty allocation, if any.
    pub null_index: Option<usize>,
}

impl FixedAllocationMenu {
    /// Null element at index 0 followed by `bundles` priced at `prices`.
    pub fn with_null(m: usize, bundles: Vec<Bundle>, prices: Vec<f64>) -> Result<Self> {
        Error::check_dim("fixed menu prices", bundles.len(), prices.len())?;
        for b in &bundles {
            Error::check_dim("fixed menu bundle", m, b.len())?;
        }
        let mut allocations = vec![Bundle::empty(m)];
        allocations.extend(bundles);
        let mut all_prices = vec![0.0];
        all_prices.extend(prices);
        Ok(Self {
            m,
            allocations,
            prices: all_prices,
            null_index: Some(0),
        })
    }

    /// A menu with no opt-out element. Only useful as a negative control.
    pub fn without_null(m: usize, allocations: Vec<Bundle>, prices: Vec<f64>) -> Result<Self> {
        Error::check_dim("fixed menu prices", allocations.len(), prices.len())?;
        Ok(Self {
            m,
            allocations,
            prices,
            null_index: None,
        })
    }

    pub fn grand(m: usize, price: f64) -> Self {
        Self::with_null(m, vec![Bundle::grand(m)], vec![price]).expect("consistent dims")
    }

    pub fn len(&self) -> usize {
        self.allocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }

    pub fn values(&self, v: &XorValuation) -> Result<Vec<f64>> {
        Error::check_dim("valuation items", self.m, v.m())?;
        Ok(self.allocations.iter().map(|b| v.value(b)).collect())
    }

    pub fn utilities(&self, v: &XorValuation) -> Result<Vec<f64>> {
        Ok(self
            .values(v)?
            .into_iter()
            .zip(&self.prices)
            .enumerate()
            .map(|(k, (val, p))| if Some(k) == self.null_index { 0.0 } else { val - p })
            .collect())
    }

    fn trainable(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| Some(k) != self.null_index).collect()
    }
}

/// Outcome of a fixed-allocation builder; `requested` differs from the
/// number of allocations when the request exceeded the bundle space.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltMenu {
    pub menu: FixedAllocationMenu,
    pub requested: usize,
    pub truncated: bool,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// `count` distinct bundles of exactly `size` items.
fn sample_size_class(m: usize, size: usize, count: usize, rng: &mut Rng) -> Vec<Bundle> {
    let total = binomial(m, size);
    if total <= (count as u128).saturating_mul(4).saturating_add(64) {
        let all = combinations(m, size);
        if count >= all.len() {
            return all.iter().map(|c| Bundle::from_items(m, c).expect("in range")).collect();
        }
        let mut picks = index::sample(rng, all.len(), count).into_vec();
        picks.sort_unstable();
        return picks
            .into_iter()
            .map(|i| Bundle::from_items(m, &all[i]).expect("in range"))
            .collect();
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let items = index::sample(rng, m, size).into_vec();
        let b = Bundle::from_items(m, &items).expect("in range");
        if seen.insert(b.clone()) {
            out.push(b);
        }
    }
    out
}

fn build_by_size(config: &AuctionConfig, k: usize, seed: u64, sizes: Vec<usize>) -> Result<BuiltMenu> {
    if k == 0 {
        return Err(Error::config("baseline.k", "must be at least 1"));
    }
    let m = config.m;
    // The null element is the empty bundle, so K non-empty bundles plus null
    // must fit in the 2^m bundle space.
    let space = if m >= 127 { u128::MAX } else { (1u128 << m) - 1 };
    let target = (k as u128).min(space) as usize;
    let mut rng = rng::stream(seed, rng::purpose::BASELINE);
    let mut bundles = vec![Bundle::grand(m)];
    for size in sizes {
        if bundles.len() >= target {
            break;
        }
        let need = target - bundles.len();
        bundles.extend(sample_size_class(m, size, need, &mut rng));
    }
    bundles.truncate(target);
    let prices = vec![0.0; bundles.len()];
    Ok(BuiltMenu {
        menu: FixedAllocationMenu::with_null(m, bundles, prices)?,
        requested: k,
        truncated: target < k,
    })
}

/// Grand bundle, then bundles of size `m-1`, `m-2`, ... until `k` allocations
/// exist; the last size class is sampled at random.
pub fn build_big_bundle_menu(config: &AuctionConfig, k: usize, seed: u64) -> Result<BuiltMenu> {
    build_by_size(config, k, seed, (1..config.m).rev().collect())
}

/// Grand bundle, then bundles of size 1, 2, ... until `k` allocations exist.
pub fn build_small_bundle_menu(config: &AuctionConfig, k: usize, seed: u64) -> Result<BuiltMenu> {
    build_by_size(config, k, seed, (1..config.m).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTrainConfig {
    pub lr: f64,
    pub lambda: LambdaSchedule,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PriceTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.3,
            lambda: LambdaSchedule::constant(2.0),
            iterations: 2000,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Soft-selection revenue loss and its gradient with respect to every price
/// (zero at the null element).
pub fn soft_revenue_grad(values: &[Vec<f64>], prices: &[f64], null_index: Option<usize>, lambda: f64) -> (f64, Vec<f64>) {
    let k_total = prices.len();
    let inv_b = 1.0 / values.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; k_total];
    let mut utils = vec![0.0; k_total];
    for row in values {
        for k in 0..k_total {
            utils[k] = if Some(k) == null_index { 0.0 } else { row[k] - prices[k] };
        }
        let z = softmax(&utils, lambda);
        let mean: f64 = z.iter().zip(prices).map(|(a, b)| a * b).sum();
        loss -= mean * inv_b;
        for k in 0..k_total {
            if Some(k) == null_index {
                continue;
            }
            let g_u = -lambda * z[k] * (prices[k] - mean);
            grad[k] += (-z[k] - g_u) * inv_b;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPriceState {
    pub menu: FixedAllocationMenu,
    pub adam: Adam,
    pub iteration: usize,
    pub log: Vec<MenuLogRecord>,
}

/// Trains prices by Adam on the soft revenue loss with exact values. The
/// allocations are never touched.
pub fn train_fixed_prices(
    menu: FixedAllocationMenu,
    train: &[XorValuation],
    cfg: &PriceTrainConfig,
) -> Result<FixedPriceState> {
    if train.is_empty() {
        return Err(Error::Domain("price training needs training valuations".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config("baseline.lr", "must be positive"));
    }
    let values: Vec<Vec<f64>> = train.iter().map(|v| menu.values(v)).collect::<Result<_>>()?;
    let trainable = menu.trainable();
    let mut state = FixedPriceState {
        adam: Adam::new(cfg.lr, trainable.len()),
        menu,
        iteration: 0,
        log: Vec::new(),
    };
    let start = Instant::now();
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let lambda = cfg.lambda.at(it, cfg.iterations);
        let batch: Vec<Vec<f64>> = if cfg.batch_size == 0 || cfg.batch_size >= values.len() {
            values.clone()
        } else {
            let mut r = rng::iteration(cfg.seed, it);
            index::sample(&mut r, values.len(), cfg.batch_size)
                .into_iter()
                .map(|i| values[i].clone())
                .collect()
        };
        let (loss, grad) = soft_revenue_grad(&batch, &state.menu.prices, state.menu.null_index, lambda);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration: it,
                message: format!("price loss is {loss}"),
            });
        }
        let mut p: Vec<f64> = trainable.iter().map(|&k| state.menu.prices[k]).collect();
        let g: Vec<f64> = trainable.iter().map(|&k| grad[k]).collect();
        state.adam.step(&mut p, &g)?;
        for (&k, v) in trainable.iter().zip(p) {
            state.menu.prices[k] = v;
        }
        state.iteration += 1;
        state.log.push(MenuLogRecord {
            iteration: it,
            lambda,
            loss,
            test_revenue: None,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(state)
}

fn check_probs(v: &XorValuation, probs: &[f64]) -> Result<()> {
    Error::check_dim("item probabilities", v.m(), probs.len())?;
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Domain("item probabilities must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Expected XOR value of a product-distribution allocation, by enumerating
/// all `2^m` bundles.
pub fn product_expected_value(v: &XorValuation, probs: &[f64]) -> Result<f64> {
    check_probs(v, probs)?;
    let m = v.m();
    if m > MAX_EXACT_ITEMS {
        return Err(Error::TooLarge(format!(
            "exact product expectation enumerates 2^{m} bundles; use the sampling estimator"
        )));
    }
    let mut total = 0.0;
    for idx in 0..(1u64 << m) {
        let b = Bundle::from_index(m, idx);
        let mut p = 1.0;
        for (i, &q) in probs.iter().enumerate() {
            p *= if b.get(i) { q } else { 1.0 - q };
        }
        if p > 0.0 {
            total += p * v.value(&b);
        }
    }
    Ok(total)
}

/// Largest atom count handled by [`product_expected_value_atoms`].
pub const MAX_ATOM_SUBSETS: usize = 16;

/// Same expectation as [`product_expected_value`], computed with the max-min
/// identity over atom subsets: cost `2^atoms` instead of `2^m`.
pub fn product_expected_value_atoms(v: &XorValuation, probs: &[f64]) -> Result<f64> {
    check_probs(v, probs)?;
    let atoms = v.atoms();
    let n = atoms.len();
    if n > MAX_ATOM_SUBSETS {
        return Err(Error::TooLarge(format!("{n} atoms exceed the subset expansion limit")));
    }
    let mut union = vec![Bundle::empty(v.m()); 1 << n];
    let mut min_price = vec![f64::INFINITY; 1 << n];
    let mut total = 0.0;
    for mask in 1usize..(1 << n) {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        let mut u = union[rest].clone();
        for i in atoms[low].bundle.items() {
            u.set(i, true);
        }
        min_price[mask] = min_price[rest].min(atoms[low].price);
        let p: f64 = u.items().map(|i| probs[i]).product();
        let sign = if mask.count_ones() % 2 == 1 { 1.0 } else { -1.0 };
        total += sign * min_price[mask] * p;
        union[mask] = u;
    }
    Ok(total.max(0.0))
}

/// Exact product expectation by the cheaper of the two exact methods.
pub fn product_value(v: &XorValuation, probs: &[f64]) -> Result<f64> {
    if v.atom_count() <= MAX_ATOM_SUBSETS && (v.atom_count() < v.m() || v.m() > MAX_EXACT_ITEMS) {
        product_expected_value_atoms(v, probs)
    } else {
        product_expected_value(v, probs)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// One straight-through Gumbel-SoftMax draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    pub bundle: Bundle,
    /// Relaxed inclusion `y_i = sigmoid((l_i + g1 - g0) / tau)`.
    pub relaxed: Vec<f64>,
    /// XOR value of the hard bundle.
    pub value: f64,
    /// Surrogate gradient of the value with respect to the item logits.
    pub grad_logits: Vec<f64>,
}

/// Binary two-logit Gumbel-SoftMax per item with logits `(l_i, 0)`. The hard
/// bundle is used forward; backward uses the relaxed sample with the
/// item-wise marginal value `v(S + i) - v(S - i)` as the value slope.
pub fn gumbel_sample_value(v: &XorValuation, item_logits: &[f64], tau: f64, rng: &mut Rng) -> Result<GumbelSample> {
    Error::check_dim("item logits", v.m(), item_logits.len())?;
    if !(tau > 0.0) {
        return Err(Error::config("baseline.tau", "temperature must be positive"));
    }
    let m = v.m();
    let mut bundle = Bundle::empty(m);
    let mut relaxed = Vec::with_capacity(m);
    for (i, &l) in item_logits.iter().enumerate() {
        let logit = l + gumbel(rng) - gumbel(rng);
        relaxed.push(sigmoid(logit / tau));
        bundle.set(i, logit >= 0.0);
    }
    let value = v.value(&bundle);
    let mut grad_logits = Vec::with_capacity(m);
    let mut probe = bundle.clone();
    for i in 0..m {
        probe.set(i, true);
        let hi = v.value(&probe);
        probe.set(i, false);
        let lo = v.value(&probe);
        probe.set(i, bundle.get(i));
        let y = relaxed[i];
        grad_logits.push((hi - lo) * y * (1.0 - y) / tau);
    }
    Ok(GumbelSample {
        bundle,
        relaxed,
        value,
        grad_logits,
    })
}

/// Menu whose allocations are product distributions over items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductMenu {
    pub m: usize,
    /// Per element item logits; empty for the null element at index 0.
    pub item_logits: Vec<Vec<f64>>,
    pub prices: Vec<f64>,
    pub tau: f64,
}

impl ProductMenu {
    pub fn init(m: usize, k: usize, v_max: f64, tau: f64, seed: u64) -> Result<Self> {
        if k < 1 {
            return Err(Error::config("baseline.k", "must be at least 1"));
        }
        let mut r = rng::stream(seed, rng::purpose::INIT);
        let mut item_logits = vec![Vec::new()];
        let mut prices = vec![0.0];
        for _ in 1..k {
            item_logits.push((0..m).map(|_| r.random_range(-1.0..1.0)).collect());
            prices.push(r.random::<f64>() * 0.1 * v_max);
        }
        Ok(Self {
            m,
            item_logits,
            prices,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn probabilities(&self, k: usize) -> Vec<f64> {
        self.item_logits[k].iter().map(|&l| sigmoid(l)).collect()
    }

    /// True when every item probability is within `BINARY_TOLERANCE` of 0 or 1.
    pub fn is_binary(&self) -> bool {
        (1..self.len()).all(|k| {
            self.probabilities(k)
                .iter()
                .all(|&p| p <= BINARY_TOLERANCE || p >= 1.0 - BINARY_TOLERANCE)
        })
    }

    /// Largest distance of any item probability from {0, 1}.
    pub fn max_binary_gap(&self) -> f64 {
        (1..self.len())
            .flat_map(|k| self.probabilities(k))
            .map(|p| p.min(1.0 - p))
            .fold(0.0, f64::max)
    }

    /// Deterministic menu at the rounded allocations.
    pub fn rounded(&self) -> FixedAllocationMenu {
        let bundles = (1..self.len())
            .map(|k| {
                let mut b = Bundle::empty(self.m);
                for (i, p) in self.probabilities(k).into_iter().enumerate() {
                    b.set(i, p >= 0.5);
                }
                b
            })
            .collect();
        FixedAllocationMenu::with_null(self.m, bundles, self.prices[1..].to_vec()).expect("consistent dims")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RochetNetConfig {
    pub k: usize,
    pub lr: f64,
    pub lambda: LambdaSchedule,
    pub iterations: usize,
    pub batch_size: usize,
    /// Gumbel draws per (element, valuation).
    pub draws: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
}

impl Default for RochetNetConfig {
    fn default() -> Self {
        Self {
            k: 64,
            lr: 0.3,
            lambda: LambdaSchedule::constant(20.0),
            iterations: 2000,
            batch_size: 128,
            draws: 8,
            tau_start: 1.0,
            tau_end: 0.1,
            seed: 0,
        }
    }
}

impl RochetNetConfig {
    pub fn tau_at(&self, iteration: usize) -> f64 {
        LambdaSchedule {
            start: self.tau_start,
            end: self.tau_end,
        }
        .at(iteration, self.iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RochetNetState {
    pub menu: ProductMenu,
    pub adam_prices: Adam,
    pub adam_logits: Adam,
    pub iteration: usize,
    pub log: Vec<MenuLogRecord>,
}

impl RochetNetState {
    /// DSIC holds exactly only once every allocation is deterministic.
    pub fn certified_dsic(&self) -> bool {
        self.menu.is_binary()
    }
}

pub fn train_bundle_rochetnet(
    m: usize,
    v_max: f64,
    cfg: &RochetNetConfig,
    train: &[XorValuation],
) -> Result<RochetNetState> {
    if train.is_empty() {
        return Err(Error::Domain("baseline training needs training valuations".into()));
    }
    if cfg.draws == 0 {
        return Err(Error::config("baseline.draws", "must be at least 1"));
    }
    if !(cfg.tau_start > 0.0 && cfg.tau_end > 0.0) {
        return Err(Error::config("baseline.tau", "temperatures must be positive"));
    }
    let menu = ProductMenu::init(m, cfg.k, v_max, cfg.tau_start, cfg.seed)?;
    let k_total = menu.len();
    let mut state = RochetNetState {
        adam_prices: Adam::new(cfg.lr, k_total - 1),
        adam_logits: Adam::new(cfg.lr, (k_total - 1) * m),
        menu,
        iteration: 0,
        log: Vec::new(),
    };
    let start = Instant::now();
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let lambda = cfg.lambda.at(it, cfg.iterations);
        let tau = cfg.tau_at(it);
        state.menu.tau = tau;
        let mut r = rng::iteration(cfg.seed, it);
        let batch: Vec<&XorValuation> = if cfg.batch_size == 0 || cfg.batch_size >= train.len() {
            train.iter().collect()
        } else {
            index::sample(&mut r, train.len(), cfg.batch_size)
                .into_iter()
                .map(|i| &train[i])
                .collect()
        };
        let inv_b = 1.0 / batch.len() as f64;
        let inv_d = 1.0 / cfg.draws as f64;
        let prices = state.menu.prices.clone();
        let mut loss = 0.0;
        let mut g_price = vec![0.0; k_total];
        let mut g_logits = vec![vec![0.0; m]; k_total];
        let mut utils = vec![0.0; k_total];
        let mut slopes = vec![vec![0.0; m]; k_total];
        for v in &batch {
            for k in 1..k_total {
                let mut est = 0.0;
                slopes[k].iter_mut().for_each(|s| *s = 0.0);
                for _ in 0..cfg.draws {
                    let s = gumbel_sample_value(v, &state.menu.item_logits[k], tau, &mut r)?;
                    est += s.value * inv_d;
                    for (a, b) in slopes[k].iter_mut().zip(&s.grad_logits) {
                        *a += b * inv_d;
                    }
                }
                utils[k] = est - prices[k];
            }
            let z = softmax(&utils, lambda);
            let mean: f64 = z.iter().zip(&prices).map(|(a, b)| a * b).sum();
            loss -= mean * inv_b;
            for k in 1..k_total {
                let g_u = -lambda * z[k] * (prices[k] - mean);
                g_price[k] += (-z[k] - g_u) * inv_b;
                for (a, s) in g_logits[k].iter_mut().zip(&slopes[k]) {
                    *a += g_u * s * inv_b;
                }
            }
        }
        let flat_g: Vec<f64> = g_logits[1..].iter().flatten().copied().collect();
        if !loss.is_finite() || flat_g.iter().chain(&g_price).any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration: it,
                message: format!("baseline loss is {loss}"),
            });
        }
        let mut p = state.menu.prices[1..].to_vec();
        state.adam_prices.step(&mut p, &g_price[1..])?;
        state.menu.prices[1..].copy_from_slice(&p);
        let mut l: Vec<f64> = state.menu.item_logits[1..].iter().flatten().copied().collect();
        state.adam_logits.step(&mut l, &flat_g)?;
        for (k, chunk) in l.chunks(m).enumerate() {
            state.menu.item_logits[k + 1].copy_from_slice(chunk);
        }
        state.iteration += 1;
        state.log.push(MenuLogRecord {
            iteration: it,
            lambda,
            loss,
            test_revenue: None,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    state.menu.tau = cfg.tau_at(cfg.iterations);
    Ok(state)
}
