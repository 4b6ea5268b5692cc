//! Revenue measurement, incentive probes, the brute-force pushforward oracle,
//! ablation sweeps and snapshot export.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::baselines::{product_value, FixedAllocationMenu, ProductMenu};
use crate::error::{Error, Result};
use crate::flow::{round_bundle, FlowConfig, VectorField};
use crate::menu::{
    effective_weights, hard_select, train_menu_steps, transport_menu, CompiledMenu, Menu, MenuState,
    MenuTrainConfig, ReweightMode,
};
use crate::rng;
use crate::valuations::{Bundle, XorAtom, XorValuation};

/// Slack allowed in incentive and participation checks.
pub const PROBE_TOLERANCE: f64 = 1e-12;

/// A bid-independent menu evaluated through hard argmax selection.
pub trait Mechanism {
    fn menu_size(&self) -> usize;

    fn price(&self, k: usize) -> f64;

    /// Utilities the mechanism uses to choose an element for a reported bid.
    fn selection_utilities(&self, bid: &XorValuation) -> Result<Vec<f64>>;

    /// Exact expected utilities under a true valuation.
    fn true_utilities(&self, v: &XorValuation) -> Result<Vec<f64>> {
        self.selection_utilities(v)
    }

    fn select(&self, bid: &XorValuation) -> Result<usize> {
        Ok(hard_select(&self.selection_utilities(bid)?))
    }

    fn payment(&self, bid: &XorValuation) -> Result<f64> {
        Ok(self.price(self.select(bid)?))
    }
}

impl Mechanism for CompiledMenu {
    fn menu_size(&self) -> usize {
        self.prices.len()
    }

    fn price(&self, k: usize) -> f64 {
        self.prices[k]
    }

    fn selection_utilities(&self, bid: &XorValuation) -> Result<Vec<f64>> {
        Ok(self.utilities(bid)?.utilities)
    }
}

impl Mechanism for FixedAllocationMenu {
    fn menu_size(&self) -> usize {
        self.len()
    }

    fn price(&self, k: usize) -> f64 {
        self.prices[k]
    }

    fn selection_utilities(&self, bid: &XorValuation) -> Result<Vec<f64>> {
        self.utilities(bid)
    }
}

/// How a product menu values its elements when choosing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ProductEval {
    /// Exact product expectations.
    Exact,
    /// Monte-Carlo estimates from `draws` hard samples seeded by the bid.
    Sampled { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductMechanism {
    pub menu: ProductMenu,
    pub eval: ProductEval,
}

fn bid_fingerprint(bid: &XorValuation) -> u64 {
    let mut h = DefaultHasher::new();
    bid.m().hash(&mut h);
    for a in bid.atoms() {
        a.bundle.hash(&mut h);
        a.price.to_bits().hash(&mut h);
    }
    h.finish()
}

impl ProductMechanism {
    fn exact(&self, v: &XorValuation) -> Result<Vec<f64>> {
        (0..self.menu.len())
            .map(|k| {
                if k == 0 {
                    Ok(0.0)
                } else {
                    Ok(product_value(v, &self.menu.probabilities(k))? - self.menu.prices[k])
                }
            })
            .collect()
    }
}

impl Mechanism for ProductMechanism {
    fn menu_size(&self) -> usize {
        self.menu.len()
    }

    fn price(&self, k: usize) -> f64 {
        self.menu.prices[k]
    }

    fn selection_utilities(&self, bid: &XorValuation) -> Result<Vec<f64>> {
        match self.eval {
            ProductEval::Exact => self.exact(bid),
            ProductEval::Sampled { draws, seed } => {
                let mut r = rng::stream(seed ^ bid_fingerprint(bid), rng::purpose::PROBE);
                let m = self.menu.m;
                let mut out = vec![0.0];
                for k in 1..self.menu.len() {
                    let probs = self.menu.probabilities(k);
                    let mut total = 0.0;
                    for _ in 0..draws.max(1) {
                        let mut b = Bundle::empty(m);
                        for (i, &p) in probs.iter().enumerate() {
                            b.set(i, r.random::<f64>() < p);
                        }
                        total += bid.value(&b);
                    }
                    out.push(total / draws.max(1) as f64 - self.menu.prices[k]);
                }
                Ok(out)
            }
        }
    }

    fn true_utilities(&self, v: &XorValuation) -> Result<Vec<f64>> {
        self.exact(v)
    }
}

/// Mean payment over the set.
pub fn test_revenue(mech: &impl Mechanism, test: &[XorValuation]) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for v in test {
        total += mech.payment(v)?;
    }
    Ok(total / test.len() as f64)
}

pub fn selection_frequencies(mech: &impl Mechanism, set: &[XorValuation]) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; mech.menu_size()];
    for v in set {
        counts[mech.select(v)?] += 1.0;
    }
    let n = set.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisreportKind {
    PriceScaling,
    AtomDropout,
    Swap,
}

/// A random misreport of `v`; `others` supplies swap candidates.
pub fn misreport(v: &XorValuation, others: &[XorValuation], kind: MisreportKind, r: &mut rng::Rng) -> Result<XorValuation> {
    match kind {
        MisreportKind::PriceScaling => {
            let atoms = v
                .atoms()
                .iter()
                .map(|a| XorAtom {
                    bundle: a.bundle.clone(),
                    price: if a.bundle.is_empty() { 0.0 } else { a.price * r.random_range(0.5..2.0) },
                })
                .collect();
            XorValuation::new(v.m(), atoms)
        }
        MisreportKind::AtomDropout => {
            let mut atoms: Vec<XorAtom> = v.atoms().iter().filter(|_| r.random::<f64>() >= 0.3).cloned().collect();
            if atoms.is_empty() {
                let keep = r.random_range(0..v.atom_count());
                atoms.push(v.atoms()[keep].clone());
            }
            XorValuation::new(v.m(), atoms)
        }
        MisreportKind::Swap => {
            if others.is_empty() {
                return Ok(v.clone());
            }
            Ok(others[r.random_range(0..others.len())].clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsicReport {
    pub probes: usize,
    pub violations: usize,
    pub pass_rate: f64,
    /// Largest utility gain from misreporting, floored at 0.
    pub worst_violation: f64,
}

/// Checks `u(v; select(b)) <= u(v; select(v)) + tolerance` over `count`
/// random (valuation, misreport) pairs, cycling through misreport styles.
pub fn dsic_probe(mech: &impl Mechanism, samples: &[XorValuation], count: usize, seed: u64) -> Result<DsicReport> {
    if samples.is_empty() || count == 0 {
        return Ok(DsicReport {
            probes: 0,
            violations: 0,
            pass_rate: 1.0,
            worst_violation: 0.0,
        });
    }
    let kinds = [MisreportKind::PriceScaling, MisreportKind::AtomDropout, MisreportKind::Swap];
    let mut r = rng::stream(seed, rng::purpose::MISREPORT);
    let mut truthful: HashMap<usize, (Vec<f64>, usize)> = HashMap::new();
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let idx = i % samples.len();
        let v = &samples[idx];
        let b = misreport(v, samples, kinds[i % kinds.len()], &mut r)?;
        if !truthful.contains_key(&idx) {
            truthful.insert(idx, (mech.true_utilities(v)?, mech.select(v)?));
        }
        let (u, honest) = &truthful[&idx];
        let gain = u[mech.select(&b)?] - u[*honest];
        if gain > PROBE_TOLERANCE {
            violations += 1;
        }
        worst = worst.max(gain);
    }
    Ok(DsicReport {
        probes: count,
        violations,
        pass_rate: (count - violations) as f64 / count as f64,
        worst_violation: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrReport {
    pub samples: usize,
    pub failures: usize,
    pub pass_rate: f64,
    pub worst_utility: f64,
}

/// Checks that the truthfully chosen element never has negative utility.
pub fn ir_check(mech: &impl Mechanism, samples: &[XorValuation]) -> Result<IrReport> {
    let mut failures = 0;
    let mut worst = f64::INFINITY;
    for v in samples {
        let u = mech.true_utilities(v)?[mech.select(v)?];
        if u < -PROBE_TOLERANCE {
            failures += 1;
        }
        worst = worst.min(u);
    }
    let n = samples.len();
    Ok(IrReport {
        samples: n,
        failures,
        pass_rate: if n == 0 { 1.0 } else { (n - failures) as f64 / n as f64 },
        worst_utility: if n == 0 { 0.0 } else { worst },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mechanism: String,
    pub test_revenue: f64,
    pub selection_frequencies: Vec<f64>,
    pub dsic_pass_rate: f64,
    pub dsic_worst_violation: f64,
    pub dsic_probes: usize,
    pub ir_pass_rate: f64,
    pub samples: usize,
    pub wall_ms: u64,
}

pub fn evaluate(
    name: &str,
    mech: &impl Mechanism,
    test: &[XorValuation],
    probes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let start = Instant::now();
    let dsic = dsic_probe(mech, test, probes, seed)?;
    let ir = ir_check(mech, test)?;
    Ok(EvalReport {
        mechanism: name.to_string(),
        test_revenue: test_revenue(mech, test)?,
        selection_frequencies: selection_frequencies(mech, test)?,
        dsic_pass_rate: dsic.pass_rate,
        dsic_worst_violation: dsic.worst_violation,
        dsic_probes: dsic.probes,
        ir_pass_rate: ir.pass_rate,
        samples: test.len(),
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Largest `m` the oracle accepts.
pub const ORACLE_MAX_ITEMS: usize = 12;
/// Euler refinement of the oracle relative to the fast path.
pub const ORACLE_REFINEMENT: usize = 4;
/// Relative agreement required between fast path and oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleElement {
    pub element: usize,
    pub fast: f64,
    pub oracle: f64,
    pub relative_gap: f64,
    /// Some Dirac point rounds differently at the two resolutions.
    pub boundary: bool,
    /// Dirac points that round differently.
    pub boundary_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMismatch {
    pub element: usize,
    /// Dirac point whose weight or bundle disagrees first, if one does.
    pub point: Option<usize>,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub values: Vec<f64>,
    pub utilities: Vec<f64>,
    pub elements: Vec<OracleElement>,
    pub mismatches: Vec<OracleMismatch>,
}

impl OracleReport {
    pub fn boundary_count(&self) -> usize {
        self.elements.iter().filter(|e| e.boundary).count()
    }

    pub fn boundary_points(&self) -> usize {
        self.elements.iter().map(|e| e.boundary_points).sum()
    }

    pub fn max_gap(&self) -> f64 {
        self.elements
            .iter()
            .filter(|e| !e.boundary)
            .map(|e| e.relative_gap)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Re-derives every element value point by point: its own Euler loop at
/// `ORACLE_REFINEMENT` times the step count, the closed-form density factor,
/// and a direct weighted sum without merging duplicate bundles.
pub fn brute_force_menu_oracle(
    menu: &Menu,
    vf: &VectorField,
    cfg: &FlowConfig,
    v: &XorValuation,
    mode: ReweightMode,
) -> Result<OracleReport> {
    if menu.m > ORACLE_MAX_ITEMS {
        return Err(Error::TooLarge(format!("oracle supports m <= {ORACLE_MAX_ITEMS}, got {}", menu.m)));
    }
    let fine = FlowConfig {
        euler_steps: cfg.euler_steps * ORACLE_REFINEMENT,
        ..*cfg
    };
    let dt = fine.dt();
    let eta_integral = vf.eta_integral(cfg);
    let compiled = CompiledMenu::compile(menu, vf, cfg, mode)?;
    let fast = compiled.utilities(v)?;
    let schedule = vf.schedule(cfg);
    let fast_points = transport_menu(menu, vf, &schedule)?;

    let mut values = Vec::with_capacity(menu.len());
    let mut elements = Vec::new();
    let mut mismatches = Vec::new();
    for (k, e) in menu.elements.iter().enumerate() {
        if e.is_null() {
            values.push(0.0);
            continue;
        }
        let base = e.mixture.weights();
        let mut raw = Vec::new();
        let mut bundles = Vec::new();
        for mu in &e.mixture.means {
            let q = vf.qnet().forward(mu)?;
            let m = menu.m;
            let mut s = mu.clone();
            for step in 0..fine.euler_steps {
                let eta = vf.eta(step as f64 * dt);
                let qs: Vec<f64> = (0..m)
                    .map(|i| (0..m).map(|j| q[i * m + j] * s[j]).sum())
                    .collect();
                for (x, d) in s.iter_mut().zip(qs) {
                    *x += dt * eta * d;
                }
            }
            let trace: f64 = (0..m).map(|i| q[i * m + i]).sum();
            bundles.push(round_bundle(&s)?);
            raw.push(-trace * eta_integral);
        }
        let weights: Vec<f64> = match mode {
            ReweightMode::Normalized => {
                let top = raw
                    .iter()
                    .zip(&e.mixture.logits)
                    .map(|(r, l)| r + l)
                    .fold(f64::NEG_INFINITY, f64::max);
                let unnorm: Vec<f64> = raw
                    .iter()
                    .zip(&e.mixture.logits)
                    .map(|(r, l)| (r + l - top).exp())
                    .collect();
                let total: f64 = unnorm.iter().sum();
                unnorm.into_iter().map(|u| u / total).collect()
            }
            ReweightMode::PaperLiteral => base.iter().zip(&raw).map(|(w, r)| w * r.exp()).collect(),
        };
        let value: f64 = weights.iter().zip(&bundles).map(|(w, b)| w * v.value(b)).sum();
        values.push(value);

        let fp = &fast_points[k];
        let boundary_points = fp.bundles.iter().zip(&bundles).filter(|(a, b)| a != b).count();
        let boundary = boundary_points > 0;
        let gap = relative_gap(fast.values[k], value);
        elements.push(OracleElement {
            element: k,
            fast: fast.values[k],
            oracle: value,
            relative_gap: gap,
            boundary,
            boundary_points,
        });
        if !boundary && gap > ORACLE_TOLERANCE {
            let fast_w = effective_weights(&e.mixture.logits, &fp.traces, schedule.eta_integral, mode)?;
            let point = fast_w
                .iter()
                .zip(&weights)
                .position(|(a, b)| relative_gap(*a, *b) > ORACLE_TOLERANCE);
            mismatches.push(OracleMismatch {
                element: k,
                point,
                relative_gap: gap,
            });
        }
    }
    let utilities = values
        .iter()
        .zip(&menu.elements)
        .enumerate()
        .map(|(k, (val, e))| if k == menu.null_index { 0.0 } else { val - e.price })
        .collect();
    Ok(OracleReport {
        values,
        utilities,
        elements,
        mismatches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    D,
    K,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d" => Ok(SweepParam::D),
            "k" => Ok(SweepParam::K),
            other => Err(Error::config("sweep.param", format!("unknown parameter `{other}`, expected d or k"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::D => "d",
            SweepParam::K => "k",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub seeds: Vec<u64>,
    pub revenues: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl SweepTable {
    pub fn median_of(&self, value: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.value == value).map(|r| r.median)
    }

    /// One row per swept value: the value, one column per seed, the median.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let seeds = self.rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
        let mut header = vec![self.param.to_string()];
        header.extend(seeds.iter().map(|s| format!("seed_{s}")));
        header.push("median".into());
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.value.to_string()];
            rec.extend(row.revenues.iter().map(|r| r.to_string()));
            rec.push(row.median.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Inputs shared by every cell of a sweep.
pub struct SweepBase<'a> {
    pub m: usize,
    pub v_max: f64,
    pub menu: &'a MenuTrainConfig,
    pub vf: &'a VectorField,
    pub flow: &'a FlowConfig,
    pub train: &'a [XorValuation],
    pub test: &'a [XorValuation],
}

/// Trains one menu per (value, seed) and records hard-selection test revenue.
pub fn ablation_sweep(param: SweepParam, values: &[usize], seeds: &[u64], base: &SweepBase<'_>) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::config("sweep.values", "need at least one value"));
    }
    if seeds.is_empty() {
        return Err(Error::config("sweep.seeds", "need at least one seed"));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut revenues = Vec::new();
        for &seed in seeds {
            let mut cfg = base.menu.clone();
            cfg.seed = seed;
            cfg.eval_every = 0;
            match param {
                SweepParam::D => cfg.d = value,
                SweepParam::K => cfg.k = value,
            }
            let mut state = MenuState::init(base.m, base.v_max, &cfg)?;
            train_menu_steps(&mut state, &cfg, base.vf, base.flow, base.train, base.test, cfg.iterations, |_| Ok(()))?;
            let compiled = CompiledMenu::compile(&state.menu, base.vf, base.flow, cfg.mode)?;
            revenues.push(test_revenue(&compiled, base.test)?);
        }
        rows.push(SweepRow {
            value,
            seeds: seeds.to_vec(),
            median: median(&revenues),
            revenues,
        });
    }
    Ok(SweepTable { param, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub bundle: Bundle,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotElement {
    pub index: usize,
    pub price: f64,
    pub support: Vec<SupportEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub elements: Vec<SnapshotElement>,
    pub test_revenue: f64,
}

pub fn snapshot(iteration: usize, menu: &CompiledMenu, test: &[XorValuation]) -> Result<Snapshot> {
    let elements = menu
        .supports
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != menu.null_index)
        .map(|(k, s)| SnapshotElement {
            index: k,
            price: menu.prices[k],
            support: s
                .iter()
                .map(|(b, w)| SupportEntry {
                    bundle: b.clone(),
                    weight: *w,
                })
                .collect(),
        })
        .collect();
    Ok(Snapshot {
        iteration,
        elements,
        test_revenue: test_revenue(menu, test)?,
    })
}

/// Iteration counts at which snapshots are taken: multiples of `interval` up
/// to `total`, plus `total` itself.
pub fn snapshot_iterations(total: usize, interval: usize) -> Result<Vec<usize>> {
    if interval == 0 {
        return Err(Error::config("snapshots.interval", "must be at least 1"));
    }
    let mut its: Vec<usize> = (1..=total / interval).map(|i| i * interval).collect();
    if its.last() != Some(&total) {
        its.push(total);
    }
    Ok(its)
}

/// Replays menu training from `state` and snapshots at every
/// [`snapshot_iterations`] point.
pub fn collect_snapshots(
    state: &mut MenuState,
    cfg: &MenuTrainConfig,
    vf: &VectorField,
    flow: &FlowConfig,
    train: &[XorValuation],
    test: &[XorValuation],
    interval: usize,
) -> Result<Vec<Snapshot>> {
    let marks = snapshot_iterations(cfg.iterations, interval)?;
    let mut out = Vec::new();
    for &mark in &marks {
        if mark < state.iteration {
            continue;
        }
        train_menu_steps(state, cfg, vf, flow, train, test, mark, |_| Ok(()))?;
        let compiled = CompiledMenu::compile(&state.menu, vf, flow, cfg.mode)?;
        out.push(snapshot(mark, &compiled, test)?);
    }
    Ok(out)
}

pub fn write_snapshot_csv(snap: &Snapshot, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "element", "price", "bundle", "weight", "test_revenue"])
        .map_err(csv_err)?;
    for e in &snap.elements {
        for s in &e.support {
            w.write_record([
                snap.iteration.to_string(),
                e.index.to_string(),
                e.price.to_string(),
                s.bundle.to_string(),
                s.weight.to_string(),
                snap.test_revenue.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticePoint {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

/// The field on a `resolution x resolution` lattice over `[0,1]^2` in the
/// plane of items `axes`, other coordinates fixed at `base`. Each lattice
/// point is its own starting point.
pub fn field_lattice(
    vf: &VectorField,
    t: f64,
    base: &[f64],
    axes: (usize, usize),
    resolution: usize,
) -> Result<Vec<LatticePoint>> {
    Error::check_dim("lattice base point", vf.m(), base.len())?;
    if axes.0 >= vf.m() || axes.1 >= vf.m() || axes.0 == axes.1 {
        return Err(Error::config("lattice.axes", "axes must be two distinct item indices"));
    }
    if resolution < 2 {
        return Err(Error::config("lattice.resolution", "must be at least 2"));
    }
    let h = 1.0 / (resolution - 1) as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let mut s = base.to_vec();
            s[axes.0] = i as f64 * h;
            s[axes.1] = j as f64 * h;
            let phi = vf.vector_field(t, &s, &s)?;
            out.push(LatticePoint {
                x: s[axes.0],
                y: s[axes.1],
                dx: phi[axes.0],
                dy: phi[axes.1],
            });
        }
    }
    Ok(out)
}

pub fn write_lattice_csv(points: &[LatticePoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::testing::{constant_field, small_random_field};
    use crate::menu::{DiracMixture, MenuElement};
    use crate::valuations::{generate_synthetic, AuctionConfig, PriceDistribution, SyntheticSpec};
    use ndarray::Array2;

    fn grand_only(m: usize, values: &[f64]) -> Vec<XorValuation> {
        let all: Vec<usize> = (0..m).collect();
        values
            .iter()
            .map(|&p| XorValuation::from_item_lists(m, &[(&all, p)]).unwrap())
            .collect()
    }

    fn synthetic(m: usize, n: usize, seed: u64) -> Vec<XorValuation> {
        let spec = SyntheticSpec::new(AuctionConfig::new(m, 10.0).unwrap(), PriceDistribution::Uniform, 4);
        generate_synthetic(&spec, n, seed).unwrap().samples
    }

    #[test]
    fn revenue_cases() {
        let set = grand_only(3, &[10.0, 8.0, 5.0]);
        let menu = FixedAllocationMenu::grand(3, 6.0);
        assert!((test_revenue(&menu, &set).unwrap() - 4.0).abs() < 1e-15);
        assert_eq!(test_revenue(&menu, &set).unwrap(), test_revenue(&menu, &set).unwrap());
        let null_only = FixedAllocationMenu::with_null(3, vec![], vec![]).unwrap();
        assert_eq!(test_revenue(&null_only, &set).unwrap(), 0.0);
        let mut reversed = set.clone();
        reversed.reverse();
        assert_eq!(test_revenue(&menu, &reversed).unwrap(), test_revenue(&menu, &set).unwrap());
    }

    #[test]
    fn exact_menus_pass_dsic_and_ir() {
        let samples = synthetic(4, 200, 1);
        let menu = FixedAllocationMenu::with_null(
            4,
            vec![Bundle::grand(4), Bundle::from_items(4, &[0, 1]).unwrap(), Bundle::from_items(4, &[2]).unwrap()],
            vec![8.0, 4.0, 1.5],
        )
        .unwrap();
        let d = dsic_probe(&menu, &samples, 3000, 2).unwrap();
        assert_eq!(d.pass_rate, 1.0);
        assert!(d.worst_violation <= PROBE_TOLERANCE);
        assert_eq!(ir_check(&menu, &samples).unwrap().pass_rate, 1.0);
    }

    #[test]
    fn ir_negative_control_detects_failures() {
        let samples = grand_only(2, &[1.0, 2.0, 10.0]);
        let menu = FixedAllocationMenu::without_null(2, vec![Bundle::grand(2)], vec![5.0]).unwrap();
        let ir = ir_check(&menu, &samples).unwrap();
        assert_eq!(ir.failures, 2);
        let priced_out = FixedAllocationMenu::grand(2, 50.0);
        assert_eq!(ir_check(&priced_out, &samples).unwrap().pass_rate, 1.0);
    }

    #[test]
    fn truthful_misreport_has_zero_gain() {
        let samples = synthetic(3, 5, 2);
        let menu = FixedAllocationMenu::grand(3, 2.0);
        for v in &samples {
            let u = menu.true_utilities(v).unwrap();
            let k = menu.select(v).unwrap();
            assert_eq!(u[menu.select(v).unwrap()] - u[k], 0.0);
        }
    }

    #[test]
    fn misreports_are_valid_valuations() {
        let samples = synthetic(5, 20, 3);
        let mut r = rng::stream(0, 0);
        for kind in [MisreportKind::PriceScaling, MisreportKind::AtomDropout, MisreportKind::Swap] {
            for v in &samples {
                let b = misreport(v, &samples, kind, &mut r).unwrap();
                assert_eq!(b.m(), v.m());
                assert!(b.atom_count() >= 1 && b.atom_count() <= v.atom_count().max(4));
            }
        }
    }

    #[test]
    fn sampled_product_menu_can_violate_dsic() {
        let samples = synthetic(4, 100, 4);
        let menu = ProductMenu::init(4, 16, 10.0, 1.0, 4).unwrap();
        let mech = ProductMechanism {
            menu: menu.clone(),
            eval: ProductEval::Sampled { draws: 2, seed: 1 },
        };
        assert!(!menu.is_binary());
        let d = dsic_probe(&mech, &samples, 2000, 5).unwrap();
        assert!(d.pass_rate < 1.0);
        let exact = ProductMechanism {
            menu,
            eval: ProductEval::Exact,
        };
        assert_eq!(dsic_probe(&exact, &samples, 2000, 5).unwrap().pass_rate, 1.0);
    }

    #[test]
    fn oracle_agrees_on_random_menus() {
        for seed in 0..10 {
            let m = 2 + (seed as usize % 5);
            let vf = small_random_field(m, seed);
            let menu = Menu::init(m, 5, 1 + seed as usize % 6, 10.0, seed).unwrap();
            let v = &synthetic(m, 1, seed)[0];
            for mode in [ReweightMode::Normalized, ReweightMode::PaperLiteral] {
                let report = brute_force_menu_oracle(&menu, &vf, &FlowConfig::default(), v, mode).unwrap();
                assert!(report.passed(), "{report:?}");
                assert_eq!(report.values[0], 0.0);
            }
        }
    }

    #[test]
    fn oracle_single_point_is_bitwise() {
        let vf = small_random_field(4, 7);
        let menu = Menu::init(4, 6, 1, 10.0, 7).unwrap();
        let v = &synthetic(4, 1, 7)[0];
        let report = brute_force_menu_oracle(&menu, &vf, &FlowConfig::default(), v, ReweightMode::Normalized).unwrap();
        for e in report.elements.iter().filter(|e| !e.boundary) {
            assert_eq!(e.fast.to_bits(), e.oracle.to_bits());
        }
    }

    #[test]
    fn oracle_flags_boundary_points() {
        // 0.5 exactly rounds to 1 at both resolutions only without motion;
        // a strong field moves 0.49 across the threshold between resolutions.
        let vf = constant_field(Array2::eye(1) * 0.0412, 1.0, 0.0);
        let cfg = FlowConfig {
            euler_steps: 1,
            ..FlowConfig::default()
        };
        let menu = Menu {
            m: 1,
            elements: vec![
                MenuElement::null(),
                MenuElement {
                    price: 0.0,
                    mixture: DiracMixture {
                        logits: vec![0.0],
                        means: vec![vec![0.4801]],
                    },
                },
            ],
            null_index: 0,
        };
        let v = XorValuation::from_item_lists(1, &[(&[0], 1.0)]).unwrap();
        let report = brute_force_menu_oracle(&menu, &vf, &cfg, &v, ReweightMode::Normalized).unwrap();
        assert_eq!(report.boundary_count(), 1);
        assert!(report.passed());
    }

    #[test]
    fn snapshot_iteration_counts() {
        assert_eq!(snapshot_iterations(10, 3).unwrap(), vec![3, 6, 9, 10]);
        assert_eq!(snapshot_iterations(10, 5).unwrap(), vec![5, 10]);
        assert_eq!(snapshot_iterations(4, 100).unwrap(), vec![4]);
        assert!(snapshot_iterations(4, 0).is_err());
        for (total, interval) in [(7, 2), (100, 7), (1, 1), (50, 50)] {
            assert_eq!(snapshot_iterations(total, interval).unwrap().len(), total.div_ceil(interval));
        }
    }

    #[test]
    fn snapshots_match_recomputed_revenue() {
        let vf = small_random_field(3, 3);
        let flow = FlowConfig::default();
        let train = synthetic(3, 60, 5);
        let test = synthetic(3, 30, 6);
        let cfg = MenuTrainConfig {
            k: 4,
            d: 2,
            iterations: 12,
            batch_size: 16,
            eval_every: 0,
            ..MenuTrainConfig::default()
        };
        let mut state = MenuState::init(3, 10.0, &cfg).unwrap();
        let snaps = collect_snapshots(&mut state, &cfg, &vf, &flow, &train, &test, 5).unwrap();
        assert_eq!(snaps.iter().map(|s| s.iteration).collect::<Vec<_>>(), vec![5, 10, 12]);
        let compiled = CompiledMenu::compile(&state.menu, &vf, &flow, cfg.mode).unwrap();
        assert_eq!(snaps[2].test_revenue, test_revenue(&compiled, &test).unwrap());
        for e in &snaps[2].elements {
            let total: f64 = e.support.iter().map(|s| s.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        write_snapshot_csv(&snaps[0], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("iteration,element,price,bundle,weight"));
    }

    #[test]
    fn lattice_shape() {
        let vf = small_random_field(3, 1);
        let pts = field_lattice(&vf, 0.0, &[0.5; 3], (0, 2), 5).unwrap();
        assert_eq!(pts.len(), 25);
        assert!(field_lattice(&vf, 0.0, &[0.5; 3], (1, 1), 5).is_err());
    }

    #[test]
    fn median_and_single_row_sweep_table() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        let table = SweepTable {
            param: SweepParam::D,
            rows: vec![SweepRow {
                value: 2,
                seeds: vec![0, 1],
                revenues: vec![1.0, 3.0],
                median: 2.0,
            }],
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "d,seed_0,seed_1,median\n2,1,3,2\n");
    }
}
