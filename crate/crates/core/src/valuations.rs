//! XOR valuations: data model, synthetic generation, CATS import and exact
//! evaluation.
//!
//! A valuation is a list of `(bundle, price)` atoms. The value of a bundle `S`
//! is the largest atom price among atoms whose bundle is contained in `S`, and
//! zero when no atom qualifies.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution as _, Normal};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuctionConfig {
    pub m: usize,
    pub v_max: f64,
}

impl AuctionConfig {
    pub fn new(m: usize, v_max: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("m", "item count must be at least 1"));
        }
        if !(v_max > 0.0 && v_max.is_finite()) {
            return Err(Error::config("v_max", "value bound must be positive and finite"));
        }
        Ok(Self { m, v_max })
    }
}

/// A subset of the `m` items, stored as a packed bit vector.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bundle {
    len: usize,
    words: Vec<u64>,
}

impl Bundle {
    pub fn empty(m: usize) -> Self {
        Self {
            len: m,
            words: vec![0; m.div_ceil(64)],
        }
    }

    pub fn grand(m: usize) -> Self {
        let mut b = Self::empty(m);
        for i in 0..m {
            b.set(i, true);
        }
        b
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let mut b = Self::empty(bits.len());
        for (i, &bit) in bits.iter().enumerate() {
            match bit {
                0 => {}
                1 => b.set(i, true),
                other => {
                    return Err(Error::Domain(format!(
                        "bundle entry {i} is {other}, expected 0 or 1"
                    )))
                }
            }
        }
        Ok(b)
    }

    pub fn from_items(m: usize, items: &[usize]) -> Result<Self> {
        let mut b = Self::empty(m);
        for &i in items {
            if i >= m {
                return Err(Error::Domain(format!("item {i} out of range for m = {m}")));
            }
            b.set(i, true);
        }
        Ok(b)
    }

    /// Bundle whose bit `i` is bit `i` of `index`. Requires `m <= 64`.
    pub fn from_index(m: usize, index: u64) -> Self {
        assert!(m <= 64, "bundle index enumeration needs m <= 64");
        let mut b = Self::empty(m);
        if m > 0 {
            let mask = if m == 64 { u64::MAX } else { (1u64 << m) - 1 };
            b.words[0] = index & mask;
        }
        b
    }

    /// Inverse of [`Bundle::from_index`].
    pub fn index(&self) -> u64 {
        assert!(self.len <= 64, "bundle index needs m <= 64");
        self.words.first().copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_subset_of(&self, other: &Bundle) -> bool {
        debug_assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    pub fn bits(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i) as u8).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Debug for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bundle[")?;
        for i in 0..self.len {
            write!(f, "{}", self.get(i) as u8)?;
        }
        write!(f, "]")
    }
}

impl fmt::Display for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            write!(f, "{}", self.get(i) as u8)?;
        }
        Ok(())
    }
}

impl Serialize for Bundle {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.bits().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Bundle {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let bits = Vec::<u8>::deserialize(deserializer)?;
        Bundle::from_bits(&bits).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XorAtom {
    pub bundle: Bundle,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XorValuation {
    m: usize,
    atoms: Vec<XorAtom>,
}

#[derive(Deserialize)]
struct RawValuation {
    m: usize,
    atoms: Vec<XorAtom>,
}

impl<'de> Deserialize<'de> for XorValuation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = RawValuation::deserialize(deserializer)?;
        XorValuation::new(raw.m, raw.atoms).map_err(D::Error::custom)
    }
}

impl XorValuation {
    pub fn new(m: usize, atoms: Vec<XorAtom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Domain("valuation needs at least one atom".into()));
        }
        for (j, atom) in atoms.iter().enumerate() {
            Error::check_dim("xor atom bundle", m, atom.bundle.len())?;
            if !(atom.price >= 0.0 && atom.price.is_finite()) {
                return Err(Error::Domain(format!(
                    "atom {j} has invalid price {}",
                    atom.price
                )));
            }
            if atom.bundle.is_empty() && atom.price != 0.0 {
                return Err(Error::Domain(format!(
                    "atom {j} prices the empty bundle at {}",
                    atom.price
                )));
            }
        }
        Ok(Self { m, atoms })
    }

    /// Convenience constructor from `(items, price)` pairs.
    pub fn from_item_lists(m: usize, atoms: &[(&[usize], f64)]) -> Result<Self> {
        let atoms = atoms
            .iter()
            .map(|(items, price)| {
                Ok(XorAtom {
                    bundle: Bundle::from_items(m, items)?,
                    price: *price,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(m, atoms)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn atoms(&self) -> &[XorAtom] {
        &self.atoms
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn max_price(&self) -> f64 {
        self.atoms.iter().map(|a| a.price).fold(0.0, f64::max)
    }

    pub fn evaluate(&self, s: &Bundle) -> Result<f64> {
        Error::check_dim("evaluate", self.m, s.len())?;
        Ok(self.value(s))
    }

    /// Unchecked variant of [`evaluate`](Self::evaluate) for hot loops where
    /// the bundle length is already known to match.
    #[inline]
    pub fn value(&self, s: &Bundle) -> f64 {
        debug_assert_eq!(self.m, s.len());
        self.atoms
            .iter()
            .filter(|a| a.bundle.is_subset_of(s))
            .map(|a| a.price)
            .fold(0.0, f64::max)
    }

    pub fn grand_value(&self) -> f64 {
        self.value(&Bundle::grand(self.m))
    }

    pub fn expected_value(&self, support: &[(Bundle, f64)]) -> Result<f64> {
        let mut total = 0.0;
        let mut mass = 0.0;
        for (j, (bundle, p)) in support.iter().enumerate() {
            if !(*p >= 0.0) {
                return Err(Error::Domain(format!("support entry {j} has probability {p}")));
            }
            mass += p;
            total += p * self.evaluate(bundle)?;
        }
        if mass > 1.0 + 1e-9 {
            return Err(Error::Domain(format!("support mass {mass} exceeds 1")));
        }
        Ok(total)
    }

    /// Same valuation with every atom price multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            m: self.m,
            atoms: self
                .atoms
                .iter()
                .map(|a| XorAtom {
                    bundle: a.bundle.clone(),
                    price: a.price * factor,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationDataset {
    pub config: AuctionConfig,
    pub samples: Vec<XorValuation>,
    pub split: SplitTag,
}

impl ValuationDataset {
    pub fn new(config: AuctionConfig, samples: Vec<XorValuation>, split: SplitTag) -> Result<Self> {
        for (i, v) in samples.iter().enumerate() {
            if v.m() != config.m {
                return Err(Error::Domain(format!(
                    "sample {i} has m = {} but the dataset has m = {}",
                    v.m(),
                    config.m
                )));
            }
        }
        Ok(Self {
            config,
            samples,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes the canonical JSON-lines format: one `{m, atoms}` record per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for v in &self.samples {
            serde_json::to_writer(&mut out, v)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the canonical JSON-lines format. `v_max` falls back to the
    /// largest observed price when not given.
    pub fn load_jsonl(path: &Path, v_max: Option<f64>, split: SplitTag) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: XorValuation = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            samples.push(v);
        }
        let m = samples
            .first()
            .map(|v| v.m())
            .ok_or_else(|| Error::Format(format!("{} holds no valuations", path.display())))?;
        let v_max = v_max.unwrap_or_else(|| observed_v_max(&samples));
        Self::new(AuctionConfig::new(m, v_max)?, samples, split)
    }
}

fn observed_v_max(samples: &[XorValuation]) -> f64 {
    let max = samples.iter().map(|v| v.max_price()).fold(0.0, f64::max);
    if max > 0.0 {
        max
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceDistribution {
    Uniform,
    Normal,
}

impl FromStr for PriceDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "normal" => Ok(Self::Normal),
            other => Err(Error::config(
                "distribution",
                format!("unknown distribution `{other}` (expected uniform or normal)"),
            )),
        }
    }
}

/// Parameters of the synthetic XOR generator.
///
/// Atom prices are `|S| * base` where `base` is drawn per atom from
/// `U[0, v_max/m]` (uniform) or `N(v_max/(2m), v_max/(6m))` (normal), and the
/// product is clamped to `[0, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub config: AuctionConfig,
    pub distribution: PriceDistribution,
    pub max_atoms: usize,
    pub inclusion_prob: f64,
}

impl SyntheticSpec {
    pub const DEFAULT_INCLUSION: f64 = 0.3;

    pub fn new(config: AuctionConfig, distribution: PriceDistribution, max_atoms: usize) -> Self {
        Self {
            config,
            distribution,
            max_atoms,
            inclusion_prob: Self::DEFAULT_INCLUSION,
        }
    }

    /// Mean and standard deviation of the per-item base price under the
    /// normal distribution.
    pub fn normal_base_params(&self) -> (f64, f64) {
        let m = self.config.m as f64;
        (self.config.v_max / (2.0 * m), self.config.v_max / (6.0 * m))
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<ValuationDataset> {
    if count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    if spec.max_atoms == 0 {
        return Err(Error::config("max_atoms", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&spec.inclusion_prob) {
        return Err(Error::config("inclusion_prob", "must lie in [0, 1]"));
    }
    let AuctionConfig { m, v_max } = spec.config;
    let mut rng = rng::stream(seed, rng::purpose::GENERATE);
    let (mean, sd) = spec.normal_base_params();
    let normal = Normal::new(mean, sd).map_err(|e| Error::config("distribution", e.to_string()))?;

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let atom_count = rng.random_range(1..=spec.max_atoms);
        let mut atoms = Vec::with_capacity(atom_count);
        for _ in 0..atom_count {
            let mut bundle = Bundle::empty(m);
            for i in 0..m {
                if rng.random_bool(spec.inclusion_prob) {
                    bundle.set(i, true);
                }
            }
            if bundle.is_empty() {
                bundle.set(rng.random_range(0..m), true);
            }
            let base = match spec.distribution {
                PriceDistribution::Uniform => rng.random::<f64>() * v_max / m as f64,
                PriceDistribution::Normal => normal.sample(&mut rng),
            };
            let price = (bundle.count() as f64 * base).clamp(0.0, v_max);
            atoms.push(XorAtom { bundle, price });
        }
        samples.push(XorValuation::new(m, atoms)?);
    }
    ValuationDataset::new(spec.config, samples, SplitTag::Full)
}

/// Shuffles with `seed` and cuts at `floor(len * train_fraction)`.
pub fn split(
    ds: &ValuationDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(ValuationDataset, ValuationDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(
            "train_fraction",
            format!("{train_fraction} is outside (0, 1)"),
        ));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = rng::stream(seed, rng::purpose::SPLIT);
    order.shuffle(&mut rng);
    let n_train = (ds.len() as f64 * train_fraction).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.samples[i].clone()).collect::<Vec<_>>();
    Ok((
        ValuationDataset::new(ds.config, pick(&order[..n_train]), SplitTag::Train)?,
        ValuationDataset::new(ds.config, pick(&order[n_train..]), SplitTag::Test)?,
    ))
}

/// Parsed contents of one CATS output file.
#[derive(Debug, Clone)]
struct CatsFile {
    goods: usize,
    dummies: usize,
    bids: Vec<CatsBid>,
}

#[derive(Debug, Clone)]
struct CatsBid {
    price: f64,
    goods: Vec<usize>,
}

fn parse_cats(text: &str) -> Result<CatsFile> {
    let mut goods: Option<usize> = None;
    let mut dummies = 0usize;
    let mut bids = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let head = tokens.next().unwrap_or_default();
        let header_value = |tokens: &mut std::str::SplitWhitespace<'_>| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("header `{head}` needs a non-negative integer"),
                })
        };
        match head.to_ascii_lowercase().as_str() {
            "goods" => {
                goods = Some(header_value(&mut tokens)?);
                continue;
            }
            "dummy" => {
                dummies = header_value(&mut tokens)?;
                continue;
            }
            "bids" => {
                header_value(&mut tokens)?;
                continue;
            }
            _ => {}
        }

        let n_goods = goods.ok_or_else(|| Error::Parse {
            line: line_no,
            message: "bid line before the `goods` header".into(),
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.last() != Some(&"#") {
            return Err(Error::Parse {
                line: line_no,
                message: "bid line does not end with `#`".into(),
            });
        }
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                message: "bid line needs an id, a price and the `#` terminator".into(),
            });
        }
        fields[0].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad bid id `{}`", fields[0]),
        })?;
        let price: f64 = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad price `{}`", fields[1]),
        })?;
        if !(price >= 0.0 && price.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("price {price} must be finite and non-negative"),
            });
        }
        let mut bid_goods = Vec::with_capacity(fields.len() - 3);
        for tok in &fields[2..fields.len() - 1] {
            let g: usize = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad good id `{tok}`"),
            })?;
            if g >= n_goods + dummies {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("good {g} exceeds goods + dummy = {}", n_goods + dummies),
                });
            }
            bid_goods.push(g);
        }
        bids.push(CatsBid {
            price,
            goods: bid_goods,
        });
    }

    let goods = goods.ok_or_else(|| Error::Format("missing `goods` header".into()))?;
    Ok(CatsFile {
        goods,
        dummies,
        bids,
    })
}

/// Imports one CATS output file as a single XOR valuation: the bids tagged
/// with the lowest-numbered dummy good present, dummy goods stripped.
pub fn load_cats(path: &Path) -> Result<ValuationDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cats_from_str(&text)
}

pub fn cats_from_str(text: &str) -> Result<ValuationDataset> {
    let file = parse_cats(text)?;
    let m = file.goods;
    if m == 0 {
        return Err(Error::Format("CATS file declares zero goods".into()));
    }
    if file.bids.is_empty() {
        let config = AuctionConfig::new(m, 1.0)?;
        return ValuationDataset::new(config, Vec::new(), SplitTag::Full);
    }
    let dummy = file
        .bids
        .iter()
        .flat_map(|b| b.goods.iter().copied())
        .filter(|&g| g >= m)
        .min()
        .ok_or_else(|| Error::Format("no dummy goods present; cannot identify a bidder".into()))?;
    debug_assert!(file.dummies > 0);

    let atoms = file
        .bids
        .iter()
        .filter(|b| b.goods.contains(&dummy))
        .map(|b| {
            let real: Vec<usize> = b.goods.iter().copied().filter(|&g| g < m).collect();
            Ok(XorAtom {
                bundle: Bundle::from_items(m, &real)?,
                price: if real.is_empty() { 0.0 } else { b.price },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let valuation = XorValuation::new(m, atoms)?;
    let config = AuctionConfig::new(m, observed_v_max(std::slice::from_ref(&valuation)))?;
    ValuationDataset::new(config, vec![valuation], SplitTag::Full)
}

/// Imports every file in `paths`, one valuation per file. Files without bids
/// contribute nothing.
pub fn load_cats_files(paths: &[impl AsRef<Path>]) -> Result<ValuationDataset> {
    let mut samples = Vec::new();
    let mut m = None;
    for p in paths {
        let ds = load_cats(p.as_ref())?;
        if let Some(expected) = m {
            if expected != ds.config.m {
                return Err(Error::Format(format!(
                    "{} has {} goods, earlier files had {expected}",
                    p.as_ref().display(),
                    ds.config.m
                )));
            }
        }
        m = Some(ds.config.m);
        samples.extend(ds.samples);
    }
    let m = m.ok_or_else(|| Error::Format("no CATS files given".into()))?;
    let config = AuctionConfig::new(m, observed_v_max(&samples))?;
    ValuationDataset::new(config, samples, SplitTag::Full)
}
