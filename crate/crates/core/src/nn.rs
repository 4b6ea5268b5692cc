//! Dense tanh networks with exact reverse-mode gradients, and Adam.
//!
//! Hidden layers use `tanh`, the output layer is affine. Batches are row
//! major: one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass: `activations[0]` is the input,
/// `activations[l]` the output of layer `l - 1` after its nonlinearity.
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(|l| l.weights.len() + l.bias.len()).sum());
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

impl DenseNet {
    /// Random network with layer widths `dims = [in, hidden.., out]`.
    /// Weights are `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "a network needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "a network needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("network has no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            Error::check_dim("layer bias", layer.out_dim(), layer.bias.len())?;
            if l > 0 {
                Error::check_dim("layer chain", layers[l - 1].out_dim(), layer.in_dim())?;
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("layer {l} holds non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::out_dim).unwrap_or(0)
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        Error::check_dim("flat parameters", self.param_count(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = it.next().unwrap_or_default();
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("network input", self.input_dim(), x.len())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(xs)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Error::check_dim("network input", self.input_dim(), xs.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = xs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weights.t()) + &layer.bias;
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, xs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        Error::check_dim("network input", self.input_dim(), xs.ncols())?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(xs.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = activations[l].dot(&layer.weights.t()) + &layer.bias;
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
            activations.push(h);
        }
        Ok(ForwardCache { activations })
    }

    /// Vector-Jacobian products for a cached batch: parameter gradients summed
    /// over the batch, and one input gradient row per sample.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let out = cache.output();
        Error::check_dim("upstream width", self.output_dim(), upstream.ncols())?;
        Error::check_dim("upstream rows", out.nrows(), upstream.nrows())?;

        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.activations[l];
            grads.push(Dense {
                weights: g.t().dot(input),
                bias: g.sum_axis(Axis(0)),
            });
            let mut g_in = g.dot(&self.layers[l].weights);
            if l > 0 {
                g_in.zip_mut_with(input, |gi, &h| *gi *= 1.0 - h * h);
            }
            g = g_in;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }

    pub fn backward_single(&self, x: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        Error::check_dim("network input", self.input_dim(), x.len())?;
        Error::check_dim("upstream width", self.output_dim(), upstream.len())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row view");
        let cache = self.forward_cached(xs)?;
        let (grads, input) = self.backward(&cache, up)?;
        Ok((grads, input.into_raw_vec_and_offset().0))
    }
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Serialize for DenseNet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let raw: Vec<RawLayer> = self
            .layers
            .iter()
            .map(|l| RawLayer {
                rows: l.out_dim(),
                cols: l.in_dim(),
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DenseNet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<RawLayer>::deserialize(deserializer)?;
        let layers = raw
            .into_iter()
            .map(|r| {
                Ok(Dense {
                    weights: Array2::from_shape_vec((r.rows, r.cols), r.weights)
                        .map_err(D::Error::custom)?,
                    bias: Array1::from(r.bias),
                })
            })
            .collect::<std::result::Result<Vec<_>, D::Error>>()?;
        DenseNet::from_layers(layers).map_err(D::Error::custom)
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
        }
    }

    pub fn param_count(&self) -> usize {
        self.first.len()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        Error::check_dim("adam parameters", self.first.len(), params.len())?;
        Error::check_dim("adam gradients", self.first.len(), grads.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that entries where both
    /// gradients vanish do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    Error::check_dim("gradient check", params.len(), analytic.len())?;
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + opts.step;
        let up = loss(&probe);
        probe[i] = orig - opts.step;
        let down = loss(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 4, 2]);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_layers(vec![Dense {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        }])
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn hand_computed_hidden_layer() {
        // h = tanh(2x + 0.5), y = 3h - 1 at x = 1.
        let net = DenseNet::from_layers(vec![
            Dense {
                weights: array![[2.0]],
                bias: array![0.5],
            },
            Dense {
                weights: array![[3.0]],
                bias: array![-1.0],
            },
        ])
        .unwrap();
        let y = net.forward(&[1.0]).unwrap()[0];
        let expected = 3.0 * 2.5f64.tanh() - 1.0;
        assert!((y - expected).abs() < 1e-15);
        assert!((y - 1.959_842_894_454_291).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_input_width() {
        let net = DenseNet::zeros(&[3, 2]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::stream(1, 0);
        let net = DenseNet::new(&[3, 5, 2], &mut r);
        let (g, gx) = net.backward_single(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&x| x == 0.0));
        assert!(gx.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_transpose_product() {
        let w = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        let net = DenseNet::from_layers(vec![Dense {
            weights: w.clone(),
            bias: Array1::zeros(2),
        }])
        .unwrap();
        let up = [0.7, -1.3];
        let (_, gx) = net.backward_single(&[0.3, 0.1, -0.2], &up).unwrap();
        let expected = w.t().dot(&array![0.7, -1.3]);
        for (a, b) in gx.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn check_net_gradients(dims: &[usize], seed: u64) {
        let mut r = rng::stream(seed, 0);
        let net = DenseNet::new(dims, &mut r);
        let x: Vec<f64> = (0..dims[0]).map(|_| r.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..*dims.last().unwrap())
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let scalar = |net: &DenseNet, x: &[f64]| -> f64 {
            net.forward(x)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (g, gx) = net.backward_single(&x, &up).unwrap();

        let params = net.flat_params();
        let mut probe = net.clone();
        let report = finite_diff_check(
            |p| {
                probe.set_flat_params(p).unwrap();
                scalar(&probe, &x)
            },
            &params,
            &g.flat(),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "parameter gradients: {report:?}");

        let report = finite_diff_check(
            |xp| scalar(&net, xp),
            &x,
            &gx,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "input gradients: {report:?}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_net_gradients(&[3, 7, 5, 4], 3);
        check_net_gradients(&[1, 8, 8, 1], 4);
    }

    #[test]
    fn backward_matches_finite_differences_full_width() {
        check_net_gradients(&[4, 128, 128, 128, 16], 5);
    }

    #[test]
    fn batch_backward_sums_per_sample_gradients() {
        let mut r = rng::stream(8, 0);
        let net = DenseNet::new(&[2, 6, 3], &mut r);
        let xs = array![[0.1, 0.4], [-0.7, 0.2]];
        let ups = array![[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]];
        let cache = net.forward_cached(xs.view()).unwrap();
        let (g, gx) = net.backward(&cache, ups.view()).unwrap();
        let (mut g0, gx0) = net
            .backward_single(&[0.1, 0.4], &[1.0, 0.0, -1.0])
            .unwrap();
        let (g1, gx1) = net.backward_single(&[-0.7, 0.2], &[0.5, 0.5, 0.5]).unwrap();
        g0.add_assign(&g1);
        for (a, b) in g.flat().iter().zip(g0.flat()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((gx[[0, 1]] - gx0[1]).abs() < 1e-15);
        assert!((gx[[1, 0]] - gx1[0]).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = Adam::new(0.3, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // m_hat = g, v_hat = g^2 after one step, so the update is lr * g / (|g| + eps).
        let mut adam = Adam::new(0.3, 1);
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.3 / (1.0 + 1e-8)).abs() < 1e-15);
        adam.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 2.0 * 0.3 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut adam = Adam::new(0.1, 2);
        assert!(adam.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = Adam::new(0.05, 2);
            let mut p = vec![1.0, 1.0];
            for i in 0..50 {
                let g = [p[0] * 2.0 + i as f64 * 0.01, (p[1] - 3.0).sin()];
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        let p = vec![0.3, -1.2, 2.5, 0.0];
        let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let report = finite_diff_check(
            |q| q.iter().map(|x| x * x).sum(),
            &p,
            &g,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let mut r = rng::stream(2, 0);
        let net = DenseNet::new(&[3, 5, 9], &mut r);
        let text = serde_json::to_string(&net).unwrap();
        let back: DenseNet = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn backward_matches_fd_random_shapes(seed in 0u64..1000, a in 1usize..5, b in 1usize..12, c in 1usize..6) {
            check_net_gradients(&[a, b, b, c], seed);
        }

        #[test]
        fn forward_is_lipschitz_in_frobenius_norms(seed in 0u64..1000) {
            let mut r = rng::stream(seed, 0);
            let net = DenseNet::new(&[3, 16, 16, 2], &mut r);
            let bound: f64 = net
                .layers()
                .iter()
                .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>().sqrt())
                .product();
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let dx = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let fx = net.forward(&x).unwrap();
            let fy = net.forward(&y).unwrap();
            let dy = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dy <= bound * dx + 1e-12);
        }
    }
}
