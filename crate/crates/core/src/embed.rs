//! Trainable feed-forward embedding net. Both branches of a sample pair run
//! through the same parameter set; gradients from the margin loss are
//! propagated back into the weights by a hand-written chain rule (no autodiff).
//!
//! Layers apply rectified-linear activations everywhere except the output,
//! which stays linear.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    layers: Vec<Layer>,
}

/// Per-layer activations retained by `forward` for the matching `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (index 0 is the raw feature vector).
    inputs: Vec<DVector<f64>>,
    /// Pre-activation of each layer.
    pre_activations: Vec<DVector<f64>>,
}

/// Gradients shaped exactly like the net's parameters.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub layers: Vec<Layer>,
}

/// A batch of labelled sample pairs. Labels are +1 for same-object pairs and
/// -1 otherwise; the sampler emits balanced batches.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pairs: Vec<(DVector<f64>, DVector<f64>, f64, usize)>,
}

impl EmbeddingNet {
    /// Build a net with the given layer widths, weights drawn uniformly from
    /// `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn init<R: Rng>(d_in: usize, hidden: &[usize], d_emb: usize, rng: &mut R) -> Self {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_emb);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-s..=s));
                Layer {
                    weight,
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        EmbeddingNet { layers }
    }

    /// Single linear layer passing features through unchanged.
    pub fn identity(d: usize) -> Self {
        EmbeddingNet {
            layers: vec![Layer {
                weight: DMatrix::identity(d, d),
                bias: DVector::zeros(d),
            }],
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty(), "net needs at least one layer");
        for w in layers.windows(2) {
            assert_eq!(
                w[0].weight.nrows(),
                w[1].weight.ncols(),
                "layer dimensions must chain"
            );
        }
        EmbeddingNet { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn d_emb(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    /// Evaluate the net, returning the embedding and the cache needed by
    /// `backward`.
    pub fn forward(&self, raw: &DVector<f64>) -> (DVector<f64>, ForwardCache) {
        assert_eq!(
            raw.len(),
            self.d_in(),
            "input dimension {} != d_in {}",
            raw.len(),
            self.d_in()
        );
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut x = raw.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(x.clone());
            let z = &layer.weight * &x + &layer.bias;
            pre_activations.push(z.clone());
            x = if i + 1 < n { z.map(relu) } else { z };
        }
        (
            x,
            ForwardCache {
                inputs,
                pre_activations,
            },
        )
    }

    /// Embedding without the cache.
    pub fn embed(&self, raw: &DVector<f64>) -> DVector<f64> {
        self.forward(raw).0
    }

    /// Chain-rule pass: given dL/d(embedding), produce dL/d(parameters).
    /// The cache must come from a `forward` call on this net.
    pub fn backward(&self, cache: &ForwardCache, output_gradient: &DVector<f64>) -> NetGradients {
        let n = self.layers.len();
        assert_eq!(cache.inputs.len(), n, "cache does not match net depth");
        assert_eq!(
            output_gradient.len(),
            self.d_emb(),
            "output gradient dimension mismatch"
        );
        for (layer, input) in self.layers.iter().zip(&cache.inputs) {
            assert_eq!(
                layer.weight.ncols(),
                input.len(),
                "cache does not match layer shapes"
            );
        }

        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                bias: DVector::zeros(l.bias.len()),
            })
            .collect();

        // Output layer is linear; hidden layers gate through relu'.
        let mut delta = output_gradient.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                let z = &cache.pre_activations[i];
                delta = DVector::from_fn(delta.len(), |r, _| {
                    if z[r] > 0.0 {
                        delta[r]
                    } else {
                        0.0
                    }
                });
            }
            grads[i].weight = &delta * cache.inputs[i].transpose();
            grads[i].bias = delta.clone();
            if i > 0 {
                delta = self.layers[i].weight.transpose() * &delta;
            }
        }
        NetGradients { layers: grads }
    }

    /// One SGD step: every parameter decremented by `beta * grad`.
    pub fn sgd_step(&mut self, grads: &NetGradients, beta: f64) {
        assert_eq!(grads.layers.len(), self.layers.len(), "gradient shape mismatch");
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight -= beta * &grad.weight;
            layer.bias -= beta * &grad.bias;
        }
    }

    pub fn accumulate(grads: &mut NetGradients, other: &NetGradients) {
        for (a, b) in grads.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Hinge argument `g = b − l·[1 − ‖xi−xj‖²_M]`; the loss and every gradient
/// are active only while `g > 0`.
pub fn hinge_argument(x_i: &DVector<f64>, x_j: &DVector<f64>, m_tot: &DMatrix<f64>, label: f64, b: f64) -> f64 {
    let d = x_i - x_j;
    let dist_sq = (d.transpose() * m_tot * &d)[(0, 0)];
    b - label * (1.0 - dist_sq)
}

/// Total pair gradient flowing into the shared sub-network:
/// `2·C·l·(M + Mᵀ)(xi − xj)` gated by the hinge. Returns the zero vector when
/// the hinge is inactive. The per-branch output gradients are `+g/2` for the
/// first sample and `−g/2` for the second.
pub fn pair_input_gradient(
    x_i: &DVector<f64>,
    x_j: &DVector<f64>,
    label: f64,
    m_tot: &DMatrix<f64>,
    b: f64,
    c: f64,
) -> DVector<f64> {
    assert_eq!(x_i.len(), x_j.len(), "pair dimension mismatch");
    assert_eq!(m_tot.nrows(), x_i.len(), "metric dimension mismatch");
    let sym_err = (m_tot - m_tot.transpose()).abs().max();
    assert!(
        sym_err <= 1e-9 * (1.0 + m_tot.abs().max()),
        "metric not symmetric (max asymmetry {sym_err:e})"
    );
    if hinge_argument(x_i, x_j, m_tot, label, b) <= 0.0 {
        return DVector::zeros(x_i.len());
    }
    let d = x_i - x_j;
    2.0 * c * label * ((m_tot + m_tot.transpose()) * d)
}

// --- checkpoint format -----------------------------------------------------

const NET_MAGIC: &str = "tracklink-net v1";

impl EmbeddingNet {
    /// Text checkpoint: dimensions plus row-major parameters. Values are
    /// written with shortest round-trip formatting, so reloads are exact at
    /// 64-bit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(NET_MAGIC);
        out.push('\n');
        let mut dims = vec![self.d_in()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        let dims_s: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("dims {}\n", dims_s.join(" ")));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "layer {i} {} {}\n",
                layer.weight.nrows(),
                layer.weight.ncols()
            ));
            for r in 0..layer.weight.nrows() {
                let row: Vec<String> = (0..layer.weight.ncols())
                    .map(|c| format!("{}", layer.weight[(r, c)]))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            let bias: Vec<String> = layer.bias.iter().map(|v| format!("{v}")).collect();
            out.push_str(&bias.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
        if magic != NET_MAGIC {
            return Err(parse_err(1, format!("bad magic {magic:?}")));
        }
        let (ln, dims_line) = lines
            .next()
            .ok_or_else(|| parse_err(2, "missing dims".into()))?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| parse_err(ln + 1, "expected dims line".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(ln + 1, format!("bad dim {t:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() < 2 {
            return Err(parse_err(ln + 1, "need at least two dims".into()));
        }

        let mut layers = Vec::new();
        for li in 0..dims.len() - 1 {
            let (ln, header) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("missing layer {li} header")))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "layer" {
                return Err(parse_err(ln + 1, format!("bad layer header {header:?}")));
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| parse_err(ln + 1, "bad row count".into()))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| parse_err(ln + 1, "bad col count".into()))?;
            if rows != dims[li + 1] || cols != dims[li] {
                return Err(parse_err(
                    ln + 1,
                    format!("layer {li} shape {rows}x{cols} does not chain with dims"),
                ));
            }
            let mut weight = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| parse_err(0, format!("missing weight row {r}")))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| parse_err(ln + 1, format!("bad value {t:?}")))
                    })
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(parse_err(ln + 1, format!("expected {cols} values")));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    weight[(r, c)] = v;
                }
            }
            let (ln, brow) = lines
                .next()
                .ok_or_else(|| parse_err(0, "missing bias row".into()))?;
            let bias: Vec<f64> = brow
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| parse_err(ln + 1, format!("bad value {t:?}")))
                })
                .collect::<Result<_>>()?;
            if bias.len() != rows {
                return Err(parse_err(ln + 1, format!("expected {rows} bias values")));
            }
            layers.push(Layer {
                weight,
                bias: DVector::from_vec(bias),
            });
        }
        Ok(EmbeddingNet::from_layers(layers))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec<R: Rng>(n: usize, r: &mut R) -> DVector<f64> {
        DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0))
    }

    /// Straight-line recomputation of the same arithmetic, kept separate from
    /// the implementation path.
    fn forward_oracle(net: &EmbeddingNet, raw: &DVector<f64>) -> Vec<f64> {
        let n_layers = net.layers().len();
        let mut x: Vec<f64> = raw.iter().copied().collect();
        for (li, layer) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; layer.weight.nrows()];
            for r in 0..layer.weight.nrows() {
                let mut acc = layer.bias[r];
                for c in 0..layer.weight.ncols() {
                    acc += layer.weight[(r, c)] * x[c];
                }
                out[r] = if li + 1 < n_layers { acc.max(0.0) } else { acc };
            }
            x = out;
        }
        x
    }

    #[test]
    fn zero_net_embeds_to_zero() {
        let net = EmbeddingNet::from_layers(vec![Layer {
            weight: DMatrix::zeros(3, 4),
            bias: DVector::zeros(3),
        }]);
        let out = net.embed(&DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]));
        assert_eq!(out, DVector::zeros(3));
    }

    #[test]
    fn identity_net_returns_input() {
        let net = EmbeddingNet::identity(5);
        let x = DVector::from_vec(vec![0.1, -0.7, 2.0, 0.0, -3.5]);
        assert_eq!(net.embed(&x), x);
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let mut r = rng(7);
        let net = EmbeddingNet::init(6, &[5, 4], 3, &mut r);
        for _ in 0..10 {
            let x = random_vec(6, &mut r);
            let got = net.embed(&x);
            let want = forward_oracle(&net, &x);
            for i in 0..3 {
                assert_relative_eq!(got[i], want[i], max_relative = 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "input dimension")]
    fn forward_rejects_wrong_dimension() {
        let net = EmbeddingNet::identity(4);
        net.embed(&DVector::zeros(3));
    }

    #[test]
    fn siamese_branches_share_weights() {
        let mut r = rng(3);
        let net = EmbeddingNet::init(4, &[6], 2, &mut r);
        let x = random_vec(4, &mut r);
        // Same vector, either argument position: identical embedding.
        assert_eq!(net.embed(&x), net.embed(&x.clone()));
    }

    #[test]
    fn backward_zero_output_gradient_gives_zero_grads() {
        let mut r = rng(11);
        let net = EmbeddingNet::init(4, &[3], 2, &mut r);
        let (_, cache) = net.forward(&random_vec(4, &mut r));
        let grads = net.backward(&cache, &DVector::zeros(2));
        for layer in &grads.layers {
            assert!(layer.weight.iter().all(|&v| v == 0.0));
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_linear_layer_weight_grad_is_outer_product() {
        let net = EmbeddingNet::from_layers(vec![Layer {
            weight: DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 2.0, 0.0, 1.0, -0.5]),
            bias: DVector::zeros(2),
        }]);
        let x = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let (_, cache) = net.forward(&x);
        let g = DVector::from_vec(vec![0.3, -0.7]);
        let grads = net.backward(&cache, &g);
        let outer = &g * x.transpose();
        assert_eq!(grads.layers[0].weight, outer);
        assert_eq!(grads.layers[0].bias, g);
    }

    /// Central finite differences of a scalar probe loss 0.5*||f(x)||^2
    /// through every parameter.
    #[test]
    fn two_layer_grads_match_finite_differences() {
        let mut r = rng(42);
        let net = EmbeddingNet::init(5, &[4], 3, &mut r);
        let x = random_vec(5, &mut r);

        let probe = |n: &EmbeddingNet| -> f64 {
            let y = n.embed(&x);
            0.5 * y.dot(&y)
        };

        let (y, cache) = net.forward(&x);
        let analytic = net.backward(&cache, &y); // dL/dy = y for this probe

        let eps = 1e-6;
        for li in 0..net.layers().len() {
            let w = &net.layers()[li].weight;
            for rr in 0..w.nrows() {
                for cc in 0..w.ncols() {
                    let mut plus = net.clone();
                    plus.layers[li].weight[(rr, cc)] += eps;
                    let mut minus = net.clone();
                    minus.layers[li].weight[(rr, cc)] -= eps;
                    let fd = (probe(&plus) - probe(&minus)) / (2.0 * eps);
                    let an = analytic.layers[li].weight[(rr, cc)];
                    assert_relative_eq!(an, fd, max_relative = 1e-4, epsilon = 1e-9);
                }
            }
            for bi in 0..net.layers()[li].bias.len() {
                let mut plus = net.clone();
                plus.layers[li].bias[bi] += eps;
                let mut minus = net.clone();
                minus.layers[li].bias[bi] -= eps;
                let fd = (probe(&plus) - probe(&minus)) / (2.0 * eps);
                let an = analytic.layers[li].bias[bi];
                assert_relative_eq!(an, fd, max_relative = 1e-4, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pair_gradient_zero_for_identical_inputs() {
        let m = DMatrix::identity(3, 3);
        let x = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        let g = pair_input_gradient(&x, &x.clone(), 1.0, &m, 0.5, 1.0);
        assert_eq!(g, DVector::zeros(3));
    }

    #[test]
    fn pair_gradient_zero_when_hinge_inactive() {
        // well-separated negative pair: -1 * (1 - 9) = 8 > b, so g <= 0
        let m = DMatrix::identity(1, 1);
        let xi = DVector::from_vec(vec![0.0]);
        let xj = DVector::from_vec(vec![3.0]);
        assert!(hinge_argument(&xi, &xj, &m, -1.0, 0.5) <= 0.0);
        let g = pair_input_gradient(&xi, &xj, -1.0, &m, 0.5, 1.0);
        assert_eq!(g, DVector::zeros(1));
    }

    /// Perturbing the pair symmetrically (xi + e, xj − e) moves the
    /// difference by 2e, which is the "sum of contributions from the two
    /// samples" the total gradient measures.
    #[test]
    fn pair_gradient_matches_symmetric_finite_differences() {
        let mut r = rng(99);
        for trial in 0..20 {
            let d = 4;
            let a = DMatrix::from_fn(d, d, |_, _| r.gen_range(-0.5..0.5));
            let m = &a * a.transpose(); // symmetric PSD
            let xi = random_vec(d, &mut r);
            let xj = random_vec(d, &mut r);
            let label = if trial % 2 == 0 { 1.0 } else { -1.0 };
            let (b, c) = (0.5, 0.7);
            if hinge_argument(&xi, &xj, &m, label, b) <= 1e-3 {
                continue; // keep away from the kink
            }
            let analytic = pair_input_gradient(&xi, &xj, label, &m, b, c);
            let loss = |xi: &DVector<f64>, xj: &DVector<f64>| -> f64 {
                c * hinge_argument(xi, xj, &m, label, b).max(0.0)
            };
            let eps = 1e-6;
            for k in 0..d {
                let mut e = DVector::zeros(d);
                e[k] = eps;
                let fd = (loss(&(&xi + &e), &(&xj - &e)) - loss(&(&xi - &e), &(&xj + &e)))
                    / (2.0 * eps);
                assert_relative_eq!(analytic[k], fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    #[should_panic(expected = "not symmetric")]
    fn pair_gradient_rejects_asymmetric_metric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        let xi = DVector::from_vec(vec![1.0, 0.0]);
        let xj = DVector::from_vec(vec![0.0, 1.0]);
        pair_input_gradient(&xi, &xj, 1.0, &m, 0.5, 1.0);
    }

    #[test]
    fn sgd_zero_grads_or_zero_beta_is_identity() {
        let mut r = rng(5);
        let net = EmbeddingNet::init(3, &[4], 2, &mut r);
        let zero_grads = NetGradients {
            layers: net
                .layers()
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        };
        let mut n1 = net.clone();
        n1.sgd_step(&zero_grads, 0.3);
        assert_eq!(n1, net);

        let (_, cache) = net.forward(&random_vec(3, &mut r));
        let grads = net.backward(&cache, &DVector::from_vec(vec![1.0, -1.0]));
        let mut n2 = net.clone();
        n2.sgd_step(&grads, 0.0);
        assert_eq!(n2, net);
    }

    #[test]
    fn one_step_decreases_active_pair_loss() {
        let mut r = rng(17);
        let net = EmbeddingNet::init(4, &[5], 3, &mut r);
        let m = DMatrix::identity(3, 3);
        let (b, c) = (0.5, 1.0);
        // same-object pair far apart: hinge active, loss positive
        let raw_i = random_vec(4, &mut r) * 2.0;
        let raw_j = -&raw_i;
        let loss_of = |n: &EmbeddingNet| -> f64 {
            let xi = n.embed(&raw_i);
            let xj = n.embed(&raw_j);
            c * hinge_argument(&xi, &xj, &m, 1.0, b).max(0.0)
        };
        let before = loss_of(&net);
        assert!(before > 0.0, "test needs an active pair");

        let (xi, cache_i) = net.forward(&raw_i);
        let (xj, cache_j) = net.forward(&raw_j);
        let total = pair_input_gradient(&xi, &xj, 1.0, &m, b, c);
        let half = 0.5 * &total;
        let mut grads = net.backward(&cache_i, &half);
        let gj = net.backward(&cache_j, &(-&half));
        EmbeddingNet::accumulate(&mut grads, &gj);
        let mut stepped = net.clone();
        stepped.sgd_step(&grads, 1e-3);
        assert!(loss_of(&stepped) < before);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut r = rng(23);
        let net = EmbeddingNet::init(7, &[5], 4, &mut r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let loaded = EmbeddingNet::load(&path).unwrap();
        assert_eq!(net, loaded);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        std::fs::write(&path, "something else\n").unwrap();
        assert!(EmbeddingNet::load(&path).is_err());
    }
}
