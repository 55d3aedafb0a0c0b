//! Neural approximators: the learned feature map Y-hat(q, q'; theta_Y) and
//! the surrogate disturbance networks f-hat(q, q'; xi).
//!
//! Both are plain tanh MLPs over the 6-dimensional state (q, q'). The
//! forward pass is generic over [`Scalar`] and evaluates each layer in
//! three sweeps (dots, bias adds, activations) so that on a tape every
//! intermediate vector occupies contiguous nodes and the dot products fuse.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layer widths, input first: [6, 32, 32, out].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture(pub Vec<usize>);

impl Architecture {
    /// Default feature-map architecture: 6 -> 32 -> 32 -> 3 d.
    pub fn feature_default(d: usize) -> Architecture {
        Architecture(vec![6, 32, 32, 3 * d])
    }

    /// Default surrogate architecture: 6 -> 32 -> 32 -> 3.
    pub fn surrogate_default() -> Architecture {
        Architecture(vec![6, 32, 32, 3])
    }

    pub fn n_params(&self) -> usize {
        self.0
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.0[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.0.last().unwrap()
    }
}

/// MLP weights and biases, flattened layer by layer (row-major weight
/// matrix, then biases).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub data: Vec<f64>,
    pub seed: u64,
    /// Feature columns for feature maps; 0 for surrogate nets.
    pub d: usize,
}

impl MlpParams {
    pub fn zeros(arch: Architecture, d: usize) -> MlpParams {
        let n = arch.n_params();
        MlpParams {
            arch,
            data: vec![0.0; n],
            seed: 0,
            d,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Scaled-uniform initialization: weights uniform on
/// +-sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init_mlp(seed: u64, arch: Architecture, d: usize) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(arch.n_params());
    for w in arch.0.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            data.push(rng.gen_range(-bound..bound));
        }
        for _ in 0..fan_out {
            data.push(0.0);
        }
    }
    MlpParams {
        arch,
        data,
        seed,
        d,
    }
}

/// Forward pass: tanh on every hidden layer, linear output. `params` is the
/// flattened parameter vector (any scalar), `input` the 6-vector (q, q').
pub fn mlp_forward<S: Scalar>(arch: &Architecture, params: &[S], input: &[S]) -> Vec<S> {
    assert_eq!(input.len(), arch.input_dim(), "mlp input dimension");
    assert_eq!(params.len(), arch.n_params(), "mlp parameter count");
    let mut h: Vec<S> = input.to_vec();
    let mut off = 0;
    let n_layers = arch.0.len() - 1;
    for l in 0..n_layers {
        let (nin, nout) = (arch.0[l], arch.0[l + 1]);
        let w = &params[off..off + nin * nout];
        let b = &params[off + nin * nout..off + nin * nout + nout];
        off += nin * nout + nout;
        let dots: Vec<S> = (0..nout)
            .map(|r| S::dot(&w[r * nin..(r + 1) * nin], &h))
            .collect();
        let pre: Vec<S> = dots.iter().zip(b).map(|(&x, &bi)| x + bi).collect();
        h = if l + 1 < n_layers {
            pre.iter().map(|&x| x.tanh()).collect()
        } else {
            pre
        };
    }
    h
}

/// Y-hat(q, q'): the MLP output reshaped row-major to 3 rows of d columns.
/// Row slices of the returned matrix are contiguous on the tape.
pub fn feature_net<S: Scalar>(arch: &Architecture, params: &[S], state6: &[S], d: usize) -> Result<Vec<Vec<S>>> {
    if arch.output_dim() != 3 * d {
        return Err(Error::DimensionMismatch(format!(
            "feature net outputs {} values, need 3 x {d}",
            arch.output_dim()
        )));
    }
    let out = mlp_forward(arch, params, state6);
    Ok((0..3).map(|i| out[i * d..(i + 1) * d].to_vec()).collect())
}

/// f-hat(q, q'): 3-vector surrogate disturbance.
pub fn surrogate_net<S: Scalar>(arch: &Architecture, params: &[S], state6: &[S]) -> Result<[S; 3]> {
    if arch.output_dim() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "surrogate net outputs {} values, need 3",
            arch.output_dim()
        )));
    }
    let out = mlp_forward(arch, params, state6);
    Ok([out[0], out[1], out[2]])
}

/// Bound on any feature-map entry from the tanh-bounded last hidden layer:
/// max row L1 norm of the output weights plus the largest output bias.
pub fn output_bound(params: &MlpParams) -> f64 {
    let arch = &params.arch.0;
    let n = arch.len();
    let (nin, nout) = (arch[n - 2], arch[n - 1]);
    let off = params.arch.n_params() - nin * nout - nout;
    let w = &params.data[off..off + nin * nout];
    let b = &params.data[off + nin * nout..];
    let mut worst = 0.0f64;
    for r in 0..nout {
        let row_l1: f64 = w[r * nin..(r + 1) * nin].iter().map(|x| x.abs()).sum();
        worst = worst.max(row_l1 + b[r].abs());
    }
    worst
}

/// On-disk model document: per-layer arrays plus metadata.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    architecture: Vec<usize>,
    layers: Vec<LayerFile>,
    seed: u64,
    d: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<f64>,
    b: Vec<f64>,
}

pub fn to_json(params: &MlpParams) -> Result<String> {
    let mut layers = Vec::new();
    let mut off = 0;
    for w in params.arch.0.windows(2) {
        let (nin, nout) = (w[0], w[1]);
        layers.push(LayerFile {
            w: params.data[off..off + nin * nout].to_vec(),
            b: params.data[off + nin * nout..off + nin * nout + nout].to_vec(),
        });
        off += nin * nout + nout;
    }
    let doc = ModelFile {
        architecture: params.arch.0.clone(),
        layers,
        seed: params.seed,
        d: params.d,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<MlpParams> {
    let doc: ModelFile = serde_json::from_str(text)?;
    let arch = Architecture(doc.architecture);
    let mut data = Vec::with_capacity(arch.n_params());
    if doc.layers.len() + 1 != arch.0.len() {
        return Err(Error::DimensionMismatch(format!(
            "model file has {} layers for architecture {:?}",
            doc.layers.len(),
            arch.0
        )));
    }
    for (layer, w) in doc.layers.iter().zip(arch.0.windows(2)) {
        if layer.w.len() != w[0] * w[1] || layer.b.len() != w[1] {
            return Err(Error::DimensionMismatch(format!(
                "layer sized {}x{} has {} weights, {} biases",
                w[0],
                w[1],
                layer.w.len(),
                layer.b.len()
            )));
        }
        data.extend_from_slice(&layer.w);
        data.extend_from_slice(&layer.b);
    }
    let params = MlpParams {
        arch,
        data,
        seed: doc.seed,
        d: doc.d,
    };
    if !params.all_finite() {
        return Err(Error::NonFinite("model file contains non-finite weights".into()));
    }
    Ok(params)
}
