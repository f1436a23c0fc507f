//! Batch-attention head.
//!
//! Queries and keys come from two independent nonlinear paths, each
//! `LayerNorm -> [Linear -> ReLU -> Dropout] x depth -> Linear`. Attention is
//! taken across the rows of the minibatch:
//!
//! ```text
//! logits = Q Kᵀ / √d
//! attn   = softmax_rows(logits)
//! F̂      = attn · X            (clustered features, convex combinations of rows)
//! aux    = F̂ W_a + b_a
//! ```
//!
//! There is no value projection: the clustered features mix the raw inputs.
//! Gradients are computed by hand; `backward` is exact for the dropout mask
//! realized in the forward pass.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::dataio::rng_for;
use crate::error::{Error, Result};
use crate::linalg::softmax_rows;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClustererConfig {
    pub d: usize,
    /// Hidden `Linear -> ReLU -> Dropout` blocks per path.
    pub depth: usize,
    pub dropout_rate: f64,
}

impl ClustererConfig {
    pub fn new(d: usize, dropout_rate: f64) -> Self {
        Self {
            d,
            depth: 1,
            dropout_rate,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("clusterer dimension must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let d = self.d;
        let linear = d * d + d;
        let path = 2 * d + (self.depth + 1) * linear;
        2 * path + linear
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(d: usize) -> Self {
        Self {
            weight: Array2::zeros((d, d)),
            bias: Array1::zeros(d),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub norm: LayerNorm,
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl Path {
    fn zeros(d: usize, depth: usize) -> Self {
        Self {
            norm: LayerNorm {
                gain: Array1::zeros(d),
                bias: Array1::zeros(d),
            },
            hidden: (0..depth).map(|_| Linear::zeros(d)).collect(),
            output: Linear::zeros(d),
        }
    }
}

/// Every trainable tensor of the head. Also used for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub q_path: Path,
    pub k_path: Path,
    pub aux_head: Linear,
}

impl Weights {
    pub fn zeros(config: &ClustererConfig) -> Self {
        Self {
            q_path: Path::zeros(config.d, config.depth),
            k_path: Path::zeros(config.d, config.depth),
            aux_head: Linear::zeros(config.d),
        }
    }

    /// Tensors in checkpoint order: q path (norm gain, norm bias, each hidden
    /// weight and bias, output weight and bias), then k path likewise, then
    /// the auxiliary head weight and bias.
    pub fn slices(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, p) in [("q", &self.q_path), ("k", &self.k_path)] {
            out.push((format!("{name}.norm.gain"), p.norm.gain.as_slice().unwrap()));
            out.push((format!("{name}.norm.bias"), p.norm.bias.as_slice().unwrap()));
            for (i, l) in p.hidden.iter().enumerate() {
                out.push((format!("{name}.hidden{i}.weight"), l.weight.as_slice().unwrap()));
                out.push((format!("{name}.hidden{i}.bias"), l.bias.as_slice().unwrap()));
            }
            out.push((format!("{name}.output.weight"), p.output.weight.as_slice().unwrap()));
            out.push((format!("{name}.output.bias"), p.output.bias.as_slice().unwrap()));
        }
        out.push(("aux.weight".into(), self.aux_head.weight.as_slice().unwrap()));
        out.push(("aux.bias".into(), self.aux_head.bias.as_slice().unwrap()));
        out
    }

    /// Mutable tensors in the same order as [`Weights::slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for p in [&mut self.q_path, &mut self.k_path] {
            out.push(p.norm.gain.as_slice_mut().unwrap());
            out.push(p.norm.bias.as_slice_mut().unwrap());
            for l in p.hidden.iter_mut() {
                out.push(l.weight.as_slice_mut().unwrap());
                out.push(l.bias.as_slice_mut().unwrap());
            }
            out.push(p.output.weight.as_slice_mut().unwrap());
            out.push(p.output.bias.as_slice_mut().unwrap());
        }
        out.push(self.aux_head.weight.as_slice_mut().unwrap());
        out.push(self.aux_head.bias.as_slice_mut().unwrap());
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices()
            .into_iter()
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Contract(format!(
                "flat vector has {} values, weights need {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut offset = index;
        for (_, s) in self.slices() {
            if offset < s.len() {
                return s[offset];
            }
            offset -= s.len();
        }
        panic!("flat index {index} out of range")
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for s in self.slices_mut() {
            if offset < s.len() {
                s[offset] = value;
                return;
            }
            offset -= s.len();
        }
        panic!("flat index {index} out of range")
    }

    /// Name of the tensor holding flat `index`, with the offset inside it.
    pub fn locate(&self, index: usize) -> Option<(String, usize)> {
        let mut offset = index;
        for (name, s) in self.slices() {
            if offset < s.len() {
                return Some((name, offset));
            }
            offset -= s.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, PartialEq)]
pub struct ClustererParams {
    pub config: ClustererConfig,
    pub weights: Weights,
}

impl fmt::Debug for ClustererParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClustererParams")
            .field("config", &self.config)
            .field("parameters", &self.weights.len())
            .finish()
    }
}

/// Linear weights ~ U(-√(1/d), √(1/d)), biases 0, norm gain 1 and bias 0.
pub fn init_params(seed: u64, config: ClustererConfig) -> Result<ClustererParams> {
    config.validate()?;
    let d = config.d;
    let bound = (1.0 / d as f64).sqrt();
    let mut rng = rng_for(seed, 10);
    let mut weights = Weights::zeros(&config);
    let mut fill = |l: &mut Linear| {
        l.weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..bound));
    };
    for p in [&mut weights.q_path, &mut weights.k_path] {
        p.norm.gain.fill(1.0);
        p.hidden.iter_mut().for_each(&mut fill);
        fill(&mut p.output);
    }
    fill(&mut weights.aux_head);
    Ok(ClustererParams { config, weights })
}

impl ClustererParams {
    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Copy whose every parameter has been rounded through `f32`, i.e. the
    /// exact values a checkpoint stores.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for s in out.weights.slices_mut() {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out.config.dropout_rate = self.config.dropout_rate as f32 as f64;
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PathCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// Input to each linear layer, hidden layers first, output last.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    /// Scaled keep mask per hidden layer, when dropout was applied.
    masks: Vec<Option<Array2<f64>>>,
}

/// Result of a forward pass, with everything `backward` needs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchForward {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub logits: Array2<f64>,
    pub attn: Array2<f64>,
    pub clustered: Array2<f64>,
    pub aux_out: Array2<f64>,
    input: Array2<f64>,
    q_cache: PathCache,
    k_cache: PathCache,
}

impl BatchForward {
    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.input
    }
}

fn ensure_finite(m: &Array2<f64>, layer: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerics(layer, "non-finite activation"))
    }
}

fn layer_norm(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
        *s = inv;
    }
    (xhat, inv_std)
}

fn path_forward(
    path: &Path,
    x: ArrayView2<'_, f64>,
    dropout: Option<(f64, u64)>,
    name: &str,
) -> Result<(Array2<f64>, PathCache)> {
    let (xhat, inv_std) = layer_norm(x);
    let mut h = &xhat * &path.norm.gain + &path.norm.bias;
    ensure_finite(&h, &format!("{name}.norm"))?;
    let mut inputs = Vec::with_capacity(path.hidden.len() + 1);
    let mut pre = Vec::with_capacity(path.hidden.len());
    let mut masks = Vec::with_capacity(path.hidden.len());
    for (i, layer) in path.hidden.iter().enumerate() {
        let z = layer.apply(&h);
        ensure_finite(&z, &format!("{name}.hidden{i}"))?;
        let mut a = z.mapv(|v| v.max(0.0));
        let mask = dropout.map(|(rate, seed)| {
            let keep = 1.0 - rate;
            let mut rng = rng_for(seed, i as u64);
            Array2::from_shape_fn(a.dim(), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        });
        if let Some(m) = &mask {
            a *= m;
        }
        inputs.push(std::mem::replace(&mut h, a));
        pre.push(z);
        masks.push(mask);
    }
    let out = path.output.apply(&h);
    ensure_finite(&out, &format!("{name}.output"))?;
    inputs.push(h);
    Ok((
        out,
        PathCache {
            xhat,
            inv_std,
            inputs,
            pre,
            masks,
        },
    ))
}

/// Query/key projections only, in evaluation mode.
pub fn project(params: &ClustererParams, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    check_input(params, x)?;
    let (q, _) = path_forward(&params.weights.q_path, x, None, "q")?;
    let (k, _) = path_forward(&params.weights.k_path, x, None, "k")?;
    Ok((q, k))
}

fn check_input(params: &ClustererParams, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != params.d() {
        return Err(Error::Contract(format!(
            "batch has {} columns, clusterer expects {}",
            x.ncols(),
            params.d()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numerics("input", "non-finite batch value"));
    }
    Ok(())
}

/// Runs the head on a batch. Dropout applies only when `training` is set
/// and the configured rate is positive; `rng_seed` fixes its masks.
pub fn forward(
    params: &ClustererParams,
    x: ArrayView2<'_, f64>,
    training: bool,
    rng_seed: u64,
) -> Result<BatchForward> {
    check_input(params, x)?;
    let rate = params.config.dropout_rate;
    let dropout = |stream: u64| {
        (training && rate > 0.0).then(|| (rate, rng_for(rng_seed, stream).random::<u64>()))
    };
    let w = &params.weights;
    let (q, q_cache) = path_forward(&w.q_path, x, dropout(100), "q")?;
    let (k, k_cache) = path_forward(&w.k_path, x, dropout(200), "k")?;
    let scale = (params.d() as f64).sqrt();
    let logits = q.dot(&k.t()) / scale;
    ensure_finite(&logits, "logits")?;
    let attn = softmax_rows(logits.view());
    ensure_finite(&attn, "attention")?;
    let clustered = attn.dot(&x);
    let aux_out = w.aux_head.apply(&clustered);
    ensure_finite(&aux_out, "aux_head")?;
    Ok(BatchForward {
        q,
        k,
        logits,
        attn,
        clustered,
        aux_out,
        input: x.to_owned(),
        q_cache,
        k_cache,
    })
}

/// Upstream gradients flowing into a forward pass.
///
/// `logits` is the gradient with respect to the forward's own `Q Kᵀ/√d`
/// (contrastive term); `q` and `k` carry gradients that reached the
/// projections through other routes, such as cross terms against an
/// augmented batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Upstream {
    pub logits: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub aux_out: Array2<f64>,
}

impl Upstream {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            logits: Array2::zeros((n, n)),
            q: Array2::zeros((n, d)),
            k: Array2::zeros((n, d)),
            aux_out: Array2::zeros((n, d)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub weights: Weights,
    /// Gradient with respect to the input batch (diagnostics only).
    pub input: Array2<f64>,
}

/// Backward pass for the head's own logits and auxiliary output.
pub fn backward(
    params: &ClustererParams,
    fwd: &BatchForward,
    grad_logits: ArrayView2<'_, f64>,
    grad_aux_out: ArrayView2<'_, f64>,
) -> Result<ParamGradients> {
    let n = fwd.n();
    let d = params.d();
    let mut up = Upstream::zeros(n, d);
    if grad_logits.dim() != (n, n) || grad_aux_out.dim() != (n, d) {
        return Err(Error::Contract(format!(
            "upstream gradients {:?}/{:?} do not match batch {n}x{d}",
            grad_logits.dim(),
            grad_aux_out.dim()
        )));
    }
    up.logits.assign(&grad_logits);
    up.aux_out.assign(&grad_aux_out);
    backward_upstream(params, fwd, &up)
}

fn path_backward(
    path: &Path,
    cache: &PathCache,
    grad_out: Array2<f64>,
    grads: &mut Path,
) -> Array2<f64> {
    let last = cache.inputs.len() - 1;
    grads.output.weight = cache.inputs[last].t().dot(&grad_out);
    grads.output.bias = grad_out.sum_axis(Axis(0));
    let mut g = grad_out.dot(&path.output.weight.t());
    for i in (0..path.hidden.len()).rev() {
        if let Some(mask) = &cache.masks[i] {
            g *= mask;
        }
        Zip::from(&mut g)
            .and(&cache.pre[i])
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
        grads.hidden[i].weight = cache.inputs[i].t().dot(&g);
        grads.hidden[i].bias = g.sum_axis(Axis(0));
        g = g.dot(&path.hidden[i].weight.t());
    }
    grads.norm.gain = (&g * &cache.xhat).sum_axis(Axis(0));
    grads.norm.bias = g.sum_axis(Axis(0));
    let mut gx = g * &path.norm.gain;
    let d = gx.ncols() as f64;
    for ((mut row, xhat), &inv) in gx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xhat) / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = inv * (*g - mean_g - xh * mean_gx));
    }
    gx
}

/// General backward pass.
pub fn backward_upstream(
    params: &ClustererParams,
    fwd: &BatchForward,
    up: &Upstream,
) -> Result<ParamGradients> {
    let n = fwd.n();
    let d = params.d();
    let shapes_ok = up.logits.dim() == (n, n)
        && up.q.dim() == (n, d)
        && up.k.dim() == (n, d)
        && up.aux_out.dim() == (n, d)
        && fwd.q.dim() == (n, d)
        && fwd.q_cache.inputs.len() == params.config.depth + 1;
    if !shapes_ok {
        return Err(Error::Contract(
            "upstream gradient or cache shapes do not match the parameters".into(),
        ));
    }
    let w = &params.weights;
    let mut grads = Weights::zeros(&params.config);

    // aux head and clustered features
    grads.aux_head.weight = fwd.clustered.t().dot(&up.aux_out);
    grads.aux_head.bias = up.aux_out.sum_axis(Axis(0));
    let g_clustered = up.aux_out.dot(&w.aux_head.weight.t());
    let mut g_input = fwd.attn.t().dot(&g_clustered);
    let g_attn = g_clustered.dot(&fwd.input.t());

    // softmax backward, row by row
    let mut g_logits = up.logits.clone();
    for ((mut gl, a), ga) in g_logits
        .axis_iter_mut(Axis(0))
        .zip(fwd.attn.axis_iter(Axis(0)))
        .zip(g_attn.axis_iter(Axis(0)))
    {
        let inner = a.dot(&ga);
        Zip::from(&mut gl)
            .and(&a)
            .and(&ga)
            .for_each(|gl, &a, &ga| *gl += a * (ga - inner));
    }

    let scale = (d as f64).sqrt();
    let g_q = g_logits.dot(&fwd.k) / scale + &up.q;
    let g_k = g_logits.t().dot(&fwd.q) / scale + &up.k;
    g_input += &path_backward(&w.q_path, &fwd.q_cache, g_q, &mut grads.q_path);
    g_input += &path_backward(&w.k_path, &fwd.k_cache, g_k, &mut grads.k_path);

    if !grads.all_finite() {
        return Err(Error::numerics("backward", "non-finite gradient"));
    }
    Ok(ParamGradients {
        weights: grads,
        input: g_input,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters: magic `EVCK`, then little-endian `u32` version,
/// `u32` d, `u32` depth, `f32` dropout rate, `u64` parameter count and the
/// flat `f32` parameter vector in [`Weights::slices`] order.
pub fn encode_checkpoint(params: &ClustererParams) -> Vec<u8> {
    let flat = params.weights.flatten();
    let mut out = Vec::with_capacity(28 + flat.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.config.d as u32).to_le_bytes());
    out.extend_from_slice(&(params.config.depth as u32).to_le_bytes());
    out.extend_from_slice(&(params.config.dropout_rate as f32).to_le_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ClustererParams> {
    let header = 4 + 4 + 4 + 4 + 4 + 8;
    if bytes.len() < header || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a clusterer checkpoint".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let d = u32_at(8) as usize;
    let depth = u32_at(12) as usize;
    let dropout_rate = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let config = ClustererConfig {
        d,
        depth,
        dropout_rate,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    if count != config.parameter_count() || bytes.len() != header + count * 4 {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters in {} bytes, d={d} depth={depth} needs {}",
            bytes.len(),
            config.parameter_count()
        )));
    }
    let flat: Vec<f64> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut weights = Weights::zeros(&config);
    weights.assign_flat(&flat)?;
    if !weights.all_finite() {
        return Err(Error::Data("checkpoint contains non-finite parameters".into()));
    }
    Ok(ClustererParams { config, weights })
}

pub fn save_checkpoint(path: &std::path::Path, params: &ClustererParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ClustererParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn random_batch(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = rng_for(seed, 77);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ClustererConfig::new(4, 0.1);
        assert_eq!(init_params(1, cfg).unwrap(), init_params(1, cfg).unwrap());
        assert_ne!(init_params(2, cfg).unwrap(), init_params(1, cfg).unwrap());
    }

    #[test]
    fn init_conventions() {
        let p = init_params(9, ClustererConfig::new(6, 0.1)).unwrap();
        let bound = (1.0f64 / 6.0).sqrt();
        for path in [&p.weights.q_path, &p.weights.k_path] {
            assert!(path.norm.gain.iter().all(|&g| g == 1.0));
            assert!(path.norm.bias.iter().all(|&b| b == 0.0));
            assert!(path.output.bias.iter().all(|&b| b == 0.0));
            assert!(path.output.weight.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn parameter_count_at_default_width() {
        let cfg = ClustererConfig::new(384, 0.1);
        let p = init_params(1, cfg).unwrap();
        assert_eq!(p.weights.len(), cfg.parameter_count());
        assert_eq!(cfg.parameter_count(), 740_736);
        assert_eq!(ClustererConfig::new(384, 0.1).with_depth(2).parameter_count(), 1_036_416);
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let p = init_params(3, ClustererConfig::new(5, 0.0)).unwrap();
        let row = array![0.3, -1.0, 2.0, 0.5, 0.1];
        let x = ndarray::stack![Axis(0), row, row];
        let f = forward(&p, x.view(), false, 0).unwrap();
        assert_eq!(f.logits[[0, 0]], f.logits[[0, 1]]);
        for a in f.attn.iter() {
            assert!((a - 0.5).abs() < 1e-15);
        }
        for c in 0..5 {
            assert!((f.clustered[[0, c]] - row[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let p = init_params(3, ClustererConfig::new(8, 0.3)).unwrap();
        let x = random_batch(1, 5, 8);
        assert_eq!(forward(&p, x.view(), false, 1).unwrap(), forward(&p, x.view(), false, 2).unwrap());
        let a = forward(&p, x.view(), true, 1).unwrap();
        let b = forward(&p, x.view(), true, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.q, forward(&p, x.view(), false, 1).unwrap().q);
    }

    #[test]
    fn zero_dropout_training_matches_eval_bitwise() {
        let p = init_params(3, ClustererConfig::new(8, 0.0)).unwrap();
        let x = random_batch(2, 6, 8);
        assert_eq!(forward(&p, x.view(), true, 5).unwrap(), forward(&p, x.view(), false, 0).unwrap());
    }

    #[test]
    fn clustered_features_within_coordinate_hull() {
        for seed in 0..20 {
            let p = init_params(seed, ClustererConfig::new(8, 0.0)).unwrap();
            let x = random_batch(seed + 100, 5, 8);
            let f = forward(&p, x.view(), false, 0).unwrap();
            for r in f.attn.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
            for c in 0..8 {
                let col = x.column(c);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..5 {
                    let v = f.clustered[[i, c]];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_is_scale_invariant() {
        let p = init_params(4, ClustererConfig::new(8, 0.0)).unwrap();
        let x = random_batch(3, 3, 8);
        let mut scaled = x.clone();
        scaled.row_mut(1).mapv_inplace(|v| v * 7.5);
        let (q1, k1) = project(&p, x.view()).unwrap();
        let (q2, k2) = project(&p, scaled.view()).unwrap();
        // exact up to the eps inside the variance
        for c in 0..8 {
            assert!((q1[[1, c]] - q2[[1, c]]).abs() < 1e-4);
            assert!((k1[[1, c]] - k2[[1, c]]).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(5, ClustererConfig::new(6, 0.2)).unwrap();
        let x = random_batch(4, 4, 6);
        let f = forward(&p, x.view(), true, 9).unwrap();
        let g = backward(&p, &f, Array2::zeros((4, 4)).view(), Array2::zeros((4, 6)).view()).unwrap();
        assert!(g.weights.flatten().iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let p = init_params(5, ClustererConfig::new(6, 0.0)).unwrap();
        let f = forward(&p, random_batch(4, 4, 6).view(), false, 0).unwrap();
        let r = backward(&p, &f, Array2::zeros((3, 3)).view(), Array2::zeros((4, 6)).view());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn forward_rejects_wrong_width_and_nan() {
        let p = init_params(5, ClustererConfig::new(6, 0.0)).unwrap();
        assert!(matches!(
            forward(&p, Array2::zeros((3, 5)).view(), false, 0),
            Err(Error::Contract(_))
        ));
        let mut x = Array2::zeros((3, 6));
        x[[1, 1]] = f64::NAN;
        assert!(matches!(forward(&p, x.view(), false, 0), Err(Error::Numerics { .. })));
    }

    // Random linear functional of every output, differentiated both ways.
    fn probe_loss(p: &ClustererParams, x: &Array2<f64>, wl: &Array2<f64>, wa: &Array2<f64>) -> f64 {
        let f = forward(p, x.view(), false, 0).unwrap();
        (&f.logits * wl).sum() + (&f.aux_out * wa).sum()
    }

    #[test]
    fn gradients_match_finite_differences_with_depth_two() {
        let cfg = ClustererConfig::new(5, 0.0).with_depth(2);
        let p = init_params(11, cfg).unwrap();
        let x = random_batch(12, 4, 5);
        let wl = random_batch(13, 4, 4);
        let wa = random_batch(14, 4, 5);
        let f = forward(&p, x.view(), false, 0).unwrap();
        let g = backward(&p, &f, wl.view(), wa.view()).unwrap();
        let flat = g.weights.flatten();
        let eps = 1e-5;
        for idx in (0..flat.len()).step_by(7) {
            let mut plus = p.clone();
            plus.weights.set_flat(idx, p.weights.get_flat(idx) + eps);
            let mut minus = p.clone();
            minus.weights.set_flat(idx, p.weights.get_flat(idx) - eps);
            let fd = (probe_loss(&plus, &x, &wl, &wa) - probe_loss(&minus, &x, &wl, &wa)) / (2.0 * eps);
            let tol = 1e-6f64.max(1e-5 * fd.abs().max(flat[idx].abs()));
            assert!(
                (fd - flat[idx]).abs() <= tol,
                "{:?}: fd {fd} vs analytic {}",
                p.weights.locate(idx),
                flat[idx]
            );
        }
        // input gradient too
        for (i, c) in [(0, 0), (2, 3), (3, 4)] {
            let mut xp = x.clone();
            xp[[i, c]] += eps;
            let mut xm = x.clone();
            xm[[i, c]] -= eps;
            let fd = (probe_loss(&p, &xp, &wl, &wa) - probe_loss(&p, &xm, &wl, &wa)) / (2.0 * eps);
            assert!((fd - g.input[[i, c]]).abs() <= 1e-6f64.max(1e-5 * fd.abs()));
        }
    }

    #[test]
    fn dropout_gradients_are_exact_for_realized_mask() {
        let p = init_params(21, ClustererConfig::new(5, 0.4)).unwrap();
        let x = random_batch(22, 4, 5);
        let wl = random_batch(23, 4, 4);
        let wa = random_batch(24, 4, 5);
        let loss = |p: &ClustererParams| {
            let f = forward(p, x.view(), true, 42).unwrap();
            (&f.logits * &wl).sum() + (&f.aux_out * &wa).sum()
        };
        let f = forward(&p, x.view(), true, 42).unwrap();
        let g = backward(&p, &f, wl.view(), wa.view()).unwrap().weights.flatten();
        let eps = 1e-5;
        for idx in (0..g.len()).step_by(5) {
            let mut plus = p.clone();
            plus.weights.set_flat(idx, p.weights.get_flat(idx) + eps);
            let mut minus = p.clone();
            minus.weights.set_flat(idx, p.weights.get_flat(idx) - eps);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert!((fd - g[idx]).abs() <= 1e-6f64.max(1e-5 * fd.abs()));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(8, ClustererConfig::new(7, 0.1).with_depth(2)).unwrap();
        let bytes = encode_checkpoint(&p);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, p.rounded_to_f32());
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }
}
