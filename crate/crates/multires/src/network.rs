//! Forward and backward passes for the denoiser and conditioning encoder.
//!
//! Everything is batched column-wise: a batch of M samples is an
//! `features x M` matrix so the hot path runs as matrix products. Gradients
//! are hand-derived reverse mode, exact for this architecture.

use ndarray::{s, Array1, Array2, Axis};

use crate::conditioning::ConditioningVector;
use crate::diffusion::{diffuse, DataPoint};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::schedule::{check_time, NoiseSchedule};

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features of the diffusion time: (sin, cos) pairs at
/// geometrically spaced frequencies.
pub fn time_features(t: f64, width: usize) -> Array1<f64> {
    let mut v = Array1::zeros(width);
    for i in 0..width / 2 {
        let w = std::f64::consts::PI * (1u64 << i) as f64;
        v[2 * i] = (w * t).sin();
        v[2 * i + 1] = (w * t).cos();
    }
    v
}

pub struct DenoiserCache {
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct DenoiserGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct EncoderGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn add_bias(mut a: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    a += &b.view().insert_axis(Axis(1));
    a
}

/// Batched denoiser forward pass. `z` is `D x M`, `ts` holds the per-column
/// diffusion times, `cond` is `C x M`. Returns predicted noise `D x M`.
pub fn denoiser_forward(
    params: &ModelParams,
    z: &Array2<f64>,
    ts: &[f64],
    cond: &Array2<f64>,
) -> (Array2<f64>, DenoiserCache) {
    let arch = &params.arch;
    let m = z.ncols();
    debug_assert_eq!(ts.len(), m);
    let d = arch.data_dim();
    let tf = arch.time_feat_width;
    let mut x = Array2::zeros((arch.denoiser_input_dim(), m));
    x.slice_mut(s![..d, ..]).assign(z);
    for (col, &t) in ts.iter().enumerate() {
        x.slice_mut(s![d..d + tf, col]).assign(&time_features(t, tf));
    }
    x.slice_mut(s![d + tf.., ..]).assign(cond);

    let a1 = add_bias(params.denoiser.w1.dot(&x), &params.denoiser.b1);
    let h1 = a1.mapv(silu);
    let a2 = add_bias(params.denoiser.w2.dot(&h1), &params.denoiser.b2);
    let h2 = a2.mapv(silu);
    let out = add_bias(params.denoiser.w3.dot(&h2), &params.denoiser.b3);
    (out, DenoiserCache { x, a1, h1, a2, h2 })
}

/// Backpropagates `d_out` through the denoiser. Returns weight gradients
/// (when requested) and the gradient with respect to the conditioning block
/// of the input.
pub fn denoiser_backward(
    params: &ModelParams,
    cache: &DenoiserCache,
    d_out: &Array2<f64>,
    want_weights: bool,
) -> (Option<DenoiserGrad>, Array2<f64>) {
    let dh2 = params.denoiser.w3.t().dot(d_out);
    let da2 = &dh2 * &cache.a2.mapv(silu_prime);
    let dh1 = params.denoiser.w2.t().dot(&da2);
    let da1 = &dh1 * &cache.a1.mapv(silu_prime);
    let dx = params.denoiser.w1.t().dot(&da1);

    let grads = want_weights.then(|| DenoiserGrad {
        w1: da1.dot(&cache.x.t()),
        b1: da1.sum_axis(Axis(1)),
        w2: da2.dot(&cache.h1.t()),
        b2: da2.sum_axis(Axis(1)),
        w3: d_out.dot(&cache.h2.t()),
        b3: d_out.sum_axis(Axis(1)),
    });

    let d = params.arch.data_dim();
    let tf = params.arch.time_feat_width;
    let d_cond = dx.slice(s![d + tf.., ..]).to_owned();
    (grads, d_cond)
}

pub struct EncoderCache {
    pooled: Array2<f64>,
    ae: Array2<f64>,
    he: Array2<f64>,
}

/// Batched encoder: a two-layer network from mean-pooled embedding rows
/// (`d x M`) to conditioning vectors (`C x M`).
pub fn encoder_forward(params: &ModelParams, pooled: &Array2<f64>) -> (Array2<f64>, EncoderCache) {
    let ae = add_bias(params.encoder.w1.dot(pooled), &params.encoder.b1);
    let he = ae.mapv(silu);
    let cond = add_bias(params.encoder.w2.dot(&he), &params.encoder.b2);
    (
        cond,
        EncoderCache {
            pooled: pooled.clone(),
            ae,
            he,
        },
    )
}

pub fn encoder_backward(
    params: &ModelParams,
    cache: &EncoderCache,
    d_cond: &Array2<f64>,
    want_weights: bool,
) -> (Option<EncoderGrad>, Array2<f64>) {
    let dhe = params.encoder.w2.t().dot(d_cond);
    let dae = &dhe * &cache.ae.mapv(silu_prime);
    let d_pooled = params.encoder.w1.t().dot(&dae);
    let grads = want_weights.then(|| EncoderGrad {
        w1: dae.dot(&cache.pooled.t()),
        b1: dae.sum_axis(Axis(1)),
        w2: d_cond.dot(&cache.he.t()),
        b2: d_cond.sum_axis(Axis(1)),
    });
    (grads, d_pooled)
}

/// Where one row of the encoder input comes from.
#[derive(Clone, Debug)]
pub enum RowSource {
    /// A base vocabulary token.
    Token(usize),
    /// A row of the trainable concept matrix.
    ConceptRow(usize),
    /// A fixed vector; receives no gradient.
    Vector(Array1<f64>),
}

/// The conditioning recipe for one training draw: at most `seq_len` row
/// sources, padded with the null token. Gradients flow back through the
/// encoder to whatever each row references.
#[derive(Clone, Debug, Default)]
pub struct RowPlan {
    pub sources: Vec<RowSource>,
}

impl RowPlan {
    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        RowPlan {
            sources: ids.into_iter().map(RowSource::Token).collect(),
        }
    }

    /// The all-null plan used for conditioning dropout.
    pub fn null() -> Self {
        RowPlan::default()
    }
}

/// One training draw: data point, diffusion time, noise realization, and the
/// conditioning recipe (re-derived from current embeddings each evaluation so
/// gradients flow through the encoder).
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub x: DataPoint,
    pub t: f64,
    pub eps: Array1<f64>,
    pub plan: RowPlan,
}

/// Which trainable entries a gradient evaluation reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    /// All model weights: denoiser, encoder, token table.
    Model,
    /// Only the concept embedding matrix rows.
    Concept,
}

#[derive(Clone, Debug)]
pub struct ModelGrad {
    pub denoiser: DenoiserGrad,
    pub encoder: EncoderGrad,
    pub table: Array2<f64>,
}

impl ModelGrad {
    /// Flat view in the same manifest order as `ModelParams::flatten`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.denoiser.w1.iter());
        out.extend(self.denoiser.b1.iter());
        out.extend(self.denoiser.w2.iter());
        out.extend(self.denoiser.b2.iter());
        out.extend(self.denoiser.w3.iter());
        out.extend(self.denoiser.b3.iter());
        out.extend(self.encoder.w1.iter());
        out.extend(self.encoder.b1.iter());
        out.extend(self.encoder.w2.iter());
        out.extend(self.encoder.b2.iter());
        out.extend(self.table.iter());
        out
    }
}

#[derive(Clone, Debug)]
pub enum Gradient {
    Model(ModelGrad),
    Concept(Array2<f64>),
}

fn resolve_row<'a>(
    params: &'a ModelParams,
    concept: Option<&'a Array2<f64>>,
    source: &'a RowSource,
) -> Result<ndarray::ArrayView1<'a, f64>> {
    match source {
        RowSource::Token(id) => {
            if *id >= params.table.nrows() {
                return Err(Error::Lookup(format!("unknown token id {id}")));
            }
            Ok(params.table.row(*id))
        }
        RowSource::ConceptRow(k) => {
            let c = concept.ok_or_else(|| {
                Error::Config("plan references a concept row but no concept matrix given".into())
            })?;
            if *k >= c.nrows() {
                return Err(Error::Config(format!(
                    "concept row {k} out of range for {} buckets",
                    c.nrows()
                )));
            }
            Ok(c.row(*k))
        }
        RowSource::Vector(v) => {
            if v.len() != params.arch.embed_dim {
                return Err(Error::Config(format!(
                    "fixed row width {} does not match embedding dim {}",
                    v.len(),
                    params.arch.embed_dim
                )));
            }
            Ok(v.view())
        }
    }
}

/// Mean-pooled encoder inputs for a batch, `d x M`.
fn build_pooled(
    params: &ModelParams,
    concept: Option<&Array2<f64>>,
    items: &[BatchItem],
) -> Result<Array2<f64>> {
    let arch = &params.arch;
    let l = arch.seq_len;
    let null_id = params.vocab.null_id();
    let mut pooled = Array2::zeros((arch.embed_dim, items.len()));
    for (m, item) in items.iter().enumerate() {
        if item.plan.sources.len() > l {
            return Err(Error::Config(format!(
                "plan length {} exceeds sequence length {l}",
                item.plan.sources.len()
            )));
        }
        let mut acc = Array1::zeros(arch.embed_dim);
        for i in 0..l {
            match item.plan.sources.get(i) {
                Some(src) => acc += &resolve_row(params, concept, src)?,
                None => acc += &params.table.row(null_id),
            }
        }
        acc /= l as f64;
        pooled.column_mut(m).assign(&acc);
    }
    Ok(pooled)
}

struct ForwardState {
    loss: f64,
    resid: Array2<f64>,
    den_cache: DenoiserCache,
    enc_cache: EncoderCache,
}

fn forward_batch(
    params: &ModelParams,
    concept: Option<&Array2<f64>>,
    items: &[BatchItem],
    sched: &NoiseSchedule,
) -> Result<ForwardState> {
    if items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let d = params.arch.data_dim();
    let m = items.len();
    let pooled = build_pooled(params, concept, items)?;
    let (cond, enc_cache) = encoder_forward(params, &pooled);

    let mut z = Array2::zeros((d, m));
    let mut eps_mat = Array2::zeros((d, m));
    let mut ts = Vec::with_capacity(m);
    for (col, item) in items.iter().enumerate() {
        check_time(item.t)?;
        let sample = diffuse(&item.x, item.t, &item.eps, sched)?;
        z.column_mut(col).assign(&sample.z);
        eps_mat.column_mut(col).assign(&item.eps);
        ts.push(item.t);
    }
    let (eps_hat, den_cache) = denoiser_forward(params, &z, &ts, &cond);
    let resid = &eps_hat - &eps_mat;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / m as f64;
    Ok(ForwardState {
        loss,
        resid,
        den_cache,
        enc_cache,
    })
}

/// Mean over the batch of the per-draw denoising loss.
pub fn batch_loss(
    params: &ModelParams,
    concept: Option<&Array2<f64>>,
    items: &[BatchItem],
    sched: &NoiseSchedule,
) -> Result<f64> {
    Ok(forward_batch(params, concept, items, sched)?.loss)
}

/// Gradient of the mean batch loss with respect to the selected entries.
///
/// With `Selector::Model` the gradient covers denoiser, encoder, and token
/// table; with `Selector::Concept` only the concept matrix rows referenced by
/// the batch plans carry gradient, everything else is neither computed nor
/// returned.
pub fn loss_gradient(
    params: &ModelParams,
    concept: Option<&Array2<f64>>,
    selector: Selector,
    items: &[BatchItem],
    sched: &NoiseSchedule,
) -> Result<(f64, Gradient)> {
    let state = forward_batch(params, concept, items, sched)?;
    let m = items.len() as f64;
    let d_out = state.resid.mapv(|r| 2.0 * r / m);
    let want_weights = selector == Selector::Model;
    let (den_grads, d_cond) = denoiser_backward(params, &state.den_cache, &d_out, want_weights);
    let (enc_grads, d_pooled) = encoder_backward(params, &state.enc_cache, &d_cond, want_weights);

    let l = params.arch.seq_len as f64;
    let null_id = params.vocab.null_id();
    let grad = match selector {
        Selector::Model => {
            let mut table = Array2::zeros(params.table.raw_dim());
            for (col, item) in items.iter().enumerate() {
                let d_row = d_pooled.column(col).mapv(|v| v / l);
                for i in 0..params.arch.seq_len {
                    match item.plan.sources.get(i) {
                        Some(RowSource::Token(id)) => {
                            let mut r = table.row_mut(*id);
                            r += &d_row;
                        }
                        Some(RowSource::ConceptRow(_)) | Some(RowSource::Vector(_)) => {}
                        None => {
                            let mut r = table.row_mut(null_id);
                            r += &d_row;
                        }
                    }
                }
            }
            Gradient::Model(ModelGrad {
                denoiser: den_grads.expect("requested"),
                encoder: enc_grads.expect("requested"),
                table,
            })
        }
        Selector::Concept => {
            let c = concept.ok_or_else(|| {
                Error::Config("concept selector requires a concept matrix".into())
            })?;
            let mut grad = Array2::zeros(c.raw_dim());
            for (col, item) in items.iter().enumerate() {
                let d_row = d_pooled.column(col).mapv(|v| v / l);
                for src in &item.plan.sources {
                    if let RowSource::ConceptRow(k) = src {
                        let mut r = grad.row_mut(*k);
                        r += &d_row;
                    }
                }
            }
            Gradient::Concept(grad)
        }
    };
    Ok((state.loss, grad))
}

/// Single-sample denoiser evaluation with input and output validation.
pub fn denoiser_apply(
    params: &ModelParams,
    z: &Array1<f64>,
    t: f64,
    cond: &ConditioningVector,
) -> Result<Array1<f64>> {
    check_time(t)?;
    if z.len() != params.arch.data_dim() {
        return Err(Error::Config(format!(
            "input dimension {} does not match data dimension {}",
            z.len(),
            params.arch.data_dim()
        )));
    }
    if cond.v.len() != params.arch.cond_width {
        return Err(Error::Config(format!(
            "conditioning width {} does not match {}",
            cond.v.len(),
            params.arch.cond_width
        )));
    }
    if z.iter().chain(cond.v.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            location: "denoiser_apply input".into(),
            detail: "non-finite input entry".into(),
        });
    }
    let z2 = z.view().insert_axis(Axis(1)).to_owned();
    let c2 = cond.v.view().insert_axis(Axis(1)).to_owned();
    let (out, _) = denoiser_forward(params, &z2, &[t], &c2);
    let out = out.index_axis(Axis(1), 0).to_owned();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            location: "denoiser_apply output".into(),
            detail: "non-finite prediction".into(),
        });
    }
    Ok(out)
}

/// The per-draw training loss: `|| eps_hat(z_t, t, cond) - eps ||^2`.
pub fn denoise_loss(
    params: &ModelParams,
    x: &DataPoint,
    t: f64,
    eps: &Array1<f64>,
    cond: &ConditioningVector,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let sample = diffuse(x, t, eps, sched)?;
    let pred = denoiser_apply(params, &sample.z, t, cond)?;
    Ok((&pred - eps).iter().map(|r| r * r).sum())
}
