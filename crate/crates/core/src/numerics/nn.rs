//! Parameterised layers built on the tape.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// `x . W + b` over the last axis. `W` is `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let w = store.init(&format!("{name}.w"), &[d_in, d_out], d_in, seed);
        let b = store.init(&format!("{name}.b"), &[d_out], d_in, seed);
        Linear { w, b, d_in, d_out }
    }

    /// Applies to a 2-D `[rows, d_in]` input.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }

    /// Applies voxel-wise to a channels-last volume (a 1x1x1 convolution).
    pub fn forward_volume(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [sx, sy, sz, c] = shape[..] else {
            return Err(Error::dim("pointwise", &shape, &[0, 0, 0, self.d_in]));
        };
        if c != self.d_in {
            return Err(Error::dim("pointwise", &shape, &[sx, sy, sz, self.d_in]));
        }
        let flat = g.reshape(x, [sx * sy * sz, c])?;
        let y = self.forward(g, flat)?;
        g.reshape(y, [sx, sy, sz, self.d_out])
    }
}

/// Affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer boundary, e.g. `[d_in, hidden, d_out]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], seed))
            .collect();
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        mlp_forward(g, x, &self.layers)
    }
}

pub fn mlp_forward(g: &mut Graph, x: Var, layers: &[Linear]) -> Result<Var> {
    for pair in layers.windows(2) {
        if pair[0].d_out != pair[1].d_in {
            return Err(Error::dim("mlp chain", &[pair[0].d_out], &[pair[1].d_in]));
        }
    }
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            h = g.relu(h);
        }
        h = layer.forward(g, h)?;
    }
    Ok(h)
}

/// Multi-head self-attention with scaled dot-product scores and an output
/// projection. No positional terms, so it is equivariant to row order.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub heads: usize,
    pub d_model: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Mhsa {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Mhsa {
            heads,
            d_model,
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, seed),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, seed),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, seed),
            out: Linear::new(store, &format!("{name}.o"), d_model, d_model, seed),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        mhsa_forward(g, x, self)
    }
}

pub fn mhsa_forward(g: &mut Graph, x: Var, attn: &Mhsa) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[1] != attn.d_model {
        return Err(Error::dim("mhsa", &s, &[0, attn.d_model]));
    }
    let dh = attn.d_model / attn.heads;
    let q = attn.q.forward(g, x)?;
    let k = attn.k.forward(g, x)?;
    let v = attn.v.forward(g, x)?;
    let mut outs = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores, 1)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    attn.out.forward(g, merged)
}

/// Strided 3-D convolution with a cubic kernel and `k / 2` zero padding.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let fan_in = k * k * k * cin;
        let w = store.init(&format!("{name}.w"), &[k, k, k, cin, cout], fan_in, seed);
        let b = store.init(&format!("{name}.b"), &[cout], fan_in, seed);
        Conv3d { w, b, stride }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv3d(x, w, b, self.stride)
    }
}

/// Kernel-2, stride-2 transposed convolution (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvUp3d {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvUp3d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        let w = store.init(&format!("{name}.w"), &[2, 2, 2, cin, cout], cin, seed);
        let b = store.init(&format!("{name}.b"), &[cout], cin, seed);
        ConvUp3d { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv_transpose3d(x, w, b)
    }
}

/// `a . b / (|a| |b|)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_sim", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
