//! The trainable network underneath both the denoiser and the classifier:
//! an MLP whose hidden layers are modulated by a projection of the timestep
//! (plus optional class) embedding, with hand-rolled reverse-mode gradients.
//!
//! Parameters live in one flat `f64` buffer; [`ParamLayout`] records the
//! declaration order, which is also the checkpoint tensor order.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::adagn::{group_normalize, group_normalize_backward, GroupNormCache};
use crate::models::embedding::timestep_embedding;

/// Architecture of one MLP. Serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub group_size: usize,
    pub output_dim: usize,
    /// When set, a class-embedding table of this many rows is added to the
    /// timestep embedding (class-conditional denoisers).
    pub class_conditioning: Option<usize>,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("input and output dims must be >= 1"));
        }
        if self.hidden.is_empty() {
            return Err(Error::invalid("at least one hidden layer is required"));
        }
        if self.embedding_dim == 0 || self.embedding_dim % 2 != 0 {
            return Err(Error::invalid("embedding_dim must be even and positive"));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be >= 1"));
        }
        for (l, &w) in self.hidden.iter().enumerate() {
            if w == 0 || w % self.group_size != 0 {
                return Err(Error::invalid(format!(
                    "hidden[{l}] = {w} is not divisible by group size {}",
                    self.group_size
                )));
            }
        }
        if self.class_conditioning == Some(0) {
            return Err(Error::invalid("class_conditioning needs at least one class"));
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    /// `[rows, cols]` for matrices, `[len]` for vectors.
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Declaration-ordered parameter map derived from an [`MlpConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>) {
        let len = shape.iter().product();
        self.entries.push(ParamEntry { name, shape, offset: self.total, len });
        self.total += len;
    }

    pub fn from_config(cfg: &MlpConfig) -> Self {
        let mut layout = ParamLayout { entries: Vec::new(), total: 0 };
        let mut fan_in = cfg.input_dim;
        for (l, &w) in cfg.hidden.iter().enumerate() {
            layout.push(format!("w{l}"), vec![w, fan_in]);
            layout.push(format!("b{l}"), vec![w]);
            layout.push(format!("emb_w{l}"), vec![2 * w, cfg.embedding_dim]);
            layout.push(format!("emb_b{l}"), vec![2 * w]);
            fan_in = w;
        }
        layout.push("out_w".into(), vec![cfg.output_dim, fan_in]);
        layout.push("out_b".into(), vec![cfg.output_dim]);
        if let Some(k) = cfg.class_conditioning {
            layout.push("class_embed".into(), vec![k, cfg.embedding_dim]);
        }
        layout
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }
}

// Entry indices for layer `l` and the heads.
fn idx_w(l: usize) -> usize {
    4 * l
}
fn idx_b(l: usize) -> usize {
    4 * l + 1
}
fn idx_emb_w(l: usize) -> usize {
    4 * l + 2
}
fn idx_emb_b(l: usize) -> usize {
    4 * l + 3
}

/// The network: config, layout, and flat parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: MlpConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Everything backward needs from a forward pass.
pub struct ForwardCache {
    /// `h[0]` is the input; `h[l+1]` the activation after hidden layer `l`.
    h: Vec<Array2<f64>>,
    /// Combined embedding rows (timestep plus class).
    e: Array2<f64>,
    layers: Vec<LayerCache>,
    classes: Option<Vec<usize>>,
}

struct LayerCache {
    /// Normalized pre-modulation activations.
    norm: Array2<f64>,
    /// Modulation scales for each sample.
    y_s: Array2<f64>,
    /// SiLU input, `y_s * norm + y_b`.
    g: Array2<f64>,
    gn: GroupNormCache,
}

/// Result of a backward pass.
pub struct Gradients {
    /// Flat gradient aligned with the parameter layout. Empty when parameter
    /// gradients were not requested.
    pub params: Vec<f64>,
    /// Gradient with respect to the network input, one row per sample.
    pub input: Array2<f64>,
}

fn silu(g: f64) -> f64 {
    g / (1.0 + (-g).exp())
}

fn silu_derivative(g: f64) -> f64 {
    let s = 1.0 / (1.0 + (-g).exp());
    s * (1.0 + g * (1.0 - s))
}

impl Mlp {
    /// All parameters zero except the modulation-scale biases, which start
    /// at one so the network begins as plain group normalization.
    pub fn zeroed(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::from_config(&cfg);
        let mut params = vec![0.0; layout.total()];
        for (l, &w) in cfg.hidden.iter().enumerate() {
            let off = layout.entries[idx_emb_b(l)].offset;
            for j in 0..w {
                params[off + j] = 1.0;
            }
        }
        Ok(Self { cfg, layout, params })
    }

    /// Seeded initialization: He-scaled hidden weights, small embedding
    /// projections, and a near-zero output head so the initial prediction
    /// starts close to zero.
    pub fn random(cfg: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeroed(cfg)?;
        let n_layers = mlp.cfg.hidden.len();
        let emb_dim = mlp.cfg.embedding_dim;
        let mut fan_in = mlp.cfg.input_dim;
        for l in 0..n_layers {
            let std = (2.0 / fan_in as f64).sqrt();
            mlp.fill_entry(idx_w(l), rng, std);
            mlp.fill_entry(idx_emb_w(l), rng, (1.0 / emb_dim as f64).sqrt());
            fan_in = mlp.cfg.hidden[l];
        }
        mlp.fill_entry(idx_w(n_layers), rng, 1e-3 / (fan_in as f64).sqrt());
        if mlp.cfg.class_conditioning.is_some() {
            let idx = mlp.layout.entries.len() - 1;
            mlp.fill_entry(idx, rng, 1.0);
        }
        Ok(mlp)
    }

    fn fill_entry(&mut self, idx: usize, rng: &mut impl Rng, std: f64) {
        let e = &self.layout.entries[idx];
        for p in &mut self.params[e.offset..e.offset + e.len] {
            let z: f64 = rng.sample(StandardNormal);
            *p = z * std;
        }
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.layout.total(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn view2(&self, idx: usize) -> ArrayView2<'_, f64> {
        let e = &self.layout.entries[idx];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &self.params[e.offset..e.offset + e.len])
            .expect("layout shape")
    }

    fn view1(&self, idx: usize) -> ndarray::ArrayView1<'_, f64> {
        let e = &self.layout.entries[idx];
        ndarray::ArrayView1::from_shape(e.len, &self.params[e.offset..e.offset + e.len])
            .expect("layout shape")
    }

    fn grad_view2<'a>(&self, grads: &'a mut [f64], idx: usize) -> ArrayViewMut2<'a, f64> {
        let e = &self.layout.entries[idx];
        ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), &mut grads[e.offset..e.offset + e.len])
            .expect("layout shape")
    }

    /// Combined embedding rows for a batch: sinusoidal timestep features plus
    /// the class-embedding row when conditioning is enabled.
    fn embed(&self, ts: &[usize], classes: Option<&[usize]>) -> Result<Array2<f64>> {
        let n = ts.len();
        let dim = self.cfg.embedding_dim;
        let mut e = Array2::zeros((n, dim));
        for (i, &t) in ts.iter().enumerate() {
            e.row_mut(i).assign(&timestep_embedding(t, dim)?);
        }
        match (self.cfg.class_conditioning, classes) {
            (Some(k), Some(ys)) => {
                if ys.len() != n {
                    return Err(Error::invalid("class labels must match batch size"));
                }
                let table = self.view2(self.layout.entries.len() - 1);
                for (i, &y) in ys.iter().enumerate() {
                    if y >= k {
                        return Err(Error::invalid(format!("class {y} out of range ({k} classes)")));
                    }
                    let mut row = e.row_mut(i);
                    row += &table.row(y);
                }
            }
            (Some(_), None) => {
                return Err(Error::invalid("conditional model requires class labels"));
            }
            (None, Some(_)) => {
                return Err(Error::invalid("unconditional model got class labels"));
            }
            (None, None) => {}
        }
        Ok(e)
    }

    /// Batched forward pass. `ts` holds one (model-space) timestep per row.
    /// Returns the raw head outputs and the cache for [`Mlp::backward`].
    pub fn forward(
        &self,
        xs: &ArrayView2<f64>,
        ts: &[usize],
        classes: Option<&[usize]>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let n = xs.nrows();
        if xs.ncols() != self.cfg.input_dim {
            return Err(Error::invalid(format!(
                "input dim {} does not match model dim {}",
                xs.ncols(),
                self.cfg.input_dim
            )));
        }
        if ts.len() != n {
            return Err(Error::invalid("timesteps must match batch size"));
        }
        let e = self.embed(ts, classes)?;

        let mut h: Vec<Array2<f64>> = Vec::with_capacity(self.cfg.hidden.len() + 1);
        h.push(xs.to_owned());
        let mut layers = Vec::with_capacity(self.cfg.hidden.len());
        for l in 0..self.cfg.hidden.len() {
            let w = self.view2(idx_w(l));
            let b = self.view1(idx_b(l));
            let mut a = h[l].dot(&w.t());
            a += &b;
            let gn = group_normalize(&mut a, self.cfg.group_size)?;
            let norm = a; // renamed: now holds the normalized activations

            let emb_w = self.view2(idx_emb_w(l));
            let emb_b = self.view1(idx_emb_b(l));
            let mut p = e.dot(&emb_w.t());
            p += &emb_b;
            let width = self.cfg.hidden[l];
            let y_s = p.slice(ndarray::s![.., ..width]).to_owned();
            let y_b = p.slice(ndarray::s![.., width..]);

            let mut g = &norm * &y_s;
            g += &y_b;
            let act = g.mapv(silu);
            h.push(act);
            layers.push(LayerCache { norm, y_s, g, gn });
        }

        // The head entries sit where layer L's w/b slots would be.
        let out_w = self.view2(idx_w(self.cfg.hidden.len()));
        let out_b = self.view1(idx_b(self.cfg.hidden.len()));
        debug_assert_eq!(self.layout.entries[idx_w(self.cfg.hidden.len())].name, "out_w");
        let mut out = h[self.cfg.hidden.len()].dot(&out_w.t());
        out += &out_b;

        Ok((
            out,
            ForwardCache { h, e, layers, classes: classes.map(|c| c.to_vec()) },
        ))
    }

    /// Reverse-mode pass. `d_out` is the gradient of a scalar loss with
    /// respect to the head outputs. Parameter gradients are skipped when only
    /// the input gradient is needed (classifier guidance).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &ArrayView2<f64>,
        want_params: bool,
    ) -> Result<Gradients> {
        let n_layers = self.cfg.hidden.len();
        let n = d_out.nrows();
        if n != cache.h[0].nrows() || d_out.ncols() != self.cfg.output_dim {
            return Err(Error::invalid("upstream gradient shape mismatch"));
        }
        let mut grads = if want_params { vec![0.0; self.layout.total()] } else { Vec::new() };

        let out_w = self.view2(idx_w(n_layers));
        if want_params {
            let gw = d_out.t().dot(&cache.h[n_layers]);
            self.grad_view2(&mut grads, idx_w(n_layers)).assign(&gw);
            let e = &self.layout.entries[idx_b(n_layers)];
            let gb = d_out.sum_axis(Axis(0));
            grads[e.offset..e.offset + e.len].copy_from_slice(gb.as_slice().unwrap());
        }
        let mut dh = d_out.dot(&out_w);
        let mut de = Array2::zeros((n, self.cfg.embedding_dim));

        for l in (0..n_layers).rev() {
            let layer = &cache.layers[l];
            let width = self.cfg.hidden[l];

            // Through the nonlinearity.
            let mut dg = dh;
            ndarray::Zip::from(&mut dg).and(&layer.g).for_each(|d, &g| *d *= silu_derivative(g));

            // Through the modulation: g = y_s * norm + y_b.
            let d_norm = &dg * &layer.y_s;
            let d_ys = &dg * &layer.norm;
            let d_yb = dg;

            let emb_w = self.view2(idx_emb_w(l));
            if want_params {
                let mut dp = Array2::zeros((n, 2 * width));
                dp.slice_mut(ndarray::s![.., ..width]).assign(&d_ys);
                dp.slice_mut(ndarray::s![.., width..]).assign(&d_yb);
                let gw = dp.t().dot(&cache.e);
                self.grad_view2(&mut grads, idx_emb_w(l)).assign(&gw);
                let e = &self.layout.entries[idx_emb_b(l)];
                let gb = dp.sum_axis(Axis(0));
                grads[e.offset..e.offset + e.len].copy_from_slice(gb.as_slice().unwrap());
                de += &dp.dot(&emb_w);
            } else {
                // Only the slices are needed to push into the embedding.
                de += &d_ys.dot(&emb_w.slice(ndarray::s![..width, ..]));
                de += &d_yb.dot(&emb_w.slice(ndarray::s![width.., ..]));
            }

            // Through the normalization and the affine layer.
            let da = group_normalize_backward(
                &d_norm.view(),
                &layer.norm.view(),
                &layer.gn,
                self.cfg.group_size,
            );
            let w = self.view2(idx_w(l));
            if want_params {
                let gw = da.t().dot(&cache.h[l]);
                self.grad_view2(&mut grads, idx_w(l)).assign(&gw);
                let e = &self.layout.entries[idx_b(l)];
                let gb = da.sum_axis(Axis(0));
                grads[e.offset..e.offset + e.len].copy_from_slice(gb.as_slice().unwrap());
            }
            dh = da.dot(&w);
        }

        if want_params {
            if let (Some(_), Some(ys)) = (self.cfg.class_conditioning, cache.classes.as_ref()) {
                let e = &self.layout.entries[self.layout.entries.len() - 1];
                let dim = self.cfg.embedding_dim;
                for (i, &y) in ys.iter().enumerate() {
                    for j in 0..dim {
                        grads[e.offset + y * dim + j] += de[(i, j)];
                    }
                }
            }
        }

        Ok(Gradients { params: grads, input: dh })
    }
}
