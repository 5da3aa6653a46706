//! Toy backbones whose square linear layers are adapter-wrapped, plus a linear head.
//!
//! Inputs are token matrices: each sample is `seq_len` consecutive rows. Features are the
//! mean of the final hidden state over a sample's tokens.

use crate::adapter::{axpy_all, Adapter, AdapterKind, RegularizerWeights};
use crate::error::{invalid, Error, Result};
use crate::linalg::{emx, Matrix};
use crate::rng::{self, Rng};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mlp,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub n: usize,
    pub depth: usize,
    /// Tokens per sample.
    pub seq_len: usize,
    /// Pre-training weights start as N(0, (init_scale / √n)²).
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config(format!("backbone.n must be >= 4, got {}", self.n)));
        }
        if self.depth < 1 {
            return Err(Error::Config("backbone.depth must be >= 1".into()));
        }
        if self.seq_len < 1 {
            return Err(Error::Config("backbone.seq_len must be >= 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("backbone.init_scale must be positive, got {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        match self.kind {
            BackboneKind::Mlp => self.depth,
            BackboneKind::Attention => 4 * self.depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub adapter: Adapter,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
enum BlockCache {
    Mlp { input: Matrix, output: Matrix },
    Attention { input: Matrix, q: Matrix, k: Matrix, v: Matrix, attn: Vec<Matrix>, ctx: Matrix },
}

#[derive(Clone, Debug)]
struct Cache {
    weights: Vec<Matrix>,
    blocks: Vec<BlockCache>,
    features: Matrix,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub cfg: BackboneConfig,
    pub layers: Vec<Layer>,
    /// classes×n
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    /// Layer biases train during pre-training only.
    pub train_biases: bool,
    cache: Option<Cache>,
}

/// Mean cross-entropy plus the per-class means used by the asymmetry trace.
#[derive(Clone, Debug)]
pub struct ClsLoss {
    pub mean: f64,
    /// Mean loss over label-0 (real) samples; NaN when the batch has none.
    pub real: f64,
    /// Mean loss over label-1 (fake) samples; NaN when the batch has none.
    pub fake: f64,
    pub per_sample: Vec<f64>,
    /// d mean / d logits
    pub dlogits: Matrix,
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<ClsLoss> {
    let b = logits.rows();
    if b == 0 {
        return invalid("cross-entropy on an empty batch");
    }
    if labels.len() != b {
        return invalid(format!("{} labels for {} logit rows", labels.len(), b));
    }
    let c = logits.cols();
    let mut dlogits = Matrix::zeros(b, c);
    let mut per_sample = Vec::with_capacity(b);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return invalid(format!("label {y} out of range for {c} classes"));
        }
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        per_sample.push(lse - row[y]);
        for j in 0..c {
            let p = (row[j] - lse).exp();
            dlogits[(i, j)] = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    let mean = per_sample.iter().sum::<f64>() / b as f64;
    let class_mean = |cls: usize| {
        let (s, k) = labels.iter().zip(&per_sample).filter(|(y, _)| **y == cls).fold((0.0, 0usize), |(s, k), (_, l)| (s + l, k + 1));
        if k == 0 {
            f64::NAN
        } else {
            s / k as f64
        }
    };
    Ok(ClsLoss { mean, real: class_mean(0), fake: class_mean(1), per_sample, dlogits })
}

/// Binary classification loss with labels 0 = real, 1 = fake.
pub fn cls_loss(logits: &Matrix, labels: &[usize]) -> Result<ClsLoss> {
    if labels.iter().any(|y| *y > 1) {
        return invalid("binary labels must be 0 (real) or 1 (fake)");
    }
    cross_entropy(logits, labels)
}

/// Loss terms at one step. `orth` and `ksv` are already averaged over adapted layers; a term
/// whose weight is zero is not part of the objective and reads 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub real: f64,
    pub fake: f64,
    pub orth: f64,
    pub ksv: f64,
}

fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for z in row.iter_mut() {
            *z = (*z - mx).exp();
            s += *z;
        }
        for z in row.iter_mut() {
            *z /= s;
        }
    }
}

impl ToyModel {
    /// Random pre-training initialization: full adapters, trainable biases, `classes`-way head.
    pub fn init(cfg: &BackboneConfig, classes: usize, rng: &mut Rng) -> Result<ToyModel> {
        cfg.validate()?;
        let n = cfg.n;
        let std = cfg.init_scale / (n as f64).sqrt();
        let layers = (0..cfg.layer_count()).map(|_| Layer { adapter: Adapter::Full(rng::gaussian(rng, n, n, std)), bias: vec![0.0; n] }).collect();
        let mut model = ToyModel { cfg: cfg.clone(), layers, head_w: Matrix::zeros(classes, n), head_b: vec![0.0; classes], train_biases: true, cache: None };
        model.reset_head(classes, rng);
        Ok(model)
    }

    pub fn reset_head(&mut self, classes: usize, rng: &mut Rng) {
        self.head_w = rng::gaussian(rng, classes, self.cfg.n, HEAD_INIT_STD);
        self.head_b = vec![0.0; classes];
        self.cache = None;
    }

    pub fn classes(&self) -> usize {
        self.head_w.rows()
    }

    /// Fine-tuning copy: every layer re-wrapped as `kind` around its current effective weight,
    /// layer biases frozen, fresh binary head.
    pub fn adapt(&self, kind: AdapterKind, rank: usize, rng: &mut Rng) -> Result<ToyModel> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = layer.adapter.effective_weight();
            layers.push(Layer { adapter: Adapter::wrap(kind, &w, rank, rng)?, bias: layer.bias.clone() });
        }
        let mut m = ToyModel { cfg: self.cfg.clone(), layers, head_w: Matrix::zeros(2, self.cfg.n), head_b: vec![0.0; 2], train_biases: false, cache: None };
        m.reset_head(2, rng);
        Ok(m)
    }

    pub fn adapters(&self) -> Vec<&Adapter> {
        self.layers.iter().map(|l| &l.adapter).collect()
    }

    pub fn head_param_count(&self) -> usize {
        self.head_w.rows() * self.head_w.cols() + self.head_b.len()
    }

    pub fn trainable_count(&self) -> usize {
        let adapters: usize = self.layers.iter().map(|l| l.adapter.trainable_count()).sum();
        let biases = if self.train_biases { self.layers.iter().map(|l| l.bias.len()).sum() } else { 0 };
        adapters + biases + self.head_param_count()
    }

    /// Names of trainable tensors, in the order of `params_mut` and of gradient vectors.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let tag = self.layer_tag(i);
            for p in layer.adapter.param_names() {
                names.push(format!("{tag}.{p}"));
            }
            if self.train_biases {
                names.push(format!("{tag}.bias"));
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    fn layer_tag(&self, i: usize) -> String {
        match self.cfg.kind {
            BackboneKind::Mlp => format!("block{i}.fc"),
            BackboneKind::Attention => format!("block{}.{}", i / 4, ["q", "k", "v", "out"][i % 4]),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.adapter.params());
            if self.train_biases {
                out.push(layer.bias.as_slice());
            }
        }
        out.push(self.head_w.data());
        out.push(self.head_b.as_slice());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.cache = None;
        let train_biases = self.train_biases;
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            out.extend(layer.adapter.params_mut());
            if train_biases {
                out.push(layer.bias.as_mut_slice());
            }
        }
        out.push(self.head_w.data_mut());
        out.push(self.head_b.as_mut_slice());
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.cfg.n {
            return invalid(format!("input has {} columns, model width is {}", x.cols(), self.cfg.n));
        }
        if x.rows() == 0 || !x.rows().is_multiple_of(self.cfg.seq_len) {
            return invalid(format!("{} token rows is not a positive multiple of seq_len {}", x.rows(), self.cfg.seq_len));
        }
        if !x.is_finite() {
            return invalid("input contains non-finite values");
        }
        Ok(())
    }

    fn run(&self, x: &Matrix, keep: bool) -> Result<(Matrix, Matrix, Option<Cache>)> {
        self.check_input(x)?;
        let n = self.cfg.n;
        let l = self.cfg.seq_len;
        let weights: Vec<Matrix> = self.layers.iter().map(|la| la.adapter.effective_weight()).collect();
        let linear = |h: &Matrix, i: usize| {
            let mut z = h.matmul_t(&weights[i]);
            z.add_row_vector(&self.layers[i].bias);
            z
        };
        let mut blocks = Vec::new();
        let mut h = x.clone();
        for d in 0..self.cfg.depth {
            match self.cfg.kind {
                BackboneKind::Mlp => {
                    let mut out = linear(&h, d);
                    out.data_mut().iter_mut().for_each(|z| *z = z.tanh());
                    if !out.is_finite() {
                        return Err(Error::Numerical(format!("non-finite activation in block {d}")));
                    }
                    if keep {
                        blocks.push(BlockCache::Mlp { input: h, output: out.clone() });
                    }
                    h = out;
                }
                BackboneKind::Attention => {
                    let q = linear(&h, 4 * d);
                    let k = linear(&h, 4 * d + 1);
                    let v = linear(&h, 4 * d + 2);
                    let scale = 1.0 / (n as f64).sqrt();
                    let groups = h.rows() / l;
                    let mut ctx = Matrix::zeros(h.rows(), n);
                    let mut attn = Vec::with_capacity(groups);
                    for g in 0..groups {
                        let (qg, kg, vg) = (q.rows_range(g * l, g * l + l), k.rows_range(g * l, g * l + l), v.rows_range(g * l, g * l + l));
                        let mut a = qg.matmul_t(&kg).scale(scale);
                        softmax_rows(&mut a);
                        let c = a.matmul(&vg);
                        for t in 0..l {
                            ctx.row_mut(g * l + t).copy_from_slice(c.row(t));
                        }
                        attn.push(a);
                    }
                    let out = linear(&ctx, 4 * d + 3);
                    let next = h.add(&out);
                    if !next.is_finite() {
                        return Err(Error::Numerical(format!("non-finite activation in block {d}")));
                    }
                    if keep {
                        blocks.push(BlockCache::Attention { input: h, q, k, v, attn, ctx });
                    }
                    h = next;
                }
            }
        }
        let batch = h.rows() / l;
        let features = Matrix::from_fn(batch, n, |s, j| (0..l).map(|t| h[(s * l + t, j)]).sum::<f64>() / l as f64);
        let mut logits = features.matmul_t(&self.head_w);
        logits.add_row_vector(&self.head_b);
        let cache = keep.then(|| Cache { weights, blocks, features: features.clone() });
        Ok((logits, features, cache))
    }

    /// Inference forward: (logits batch×classes, features batch×n). Caches nothing.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let (logits, features, _) = self.run(x, false)?;
        Ok((logits, features))
    }

    /// Forward that keeps activations for `backward`.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let (logits, features, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok((logits, features))
    }

    /// Reverse pass from d loss / d logits. Returns gradients in `param_names` order.
    pub fn backward(&self, dlogits: &Matrix) -> Result<Vec<Vec<f64>>> {
        let cache = self.cache.as_ref().ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        if dlogits.rows() != cache.features.rows() || dlogits.cols() != self.classes() {
            return invalid(format!("dlogits shape {:?} does not match the cached forward", dlogits.shape()));
        }
        let n = self.cfg.n;
        let l = self.cfg.seq_len;
        let n_layers = self.layers.len();
        let mut gw: Vec<Option<Matrix>> = vec![None; n_layers];
        let mut gb: Vec<Vec<f64>> = vec![Vec::new(); n_layers];

        let head_w_grad = dlogits.t_matmul(&cache.features);
        let head_b_grad = dlogits.col_sums();
        let dfeat = dlogits.matmul(&self.head_w);
        let tokens = dfeat.rows() * l;
        let mut dh = Matrix::from_fn(tokens, n, |t, j| dfeat[(t / l, j)] / l as f64);

        for d in (0..self.cfg.depth).rev() {
            match &cache.blocks[d] {
                BlockCache::Mlp { input, output } => {
                    let mut dz = dh;
                    for (g, y) in dz.data_mut().iter_mut().zip(output.data()) {
                        *g *= 1.0 - y * y;
                    }
                    gw[d] = Some(dz.t_matmul(input));
                    gb[d] = dz.col_sums();
                    dh = dz.matmul(&cache.weights[d]);
                }
                BlockCache::Attention { input, q, k, v, attn, ctx } => {
                    let (iq, ik, iv, io) = (4 * d, 4 * d + 1, 4 * d + 2, 4 * d + 3);
                    // residual branch passes dh straight through
                    let dout = &dh;
                    gw[io] = Some(dout.t_matmul(ctx));
                    gb[io] = dout.col_sums();
                    let dctx = dout.matmul(&cache.weights[io]);
                    let scale = 1.0 / (n as f64).sqrt();
                    let mut dq = Matrix::zeros(tokens, n);
                    let mut dk = Matrix::zeros(tokens, n);
                    let mut dv = Matrix::zeros(tokens, n);
                    for (g, a) in attn.iter().enumerate() {
                        let rows = g * l..g * l + l;
                        let dc = dctx.rows_range(rows.start, rows.end);
                        let (qg, kg, vg) = (q.rows_range(rows.start, rows.end), k.rows_range(rows.start, rows.end), v.rows_range(rows.start, rows.end));
                        let da = dc.matmul_t(&vg);
                        let dvg = a.t_matmul(&dc);
                        let mut ds = Matrix::zeros(l, l);
                        for i in 0..l {
                            let rowdot: f64 = (0..l).map(|j| da[(i, j)] * a[(i, j)]).sum();
                            for j in 0..l {
                                ds[(i, j)] = a[(i, j)] * (da[(i, j)] - rowdot) * scale;
                            }
                        }
                        let dqg = ds.matmul(&kg);
                        let dkg = ds.t_matmul(&qg);
                        for t in 0..l {
                            dq.row_mut(g * l + t).copy_from_slice(dqg.row(t));
                            dk.row_mut(g * l + t).copy_from_slice(dkg.row(t));
                            dv.row_mut(g * l + t).copy_from_slice(dvg.row(t));
                        }
                    }
                    let mut next = dh.clone();
                    for (idx, dz) in [(iq, &dq), (ik, &dk), (iv, &dv)] {
                        gw[idx] = Some(dz.t_matmul(input));
                        gb[idx] = dz.col_sums();
                        next.add_assign(&dz.matmul(&cache.weights[idx]));
                    }
                    dh = next;
                }
            }
        }

        let mut grads = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let g = gw[i].as_ref().expect("every layer visited");
            grads.extend(layer.adapter.weight_grad_to_params(g));
            if self.train_biases {
                grads.push(std::mem::take(&mut gb[i]));
            }
        }
        grads.push(head_w_grad.into_data());
        grads.push(head_b_grad);
        Ok(grads)
    }

    /// Regularizer terms averaged over the m adapted layers; zero when no layer is effort.
    pub fn regularizers(&self) -> (f64, f64) {
        let m = self.layers.len() as f64;
        let orth = self.layers.iter().map(|l| l.adapter.orth_loss()).sum::<f64>() / m;
        let ksv = self.layers.iter().map(|l| l.adapter.ksv_loss()).sum::<f64>() / m;
        (orth, ksv)
    }

    /// Full objective L_cls + λ1·mean(orth) + λ2·mean(ksv) and its gradient.
    pub fn loss_and_grads(&mut self, x: &Matrix, labels: &[usize], lambdas: RegularizerWeights) -> Result<(LossParts, Vec<Vec<f64>>)> {
        let (logits, _) = self.forward_train(x)?;
        let cls = cross_entropy(&logits, labels)?;
        let mut grads = self.backward(&cls.dlogits)?;
        let (orth, ksv) = self.regularizers();
        let orth = if lambdas.lambda1 != 0.0 { orth } else { 0.0 };
        let ksv = if lambdas.lambda2 != 0.0 { ksv } else { 0.0 };
        let has_effort = self.layers.iter().any(|l| l.adapter.kind() == AdapterKind::Effort);
        if has_effort && (lambdas.lambda1 != 0.0 || lambdas.lambda2 != 0.0) {
            let m = self.layers.len() as f64;
            let mut offset = 0;
            for layer in &self.layers {
                let k = layer.adapter.param_names().len();
                let reg = layer.adapter.regularizer_grads(lambdas.lambda1 / m, lambdas.lambda2 / m);
                axpy_all(&mut grads[offset..offset + k], 1.0, &reg);
                offset += k + usize::from(self.train_biases);
            }
        }
        let parts = LossParts { total: cls.mean + lambdas.lambda1 * orth + lambdas.lambda2 * ksv, cls: cls.mean, real: cls.real, fake: cls.fake, orth, ksv };
        Ok((parts, grads))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = ModelManifest { backbone: self.cfg.clone(), classes: self.classes(), layers: self.layers.len(), train_biases: self.train_biases };
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        for (i, layer) in self.layers.iter().enumerate() {
            let sub = dir.join(format!("layer{i:02}"));
            layer.adapter.save(&sub)?;
            emx::save(sub.join("bias.emx"), &Matrix::from_vec(1, layer.bias.len(), layer.bias.clone()))?;
        }
        emx::save(dir.join("head_w.emx"), &self.head_w)?;
        emx::save(dir.join("head_b.emx"), &Matrix::from_vec(1, self.head_b.len(), self.head_b.clone()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ToyModel> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let m: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.backbone.validate()?;
        if m.layers != m.backbone.layer_count() {
            return Err(Error::Format(format!("manifest lists {} layers, backbone needs {}", m.layers, m.backbone.layer_count())));
        }
        let n = m.backbone.n;
        let mut layers = Vec::with_capacity(m.layers);
        for i in 0..m.layers {
            let sub = dir.join(format!("layer{i:02}"));
            let adapter = Adapter::load(&sub)?;
            let bias = emx::load(sub.join("bias.emx"))?;
            if adapter.n() != n || bias.shape() != (1, n) {
                return Err(Error::Format(format!("layer {i} does not match width {n}")));
            }
            layers.push(Layer { adapter, bias: bias.into_data() });
        }
        let head_w = emx::load(dir.join("head_w.emx"))?;
        let head_b = emx::load(dir.join("head_b.emx"))?;
        if head_w.shape() != (m.classes, n) || head_b.shape() != (1, m.classes) {
            return Err(Error::Format("head shape does not match manifest".into()));
        }
        Ok(ToyModel { cfg: m.backbone, layers, head_w, head_b: head_b.into_data(), train_biases: m.train_biases, cache: None })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    backbone: BackboneConfig,
    classes: usize,
    layers: usize,
    train_biases: bool,
}
