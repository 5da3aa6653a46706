//! Synthetic semantic-cluster data and real/fake splits derived from it.
//!
//! Real tokens: a cluster mean plus Gaussian noise on the first n − q ("semantic") coordinates,
//! small noise on the last q ("quiet") coordinates, and a per-cluster level along a quiet
//! direction d. A fake is a real sample pushed through x ↦ x + γ·u vᵀ x.
//!
//! Each method's u mixes one semantic direction shared by all methods with a method-specific
//! one; v = unit(−u + κ·d). At γ = √(1 + κ²) every token's u-coordinate is replaced by
//! κ·(dᵀx), so fakes are pinned to a narrow band where reals spread widely.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::{self, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FakeFamily {
    /// Number of generated methods; ids are 0..count.
    pub count: usize,
    pub gamma: f64,
    /// Rank p of each distortion.
    #[serde(default = "one")]
    pub perturb_rank: usize,
    /// Angle (radians) between u and the direction shared by all methods.
    pub shared_angle: f64,
    /// κ in v = unit(−u + κ·d).
    pub level_weight: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub semantic_eval: usize,
    pub finetune_train: usize,
    pub finetune_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub clusters: usize,
    pub cluster_mean_scale: f64,
    pub noise_sigma: f64,
    pub seq_len: usize,
    pub quiet_dims: usize,
    pub quiet_sigma: f64,
    /// Fraction of the semantic noise variance shared by all tokens of a sample.
    #[serde(default)]
    pub token_share: f64,
    /// Mean level along the quiet direction d, and its relative spread across clusters.
    pub level: f64,
    pub level_spread: f64,
    pub fakes: FakeFamily,
    pub seen_methods: Vec<usize>,
    pub unseen_methods: Vec<usize>,
    pub samples: SplitSizes,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FakeMethod {
    pub id: usize,
    pub gamma: f64,
    /// n×p, orthonormal columns
    pub u: Matrix,
    /// n×p, orthonormal columns
    pub v: Matrix,
}

impl FakeMethod {
    /// x + γ·(x v) uᵀ applied to every row.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let xv = x.matmul(&self.v);
        x.add(&xv.matmul_t(&self.u).scale(self.gamma))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    SemanticEval,
    FinetuneTrain,
    FinetuneTestSeen,
    FinetuneTestUnseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::SemanticEval => "semantic_eval",
            Split::FinetuneTrain => "finetune_train",
            Split::FinetuneTestSeen => "finetune_test_seen",
            Split::FinetuneTestUnseen => "finetune_test_unseen",
        }
    }
}

/// Samples are groups of `seq_len` token rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    /// Fake method per sample (None for reals and for semantic splits).
    pub methods: Vec<Option<usize>>,
    /// The real tokens each sample was made from; equals `x` for real samples.
    pub sources: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Token rows and labels for the given sample indices.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let l = self.seq_len;
        let n = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * l * n);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * l * n..(i + 1) * l * n]);
        }
        (Matrix::from_vec(idx.len() * l, n, data), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// The fixed random geometry of one spec: cluster means, shared directions, methods.
#[derive(Clone, Debug)]
pub struct World {
    pub means: Matrix,
    pub levels: Vec<f64>,
    pub level_dir: Vec<f64>,
    /// Semantic direction every method's u leans on.
    pub shared_dir: Vec<f64>,
    pub methods: Vec<FakeMethod>,
}

fn normalize(v: &mut [f64]) {
    let nrm = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= nrm);
}

fn orthogonalize(v: &mut [f64], against: &[&[f64]]) {
    for _ in 0..2 {
        for a in against {
            let d = dot(v, a);
            v.iter_mut().zip(a.iter()).for_each(|(x, y)| *x -= d * y);
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.clusters < 2 {
            return cfg(format!("clusters must be >= 2, got {}", self.clusters));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma <= 0.0 {
            return cfg(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if self.n < 4 || self.quiet_dims + 2 > self.n {
            return cfg(format!("need n >= 4 and quiet_dims <= n - 2, got n={} quiet_dims={}", self.n, self.quiet_dims));
        }
        if self.clusters > self.n - self.quiet_dims {
            return cfg(format!("clusters ({}) exceed the {} semantic dimensions", self.clusters, self.n - self.quiet_dims));
        }
        if !(0.0..=1.0).contains(&self.token_share) {
            return cfg(format!("token_share must lie in [0, 1], got {}", self.token_share));
        }
        if self.seq_len < 1 {
            return cfg("seq_len must be >= 1".into());
        }
        let f = &self.fakes;
        if f.perturb_rank < 1 || f.perturb_rank > self.n - self.quiet_dims - 1 {
            return cfg(format!("perturb_rank {} out of range", f.perturb_rank));
        }
        if let Some(bad) = self.seen_methods.iter().chain(&self.unseen_methods).find(|m| **m >= f.count) {
            return cfg(format!("method id {bad} not below fakes.count = {}", f.count));
        }
        if self.seen_methods.is_empty() {
            return cfg("seen_methods must not be empty".into());
        }
        if self.unseen_methods.iter().any(|m| self.seen_methods.contains(m)) {
            return cfg("unseen_methods overlap seen_methods".into());
        }
        let s = &self.samples;
        if s.pretrain < 2 || s.semantic_eval < 2 || s.finetune_train < 2 || s.finetune_test < 2 {
            return cfg("every split needs at least 2 samples".into());
        }
        Ok(())
    }

    fn semantic_dims(&self) -> usize {
        self.n - self.quiet_dims
    }

    pub fn world(&self) -> Result<World> {
        self.validate()?;
        let n = self.n;
        let sem = self.semantic_dims();
        let mut g = rng::stream(self.seed, &[rng::tag("world")]);
        let semantic_vec = |g: &mut Rng| -> Vec<f64> { (0..n).map(|j| if j < sem { rng::normal(g) } else { 0.0 }).collect() };
        // orthogonal directions of equal length, so the between-cluster spectrum is flat
        let mut mean_rows: Vec<Vec<f64>> = Vec::with_capacity(self.clusters);
        for _ in 0..self.clusters {
            let mut m = semantic_vec(&mut g);
            let refs: Vec<&[f64]> = mean_rows.iter().map(|r| r.as_slice()).collect();
            orthogonalize(&mut m, &refs);
            normalize(&mut m);
            mean_rows.push(m);
        }
        // centred (a simplex), so the clusters carry no common offset
        let centre: Vec<f64> = (0..n).map(|j| mean_rows.iter().map(|r| r[j]).sum::<f64>() / self.clusters as f64).collect();
        let means = Matrix::from_fn(self.clusters, n, |c, j| self.cluster_mean_scale * (mean_rows[c][j] - centre[j]));

        let mut level_dir: Vec<f64> =
            if self.quiet_dims > 0 { (0..n).map(|j| if j >= sem { rng::normal(&mut g) } else { 0.0 }).collect() } else { semantic_vec(&mut g) };
        normalize(&mut level_dir);
        let levels = (0..self.clusters).map(|_| self.level * (1.0 + self.level_spread * g.random_range(-1.0..1.0))).collect();

        let mut shared_dir = semantic_vec(&mut g);
        orthogonalize(&mut shared_dir, &[&level_dir]);
        normalize(&mut shared_dir);

        let f = &self.fakes;
        let (c, s) = (f.shared_angle.cos(), f.shared_angle.sin());
        let mut methods = Vec::with_capacity(f.count);
        for id in 0..f.count {
            let mut specific = semantic_vec(&mut g);
            orthogonalize(&mut specific, &[&level_dir, &shared_dir]);
            normalize(&mut specific);
            let u0: Vec<f64> = shared_dir.iter().zip(&specific).map(|(a, r)| c * a + s * r).collect();
            let mut v0: Vec<f64> = u0.iter().zip(&level_dir).map(|(u, d)| -u + f.level_weight * d).collect();
            normalize(&mut v0);
            let mut u_cols = vec![u0];
            let mut v_cols = vec![v0];
            for _ in 1..f.perturb_rank {
                for cols in [&mut u_cols, &mut v_cols] {
                    let mut extra: Vec<f64> = (0..n).map(|_| rng::normal(&mut g)).collect();
                    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
                    orthogonalize(&mut extra, &refs);
                    normalize(&mut extra);
                    cols.push(extra);
                }
            }
            let p = f.perturb_rank;
            methods.push(FakeMethod { id, gamma: f.gamma, u: Matrix::from_fn(n, p, |i, k| u_cols[k][i]), v: Matrix::from_fn(n, p, |i, k| v_cols[k][i]) });
        }
        Ok(World { means, levels, level_dir, shared_dir, methods })
    }
}

impl World {
    fn real_tokens(&self, spec: &SyntheticSpec, g: &mut Rng, cluster: usize) -> Vec<f64> {
        let n = spec.n;
        let sem = spec.semantic_dims();
        let shared: Vec<f64> = (0..sem).map(|_| rng::normal(g)).collect();
        let (a, b) = (spec.token_share.sqrt(), (1.0 - spec.token_share).sqrt());
        let mut out = Vec::with_capacity(spec.seq_len * n);
        for _ in 0..spec.seq_len {
            for (j, d) in self.level_dir.iter().enumerate() {
                let noise = if j < sem { spec.noise_sigma * (a * shared[j] + b * rng::normal(g)) } else { spec.quiet_sigma * rng::normal(g) };
                out.push(self.means[(cluster, j)] + self.levels[cluster] * d + noise);
            }
        }
        out
    }
}

/// Deterministic per (spec.seed, split).
pub fn gen_dataset(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let world = spec.world()?;
    gen_with_world(spec, &world, split)
}

pub fn gen_with_world(spec: &SyntheticSpec, world: &World, split: Split) -> Result<Dataset> {
    let n = spec.n;
    let l = spec.seq_len;
    let mut g = rng::stream(spec.seed, &[rng::tag("data"), rng::tag(split.name())]);
    let (count, methods): (usize, &[usize]) = match split {
        Split::Pretrain => (spec.samples.pretrain, &[]),
        Split::SemanticEval => (spec.samples.semantic_eval, &[]),
        Split::FinetuneTrain => (spec.samples.finetune_train, &spec.seen_methods),
        Split::FinetuneTestSeen => (spec.samples.finetune_test, &spec.seen_methods),
        Split::FinetuneTestUnseen => {
            if spec.unseen_methods.is_empty() {
                return Err(Error::Config("unseen split requested but no method is held out".into()));
            }
            (spec.samples.finetune_test, &spec.unseen_methods)
        }
    };
    let semantic = methods.is_empty();
    // fakes: every other sample, methods in rotation; then one shuffle of sample order
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut g);
    let mut x = Vec::with_capacity(count * l * n);
    let mut src = Vec::with_capacity(count * l * n);
    let mut labels = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for &slot in &order {
        let cluster = g.random_range(0..spec.clusters);
        let tokens = world.real_tokens(spec, &mut g, cluster);
        if semantic {
            labels.push(cluster);
            provenance.push(None);
            x.extend_from_slice(&tokens);
        } else if slot % 2 == 0 {
            labels.push(0);
            provenance.push(None);
            x.extend_from_slice(&tokens);
        } else {
            let m = methods[(slot / 2) % methods.len()];
            let real = Matrix::from_vec(l, n, tokens.clone());
            labels.push(1);
            provenance.push(Some(m));
            x.extend_from_slice(world.methods[m].apply(&real).data());
        }
        src.extend_from_slice(&tokens);
    }
    Ok(Dataset { x: Matrix::from_vec(count * l, n, x), labels, seq_len: l, methods: provenance, sources: Matrix::from_vec(count * l, n, src) })
}
