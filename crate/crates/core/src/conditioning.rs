//! Conditioning vectors and the two ways of injecting them into a network:
//! channel concatenation of a spatially replicated (optionally embedded)
//! vector, and feature-wise linear modulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::nn::{Grads, Matrix, Mlp, MlpCache, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NUM_STRUCTURES: usize = 3;

/// Layer widths of the embedding network.
pub const EMBEDDING_WIDTHS: [usize; 5] = [3, 6, 12, 6, 3];

/// Hidden width of each FiLM parameter generator.
pub const FILM_HIDDEN: usize = 64;

/// Percentage of mask pixels belonging to each structure, in label order
/// (RV cavity, myocardium, LV cavity). Background is dropped from the vector
/// but still counts towards the denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector(pub [f64; NUM_STRUCTURES]);

impl ConditioningVector {
    pub fn rv(&self) -> f64 {
        self.0[0]
    }

    pub fn myo(&self) -> f64 {
        self.0[1]
    }

    pub fn lv(&self) -> f64 {
        self.0[2]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

fn distribution_of(labels: &[u8]) -> ConditioningVector {
    assert!(!labels.is_empty(), "label distribution of an empty mask");
    let mut counts = [0usize; NUM_STRUCTURES + 1];
    for &l in labels {
        counts[(l as usize).min(NUM_STRUCTURES)] += 1;
    }
    let total = labels.len() as f64;
    ConditioningVector([1, 2, 3].map(|k| 100.0 * counts[k] as f64 / total))
}

/// Scaled class distribution of a 2D ground-truth mask.
pub fn compute_label_distribution(mask: &Grid2<u8>) -> ConditioningVector {
    distribution_of(&mask.data)
}

/// Same extractor applied to a whole stack of slices at once.
pub fn compute_volume_distribution(labels: &[u8]) -> ConditioningVector {
    distribution_of(labels)
}

/// How the conditioning vector is mapped before concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Identity,
    Mlp,
}

/// `f` in `z~ = f(z)`: identity, or a 3-6-12-6-3 MLP.
#[derive(Clone, Debug)]
pub enum Embedding {
    Identity,
    Mlp(Mlp),
}

pub enum EmbeddingCache<T> {
    Identity,
    Mlp(MlpCache<T>),
}

impl Embedding {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, kind: EmbeddingKind) -> Self {
        match kind {
            EmbeddingKind::Identity => Embedding::Identity,
            EmbeddingKind::Mlp => Embedding::Mlp(Mlp::new(store, prefix, &EMBEDDING_WIDTHS, false)),
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        match self {
            Embedding::Identity => EmbeddingKind::Identity,
            Embedding::Mlp(_) => EmbeddingKind::Mlp,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Embedding::Identity => 0,
            Embedding::Mlp(m) => m.param_count(),
        }
    }

    pub fn validate<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        match self {
            Embedding::Identity => Ok(()),
            Embedding::Mlp(m) => {
                if m.widths() != EMBEDDING_WIDTHS {
                    return Err(Error::Config(format!(
                        "embedding widths {:?}, expected {:?}",
                        m.widths(),
                        EMBEDDING_WIDTHS
                    )));
                }
                m.validate(store)
            }
        }
    }

    /// Embed a batch of conditioning vectors (`n x 3`).
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &Matrix<T>,
    ) -> (Matrix<T>, EmbeddingCache<T>) {
        match self {
            Embedding::Identity => (z.clone(), EmbeddingCache::Identity),
            Embedding::Mlp(m) => {
                let (y, c) = m.forward(store, z);
                (y, EmbeddingCache::Mlp(c))
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &EmbeddingCache<T>,
        dy: &Matrix<T>,
        grads: &mut Grads<T>,
    ) -> Matrix<T> {
        match (self, cache) {
            (Embedding::Mlp(m), EmbeddingCache::Mlp(c)) => m.backward(store, c, dy, grads),
            _ => dy.clone(),
        }
    }
}

/// Embed a single vector.
pub fn embed<T: Real>(
    z: &ConditioningVector,
    embedding: &Embedding,
    store: &ParamStore<T>,
) -> Result<[f64; NUM_STRUCTURES]> {
    embedding.validate(store)?;
    let (y, _) = embedding.forward(store, &z_matrix(&[*z]));
    let mut out = [0.0; NUM_STRUCTURES];
    for (o, v) in out.iter_mut().zip(&y.data) {
        *o = v.to_f64().unwrap_or(f64::NAN);
    }
    Ok(out)
}

/// Pack conditioning vectors into an `n x 3` matrix.
pub fn z_matrix<T: Real>(zs: &[ConditioningVector]) -> Matrix<T> {
    Matrix::new(
        zs.len(),
        NUM_STRUCTURES,
        zs.iter()
            .flat_map(|z| z.0.iter().map(|&v| T::from_f64_lossy(v)))
            .collect(),
    )
}

/// Broadcast each row of `z` to a constant `h x w` plane per component.
pub fn spatial_replicate<T: Real>(z: &Matrix<T>, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(z.rows, z.cols, h, w);
    let hw = h * w;
    for (i, chunk) in out.data.chunks_mut(z.cols * hw).enumerate() {
        for (c, plane) in chunk.chunks_mut(hw).enumerate() {
            plane.fill(z.row(i)[c]);
        }
    }
    out
}

/// Gradient of [`spatial_replicate`]: sum over each plane.
pub fn spatial_replicate_backward<T: Real>(dy: &Tensor<T>) -> Matrix<T> {
    let hw = dy.plane();
    Matrix::new(
        dy.n,
        dy.c,
        dy.data.chunks(hw).map(|p| p.iter().copied().sum()).collect(),
    )
}

/// Channel-wise concatenation, features first.
pub fn concat_fuse<T: Real>(features: &Tensor<T>, z_map: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::concat_channels(features, z_map)
}

/// Per-sample FiLM coefficients, each `n x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

impl<T: Real> FilmParams<T> {
    pub fn identity(n: usize, channels: usize) -> Self {
        Self {
            gamma: Matrix::new(n, channels, vec![T::one(); n * channels]),
            beta: Matrix::new(n, channels, vec![T::zero(); n * channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.cols
    }
}

/// MLP `3 -> 64 -> 2C` producing `(gamma - 1, beta)` for one FiLM site.
/// The output layer starts at zero so the site is initially the identity.
#[derive(Clone, Debug)]
pub struct FilmGenerator {
    mlp: Mlp,
    channels: usize,
}

pub struct FilmGenCache<T>(MlpCache<T>);

impl FilmGenerator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        assert!(channels >= 1);
        Self {
            mlp: Mlp::new(
                store,
                prefix,
                &[NUM_STRUCTURES, FILM_HIDDEN, 2 * channels],
                true,
            ),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &Matrix<T>,
    ) -> (FilmParams<T>, FilmGenCache<T>) {
        let (out, cache) = self.mlp.forward(store, z);
        let c = self.channels;
        let mut gamma = Vec::with_capacity(z.rows * c);
        let mut beta = Vec::with_capacity(z.rows * c);
        for r in 0..z.rows {
            let row = out.row(r);
            gamma.extend(row[..c].iter().map(|&d| T::one() + d));
            beta.extend_from_slice(&row[c..]);
        }
        (
            FilmParams {
                gamma: Matrix::new(z.rows, c, gamma),
                beta: Matrix::new(z.rows, c, beta),
            },
            FilmGenCache(cache),
        )
    }

    /// Returns the gradient with respect to the generator input.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &FilmGenCache<T>,
        dgamma: &Matrix<T>,
        dbeta: &Matrix<T>,
        grads: &mut Grads<T>,
    ) -> Matrix<T> {
        let c = self.channels;
        let mut d = Vec::with_capacity(dgamma.rows * 2 * c);
        for r in 0..dgamma.rows {
            d.extend_from_slice(dgamma.row(r));
            d.extend_from_slice(dbeta.row(r));
        }
        self.mlp
            .backward(store, &cache.0, &Matrix::new(dgamma.rows, 2 * c, d), grads)
    }
}

/// Generate FiLM coefficients for a single conditioning vector.
pub fn film_generate<T: Real>(
    z: &ConditioningVector,
    generator: &FilmGenerator,
    store: &ParamStore<T>,
) -> FilmParams<T> {
    generator.forward(store, &z_matrix(&[*z])).0
}

/// `out[n, c] = gamma[n, c] * F[n, c] + beta[n, c]`.
pub fn film_apply<T: Real>(f: &Tensor<T>, p: &FilmParams<T>) -> Result<Tensor<T>> {
    if p.gamma.cols != f.c || p.beta.cols != f.c {
        return Err(Error::Shape(format!(
            "FiLM coefficients for {}/{} channels applied to {} channels",
            p.gamma.cols, p.beta.cols, f.c
        )));
    }
    if p.gamma.rows != f.n || p.beta.rows != f.n {
        return Err(Error::Shape(format!(
            "FiLM coefficients for {} samples applied to a batch of {}",
            p.gamma.rows, f.n
        )));
    }
    let hw = f.plane();
    let mut out = f.clone();
    for (idx, plane) in out.data.chunks_mut(hw).enumerate() {
        let (i, c) = (idx / f.c, idx % f.c);
        let (g, b) = (p.gamma.row(i)[c], p.beta.row(i)[c]);
        plane.iter_mut().for_each(|v| *v = g * *v + b);
    }
    Ok(out)
}

pub struct FilmApplyGrads<T> {
    pub df: Tensor<T>,
    pub dgamma: Matrix<T>,
    pub dbeta: Matrix<T>,
}

pub fn film_apply_backward<T: Real>(
    f: &Tensor<T>,
    p: &FilmParams<T>,
    dy: &Tensor<T>,
) -> FilmApplyGrads<T> {
    let hw = f.plane();
    let mut df = dy.clone();
    let mut dgamma = vec![T::zero(); f.n * f.c];
    let mut dbeta = vec![T::zero(); f.n * f.c];
    for idx in 0..f.n * f.c {
        let (i, c) = (idx / f.c, idx % f.c);
        let g = p.gamma.row(i)[c];
        let fp = &f.data[idx * hw..(idx + 1) * hw];
        let dp = &mut df.data[idx * hw..(idx + 1) * hw];
        let mut sg = T::zero();
        let mut sb = T::zero();
        for (d, &x) in dp.iter_mut().zip(fp) {
            sg = sg + *d * x;
            sb = sb + *d;
            *d = *d * g;
        }
        dgamma[idx] = sg;
        dbeta[idx] = sb;
    }
    FilmApplyGrads {
        df,
        dgamma: Matrix::new(f.n, f.c, dgamma),
        dbeta: Matrix::new(f.n, f.c, dbeta),
    }
}
