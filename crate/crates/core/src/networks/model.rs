use serde::{Deserialize, Serialize};

use crate::conditioning::{
    self, ConditioningVector, Embedding, EmbeddingCache, FilmGenCache, FilmGenerator, FilmParams,
    NUM_STRUCTURES,
};
use crate::error::{Error, Result};
use crate::nn::{ops, Conv, ConvBn, ConvBnCache, ConvShape, Grads, Matrix, Mode, ParamStore};
use crate::tensor::{Real, Tensor};

use super::fusion::{FusionSpec, Site};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels of the first stage; doubled at every stage below it.
    pub base_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            depth: 4,
            base_channels: 32,
        }
    }
}

impl BackboneConfig {
    /// Channels at encoder level `level`; `level == depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.depth == 0 || self.base_channels == 0
        {
            return Err(Error::Config(format!("degenerate backbone {self:?}")));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv1: ConvBn,
    conv2: ConvBn,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    level: usize,
    up: ConvBn,
    conv1: ConvBn,
    conv2: ConvBn,
    film: Option<FilmGenerator>,
}

/// U-Net or skip-free encoder-decoder with one conditioning site.
#[derive(Clone, Debug)]
pub struct SegmentationModel<T> {
    config: BackboneConfig,
    fusion: FusionSpec,
    store: ParamStore<T>,
    encoder: Vec<EncoderStage>,
    bottleneck: EncoderStage,
    /// Deepest stage first.
    decoder: Vec<DecoderStage>,
    classifier: Conv,
    embedding: Option<Embedding>,
    late_film: Option<FilmGenerator>,
}

struct EncoderTape<T> {
    c1: ConvBnCache<T>,
    r1: Tensor<T>,
    c2: ConvBnCache<T>,
    r2: Tensor<T>,
    pool_idx: Vec<u32>,
}

struct DecoderTape<T> {
    input_shape: [usize; 4],
    up: ConvBnCache<T>,
    up_r: Tensor<T>,
    c1: ConvBnCache<T>,
    r1: Tensor<T>,
    c2: ConvBnCache<T>,
    film: Option<(Tensor<T>, FilmParams<T>, FilmGenCache<T>)>,
    r2: Tensor<T>,
}

/// Everything the backward pass needs from a training-mode forward.
pub struct Tape<T> {
    batch: usize,
    embedding: Option<(Matrix<T>, EmbeddingCache<T>)>,
    encoder: Vec<EncoderTape<T>>,
    bottleneck: EncoderTape<T>,
    decoder: Vec<DecoderTape<T>>,
    late_film: Option<(Tensor<T>, FilmParams<T>, FilmGenCache<T>)>,
    classifier_input: Tensor<T>,
}

fn conv3(cin: usize, cout: usize) -> ConvShape {
    ConvShape {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
    }
}

impl<T: Real> SegmentationModel<T> {
    /// Build a model whose parameters are initialized from `seed`. Models
    /// built with the same seed share the values of every identically named
    /// backbone parameter.
    pub fn new(config: BackboneConfig, fusion: FusionSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        fusion.validate()?;
        let mut store = ParamStore::new(seed);
        let zc = NUM_STRUCTURES;

        let mut encoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let mut cin = if level == 0 {
                config.in_channels
            } else {
                config.channels(level - 1)
            };
            if level == 0 && fusion.is_concat_at(Site::Early) {
                cin += zc;
            }
            let c = config.channels(level);
            encoder.push(EncoderStage {
                conv1: ConvBn::new(&mut store, &format!("enc{level}.conv1"), conv3(cin, c)),
                conv2: ConvBn::new(&mut store, &format!("enc{level}.conv2"), conv3(c, c)),
            });
        }
        let cb = config.channels(config.depth);
        let bottleneck = EncoderStage {
            conv1: ConvBn::new(
                &mut store,
                "bottleneck.conv1",
                conv3(config.channels(config.depth - 1), cb),
            ),
            conv2: ConvBn::new(&mut store, "bottleneck.conv2", conv3(cb, cb)),
        };

        let mut decoder = Vec::with_capacity(config.depth);
        let mut cin = cb;
        if fusion.is_concat_at(Site::Middle) {
            cin += zc;
        }
        for level in (0..config.depth).rev() {
            let c = config.channels(level);
            let merged = if fusion.architecture.has_skips() { 2 * c } else { c };
            let film = fusion
                .is_film_at(Site::Decoder)
                .then(|| FilmGenerator::new(&mut store, &format!("film.dec{level}"), c));
            decoder.push(DecoderStage {
                level,
                up: ConvBn::new(&mut store, &format!("dec{level}.up"), conv3(cin, c)),
                conv1: ConvBn::new(&mut store, &format!("dec{level}.conv1"), conv3(merged, c)),
                conv2: ConvBn::new(&mut store, &format!("dec{level}.conv2"), conv3(c, c)),
                film,
            });
            cin = c;
        }

        let c0 = config.channels(0);
        let late_film = fusion
            .is_film_at(Site::Late)
            .then(|| FilmGenerator::new(&mut store, "film.late", c0));
        let cls_in = if fusion.is_concat_at(Site::Late) { c0 + zc } else { c0 };
        let classifier = Conv::new(
            &mut store,
            "classifier",
            ConvShape {
                in_channels: cls_in,
                out_channels: config.num_classes,
                kernel: 1,
            },
        );
        let embedding = fusion
            .embedding_kind()
            .map(|k| Embedding::new(&mut store, "embedding", k));

        Ok(Self {
            config,
            fusion,
            store,
            encoder,
            bottleneck,
            decoder,
            classifier,
            embedding,
            late_film,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn fusion(&self) -> &FusionSpec {
        &self.fusion
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn classifier(&self) -> &Conv {
        &self.classifier
    }

    pub fn film_generators(&self) -> Vec<&FilmGenerator> {
        self.decoder
            .iter()
            .filter_map(|d| d.film.as_ref())
            .chain(self.late_film.as_ref())
            .collect()
    }

    /// Learnable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.store.learnable_count()
    }

    /// Parameter names owned by the conditioning path (embedding MLP and
    /// FiLM generators).
    pub fn conditioning_param_names(&self) -> Vec<String> {
        self.store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("embedding.") || e.name.starts_with("film."))
            .map(|e| e.name.clone())
            .collect()
    }

    fn check(&self, images: &Tensor<T>, z: &[ConditioningVector]) -> Result<()> {
        if images.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channel(s), got {}",
                self.config.in_channels, images.c
            )));
        }
        self.config.check_input(images.h, images.w)?;
        if z.len() != images.n {
            return Err(Error::Shape(format!(
                "{} conditioning vectors for a batch of {}",
                z.len(),
                images.n
            )));
        }
        Ok(())
    }

    /// Inference forward pass with running batch-norm statistics.
    pub fn infer(&self, images: &Tensor<T>, z: &[ConditioningVector]) -> Result<Tensor<T>> {
        self.run(images, z, Mode::Eval).map(|(y, _)| y)
    }

    /// Training forward pass; the tape feeds [`SegmentationModel::backward`]
    /// and [`SegmentationModel::update_running_stats`].
    pub fn forward_train(
        &self,
        images: &Tensor<T>,
        z: &[ConditioningVector],
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, tape) = self.run(images, z, Mode::Train)?;
        Ok((y, tape.expect("training forward records a tape")))
    }

    fn conv_bn_relu(
        &self,
        block: &ConvBn,
        x: &Tensor<T>,
        mode: Mode,
    ) -> (Tensor<T>, Option<ConvBnCache<T>>) {
        let (y, c) = block.forward(&self.store, x, mode);
        (ops::relu(&y), c)
    }

    fn encoder_stage(
        &self,
        stage: &EncoderStage,
        x: &Tensor<T>,
        mode: Mode,
    ) -> (Tensor<T>, Option<(ConvBnCache<T>, Tensor<T>, ConvBnCache<T>)>) {
        let (r1, c1) = self.conv_bn_relu(&stage.conv1, x, mode);
        let (r2, c2) = self.conv_bn_relu(&stage.conv2, &r1, mode);
        let caches = match (c1, c2) {
            (Some(c1), Some(c2)) => Some((c1, r1, c2)),
            _ => None,
        };
        (r2, caches)
    }

    fn run(
        &self,
        images: &Tensor<T>,
        z: &[ConditioningVector],
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        self.check(images, z)?;
        let train = mode == Mode::Train;
        let zm: Matrix<T> = conditioning::z_matrix(z);
        let embedded = self
            .embedding
            .as_ref()
            .map(|e| e.forward(&self.store, &zm));
        let z_map = |h: usize, w: usize| -> Tensor<T> {
            let (m, _) = embedded.as_ref().expect("concat variants embed z");
            conditioning::spatial_replicate(m, h, w)
        };

        let mut x = if self.fusion.is_concat_at(Site::Early) {
            conditioning::concat_fuse(images, &z_map(images.h, images.w))?
        } else {
            images.clone()
        };

        let mut enc_tapes = Vec::new();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let (r2, caches) = self.encoder_stage(stage, &x, mode);
            let (pooled, idx) = ops::max_pool2(&r2)?;
            if let Some((c1, r1, c2)) = caches {
                enc_tapes.push(EncoderTape {
                    c1,
                    r1,
                    c2,
                    r2: r2.clone(),
                    pool_idx: idx,
                });
            }
            skips.push(r2);
            x = pooled;
        }

        let (b, bcaches) = self.encoder_stage(&self.bottleneck, &x, mode);
        let bottleneck_tape = bcaches.map(|(c1, r1, c2)| EncoderTape {
            c1,
            r1,
            c2,
            r2: b.clone(),
            pool_idx: Vec::new(),
        });
        let mut x = if self.fusion.is_concat_at(Site::Middle) {
            conditioning::concat_fuse(&b, &z_map(b.h, b.w))?
        } else {
            b
        };

        let mut dec_tapes = Vec::new();
        for stage in &self.decoder {
            let input_shape = x.shape();
            let upsampled = ops::upsample2(&x);
            let (up_r, upc) = self.conv_bn_relu(&stage.up, &upsampled, mode);
            let merged = if self.fusion.architecture.has_skips() {
                Tensor::concat_channels(&up_r, &skips[stage.level])?
            } else {
                up_r.clone()
            };
            let (r1, c1) = self.conv_bn_relu(&stage.conv1, &merged, mode);
            let (pre, c2) = stage.conv2.forward(&self.store, &r1, mode);
            let (post, film) = match &stage.film {
                Some(g) => {
                    let (p, gc) = g.forward(&self.store, &zm);
                    let y = conditioning::film_apply(&pre, &p)?;
                    (y, Some((pre, p, gc)))
                }
                None => (pre, None),
            };
            let r2 = ops::relu(&post);
            if let (Some(up), Some(c1), Some(c2)) = (upc, c1, c2) {
                dec_tapes.push(DecoderTape {
                    input_shape,
                    up,
                    up_r,
                    c1,
                    r1,
                    c2,
                    film,
                    r2: r2.clone(),
                });
            }
            x = r2;
        }

        let mut late_film = None;
        let cls_in = if self.fusion.is_concat_at(Site::Late) {
            conditioning::concat_fuse(&x, &z_map(x.h, x.w))?
        } else if let Some(g) = &self.late_film {
            let (p, gc) = g.forward(&self.store, &zm);
            let y = conditioning::film_apply(&x, &p)?;
            late_film = Some((x, p, gc));
            y
        } else {
            x
        };
        let logits = self.classifier.forward(&self.store, &cls_in);

        let tape = train.then(|| Tape {
            batch: images.n,
            embedding: embedded,
            encoder: enc_tapes,
            bottleneck: bottleneck_tape.expect("training tape"),
            decoder: dec_tapes,
            late_film,
            classifier_input: cls_in,
        });
        Ok((logits, tape))
    }

    /// Gradients of `sum(dlogits * logits)` with respect to every learnable
    /// parameter.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &Tensor<T>) -> Grads<T> {
        let store = &self.store;
        let mut grads = store.zero_grads();
        let zc = NUM_STRUCTURES;
        // gradient w.r.t. the embedded conditioning vector (concat variants)
        let mut dz_embedded = Matrix::new(tape.batch, zc, vec![T::zero(); tape.batch * zc]);
        let add_dz = |dz: &mut Matrix<T>, g: Matrix<T>| {
            dz.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a = *a + b);
        };

        let dcls = self
            .classifier
            .backward(store, &tape.classifier_input, dlogits, &mut grads);
        let mut d = if self.fusion.is_concat_at(Site::Late) {
            let (dx, dzm) = dcls.split_channels(dcls.c - zc);
            add_dz(&mut dz_embedded, conditioning::spatial_replicate_backward(&dzm));
            dx
        } else if let (Some(g), Some((f, p, gc))) = (&self.late_film, &tape.late_film) {
            let fg = conditioning::film_apply_backward(f, p, &dcls);
            g.backward(store, gc, &fg.dgamma, &fg.dbeta, &mut grads);
            fg.df
        } else {
            dcls
        };

        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; self.encoder.len()];
        for (stage, t) in self.decoder.iter().zip(&tape.decoder).rev() {
            let dpost = ops::relu_backward(&t.r2, &d);
            let dpre = match (&stage.film, &t.film) {
                (Some(g), Some((pre, p, gc))) => {
                    let fg = conditioning::film_apply_backward(pre, p, &dpost);
                    g.backward(store, gc, &fg.dgamma, &fg.dbeta, &mut grads);
                    fg.df
                }
                _ => dpost,
            };
            let dr1 = stage.conv2.backward(store, &t.c2, &dpre, &mut grads);
            let dmerged = stage
                .conv1
                .backward(store, &t.c1, &ops::relu_backward(&t.r1, &dr1), &mut grads);
            let dup_r = if self.fusion.architecture.has_skips() {
                let (du, ds) = dmerged.split_channels(t.up_r.c);
                dskips[stage.level] = Some(ds);
                du
            } else {
                dmerged
            };
            let dup = stage
                .up
                .backward(store, &t.up, &ops::relu_backward(&t.up_r, &dup_r), &mut grads);
            d = ops::upsample2_backward(t.input_shape, &dup);
        }
        // reverse iteration above ended on the deepest stage; `d` is now the
        // gradient of the (possibly widened) bottleneck output
        if self.fusion.is_concat_at(Site::Middle) {
            let (db, dzm) = d.split_channels(d.c - zc);
            add_dz(&mut dz_embedded, conditioning::spatial_replicate_backward(&dzm));
            d = db;
        }

        let bt = &tape.bottleneck;
        let dr1 = self
            .bottleneck
            .conv2
            .backward(store, &bt.c2, &ops::relu_backward(&bt.r2, &d), &mut grads);
        d = self
            .bottleneck
            .conv1
            .backward(store, &bt.c1, &ops::relu_backward(&bt.r1, &dr1), &mut grads);

        for (level, (stage, t)) in self.encoder.iter().zip(&tape.encoder).enumerate().rev() {
            let mut dr2 = ops::max_pool2_backward(t.r2.shape(), &t.pool_idx, &d);
            if let Some(ds) = &dskips[level] {
                dr2.add_assign(ds);
            }
            let dr1 = stage
                .conv2
                .backward(store, &t.c2, &ops::relu_backward(&t.r2, &dr2), &mut grads);
            d = stage
                .conv1
                .backward(store, &t.c1, &ops::relu_backward(&t.r1, &dr1), &mut grads);
        }
        if self.fusion.is_concat_at(Site::Early) {
            let (_, dzm) = d.split_channels(self.config.in_channels);
            add_dz(&mut dz_embedded, conditioning::spatial_replicate_backward(&dzm));
        }

        if let (Some(e), Some((_, ec))) = (&self.embedding, &tape.embedding) {
            e.backward(store, ec, &dz_embedded, &mut grads);
        }
        grads
    }

    /// Fold the batch statistics recorded in `tape` into the running
    /// batch-norm buffers.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        let store = &mut self.store;
        for (stage, t) in self.encoder.iter().zip(&tape.encoder) {
            stage.conv1.update_running_stats(store, &t.c1);
            stage.conv2.update_running_stats(store, &t.c2);
        }
        self.bottleneck
            .conv1
            .update_running_stats(store, &tape.bottleneck.c1);
        self.bottleneck
            .conv2
            .update_running_stats(store, &tape.bottleneck.c2);
        for (stage, t) in self.decoder.iter().zip(&tape.decoder) {
            stage.up.update_running_stats(store, &t.up);
            stage.conv1.update_running_stats(store, &t.c1);
            stage.conv2.update_running_stats(store, &t.c2);
        }
    }

    /// Convert the parameters to another precision (same layout).
    pub fn cast<U: Real>(&self) -> SegmentationModel<U> {
        let mut out = SegmentationModel::<U>::new(self.config, self.fusion, self.store.seed())
            .expect("configuration already validated");
        for (dst, src) in out.store.entries_mut().iter_mut().zip(self.store.entries()) {
            dst.value = src
                .value
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect();
        }
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v: Option<T> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best_v {
            Some(b) if !(v > b) => {}
            _ => {
                best = i;
                best_v = Some(v);
            }
        }
    }
    best
}

/// Per-pixel class decision for a batch of logits, `n` label planes.
pub fn predict_labels<T: Real>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let hw = logits.plane();
    (0..logits.n)
        .map(|i| {
            let item = logits.item(i);
            (0..hw)
                .map(|p| argmax_lowest((0..logits.c).map(|c| item[c * hw + p])) as u8)
                .collect()
        })
        .collect()
}
