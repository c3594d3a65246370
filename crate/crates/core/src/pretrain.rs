//! Self-supervised contrastive pretraining of the visual encoder on
//! unlabeled slices: two stochastic views per source image (random area
//! crop plus color distortion), a two-layer projection into the
//! contrastive space, and the temperature-scaled batch loss over
//! interleaved positive pairs.
//!
//! The interface accepts images only, so labels can never leak into
//! pretraining. The returned checkpoint keeps the encoder and discards
//! the projection head.

use ndarray::{Array1, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbFrame;
use crate::losses::{nt_xent_graph, TemperatureMode};
use crate::network::{build_encoder_params, encoder_graph, EncoderCheckpoint, EncoderConfig};
use crate::nn::{Adam, Arr, Graph, ParamStore, WeightInit};

const ENCODER_PREFIX: &str = "encoder.";
const MIN_SOURCE_SIDE: usize = 8;

/// Stochastic view generation: random area crop resized to the encoder
/// input, then brightness/contrast/saturation jitter and a hue rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Crop area as a fraction of the source area.
    pub crop_scale: (f64, f64),
    /// Crop aspect-ratio range (width over height).
    pub crop_aspect: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation amplitude as a fraction of a half-turn.
    pub hue: f64,
    pub output_size: usize,
}

impl AugmentationConfig {
    pub fn new(output_size: usize) -> Self {
        AugmentationConfig {
            crop_scale: (0.6, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop scale range ({lo}, {hi}) must sit inside (0, 1]"
            )));
        }
        if self.output_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "augmentation output size {} below the minimum of 32",
                self.output_size
            )));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} jitter {v} must be nonnegative"
                )));
            }
        }
        Ok(())
    }
}

fn sample_crop(
    width: f64,
    height: f64,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> crate::geometry::BoundingBox {
    for _ in 0..10 {
        let scale = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let aspect = rng.gen_range(cfg.crop_aspect.0..=cfg.crop_aspect.1);
        let area = scale * width * height;
        let cw = (area * aspect).sqrt();
        let ch = area / cw;
        if cw <= width && ch <= height {
            let x0 = rng.gen_range(0.0..=(width - cw));
            let y0 = rng.gen_range(0.0..=(height - ch));
            return crate::geometry::BoundingBox::new(x0, y0, x0 + cw, y0 + ch)
                .expect("crop box is valid by construction");
        }
    }
    crate::geometry::BoundingBox::new(0.0, 0.0, width, height).expect("frame box is valid")
}

fn color_distort(view: &mut Array3<f64>, cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) {
    let brightness = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
    let contrast = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
    let saturation = 1.0 + rng.gen_range(-cfg.saturation..=cfg.saturation);
    let hue_angle = rng.gen_range(-cfg.hue..=cfg.hue) * std::f64::consts::PI;

    view.mapv_inplace(|v| v * brightness);

    let mean = view.mean().unwrap_or(0.0);
    view.mapv_inplace(|v| (v - mean) * contrast + mean);

    let (h, w) = (view.shape()[1], view.shape()[2]);
    // saturation: blend each pixel toward its gray level
    for y in 0..h {
        for x in 0..w {
            let gray =
                (view[[0, y, x]] + view[[1, y, x]] + view[[2, y, x]]) / 3.0;
            for c in 0..3 {
                view[[c, y, x]] = gray + (view[[c, y, x]] - gray) * saturation;
            }
        }
    }
    // hue: rotate RGB about the gray axis
    let (cos_a, sin_a) = (hue_angle.cos(), hue_angle.sin());
    let third = (1.0 - cos_a) / 3.0;
    let sq = sin_a / 3.0f64.sqrt();
    let m = [
        [cos_a + third, third - sq, third + sq],
        [third + sq, cos_a + third, third - sq],
        [third - sq, third + sq, cos_a + third],
    ];
    for y in 0..h {
        for x in 0..w {
            let rgb = [view[[0, y, x]], view[[1, y, x]], view[[2, y, x]]];
            for c in 0..3 {
                view[[c, y, x]] = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
            }
        }
    }
    view.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn one_view(image: &RgbFrame, cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let crop = sample_crop(image.width() as f64, image.height() as f64, cfg, rng);
    let mut view = image.crop_resize(&crop, cfg.output_size);
    color_distort(&mut view, cfg, rng);
    view
}

/// Draws two independent stochastic views of one source image.
pub fn augment_views(
    image: &RgbFrame,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f64>, Array3<f64>)> {
    cfg.validate()?;
    if image.width() < MIN_SOURCE_SIDE || image.height() < MIN_SOURCE_SIDE {
        return Err(Error::InvalidArgument(format!(
            "source image {}x{} below the {MIN_SOURCE_SIDE} px minimum",
            image.width(),
            image.height()
        )));
    }
    Ok((one_view(image, cfg, rng), one_view(image, cfg, rng)))
}

/// Projection head shape: encoder feature -> hidden -> contrastive space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub output: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            hidden: 64,
            output: 128,
        }
    }
}

pub(crate) fn build_projection_params(
    store: &mut ParamStore,
    feature_dim: usize,
    cfg: &ProjectionConfig,
    rng: &mut ChaCha8Rng,
) {
    let w1 = WeightInit::HeUniform { fan_in: feature_dim }.sample(rng, &[cfg.hidden, feature_dim]);
    store.insert("proj.fc1.w", w1);
    store.insert("proj.fc1.b", Arr::zeros(ndarray::IxDyn(&[cfg.hidden])));
    let w2 = WeightInit::GlorotUniform {
        fan_in: cfg.hidden,
        fan_out: cfg.output,
    }
    .sample(rng, &[cfg.output, cfg.hidden]);
    store.insert("proj.fc2.w", w2);
    store.insert("proj.fc2.b", Arr::zeros(ndarray::IxDyn(&[cfg.output])));
}

fn projection_graph<P: crate::network::ParamResolver>(
    g: &mut Graph,
    p: &mut P,
    pooled: crate::nn::Var,
) -> crate::nn::Var {
    let w1 = p.resolve(g, "proj.fc1.w");
    let b1 = p.resolve(g, "proj.fc1.b");
    let hidden = g.linear(pooled, w1, b1);
    let hidden = g.relu(hidden);
    let w2 = p.resolve(g, "proj.fc2.w");
    let b2 = p.resolve(g, "proj.fc2.b");
    g.linear(hidden, w2, b2)
}

/// Maps one pooled encoder feature into the contrastive space.
pub fn project(feature: &Array1<f64>, store: &ParamStore) -> Result<Array1<f64>> {
    let expect = store.get("proj.fc1.w").shape()[1];
    if feature.len() != expect {
        return Err(Error::ShapeMismatch {
            expected: format!("{expect}"),
            got: format!("{}", feature.len()),
        });
    }
    let mut g = Graph::new();
    let mut p = crate::network::ConstParams::new(store);
    let x = g.constant(feature.clone().insert_axis(Axis(0)).into_dyn());
    let z = projection_graph(&mut g, &mut p, x);
    Ok(g.data(z)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("1-D projection"))
}

/// Pretraining hyperparameters. `batch_pairs` counts source images per
/// batch (M); each step sees `2M` views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_pairs: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub projection: ProjectionConfig,
    pub augmentation: AugmentationConfig,
    pub asymmetric_temperature: bool,
    pub seed: u64,
}

impl PretrainConfig {
    /// Desk-scale defaults. The reference settings (batch 512 images,
    /// learning rate 0.4) assume large-batch training; that rate diverges
    /// at desk batch sizes, so the small-batch default is 1e-3.
    pub fn desk(output_size: usize) -> Self {
        PretrainConfig {
            batch_pairs: 32,
            temperature: 0.5,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            epochs: 4,
            projection: ProjectionConfig::default(),
            augmentation: AugmentationConfig::new(output_size),
            asymmetric_temperature: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and weight decay nonnegative".into(),
            ));
        }
        self.augmentation.validate()
    }

    pub fn temperature_mode(&self) -> TemperatureMode {
        if self.asymmetric_temperature {
            TemperatureMode::AsymmetricPrinted
        } else {
            TemperatureMode::Symmetric
        }
    }
}

/// Pretraining artifacts: the encoder checkpoint and the per-step loss
/// curve.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: EncoderCheckpoint,
    pub curve: Vec<(usize, f64)>,
}

/// Reshuffling index stream: yields dataset indices epoch by epoch,
/// wrapping inside a batch when the dataset is smaller than the batch.
struct IndexStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl IndexStream {
    fn new(len: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        shuffle(&mut order, &mut rng);
        IndexStream {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                shuffle(&mut self.order, &mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn shuffle(values: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    values.shuffle(rng);
}

pub(crate) fn index_stream_for(
    len: usize,
    seed: u64,
    stream: u64,
) -> impl FnMut(usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut s = IndexStream::new(len, rng);
    move |size| s.next_batch(size)
}

/// Runs contrastive pretraining over unlabeled slices.
pub fn run_pretraining(
    images: &[RgbFrame],
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    encoder.validate()?;
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pretraining needs at least 2 images, got {}",
            images.len()
        )));
    }
    if cfg.augmentation.output_size != encoder.input_size {
        return Err(Error::ShapeMismatch {
            expected: format!("augmentation output {}", encoder.input_size),
            got: format!("{}", cfg.augmentation.output_size),
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    build_encoder_params(&mut store, ENCODER_PREFIX, encoder, &mut init_rng);
    let (feat_c, _, _) = encoder.feature_shape();
    build_projection_params(&mut store, feat_c, &cfg.projection, &mut init_rng);

    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut next_batch = index_stream_for(images.len(), cfg.seed, 2);

    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let steps_per_epoch = images.len().div_ceil(cfg.batch_pairs);
    let total_steps = steps_per_epoch * cfg.epochs;
    let size = cfg.augmentation.output_size;
    let mut curve = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let indices = next_batch(cfg.batch_pairs);
        let m = indices.len();
        let mut views = Array4::zeros((2 * m, 3, size, size));
        let mut tags = Vec::with_capacity(2 * m);
        for (slot, &src) in indices.iter().enumerate() {
            let (va, vb) = augment_views(&images[src], &cfg.augmentation, &mut aug_rng)?;
            views.index_axis_mut(Axis(0), 2 * slot).assign(&va);
            views.index_axis_mut(Axis(0), 2 * slot + 1).assign(&vb);
            tags.push((src, 0u8));
            tags.push((src, 1u8));
        }
        // positive-pair bookkeeping: adjacent views share a source
        for k in 0..m {
            debug_assert_eq!(tags[2 * k].0, tags[2 * k + 1].0);
        }

        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let mut resolver = &binding;
        let x = g.constant(views.into_dyn());
        let f = encoder_graph(&mut g, &mut resolver, ENCODER_PREFIX, encoder, x);
        let pooled = g.global_avg_pool(f);
        let z = projection_graph(&mut g, &mut resolver, pooled);
        if g.data(z)
            .rows()
            .into_iter()
            .any(|row| row.iter().all(|&v| v == 0.0))
        {
            return Err(Error::ZeroVector);
        }
        let loss = nt_xent_graph(&mut g, z, cfg.temperature, cfg.temperature_mode())?;
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite contrastive loss at step {step}"
            )));
        }
        let mut grads = g.backward(loss);
        let named = binding.collect_grads(&mut grads);
        adam.step(&mut store, &named, |_| true);
        curve.push((step, loss_value));
    }

    // discard the projection head from the returned encoder
    let mut params = ParamStore::new();
    for (name, value) in store.iter() {
        if name.starts_with(ENCODER_PREFIX) {
            params.insert(name, value.clone());
        }
    }
    Ok(PretrainOutcome {
        checkpoint: EncoderCheckpoint {
            config: encoder.clone(),
            params,
        },
        curve,
    })
}
