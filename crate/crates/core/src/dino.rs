//! Self-distillation without labels: a student ViT learns to match the sharpened,
//! centered output of an exponential-moving-average teacher across augmented crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Real, Tape};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::imaging::{GrayImage, Patch};
use crate::vit::{forward_on_tape, vit_forward, ParamVars, ViTConfig, ViTParams};

/// Which network's class-token embedding becomes the patch feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DinoConfig {
    pub student_temp: f64,
    pub teacher_temp: f64,
    /// Teacher EMA momentum λ.
    pub ema_momentum: f64,
    /// Cosine-schedule λ from `ema_momentum` to 1.0 over training.
    pub ema_schedule: bool,
    pub center_momentum: f64,
    /// Disabling centering leaves the center at zero and skips its update.
    pub centering: bool,
    pub global_crops: usize,
    pub local_crops: usize,
    /// Area fraction range of global crops.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flips: bool,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub feature_source: FeatureSource,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            student_temp: 0.1,
            teacher_temp: 0.04,
            ema_momentum: 0.996,
            ema_schedule: false,
            center_momentum: 0.9,
            centering: true,
            global_crops: 2,
            local_crops: 4,
            global_scale: (0.75, 1.0),
            local_scale: (0.3, 0.6),
            flips: true,
            learning_rate: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 3.0,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            feature_source: FeatureSource::Teacher,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.teacher_temp > 0.0 && self.teacher_temp < self.student_temp) {
            return bad(format!(
                "temperatures must satisfy 0 < teacher ({}) < student ({})",
                self.teacher_temp, self.student_temp
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema momentum {} outside [0, 1]", self.ema_momentum));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad(format!("center momentum {} outside [0, 1)", self.center_momentum));
        }
        if self.global_crops == 0 || self.global_crops + self.local_crops < 2 {
            return bad(format!(
                "need a global crop and at least two views (got {} global, {} local)",
                self.global_crops, self.local_crops
            ));
        }
        for (name, (lo, hi)) in [("global", self.global_scale), ("local", self.local_scale)] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} crop scale ({lo}, {hi}) invalid"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Student, teacher, running center of teacher logits and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoState<T> {
    pub student: ViTParams<T>,
    pub teacher: ViTParams<T>,
    pub center: Vec<T>,
    pub step: usize,
}

impl<T: Real> DinoState<T> {
    /// Seeded student; the teacher starts as an exact copy and the center at zero.
    pub fn new(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        let student = ViTParams::init(cfg, seed)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            center: vec![T::zero(); cfg.proto_dim],
            step: 0,
        })
    }
}

/// softmax((logits − center) / temperature).
pub fn sharpen<T: Real>(logits: &[T], temperature: T, center: Option<&[T]>) -> Result<Vec<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::Argument(format!("temperature must be positive, got {temperature:?}")));
    }
    if let Some(c) = center {
        if c.len() != logits.len() {
            return Err(Error::Dimension(format!(
                "center has {} entries, logits {}",
                c.len(),
                logits.len()
            )));
        }
    }
    if logits.iter().chain(center.unwrap_or(&[])).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits or center".into()));
    }
    let shifted: Vec<T> = match center {
        Some(c) => logits.iter().zip(c).map(|(&l, &c)| (l - c) / temperature).collect(),
        None => logits.iter().map(|&l| l / temperature).collect(),
    };
    Ok(softmax(&shifted))
}

/// −Σ p·log q.
pub fn cross_entropy<T: Real>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| -pi * qi.ln())
        .sum()
}

pub fn entropy<T: Real>(p: &[T]) -> T {
    cross_entropy(p, p)
}

/// θt ← λ·θt + (1−λ)·θs for every weight.
pub fn ema_update<T: Real>(teacher: &ViTParams<T>, student: &ViTParams<T>, lambda: T) -> Result<ViTParams<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::Argument(format!("EMA momentum {lambda:?} outside [0, 1]")));
    }
    if !teacher.same_shape(student) {
        return Err(Error::Dimension("teacher and student shapes differ".into()));
    }
    let mut out = teacher.clone();
    for (t, s) in out.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = lambda * *tv + (T::one() - lambda) * sv;
        }
    }
    Ok(out)
}

/// c ← m·c + (1−m)·mean(batch).
pub fn center_update<T: Real>(center: &[T], batch: &[Vec<T>], m: T) -> Result<Vec<T>> {
    if batch.is_empty() {
        return Err(Error::Argument("center update needs a non-empty batch".into()));
    }
    if !(m >= T::zero() && m < T::one()) {
        return Err(Error::Argument(format!("center momentum {m:?} outside [0, 1)")));
    }
    if batch.iter().any(|row| row.len() != center.len()) {
        return Err(Error::Dimension("batch logits width differs from center".into()));
    }
    Ok((0..center.len())
        .map(|j| {
            // running mean: a batch of identical values averages to exactly that value
            let mean = batch.iter().enumerate().fold(T::zero(), |acc, (i, row)| {
                acc + (row[j] - acc) / T::from_usize(i + 1).unwrap()
            });
            if m == T::zero() {
                mean
            } else {
                // increment form keeps c fixed exactly when the batch mean equals c
                center[j] + (T::one() - m) * (mean - center[j])
            }
        })
        .collect())
}

/// Loss value, student gradients and the teacher logits used as targets.
#[derive(Clone, Debug)]
pub struct DinoLoss<T> {
    pub loss: T,
    pub grads: ViTParams<T>,
    pub teacher_logits: Vec<Vec<T>>,
}

/// Multi-crop distillation loss for one sample.
///
/// Every global view is a teacher target; every view other than the target is a
/// student prediction. The result is the mean cross-entropy over those pairs,
/// differentiated through the student only.
pub fn dino_loss<T: Real>(
    state: &DinoState<T>,
    vit: &ViTConfig,
    global_views: &[Vec<T>],
    local_views: &[Vec<T>],
    cfg: &DinoConfig,
) -> Result<DinoLoss<T>> {
    let pairs = global_views.len() * (global_views.len() + local_views.len()).saturating_sub(1);
    if global_views.is_empty() || pairs == 0 {
        return Err(Error::Config(format!(
            "{} global and {} local views give no teacher/student pairs",
            global_views.len(),
            local_views.len()
        )));
    }
    let tau_t = T::lit(cfg.teacher_temp);
    let inv_tau_s = T::one() / T::lit(cfg.student_temp);
    let center = cfg.centering.then_some(state.center.as_slice());

    let mut teacher_logits = Vec::with_capacity(global_views.len());
    let mut targets = Vec::with_capacity(global_views.len());
    for view in global_views {
        let (_, logits) = vit_forward(&state.teacher, vit, view)?;
        targets.push(sharpen(&logits, tau_t, center)?);
        teacher_logits.push(logits);
    }

    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &state.student);
    let mut terms = Vec::with_capacity(pairs);
    for (s, view) in global_views.iter().chain(local_views).enumerate() {
        let out = forward_on_tape(&mut tape, &vars, vit, view)?;
        let scaled = tape.scale(out.logits, inv_tau_s);
        let log_ps = tape.log_softmax_rows(scaled);
        for (t, pt) in targets.iter().enumerate() {
            if t == s {
                continue;
            }
            let neg: Vec<T> = pt.iter().map(|&p| -p).collect();
            terms.push(tape.dot_const(log_ps, neg));
        }
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term);
    }
    let loss = tape.scale(total, T::one() / T::from_usize(pairs).unwrap());
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss);
    Ok(DinoLoss {
        loss: value,
        grads: vars.gradients(&mut grads, &state.student),
        teacher_logits,
    })
}

/// Normalized model input: the patch resampled to `input_size`², values in [0, 1].
pub fn preprocess(image: &GrayImage, input_size: usize) -> Result<Vec<f64>> {
    let (w, h) = (image.width(), image.height());
    if w == h && w % input_size == 0 {
        let small = image.downsample_area(w / input_size)?;
        return Ok(small.data().iter().map(|&v| v as f64 / 255.0).collect());
    }
    let src: Vec<f64> = image.data().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(resample(&src, w, (0.0, 0.0, w as f64, h as f64), input_size))
}

/// Bilinear resampling of the `(x, y, w, h)` window of a `src_w`-wide raster to `out`².
fn resample(src: &[f64], src_w: usize, window: (f64, f64, f64, f64), out: usize) -> Vec<f64> {
    let src_h = src.len() / src_w;
    let (x0, y0, w, h) = window;
    let sample = |fx: f64, fy: f64| {
        let fx = fx.clamp(0.0, (src_w - 1) as f64);
        let fy = fy.clamp(0.0, (src_h - 1) as f64);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (jx, jy) = ((ix + 1).min(src_w - 1), (iy + 1).min(src_h - 1));
        let (ax, ay) = (fx - ix as f64, fy - iy as f64);
        let top = src[iy * src_w + ix] * (1.0 - ax) + src[iy * src_w + jx] * ax;
        let bottom = src[jy * src_w + ix] * (1.0 - ax) + src[jy * src_w + jx] * ax;
        top * (1.0 - ay) + bottom * ay
    };
    let mut v = Vec::with_capacity(out * out);
    for i in 0..out {
        let fy = y0 + (i as f64 + 0.5) * h / out as f64 - 0.5;
        for j in 0..out {
            let fx = x0 + (j as f64 + 0.5) * w / out as f64 - 0.5;
            v.push(sample(fx, fy));
        }
    }
    v
}

/// Random square crop covering a `scale`-range fraction of the area, resized back
/// to full size, with optional random flips.
pub fn random_crop<R: Rng>(base: &[f64], side: usize, scale: (f64, f64), flips: bool, rng: &mut R) -> Vec<f64> {
    let frac = if scale.0 < scale.1 {
        rng.random_range(scale.0..=scale.1)
    } else {
        scale.0
    };
    let crop = ((frac.sqrt() * side as f64).round() as usize).clamp(2.min(side), side);
    let x0 = rng.random_range(0..=side - crop);
    let y0 = rng.random_range(0..=side - crop);
    let mut v = resample(base, side, (x0 as f64, y0 as f64, crop as f64, crop as f64), side);
    if flips {
        if rng.random_bool(0.5) {
            v.chunks_mut(side).for_each(|r| r.reverse());
        }
        if rng.random_bool(0.5) {
            let rows: Vec<Vec<f64>> = v.chunks(side).rev().map(<[f64]>::to_vec).collect();
            v = rows.concat();
        }
    }
    v
}

/// Global and local views of one preprocessed patch.
pub fn make_views<T: Real, R: Rng>(base: &[f64], side: usize, cfg: &DinoConfig, rng: &mut R) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let cast = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    let globals = (0..cfg.global_crops)
        .map(|_| cast(random_crop(base, side, cfg.global_scale, cfg.flips, rng)))
        .collect();
    let locals = (0..cfg.local_crops)
        .map(|_| cast(random_crop(base, side, cfg.local_scale, cfg.flips, rng)))
        .collect();
    (globals, locals)
}

/// Progress record passed to the training observer after each optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub ema_momentum: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: DinoState<T>,
    /// Mean batch loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// Plain SGD with momentum, weight decay on matrices and cosine step-size decay.
pub struct Optimizer<T> {
    velocity: ViTParams<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(like: &ViTParams<T>) -> Self {
        let mut velocity = like.clone();
        velocity
            .tensors_mut()
            .into_iter()
            .for_each(|t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        Self { velocity }
    }

    pub fn step(&mut self, params: &mut ViTParams<T>, grads: &ViTParams<T>, lr: f64, cfg: &DinoConfig) {
        let lr = T::lit(lr);
        let mu = T::lit(cfg.sgd_momentum);
        let wd = T::lit(cfg.weight_decay);
        let scale = if cfg.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|&g| g * g)
                .sum::<T>()
                .sqrt();
            let clip = T::lit(cfg.grad_clip);
            if norm > clip {
                clip / norm
            } else {
                T::one()
            }
        } else {
            T::one()
        };
        for ((p, g), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            let decay = if p.rows > 1 && p.cols > 1 { wd } else { T::zero() };
            for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                let grad = gv * scale + decay * *pv;
                *vv = mu * *vv + grad;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

fn cosine(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let t = step as f64 / (total - 1) as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One optimizer step on a batch of preprocessed patches. Returns the mean loss.
pub fn train_step<T: Real>(
    state: &mut DinoState<T>,
    optimizer: &mut Optimizer<T>,
    vit: &ViTConfig,
    cfg: &DinoConfig,
    batch: &[&[f64]],
    lr: f64,
    ema: f64,
    stream: u64,
) -> Result<f64> {
    let results: Vec<Result<DinoLoss<T>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, base)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream.wrapping_add(i as u64));
            let (globals, locals) = make_views::<T, _>(base, vit.input_size, cfg, &mut rng);
            dino_loss(state, vit, &globals, &locals, cfg)
        })
        .collect();

    let count = T::from_usize(batch.len()).unwrap();
    let mut grads = ViTParams::zeros(vit);
    let mut loss = 0.0;
    let mut teacher_logits = Vec::with_capacity(batch.len() * cfg.global_crops);
    for r in results {
        let item = r?;
        loss += item.loss.to_f64().unwrap_or(f64::NAN);
        for (acc, g) in grads.tensors_mut().into_iter().zip(item.grads.tensors()) {
            acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a = *a + b / count);
        }
        teacher_logits.extend(item.teacher_logits);
    }
    loss /= batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            loss,
        });
    }

    optimizer.step(&mut state.student, &grads, lr, cfg);
    state.teacher = ema_update(&state.teacher, &state.student, T::lit(ema))?;
    if cfg.centering {
        state.center = center_update(&state.center, &teacher_logits, T::lit(cfg.center_momentum))?;
    }
    state.step += 1;
    Ok(loss)
}

/// Trains a fresh model on `patches`. Fully determined by `dino.seed`.
pub fn train<T: Real>(patches: &[Patch], vit: &ViTConfig, dino: &DinoConfig) -> Result<TrainOutcome<T>> {
    train_with(patches, vit, dino, |_| {})
}

pub fn train_with<T: Real>(
    patches: &[Patch],
    vit: &ViTConfig,
    dino: &DinoConfig,
    mut observe: impl FnMut(&StepReport),
) -> Result<TrainOutcome<T>> {
    vit.validate()?;
    dino.validate()?;
    if patches.is_empty() {
        return Err(Error::Argument("training needs at least one patch".into()));
    }
    let bases = patches
        .par_iter()
        .map(|p| preprocess(&p.to_image(), vit.input_size))
        .collect::<Result<Vec<_>>>()?;
    let state = DinoState::new(vit, dino.seed)?;
    train_from(state, &bases, vit, dino, &mut observe)
}

/// Continues training `state` on preprocessed inputs.
pub fn train_from<T: Real>(
    mut state: DinoState<T>,
    bases: &[Vec<f64>],
    vit: &ViTConfig,
    dino: &DinoConfig,
    mut observe: impl FnMut(&StepReport),
) -> Result<TrainOutcome<T>> {
    let per_epoch = bases.len().div_ceil(dino.batch_size);
    let total = per_epoch * dino.epochs;
    let mut optimizer = Optimizer::new(&state.student);
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..bases.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(dino.seed ^ 0x0005_eed0_f5b0_ff1e);
    let mut step = 0usize;
    for epoch in 0..dino.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, shuffler.random_range(0..=i));
        }
        for chunk in order.chunks(dino.batch_size) {
            let lr = cosine(dino.learning_rate, 0.0, step, total);
            let ema = if dino.ema_schedule {
                cosine(dino.ema_momentum, 1.0, step, total)
            } else {
                dino.ema_momentum
            };
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| bases[i].as_slice()).collect();
            let stream = (step * dino.batch_size) as u64;
            let loss = train_step(&mut state, &mut optimizer, vit, dino, &batch, lr, ema, stream)?;
            losses.push(loss);
            observe(&StepReport {
                step,
                epoch,
                loss,
                learning_rate: lr,
                ema_momentum: ema,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { state, losses })
}

/// Class-token embeddings of `patches`, one row each.
pub fn extract_features<T: Real>(
    state: &DinoState<T>,
    vit: &ViTConfig,
    patches: &[Patch],
    source: FeatureSource,
) -> Result<FeatureMatrix> {
    let images: Vec<GrayImage> = patches.iter().map(Patch::to_image).collect();
    extract_image_features(state, vit, &images, source)
}

pub fn extract_image_features<T: Real>(
    state: &DinoState<T>,
    vit: &ViTConfig,
    images: &[GrayImage],
    source: FeatureSource,
) -> Result<FeatureMatrix> {
    let params = match source {
        FeatureSource::Teacher => &state.teacher,
        FeatureSource::Student => &state.student,
    };
    let rows = images
        .par_iter()
        .map(|img| {
            let input: Vec<T> = preprocess(img, vit.input_size)?.into_iter().map(T::lit).collect();
            let (emb, _) = vit_forward(params, vit, &input)?;
            Ok(emb.into_iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    FeatureMatrix::from_rows(&rows)
}

/// Spread of the teacher's most-probable prototype over a set of inputs.
/// A collapsed teacher maps every input to one prototype (`argmax_std == 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseStats {
    pub argmax_std: f64,
    pub distinct_argmax: usize,
}

pub fn collapse_stats<T: Real>(state: &DinoState<T>, vit: &ViTConfig, cfg: &DinoConfig, bases: &[Vec<f64>]) -> Result<CollapseStats> {
    let center = cfg.centering.then_some(state.center.as_slice());
    let mut idx = Vec::with_capacity(bases.len());
    for base in bases {
        let input: Vec<T> = base.iter().map(|&v| T::lit(v)).collect();
        let (_, logits) = vit_forward(&state.teacher, vit, &input)?;
        let p = sharpen(&logits, T::lit(cfg.teacher_temp), center)?;
        let best = p
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        idx.push(best as f64);
    }
    let n = idx.len().max(1) as f64;
    let mean = idx.iter().sum::<f64>() / n;
    let var = idx.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut distinct = idx.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    Ok(CollapseStats {
        argmax_std: var.sqrt(),
        distinct_argmax: distinct.len(),
    })
}
