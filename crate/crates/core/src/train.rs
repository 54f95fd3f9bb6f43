//! Mini-batch Adam training with cosine learning-rate annealing and
//! candidate-consistent augmentation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{argmax, Config, LabelSpace};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossTerms;
use crate::model::{Forward, Model, Objective};
use crate::par::Exec;
use crate::rng::make_rng;

/// Network inputs for one clip, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub sample_id: String,
    /// One three-channel image per candidate.
    pub inputs: Vec<Image>,
    pub label: usize,
}

/// Geometric transform shared by all candidates of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub y0: f32,
    pub x0: f32,
    pub side: f32,
    pub flip: bool,
}

impl Augment {
    /// Random resized crop with area fraction in `[0.8, 1.0]` and unit aspect
    /// ratio, plus a horizontal flip with probability one half.
    pub fn sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let scale: f32 = rng.random_range(0.8..=1.0);
        let side = size as f32 * scale.sqrt();
        let slack = size as f32 - side;
        let y0 = rng.random_range(0.0..=slack);
        let x0 = rng.random_range(0.0..=slack);
        let flip = rng.random_bool(0.5);
        Augment { y0, x0, side, flip }
    }

    /// Crops and resizes back to the input size; a flip mirrors the image and
    /// negates the horizontal flow channel.
    pub fn apply(&self, img: &Image) -> Image {
        let (h, w, _) = img.shape();
        let mut out = img.resize_region(self.y0, self.x0, self.side, self.side, h, w);
        if self.flip {
            out = out.flip_horizontal();
            for px in out.data_mut().chunks_exact_mut(img.channels()) {
                px[0] = -px[0];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Disable to train on the raw inputs.
    pub no_augment: bool,
    /// JSON-lines log, one record per epoch.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub ro: f64,
    /// Mean of the score gap between the high and low groups.
    pub mean_gap: f64,
    /// Fraction of samples whose gap reached the margin.
    pub frac_gap_at_margin: f64,
    /// Percent, on the augmented training inputs.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
}

/// Adam with the usual defaults and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Cosine annealing from `lr0` at step 0 to zero at `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

pub fn objective(config: &Config) -> Objective {
    Objective { delta: config.delta, gamma: config.gamma, lambda: config.lambda }
}

fn check_data(data: &[TrainSample], n_classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let k = data[0].inputs.len();
    for s in data {
        if s.inputs.len() != k {
            return Err(Error::Invalid(format!(
                "sample {} has {} candidates, expected {k}",
                s.sample_id,
                s.inputs.len()
            )));
        }
        if s.label >= n_classes {
            return Err(Error::Range(format!("sample {} label {} out of range", s.sample_id, s.label)));
        }
    }
    Ok(())
}

/// Trains a fresh model for `config.epochs` epochs. Initialization,
/// shuffling and augmentation draw from streams of `config.seed`, so two
/// calls with equal arguments return identical models.
pub fn train(config: &Config, labels: &LabelSpace, data: &[TrainSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(data, labels.len())?;
    let k = data[0].inputs.len();
    let mut model = Model::new(&config.backbone, labels.len(), k, config.seed)?;
    let obj = objective(config);
    let mut adam = Adam::new(model.num_params());
    let mut shuffle_rng = make_rng(config.seed, "shuffle");
    let mut aug_rng = make_rng(config.seed, "aug");
    let batch = config.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = match &opts.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossTerms::default();
        let (mut at_margin, mut correct) = (0usize, 0usize);
        let mut lr = config.initial_lr;
        for chunk in order.chunks(batch) {
            let inputs: Vec<(usize, Vec<Image>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    if opts.no_augment {
                        (i, s.inputs.clone())
                    } else {
                        let size = s.inputs[0].height().min(s.inputs[0].width());
                        let aug = Augment::sample(size, &mut aug_rng);
                        (i, s.inputs.iter().map(|im| aug.apply(im)).collect())
                    }
                })
                .collect();
            let m = &model;
            let results = opts.exec.map(&inputs, |(i, imgs)| {
                let target = labels.one_hot(data[*i].label);
                m.loss_and_grad(imgs, &target, &obj)
            });
            let mut grad = vec![0.0; model.num_params()];
            for ((i, _), r) in inputs.iter().zip(results) {
                let r = r?;
                let (terms, g, pred) = (r.terms, r.grad, argmax(&r.prediction));
                let total = terms.total(obj.lambda);
                if !total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, step {step}, sample {}: ce {} ro {}",
                        data[*i].sample_id, terms.ce, terms.ro
                    )));
                }
                sum.ce += terms.ce;
                sum.ro += terms.ro;
                sum.gap += terms.gap;
                if k >= 2 && terms.gap >= obj.delta {
                    at_margin += 1;
                }
                if pred == data[*i].label {
                    correct += 1;
                }
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            lr = cosine_lr(config.initial_lr, step, total_steps);
            adam.step(model.params_mut(), &grad, lr);
            step += 1;
        }
        let n = data.len() as f64;
        let stats = EpochStats {
            epoch,
            lr,
            total: (sum.ce + obj.lambda * sum.ro) / n,
            ce: sum.ce / n,
            ro: sum.ro / n,
            mean_gap: sum.gap / n,
            frac_gap_at_margin: at_margin as f64 / n,
            train_accuracy: 100.0 * correct as f64 / n,
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} ce {:.4} ro {:.4} gap {:.3} acc {:.1}",
            stats.total,
            stats.ce,
            stats.ro,
            stats.mean_gap,
            stats.train_accuracy
        );
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&stats)?)?;
        }
        epochs.push(stats);
    }
    Ok(TrainOutcome { model, epochs })
}

/// Predicted class and the full forward pass.
pub fn predict(model: &Model, inputs: &[Image]) -> Result<(usize, Forward)> {
    let fwd = model.forward(inputs)?;
    Ok((argmax(&fwd.prediction), fwd))
}

/// Score-gap statistics of a trained model on un-augmented inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub mean_gap: f64,
    pub frac_at_margin: f64,
    /// Percent.
    pub accuracy: f64,
}

pub fn gap_stats(model: &Model, data: &[TrainSample], config: &Config, exec: Exec) -> Result<GapStats> {
    let obj = objective(config);
    let rows = exec.map(data, |s| {
        let (pred, fwd) = predict(model, &s.inputs)?;
        let gap = if fwd.alpha.len() >= 2 { crate::losses::rank_split(&fwd.alpha, obj.gamma)?.gap() } else { 0.0 };
        Ok::<_, Error>((gap, pred == s.label))
    });
    let mut sum = 0.0;
    let (mut at, mut ok) = (0usize, 0usize);
    for r in rows {
        let (gap, hit) = r?;
        sum += gap;
        at += (gap >= obj.delta) as usize;
        ok += hit as usize;
    }
    let n = data.len().max(1) as f64;
    Ok(GapStats { mean_gap: sum / n, frac_at_margin: at as f64 / n, accuracy: 100.0 * ok as f64 / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneSpec;

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(1.0, s, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            adam.step(&mut p, &g, 0.01);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn flip_negates_horizontal_flow() {
        let img = Image::from_fn(4, 4, 3, |y, x, c| (y * 16 + x * 4 + c) as f32);
        let aug = Augment { y0: 0.0, x0: 0.0, side: 4.0, flip: true };
        let out = aug.apply(&img);
        assert_eq!(out.get(1, 0, 0), -img.get(1, 3, 0));
        assert_eq!(out.get(1, 0, 1), img.get(1, 3, 1));
        assert_eq!(out.get(2, 1, 2), img.get(2, 2, 2));
        let id = Augment { y0: 0.0, x0: 0.0, side: 4.0, flip: false };
        assert_eq!(id.apply(&img), img);
    }

    #[test]
    fn augment_range() {
        let mut rng = make_rng(1, "t");
        for _ in 0..1000 {
            let a = Augment::sample(32, &mut rng);
            let area = (a.side / 32.0).powi(2);
            assert!((0.8 - 1e-5..=1.0 + 1e-5).contains(&area));
            assert!(a.y0 >= 0.0 && a.y0 + a.side <= 32.0 + 1e-4);
        }
    }

    fn toy(n: usize) -> (Vec<TrainSample>, LabelSpace) {
        let labels = LabelSpace::new(vec!["a".into(), "b".into()]).unwrap();
        let data = (0..n)
            .map(|i| {
                let label = i % 2;
                let inputs = (0..3)
                    .map(|j| {
                        Image::from_fn(8, 8, 3, |y, x, c| {
                            let s = if label == 0 { 1.0 } else { -1.0 };
                            if c == 1 {
                                s * 0.3 * (j as f32 + 1.0)
                            } else {
                                ((x + y + i) % 3) as f32 * 0.1
                            }
                        })
                    })
                    .collect();
                TrainSample { sample_id: format!("t{i}"), inputs, label }
            })
            .collect();
        (data, labels)
    }

    fn toy_config() -> Config {
        Config {
            k: 3,
            gamma: 0.3,
            image_size: 8,
            batch_size: 4,
            initial_lr: 1e-2,
            epochs: 15,
            backbone: BackboneSpec::custom(vec![4, 4]),
            ..Config::default()
        }
    }

    #[test]
    fn learns_and_is_deterministic() {
        let (data, labels) = toy(8);
        let cfg = toy_config();
        let opts = TrainOptions { exec: Exec::Parallel, ..Default::default() };
        let a = train(&cfg, &labels, &data, &opts).unwrap();
        let b = train(&cfg, &labels, &data, &TrainOptions { exec: Exec::Sequential, ..Default::default() }).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epochs, b.epochs);
        let stats = gap_stats(&a.model, &data, &cfg, Exec::Sequential).unwrap();
        assert_eq!(stats.accuracy, 100.0);
        assert!(a.epochs.last().unwrap().total < a.epochs[0].total);
    }

    #[test]
    fn writes_log_and_rejects_bad_data() {
        let (data, labels) = toy(4);
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("train.jsonl");
        let cfg = Config { epochs: 2, ..toy_config() };
        train(&cfg, &labels, &data, &TrainOptions { log: Some(log.clone()), ..Default::default() }).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        assert_eq!(text.lines().count(), 2);
        let rec: EpochStats = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 0);
        assert!(train(&cfg, &labels, &[], &TrainOptions::default()).is_err());
        let mut bad = data.clone();
        bad[0].label = 7;
        assert!(train(&cfg, &labels, &bad, &TrainOptions::default()).is_err());
    }
}
