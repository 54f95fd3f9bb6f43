//! Shared CNN backbone, ruler head, score-weighted fusion and classifier.
//!
//! All parameters live in one flat `f64` vector described by a
//! [`TensorInfo`] layout, which keeps the optimizer and the checkpoint
//! format trivial.

mod checkpoint;
mod layers;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::BackboneSpec;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{ce_logit_grad, ce_loss, rank_split, ro_loss_grad, LossTerms};
use crate::rng::make_rng;
use layers::{Block, BlockTrace};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Input channels of the network (the fused flow image).
pub const INPUT_CHANNELS: usize = 3;

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub delta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

/// Result of [`Model::loss_and_grad`] for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub terms: LossTerms,
    pub grad: Vec<f64>,
    pub prediction: Vec<f64>,
}

/// Everything [`Model::forward`] computes for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Per-candidate backbone features, `K x D`.
    pub features: Vec<Vec<f64>>,
    /// Ruler logits before the sigmoid.
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
    pub fused: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub prediction: Vec<f64>,
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Order-independent sum, so reordering candidates reorders the scores
/// bit for bit.
fn sorted_sum(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum()
}

/// Sigmoid each logit and normalize to sum one.
pub fn normalize_scores(logits: &[f64]) -> Vec<f64> {
    let sig: Vec<f64> = logits.iter().map(|&s| sigmoid(s)).collect();
    let total = sorted_sum(&sig);
    sig.into_iter().map(|s| s / total).collect()
}

/// `sum_j alpha_j * features_j`.
pub fn fuse_features(features: &[Vec<f64>], alpha: &[f64]) -> Result<Vec<f64>> {
    if features.len() != alpha.len() || features.is_empty() {
        return Err(Error::Shape(format!("{} features but {} scores", features.len(), alpha.len())));
    }
    let d = features[0].len();
    let mut out = vec![0.0; d];
    for (f, &a) in features.iter().zip(alpha) {
        if f.len() != d {
            return Err(Error::Shape(format!("feature lengths {} and {d}", f.len())));
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Trace {
    blocks: Vec<BlockTrace>,
    final_hw: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: BackboneSpec,
    n_classes: usize,
    /// Candidate count the model was trained with; informational.
    k: usize,
    layout: Vec<TensorInfo>,
    params: Vec<f64>,
}

fn build_layout(spec: &BackboneSpec, n_classes: usize) -> Vec<TensorInfo> {
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let t = TensorInfo { name, shape, offset };
        offset += t.len();
        layout.push(t);
    };
    let mut c_in = INPUT_CHANNELS;
    for (i, &c) in spec.channels.iter().enumerate() {
        push(format!("f1.conv{i}.weight"), vec![c, 3, 3, c_in]);
        push(format!("f1.conv{i}.bias"), vec![c]);
        c_in = c;
    }
    let d = spec.feature_dim();
    push("f2.weight".into(), vec![d]);
    push("f2.bias".into(), vec![1]);
    push("f3.weight".into(), vec![n_classes, d]);
    push("f3.bias".into(), vec![n_classes]);
    layout
}

impl Model {
    /// Fan-in scaled Gaussian initialization seeded by `seed`; biases start at
    /// zero.
    pub fn new(spec: &BackboneSpec, n_classes: usize, k: usize, seed: u64) -> Result<Self> {
        if spec.channels.is_empty() || spec.channels.contains(&0) {
            return Err(Error::Config(format!("backbone {spec} has an empty layer")));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        let layout = build_layout(spec, n_classes);
        let total = layout.last().map(|t| t.offset + t.len()).unwrap_or(0);
        let mut params = vec![0.0; total];
        let mut rng = make_rng(seed, "init");
        for t in &layout {
            if t.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product::<usize>().max(1);
            let std = if t.name.starts_with("f1.") {
                (2.0 / fan_in as f64).sqrt()
            } else if t.name == "f2.weight" {
                (1.0 / t.len() as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[t.range()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Model { spec: spec.clone(), n_classes, k, layout, params })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layout(&self) -> &[TensorInfo] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.iter().find(|t| t.name == name).map(|t| &self.params[t.range()])
    }

    /// Smallest square input the pooling stack accepts.
    pub fn min_input_size(&self) -> usize {
        1 << self.spec.channels.len()
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, Block)> + '_ {
        let mut c_in = INPUT_CHANNELS;
        self.spec.channels.iter().enumerate().map(move |(i, &c)| {
            let b = Block { c_in, c_out: c };
            c_in = c;
            (i, b)
        })
    }

    fn head(&self) -> (&[f64], f64, &[f64], &[f64]) {
        let n = self.layout.len();
        let p = &self.params;
        (
            &p[self.layout[n - 4].range()],
            p[self.layout[n - 3].offset],
            &p[self.layout[n - 2].range()],
            &p[self.layout[n - 1].range()],
        )
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        let (h, w, c) = img.shape();
        let min = self.min_input_size();
        if c != INPUT_CHANNELS || h < min || w < min {
            return Err(Error::Shape(format!(
                "backbone {} expects at least {min}x{min}x{INPUT_CHANNELS} inputs, got {h}x{w}x{c}",
                self.spec
            )));
        }
        Ok(())
    }

    fn embed(&self, img: &Image, keep: bool) -> (Vec<f64>, Option<Trace>) {
        let (mut h, mut w, _) = img.shape();
        let mut x: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let mut traces = Vec::new();
        for (i, block) in self.blocks() {
            let wt = &self.params[self.layout[2 * i].range()];
            let bs = &self.params[self.layout[2 * i + 1].range()];
            let (out, trace) = block.forward(&x, h, w, wt, bs, keep);
            if let Some(t) = trace {
                traces.push(t);
            }
            x = out;
            h /= 2;
            w /= 2;
        }
        let d = self.feature_dim();
        let mut feat = vec![0.0; d];
        for px in x.chunks_exact(d) {
            for (f, v) in feat.iter_mut().zip(px) {
                *f += v;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        feat.iter_mut().for_each(|f| *f *= inv);
        (feat, keep.then_some(Trace { blocks: traces, final_hw: (h, w) }))
    }

    /// Backbone features for each candidate input, one parameter set shared
    /// by all of them.
    pub fn backbone_forward(&self, inputs: &[Image]) -> Result<Vec<Vec<f64>>> {
        for img in inputs {
            self.check_input(img)?;
        }
        Ok(inputs.iter().map(|img| self.embed(img, false).0).collect())
    }

    /// Per-candidate ruler logits `f2(x_j)`.
    pub fn ruler_logits(&self, features: &[Vec<f64>]) -> Vec<f64> {
        let (w2, b2, _, _) = self.head();
        features.iter().map(|f| dot(w2, f) + b2).collect()
    }

    pub fn ruler_scores(&self, features: &[Vec<f64>]) -> Vec<f64> {
        normalize_scores(&self.ruler_logits(features))
    }

    pub fn class_logits(&self, fused: &[f64]) -> Vec<f64> {
        let (_, _, w3, b3) = self.head();
        let d = self.feature_dim();
        (0..self.n_classes).map(|c| dot(&w3[c * d..(c + 1) * d], fused) + b3[c]).collect()
    }

    pub fn classify(&self, fused: &[f64]) -> Vec<f64> {
        softmax(&self.class_logits(fused))
    }

    fn head_forward(&self, features: Vec<Vec<f64>>) -> Result<Forward> {
        let logits = self.ruler_logits(&features);
        let alpha = normalize_scores(&logits);
        let fused = fuse_features(&features, &alpha)?;
        let class_logits = self.class_logits(&fused);
        let prediction = softmax(&class_logits);
        Ok(Forward { features, logits, alpha, fused, class_logits, prediction })
    }

    pub fn forward(&self, inputs: &[Image]) -> Result<Forward> {
        if inputs.is_empty() {
            return Err(Error::Shape("no candidate inputs".into()));
        }
        let features = self.backbone_forward(inputs)?;
        self.head_forward(features)
    }

    /// Per-sample loss terms without gradients.
    pub fn loss(&self, inputs: &[Image], target: &[f64], obj: &Objective) -> Result<LossTerms> {
        let fwd = self.forward(inputs)?;
        let ce = ce_loss(&fwd.prediction, target)?;
        let (ro, gap) = if fwd.alpha.len() >= 2 {
            let (ro, _) = ro_loss_grad(&fwd.alpha, obj.delta, obj.gamma)?;
            (ro, rank_split(&fwd.alpha, obj.gamma)?.gap())
        } else {
            (0.0, 0.0)
        };
        Ok(LossTerms { ce, ro, gap })
    }

    /// Per-sample loss terms and the gradient of `ce + lambda * ro` with
    /// respect to every parameter. With a single candidate the ranking term
    /// is absent.
    pub fn loss_and_grad(&self, inputs: &[Image], target: &[f64], obj: &Objective) -> Result<SampleGrad> {
        if inputs.is_empty() {
            return Err(Error::Shape("no candidate inputs".into()));
        }
        for img in inputs {
            self.check_input(img)?;
        }
        let mut features = Vec::with_capacity(inputs.len());
        let mut traces = Vec::with_capacity(inputs.len());
        for img in inputs {
            let (f, t) = self.embed(img, true);
            features.push(f);
            traces.push(t.expect("trace kept"));
        }
        let fwd = self.head_forward(features)?;
        let k = inputs.len();
        let d = self.feature_dim();
        let n = self.layout.len();
        let mut grad = vec![0.0; self.params.len()];

        let ce = ce_loss(&fwd.prediction, target)?;
        let dz = ce_logit_grad(&fwd.prediction, target)?;
        let (ro, ro_grad, gap) = if k >= 2 {
            let (ro, g) = ro_loss_grad(&fwd.alpha, obj.delta, obj.gamma)?;
            (ro, g, rank_split(&fwd.alpha, obj.gamma)?.gap())
        } else {
            (0.0, vec![0.0; k], 0.0)
        };

        // classifier
        let (w2, _, w3, _) = self.head();
        let mut d_fused = vec![0.0; d];
        {
            let g3 = self.layout[n - 2].range();
            for c in 0..self.n_classes {
                for i in 0..d {
                    grad[g3.start + c * d + i] += dz[c] * fwd.fused[i];
                    d_fused[i] += dz[c] * w3[c * d + i];
                }
                grad[self.layout[n - 1].offset + c] += dz[c];
            }
        }

        // fusion and ruler
        let d_alpha: Vec<f64> = (0..k).map(|j| dot(&d_fused, &fwd.features[j]) + obj.lambda * ro_grad[j]).collect();
        let sig: Vec<f64> = fwd.logits.iter().map(|&s| sigmoid(s)).collect();
        let total = sorted_sum(&sig);
        let mean_g: f64 = d_alpha.iter().zip(&fwd.alpha).map(|(g, a)| g * a).sum();
        let mut d_feats: Vec<Vec<f64>> = fwd.alpha.iter().map(|&a| d_fused.iter().map(|g| a * g).collect()).collect();
        let w2_off = self.layout[n - 4].offset;
        let b2_off = self.layout[n - 3].offset;
        for j in 0..k {
            let d_sig = (d_alpha[j] - mean_g) / total;
            let d_s = d_sig * sig[j] * (1.0 - sig[j]);
            grad[b2_off] += d_s;
            for i in 0..d {
                grad[w2_off + i] += d_s * fwd.features[j][i];
                d_feats[j][i] += d_s * w2[i];
            }
        }

        // backbone
        let blocks: Vec<Block> = self.blocks().map(|(_, b)| b).collect();
        for (trace, d_feat) in traces.iter().zip(&d_feats) {
            let (h, w) = trace.final_hw;
            let inv = 1.0 / (h * w) as f64;
            let mut g: Vec<f64> = Vec::with_capacity(h * w * d);
            for _ in 0..h * w {
                g.extend(d_feat.iter().map(|v| v * inv));
            }
            for i in (0..blocks.len()).rev() {
                let wr = self.layout[2 * i].range();
                let br = self.layout[2 * i + 1].range();
                let (lo, hi) = grad.split_at_mut(br.start);
                let d_weight = &mut lo[wr.clone()];
                let d_bias = &mut hi[..br.len()];
                match blocks[i].backward(&trace.blocks[i], &g, &self.params[wr], d_weight, d_bias, i > 0) {
                    Some(next) => g = next,
                    None => break,
                }
            }
        }
        Ok(SampleGrad { terms: LossTerms { ce, ro, gap }, grad, prediction: fwd.prediction })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(&BackboneSpec::custom(vec![3, 4]), 3, 4, 7).unwrap()
    }

    fn input(seed: u64, size: usize) -> Image {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Image::from_fn(size, size, 3, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s % 2001) as f32 / 1000.0) - 1.0
        })
    }

    #[test]
    fn layout_is_contiguous() {
        let m = tiny();
        let mut off = 0;
        for t in m.layout() {
            assert_eq!(t.offset, off);
            off += t.len();
        }
        assert_eq!(off, m.num_params());
        assert_eq!(m.tensor("f2.weight").unwrap().len(), 4);
        assert_eq!(m.tensor("f3.weight").unwrap().len(), 12);
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::new(&BackboneSpec::tiny(), 3, 8, 1).unwrap();
        let b = Model::new(&BackboneSpec::tiny(), 3, 8, 1).unwrap();
        let c = Model::new(&BackboneSpec::tiny(), 3, 8, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn ruler_oracle() {
        let a = normalize_scores(&[2.0, 0.0, 0.0]);
        for (got, want) in a.iter().zip([0.468311, 0.265845, 0.265845]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!((sigmoid(2.0) - 0.880797).abs() < 1e-6);
        assert!(normalize_scores(&[0.3; 5]).iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let q = softmax(&[1001f64.ln() + 1000.0, 1000.0, 1000.0]);
        assert!(q.iter().all(|v| v.is_finite()));
        assert_eq!(softmax(&[0.5, 0.5]), vec![0.5, 0.5]);
    }

    #[test]
    fn fusion_cases() {
        let f = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(fuse_features(&f, &[0.0, 1.0, 0.0]).unwrap(), vec![3.0, 4.0]);
        let m = fuse_features(&f, &[1.0 / 3.0; 3]).unwrap();
        assert!((m[0] - 3.0).abs() < 1e-12 && (m[1] - 4.0).abs() < 1e-12);
        assert!(fuse_features(&f, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn shared_backbone() {
        let m = tiny();
        let (a, b) = (input(1, 8), input(2, 8));
        let feats = m.backbone_forward(&[a.clone(), b.clone(), a.clone()]).unwrap();
        assert_eq!(feats[0], feats[2]);
        let feats2 = m.backbone_forward(&[a, input(3, 8), b]).unwrap();
        assert_eq!(feats[0], feats2[0]);
        assert_eq!(feats[1], feats2[2]);
        let z = m.backbone_forward(&[Image::zeros(8, 8, 3)]).unwrap();
        assert!(z[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(m.forward(&[Image::zeros(8, 8, 1)]).is_err());
        assert!(m.forward(&[Image::zeros(2, 2, 3)]).is_err());
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn identical_candidates_reduce_to_one() {
        let m = tiny();
        let x = input(5, 8);
        let fwd = m.forward(&vec![x.clone(); 4]).unwrap();
        assert!(fwd.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let single = m.classify(&m.backbone_forward(&[x]).unwrap()[0]);
        for (a, b) in fwd.prediction.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = tiny();
        let inputs: Vec<Image> = (0..4).map(|i| input(10 + i, 8)).collect();
        let target = [0.0, 1.0, 0.0];
        let obj = Objective { delta: 0.7, gamma: 0.25, lambda: 1.0 };
        let analytic = m.loss_and_grad(&inputs, &target, &obj).unwrap().grad;
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let orig = m.params[i];
            m.params[i] = orig + eps;
            let up = m.loss(&inputs, &target, &obj).unwrap().total(obj.lambda);
            m.params[i] = orig - eps;
            let down = m.loss(&inputs, &target, &obj).unwrap().total(obj.lambda);
            m.params[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            worst = worst.max(err);
        }
        assert!(worst < 1e-3, "{worst}");
    }
}
