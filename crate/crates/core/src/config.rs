//! Run configuration, backbone selection and label spaces.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain convolutional backbone: one `conv3x3 -> relu -> avgpool2` block per
/// entry of `channels`, then global average pooling. The feature dimension is
/// the last channel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub channels: Vec<usize>,
}

impl BackboneSpec {
    /// Desk-scale default, feature dimension 128.
    pub fn small() -> Self {
        Self { name: "small".into(), channels: vec![16, 32, 64, 128] }
    }

    /// Used by the end-to-end tests and quick experiments.
    pub fn tiny() -> Self {
        Self { name: "tiny".into(), channels: vec![8, 16, 32] }
    }

    /// Full-scale width (feature dimension 512).
    pub fn wide() -> Self {
        Self { name: "wide".into(), channels: vec![64, 128, 256, 512] }
    }

    pub fn custom(channels: Vec<usize>) -> Self {
        let name = format!("conv:{}", channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-"));
        Self { name, channels }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("backbone has at least one block")
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for BackboneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "tiny" => return Ok(Self::tiny()),
            "small" => return Ok(Self::small()),
            "wide" => return Ok(Self::wide()),
            _ => {}
        }
        let body = s.strip_prefix("conv:").ok_or_else(|| Error::Config(format!("unknown backbone `{s}`")))?;
        let channels = body
            .split('-')
            .map(|c| {
                c.parse::<usize>()
                    .ok()
                    .filter(|&c| c > 0)
                    .ok_or_else(|| Error::Config(format!("bad channel count `{c}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if channels.is_empty() {
            return Err(Error::Config(format!("backbone `{s}` has no blocks")));
        }
        Ok(Self::custom(channels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// Number of segments, and so of candidates per clip.
    pub k: usize,
    /// Ranking margin.
    pub delta: f64,
    /// Fraction of candidates in the high-expressiveness group.
    pub gamma: f64,
    /// Weight of the ranking loss.
    pub lambda: f64,
    pub image_size: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub backbone: BackboneSpec,
    /// Flow displacement (pixels) mapped to 1.0 in the network input.
    pub flow_scale: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            k: 8,
            delta: 0.7,
            gamma: 0.1,
            lambda: 1.0,
            image_size: 112,
            batch_size: 64,
            initial_lr: 1e-4,
            epochs: 30,
            seed: 0,
            backbone: BackboneSpec::small(),
            flow_scale: 8.0,
        }
    }
}

/// Size of the high group, `ceil(gamma * k)`.
pub fn high_group_size(k: usize, gamma: f64) -> usize {
    (gamma * k as f64).ceil() as usize
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        let kh = high_group_size(self.k, self.gamma);
        if kh > self.k - 1 {
            return bad(format!(
                "gamma {} with k {} puts {kh} candidates in the high group, leaving the low group empty",
                self.gamma, self.k
            ));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.image_size < 4 {
            return bad(format!("image_size too small: {}", self.image_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.flow_scale > 0.0 && self.flow_scale.is_finite()) {
            return bad(format!("flow_scale must be positive, got {}", self.flow_scale));
        }
        Ok(())
    }

    /// Parses the `key=value` format and validates the result. Keys not given
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value. Does not validate.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "k" => self.k = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "initial_lr" => self.initial_lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "backbone" => self.backbone = value.parse()?,
            "flow_scale" => self.flow_scale = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Serializes to the same `key=value` format accepted by [`Config::parse`].
    pub fn to_text(&self) -> String {
        format!(
            "k={}\ndelta={}\ngamma={}\nlambda={}\nimage_size={}\nbatch_size={}\ninitial_lr={}\nepochs={}\nseed={}\nbackbone={}\nflow_scale={}\n",
            self.k,
            self.delta,
            self.gamma,
            self.lambda,
            self.image_size,
            self.batch_size,
            self.initial_lr,
            self.epochs,
            self.seed,
            self.backbone,
            self.flow_scale
        )
    }
}

/// Ordered class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Invalid(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn one_hot(&self, class: usize) -> Vec<f64> {
        assert!(class < self.len(), "class {class} outside label space of {}", self.len());
        let mut v = vec![0.0; self.len()];
        v[class] = 1.0;
        v
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!((c.k, c.delta, c.gamma, c.lambda), (8, 0.7, 0.1, 1.0));
        assert_eq!((c.image_size, c.batch_size, c.initial_lr), (112, 64, 1e-4));
    }

    #[test]
    fn gamma_that_empties_low_group_is_rejected() {
        let mut c = Config { gamma: 0.9, ..Config::default() }; // ceil(7.2) = 8 = k
        assert!(c.validate().is_err());
        c.gamma = 0.875; // ceil(7.0) = 7 = k - 1
        c.validate().unwrap();
        c.k = 2;
        c.gamma = 0.5;
        c.validate().unwrap();
        c.gamma = 0.6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parse_round_trips_and_rejects_unknown_keys() {
        let c = Config { k: 6, seed: 99, backbone: BackboneSpec::tiny(), ..Config::default() };
        let parsed = Config::parse(&c.to_text()).unwrap();
        assert_eq!(parsed, c);

        let text = "# comment\nk = 4 # trailing\n\nbackbone=conv:4-8\n";
        let p = Config::parse(text).unwrap();
        assert_eq!(p.k, 4);
        assert_eq!(p.backbone.channels, vec![4, 8]);
        assert_eq!(p.backbone.feature_dim(), 8);

        assert!(Config::parse("warmup=3\n").is_err());
        assert!(Config::parse("k\n").is_err());
        assert!(Config::parse("k=abc\n").is_err());
        assert!(Config::parse("k=1\n").is_err());
    }

    #[test]
    fn backbone_names() {
        assert_eq!("small".parse::<BackboneSpec>().unwrap().feature_dim(), 128);
        assert_eq!("wide".parse::<BackboneSpec>().unwrap().feature_dim(), 512);
        assert!("resnet".parse::<BackboneSpec>().is_err());
        assert!("conv:".parse::<BackboneSpec>().is_err());
        assert!("conv:4-0".parse::<BackboneSpec>().is_err());
    }

    #[test]
    fn one_hot_inverts_argmax() {
        let ls = LabelSpace::new(vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();
        for c in 0..ls.len() {
            let v = ls.one_hot(c);
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), ls.len() - 1);
            assert_eq!(argmax(&v), c);
        }
        assert!(LabelSpace::new(vec!["a".into(), "a".into()]).is_err());
    }
}
