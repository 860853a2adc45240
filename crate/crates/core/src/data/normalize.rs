use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel affine standardization `(x - mean) / std` over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl Normalizer {
    pub fn new(mean: Vec<Real>, std: Vec<Real>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Config(format!("{} means for {} deviations", mean.len(), std.len())));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain { op: "normalize", detail: format!("standard deviation {s} must be positive") });
        }
        Ok(Normalizer { mean, std })
    }

    /// Population statistics per channel of the dataset's images.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let c = *ds.images.dims().last().unwrap_or(&1);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in ds.images.data().chunks_exact(c) {
            for (k, &v) in px.iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
        }
        let n = (ds.images.numel() / c).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt() as Real).collect();
        Normalizer::new(mean.into_iter().map(|m| m as Real).collect(), std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        match x.dims().last() {
            Some(&c) if c == self.channels() => Ok(()),
            _ => Err(Error::shape("normalize", format!("{} channels for input {}", self.channels(), x.shape()))),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.channels();
        let data = x.data().iter().enumerate().map(|(i, &v)| (v - self.mean[i % c]) / self.std[i % c]).collect();
        Tensor::new(x.dims().to_vec(), data)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.channels();
        let data = x.data().iter().enumerate().map(|(i, &v)| v * self.std[i % c] + self.mean[i % c]).collect();
        Tensor::new(x.dims().to_vec(), data)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[Real]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = write!(s, "mean={}\nstd={}\n", join(&self.mean), join(&self.std));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (key, vals) = line.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, detail: "expected key=values".into() })?;
            let parsed = vals
                .split(',')
                .map(|v| v.trim().parse::<Real>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: i + 1, detail: e.to_string() })?;
            match key.trim() {
                "mean" => mean = Some(parsed),
                "std" => std = Some(parsed),
                other => return Err(Error::Parse { line: i + 1, detail: format!("unknown key `{other}`") }),
            }
        }
        match (mean, std) {
            (Some(m), Some(s)) => Normalizer::new(m, s),
            _ => Err(Error::Parse { line: 0, detail: "need both mean and std lines".into() }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Normalizer::parse(&fs::read_to_string(path)?)
    }
}
