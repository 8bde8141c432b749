//! Two-stream feature datasets: synthetic generation and a JSONL file format.
//!
//! File layout: the first line is a header
//! `{"format_version":1,"d":..,"tree":{..},"counts":{"train":..,"val":..,"test":..}}`,
//! then one record per line `{"split":"train","body":..,"action":..,"fa":[..],"fb":[..]}`.
//! Externally extracted embeddings can be imported by writing this format.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, Mat};
use crate::taxonomy::{ActionTree, LabelPair};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Which feature stream of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub split: Split,
    pub body: usize,
    pub action: usize,
    pub fa: Vec<f64>,
    pub fb: Vec<f64>,
}

impl Sample {
    pub fn label(&self) -> LabelPair {
        LabelPair {
            body: self.body,
            action: self.action,
        }
    }

    pub fn stream(&self, s: Stream) -> &[f64] {
        match s {
            Stream::A => &self.fa,
            Stream::B => &self.fb,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn bump(&mut self, s: Split) {
        match s {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tree: ActionTree,
    pub d: usize,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    d: usize,
    tree: ActionTree,
    counts: SplitCounts,
}

impl Dataset {
    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for s in &self.samples {
            c.bump(s.split);
        }
        c
    }

    /// Indices of the samples in `split`, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn features(&self, idx: &[usize], stream: Stream) -> Mat {
        let mut m = Mat::zeros(idx.len(), self.d);
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.samples[i].stream(stream));
        }
        m
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<LabelPair> {
        idx.iter().map(|&i| self.samples[i].label()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.tree.validate_strict()?;
        for (i, s) in self.samples.iter().enumerate() {
            check_sample(&self.tree, self.d, s).map_err(|m| Error::contract(format!("sample {i}: {m}")))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            format_version: FORMAT_VERSION,
            d: self.d,
            tree: self.tree.clone(),
            counts: self.counts(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses the JSONL format. `source_name` labels error messages.
    pub fn from_jsonl(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines
            .next()
            .ok_or_else(|| err(1, "empty file, expected header".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| err(1, format!("malformed header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(err(1, format!("unsupported format_version {}", header.format_version)));
        }
        if header.d == 0 {
            return Err(err(1, "d must be >= 1".into()));
        }
        header.tree.validate_strict().map_err(|e| err(1, e.to_string()))?;
        let mut samples = Vec::new();
        let mut last_line = 1;
        for (n, line) in lines {
            last_line = n;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(line).map_err(|e| err(n, format!("malformed record: {e}")))?;
            check_sample(&header.tree, header.d, &s).map_err(|m| err(n, m))?;
            samples.push(s);
        }
        let ds = Dataset {
            tree: header.tree,
            d: header.d,
            samples,
        };
        let found = ds.counts();
        if found != header.counts {
            return Err(err(
                last_line,
                format!(
                    "truncated or inconsistent file: header declares {:?}, found {:?}",
                    header.counts, found
                ),
            ));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_jsonl(&text, &path.display().to_string())
    }
}

fn check_sample(tree: &ActionTree, d: usize, s: &Sample) -> std::result::Result<(), String> {
    if s.fa.len() != d || s.fb.len() != d {
        return Err(format!(
            "feature lengths ({}, {}) do not match d = {d}",
            s.fa.len(),
            s.fb.len()
        ));
    }
    if s.action >= tree.n_action {
        return Err(format!("action {} outside [0, {})", s.action, tree.n_action));
    }
    if !s.label().consistent(tree) {
        return Err(format!("body {} is not the parent of action {}", s.body, s.action));
    }
    if s.fa.iter().chain(&s.fb).any(|v| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(())
}

/// Synthetic two-level Gaussian mixture with tunable sibling ambiguity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of action classes under each body class.
    pub children: Vec<usize>,
    pub d: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Pairwise angle between body centers, degrees.
    pub body_sep: f64,
    /// Pairwise angle between sibling action centers, degrees.
    pub action_sep: f64,
    pub noise_sigma: f64,
    /// Share of noise common to both streams of a sample, in [0, 1].
    pub stream_corr: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            children: vec![5, 8, 9, 6, 12, 7, 5],
            d: 64,
            samples_per_class: 40,
            seed: 0,
            body_sep: 90.0,
            action_sep: 20.0,
            noise_sigma: 0.095,
            stream_corr: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.children.is_empty() || self.children.contains(&0) {
            return bad("children must list at least one body, each with >= 1 action".into());
        }
        if self.d == 0 || self.samples_per_class == 0 {
            return bad("d and samples_per_class must be >= 1".into());
        }
        if !(self.body_sep > 0.0 && self.body_sep <= 180.0) {
            return bad(format!("body_sep must be in (0, 180], got {}", self.body_sep));
        }
        if !(0.0..=180.0).contains(&self.action_sep) {
            return bad(format!("action_sep must be in [0, 180], got {}", self.action_sep));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.stream_corr) {
            return bad(format!("stream_corr must be in [0, 1], got {}", self.stream_corr));
        }
        Ok(())
    }
}

/// Random orthonormal basis of R^d (Gram-Schmidt on Gaussian draws).
fn random_basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// `n` unit vectors with pairwise cosine `c`, symmetric about `axis`.
///
/// Uses `v_i = a·axis + b·u_i` with `u_i` the centred unit simplex spanned by
/// `dirs` (orthonormal and orthogonal to `axis`), `a² = (c(n−1)+1)/n`.
fn spread(n: usize, c: f64, axis: &[f64], dirs: &[Vec<f64>], what: &str) -> Result<Vec<Vec<f64>>> {
    if n == 1 {
        return Ok(vec![axis.to_vec()]);
    }
    let floor = -1.0 / (n as f64 - 1.0);
    if c < floor - 1e-12 {
        return Err(Error::Generation(format!(
            "{n} {what} cannot have pairwise cosine {c:.4}; the minimum is {floor:.4}"
        )));
    }
    let a2 = ((c * (n as f64 - 1.0) + 1.0) / n as f64).clamp(0.0, 1.0);
    let (a, b) = (a2.sqrt(), (1.0 - a2).sqrt());
    let d = axis.len();
    let mut mean = vec![0.0; d];
    for e in &dirs[..n] {
        axpy(1.0 / n as f64, e, &mut mean);
    }
    let scale = (n as f64 / (n as f64 - 1.0)).sqrt();
    Ok(dirs[..n]
        .iter()
        .map(|e| {
            let mut v: Vec<f64> = axis.iter().map(|x| a * x).collect();
            for ((vi, ei), mi) in v.iter_mut().zip(e).zip(&mean) {
                *vi += b * scale * (ei - mi);
            }
            v
        })
        .collect())
}

/// Unit class centers `(body_centers, action_centers)` for `cfg`.
pub fn class_centers(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n_body = cfg.children.len();
    let n_action: usize = cfg.children.iter().sum();
    // Body directions use n_body basis vectors (their mean is the symmetry
    // axis); each sibling group needs as many fresh directions as it has members.
    let needed = if n_body == 1 { 1 } else { n_body } + n_action;
    if needed > cfg.d {
        return Err(Error::Generation(format!(
            "{n_body} bodies and {n_action} actions need d >= {needed}, got d = {}",
            cfg.d
        )));
    }
    let basis = random_basis(cfg.d, rng);
    let (body_dirs, rest) = basis.split_at(if n_body == 1 { 1 } else { n_body });
    let body_centers = if n_body == 1 {
        vec![body_dirs[0].clone()]
    } else {
        let mut axis = vec![0.0; cfg.d];
        body_dirs.iter().for_each(|e| axpy(1.0, e, &mut axis));
        let n = norm(&axis);
        axis.iter_mut().for_each(|x| *x /= n);
        spread(
            n_body,
            cfg.body_sep.to_radians().cos(),
            &axis,
            body_dirs,
            "body centers",
        )?
    };
    let c_action = cfg.action_sep.to_radians().cos();
    let mut action_centers = Vec::with_capacity(n_action);
    let mut off = 0;
    for (b, &k) in cfg.children.iter().enumerate() {
        let group = spread(
            k,
            c_action,
            &body_centers[b],
            &rest[off..off + k],
            "sibling action centers",
        )?;
        action_centers.extend(group);
        off += k;
    }
    Ok((body_centers, action_centers))
}

/// Generates a dataset; bit-reproducible for a fixed config.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let tree = ActionTree::from_group_sizes(&cfg.children);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, centers) = class_centers(cfg, &mut rng)?;
    let (shared, own) = (cfg.stream_corr.sqrt(), (1.0 - cfg.stream_corr).sqrt());
    let n = cfg.samples_per_class;
    let n_train = (n as f64 * 0.5).round() as usize;
    let n_val = (n as f64 * 0.25).round() as usize;
    let mut samples = Vec::with_capacity(n * tree.n_action);
    for (a, center) in centers.iter().enumerate() {
        let mut splits: Vec<Split> = (0..n)
            .map(|i| match i {
                i if i < n_train => Split::Train,
                i if i < n_train + n_val => Split::Val,
                _ => Split::Test,
            })
            .collect();
        splits.shuffle(&mut rng);
        for split in splits {
            let mut draw = || -> Vec<f64> { (0..cfg.d).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let zs = draw();
            let za = draw();
            let zb = draw();
            let make = |z: &[f64]| -> Vec<f64> {
                center
                    .iter()
                    .zip(&zs)
                    .zip(z)
                    .map(|((c, s), o)| c + cfg.noise_sigma * (shared * s + own * o))
                    .collect()
            };
            samples.push(Sample {
                split,
                body: tree.parent[a],
                action: a,
                fa: make(&za),
                fb: make(&zb),
            });
        }
    }
    Ok(Dataset {
        tree,
        d: cfg.d,
        samples,
    })
}
