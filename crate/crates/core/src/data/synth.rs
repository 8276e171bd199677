//! Synthetic frame-level corpus with planted label structure.
//!
//! Each video activates a few independent latent concepts. A concept shows up
//! in a contiguous run of frames as its direction `±μ_k` (the sign is drawn
//! per video, so a concept occupies two antipodal clusters) and switches on
//! the label of its leaf class. Leaf classes are paired; an active leaf
//! brings its partner's label along with probability
//! `cooccurrence_strength`, without any visual evidence for the partner.
//! Leaves hang under parent classes `hierarchy_depth − 1` levels deep, and a
//! parent is on exactly when one of its children is.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FrameDataset, FrameExample};
use crate::error::{Error, Result};
use crate::rng::{child, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    #[serde(alias = "C")]
    pub num_classes: usize,
    #[serde(alias = "d")]
    pub dim: usize,
    /// Inclusive range of frames per video.
    #[serde(default = "default_t_range", alias = "T_range")]
    pub t_range: [usize; 2],
    /// Number of latent concepts; 0 means one per leaf class. Concept `k`
    /// drives leaf `k mod leaves`, so extra concepts give leaves several
    /// visual modes.
    #[serde(default)]
    pub num_latent_concepts: usize,
    #[serde(default = "default_strength")]
    pub cooccurrence_strength: f64,
    /// Levels of the class tree; 1 means every class is a leaf.
    #[serde(default = "default_depth")]
    pub hierarchy_depth: usize,
    /// Probability of dropping each true leaf label, and of adding one random
    /// spurious leaf label per video.
    #[serde(default)]
    pub label_noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Expected number of active concepts per video.
    #[serde(default = "default_concepts_per_video")]
    pub concepts_per_video: f64,
    /// Children per parent class.
    #[serde(default = "default_branching")]
    pub branching: usize,
    /// Norm of the per-frame Gaussian noise, relative to a unit concept.
    #[serde(default = "default_frame_noise")]
    pub frame_noise: f64,
    /// Norm of a per-video offset shared by all its frames.
    #[serde(default = "default_video_noise")]
    pub video_noise: f64,
    /// Fraction of the frames in which an active concept is visible.
    #[serde(default = "default_span")]
    pub concept_span: f64,
    /// Draw a random sign per video for every concept.
    #[serde(default = "default_true")]
    pub antipodal: bool,
}

fn default_t_range() -> [usize; 2] {
    [10, 30]
}
fn default_strength() -> f64 {
    0.5
}
fn default_depth() -> usize {
    2
}
fn default_concepts_per_video() -> f64 {
    2.0
}
fn default_branching() -> usize {
    4
}
fn default_frame_noise() -> f64 {
    1.0
}
fn default_video_noise() -> f64 {
    0.3
}
fn default_span() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

impl SynthConfig {
    pub fn new(num_videos: usize, num_classes: usize, dim: usize, seed: u64) -> Self {
        Self {
            num_videos,
            num_classes,
            dim,
            t_range: default_t_range(),
            num_latent_concepts: 0,
            cooccurrence_strength: default_strength(),
            hierarchy_depth: default_depth(),
            label_noise_rate: 0.0,
            seed,
            concepts_per_video: default_concepts_per_video(),
            branching: default_branching(),
            frame_noise: default_frame_noise(),
            video_noise: default_video_noise(),
            concept_span: default_span(),
            antipodal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.num_videos == 0 || self.num_classes == 0 || self.dim == 0 {
            return bad("num_videos, num_classes and dim must be positive");
        }
        if self.t_range[0] == 0 || self.t_range[0] > self.t_range[1] {
            return bad("t_range must be [min, max] with 1 <= min <= max");
        }
        for (name, v) in [
            ("cooccurrence_strength", self.cooccurrence_strength),
            ("label_noise_rate", self.label_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.concept_span > 0.0 && self.concept_span <= 1.0) {
            return bad("concept_span must lie in (0, 1]");
        }
        if self.hierarchy_depth == 0 || self.branching < 2 {
            return bad("hierarchy_depth must be >= 1 and branching >= 2");
        }
        if self.frame_noise < 0.0 || self.video_noise < 0.0 || self.concepts_per_video <= 0.0 {
            return bad("noise levels must be >= 0 and concepts_per_video > 0");
        }
        let leaves = class_tree(self.num_classes, self.hierarchy_depth, self.branching).0;
        if self.num_latent_concepts != 0 && self.num_latent_concepts < leaves {
            return bad(&format!(
                "{} concepts cannot cover {leaves} leaf classes",
                self.num_latent_concepts
            ));
        }
        Ok(())
    }
}

/// The planted structure behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Classes `0..num_leaves` are leaves.
    pub num_leaves: usize,
    /// Parent class of every class, if any.
    pub parent: Vec<Option<usize>>,
    /// Co-occurring leaf pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Leaf class driven by each concept.
    pub concept_leaf: Vec<usize>,
    pub concept_rate: Vec<f64>,
    /// Unit concept directions, `[K][d]`.
    pub concept_dirs: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Ancestors of `class`, nearest first.
    pub fn ancestors(&self, class: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut c = class;
        while let Some(p) = self.parent[c] {
            out.push(p);
            c = p;
        }
        out
    }
}

/// Leaf count and parent links. Leaves come first, then each parent level;
/// leaves that do not fit under the tree are parentless.
fn class_tree(c: usize, depth: usize, b: usize) -> (usize, Vec<Option<usize>>) {
    let sizes = |n0: usize| {
        let mut v = vec![n0];
        for _ in 1..depth {
            let prev = *v.last().unwrap();
            v.push(prev.div_ceil(b));
        }
        v
    };
    let mut n0 = c;
    while n0 > 1 && sizes(n0).iter().sum::<usize>() > c {
        n0 -= 1;
    }
    let levels = sizes(n0);
    let tree: usize = levels.iter().sum();
    let leaves = n0 + (c - tree.min(c));
    let mut parent = vec![None; c];
    let mut start = 0;
    let mut next = leaves;
    for (l, &n) in levels.iter().enumerate() {
        let level_start = if l == 0 { 0 } else { start };
        if l + 1 < levels.len() {
            for i in 0..n {
                parent[level_start + i] = Some(next + i / b);
            }
        }
        start = if l == 0 { leaves } else { start + n };
        next = start + levels.get(l + 1).copied().unwrap_or(0);
    }
    (leaves, parent)
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn gaussian(rng: &mut Rng, d: usize, norm: f64) -> Vec<f64> {
    let s = norm / (d as f64).sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            s * z
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(FrameDataset, GroundTruth)> {
    cfg.validate()?;
    let (c, d) = (cfg.num_classes, cfg.dim);
    let (leaves, parent) = class_tree(c, cfg.hierarchy_depth, cfg.branching);
    let k = if cfg.num_latent_concepts == 0 {
        leaves
    } else {
        cfg.num_latent_concepts
    };

    let mut srng = child(cfg.seed, "synth/structure", 0);
    let mut order: Vec<usize> = (0..leaves).collect();
    order.shuffle(&mut srng);
    let pairs: Vec<(usize, usize)> = order
        .chunks_exact(2)
        .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
        .collect();
    let mut partner = vec![None; leaves];
    for &(a, b) in &pairs {
        partner[a] = Some(b);
        partner[b] = Some(a);
    }
    let base = cfg.concepts_per_video / k as f64;
    let concept_rate: Vec<f64> = (0..k).map(|_| (base * srng.random_range(0.5..1.5)).min(1.0)).collect();
    let concept_dirs: Vec<Vec<f64>> = (0..k).map(|_| unit_vector(&mut srng, d)).collect();
    let truth = GroundTruth {
        num_leaves: leaves,
        parent,
        pairs,
        concept_leaf: (0..k).map(|i| i % leaves).collect(),
        concept_rate,
        concept_dirs,
    };

    let mut rng = child(cfg.seed, "synth/videos", 0);
    let mut ds = Dataset::new(d, c);
    ds.examples.reserve(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let t = rng.random_range(cfg.t_range[0]..=cfg.t_range[1]);
        let mut frames = vec![0.0; t * d];
        let offset = gaussian(&mut rng, d, cfg.video_noise);
        for row in frames.chunks_exact_mut(d) {
            row.copy_from_slice(&offset);
        }
        let mut on = vec![false; c];
        let span = ((cfg.concept_span * t as f64).ceil() as usize).clamp(1, t);
        for ki in 0..k {
            if rng.random::<f64>() >= truth.concept_rate[ki] {
                continue;
            }
            let sign = if cfg.antipodal && rng.random::<bool>() {
                -1.0
            } else {
                1.0
            };
            let start = rng.random_range(0..=t - span);
            for row in frames.chunks_exact_mut(d).skip(start).take(span) {
                for (x, m) in row.iter_mut().zip(&truth.concept_dirs[ki]) {
                    *x += sign * m;
                }
            }
            on[truth.concept_leaf[ki]] = true;
        }
        let drivers: Vec<usize> = (0..leaves).filter(|&l| on[l]).collect();
        for l in drivers {
            if let Some(p) = partner[l] {
                if rng.random::<f64>() < cfg.cooccurrence_strength {
                    on[p] = true;
                }
            }
        }
        if cfg.label_noise_rate > 0.0 {
            for flag in on.iter_mut().take(leaves) {
                if *flag && rng.random::<f64>() < cfg.label_noise_rate {
                    *flag = false;
                }
            }
            if rng.random::<f64>() < cfg.label_noise_rate {
                on[rng.random_range(0..leaves)] = true;
            }
        }
        for cls in 0..c {
            if on[cls] {
                for a in truth.ancestors(cls) {
                    on[a] = true;
                }
            }
        }
        for row in frames.chunks_exact_mut(d) {
            for (x, n) in row.iter_mut().zip(gaussian(&mut rng, d, cfg.frame_noise)) {
                *x += n;
            }
        }
        ds.examples.push(FrameExample {
            id: format!("syn-{v:06}"),
            frames: Tensor::new(&[t, d], frames)?,
            labels: (0..c).filter(|&i| on[i]).collect(),
        });
    }
    Ok((ds, truth))
}
