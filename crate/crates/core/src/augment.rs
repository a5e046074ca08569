//! Geometric transforms: jitter, anisotropic scaling, half-space cropping,
//! span-proportional translation with distance-class labels, FPS-mix, and the
//! weak/strong composite pipelines.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_span, farthest_point_sampling, resample_to, Axis, Point, PointCloud};

/// Number of translation-distance classes.
pub const TRANSLATION_CLASSES: usize = 4;

/// Slack used when a count is derived from `fraction · m` in floating point.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslationSpec {
    /// Axes translated independently; each contributes one label.
    pub axes: Vec<Axis>,
    /// Distance class centers as fractions of the axis span, increasing.
    pub thresholds: [f64; TRANSLATION_CLASSES],
    /// Largest translation as a fraction of the axis span.
    pub cap: f64,
}

impl Default for TranslationSpec {
    fn default() -> Self {
        Self {
            axes: vec![Axis::X, Axis::Y],
            thresholds: [0.025, 0.05, 0.075, 0.1],
            cap: 0.1,
        }
    }
}

impl TranslationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 3 {
            return Err(Error::invalid("translation needs one to three axes"));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if self.axes[..i].contains(a) {
                return Err(Error::invalid(format!("translation axis {a} repeated")));
            }
        }
        let t = &self.thresholds;
        if !(t[0] > 0.0) || t.windows(2).any(|w| !(w[0] < w[1])) || t[3] > self.cap {
            return Err(Error::invalid(format!(
                "thresholds {t:?} must increase within (0, {}]",
                self.cap
            )));
        }
        Ok(())
    }
}

/// Class (1-based) whose threshold lies nearest to `magnitude`; equidistant
/// magnitudes take the lower class.
pub fn translation_label(magnitude: f64, span: f64, thresholds: &[f64; TRANSLATION_CLASSES]) -> u8 {
    let tol = 1e-12 * span.abs().max(f64::MIN_POSITIVE);
    let dists = thresholds.map(|f| (magnitude - f * span).abs());
    let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let class = dists.iter().position(|&d| d <= best + tol).unwrap_or(0);
    class as u8 + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatedSample {
    pub cloud: PointCloud,
    /// One 1-based label per translated axis, in `TranslationSpec::axes` order.
    pub labels: Vec<u8>,
    /// Signed offset applied along X, Y and Z.
    pub offsets: Point,
}

impl TranslatedSample {
    pub fn label_axis1(&self) -> u8 {
        self.labels[0]
    }

    pub fn label_axis2(&self) -> Option<u8> {
        self.labels.get(1).copied()
    }
}

/// Translates the cloud along each configured axis by a random signed
/// distance of at most `cap · span` and labels each distance.
pub fn make_translation_sample<R: Rng + ?Sized>(
    cloud: &PointCloud,
    spec: &TranslationSpec,
    rng: &mut R,
) -> Result<TranslatedSample> {
    spec.validate()?;
    let mut offsets = [0.0; 3];
    let mut labels = Vec::with_capacity(spec.axes.len());
    for &axis in &spec.axes {
        let span = axis_span(cloud, axis).length;
        if !(span > 0.0) {
            return Err(Error::Degenerate(format!("zero span along {axis}")));
        }
        let magnitude = spec.cap * span * (1.0 - rng.gen::<f64>());
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        offsets[axis.index()] = sign * magnitude;
        labels.push(translation_label(magnitude, span, &spec.thresholds));
    }
    Ok(TranslatedSample {
        cloud: cloud.translated(offsets),
        labels,
        offsets,
    })
}

/// Adds clamped zero-mean Gaussian noise to every coordinate.
pub fn jitter<R: Rng + ?Sized>(cloud: &PointCloud, sigma: f64, clip: f64, rng: &mut R) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !(clip > 0.0) {
        return Err(Error::invalid(format!("jitter sigma {sigma}, clip {clip}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let points = cloud
        .points()
        .iter()
        .map(|p| p.map(|c| c + normal.sample(rng).clamp(-clip, clip)))
        .collect();
    PointCloud::new(points)
}

fn check_range(lo: f64, hi: f64, what: &str) -> Result<()> {
    if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
        return Err(Error::invalid(format!("{what} range [{lo}, {hi}]")));
    }
    Ok(())
}

/// Multiplies each axis by its own factor drawn uniformly from `[lo, hi]`.
pub fn anisotropic_scale<R: Rng + ?Sized>(cloud: &PointCloud, (lo, hi): (f64, f64), rng: &mut R) -> Result<PointCloud> {
    check_range(lo, hi, "scale")?;
    let factors = [(); 3].map(|_| rng.gen_range(lo..=hi));
    Ok(cloud.scaled(factors))
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v: Point = [(); 3].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Points kept by a half-space crop along `direction`: the `⌈fraction·m⌉`
/// smallest projections, reported in original order.
pub fn crop_indices(cloud: &PointCloud, fraction: f64, direction: Point) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("crop fraction {fraction}")));
    }
    let m = cloud.len();
    let keep = ((fraction * m as f64) - COUNT_SLACK).ceil().min(m as f64) as usize;
    if keep == 0 {
        return Err(Error::Degenerate("crop keeps no points".into()));
    }
    let proj: Vec<f64> = cloud
        .points()
        .iter()
        .map(|p| p[0] * direction[0] + p[1] * direction[1] + p[2] * direction[2])
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Half-space occlusion along a uniformly random direction.
pub fn crop_retain<R: Rng + ?Sized>(cloud: &PointCloud, fraction: f64, rng: &mut R) -> Result<PointCloud> {
    let dir = random_direction(rng);
    cloud.select(&crop_indices(cloud, fraction, dir)?)
}

/// Minor perturbation applied to each copy before FPS-mixing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LightTransform {
    Identity,
    Jitter { sigma: f64, clip: f64 },
}

impl LightTransform {
    pub fn apply<R: Rng + ?Sized>(&self, cloud: &PointCloud, rng: &mut R) -> Result<PointCloud> {
        match *self {
            LightTransform::Identity => Ok(cloud.clone()),
            LightTransform::Jitter { sigma, clip } => jitter(cloud, sigma, clip, rng),
        }
    }
}

/// Mixes FPS subsets of two lightly perturbed copies:
/// `⌊ρ·m⌋` points from the first and `⌊(1−ρ)·m⌋` from the second.
pub fn fps_mix<R: Rng + ?Sized>(
    cloud: &PointCloud,
    ratio: f64,
    first: &LightTransform,
    second: &LightTransform,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mix ratio {ratio} outside (0, 1)")));
    }
    let m = cloud.len();
    if m < 2 {
        return Err(Error::Degenerate("FPS-mix needs at least two points".into()));
    }
    let n1 = (ratio * m as f64 + COUNT_SLACK).floor() as usize;
    let n2 = ((1.0 - ratio) * m as f64 + COUNT_SLACK).floor() as usize;
    if n1 == 0 || n2 == 0 {
        return Err(Error::Degenerate(format!(
            "mix ratio {ratio} selects {n1} + {n2} of {m} points"
        )));
    }
    let a = first.apply(cloud, rng)?;
    let b = second.apply(cloud, rng)?;
    let mut points = a.select(&farthest_point_sampling(&a, n1)?)?.into_points();
    points.extend(b.select(&farthest_point_sampling(&b, n2)?)?.into_points());
    PointCloud::new(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    Jitter {
        sigma: f64,
        clip: f64,
    },
    Scale {
        lo: f64,
        hi: f64,
    },
    /// Half-space crop keeping a uniformly drawn fraction in `[min, max]`.
    Crop {
        min: f64,
        max: f64,
    },
}

impl AugmentOp {
    fn kind(&self) -> u8 {
        match self {
            AugmentOp::Jitter { .. } => 0,
            AugmentOp::Scale { .. } => 1,
            AugmentOp::Crop { .. } => 2,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, cloud: &PointCloud, rng: &mut R) -> Result<PointCloud> {
        match *self {
            AugmentOp::Jitter { sigma, clip } => jitter(cloud, sigma, clip, rng),
            AugmentOp::Scale { lo, hi } => anisotropic_scale(cloud, (lo, hi), rng),
            AugmentOp::Crop { min, max } => {
                if !(min > 0.0 && min <= max && max <= 1.0) {
                    return Err(Error::invalid(format!("crop range [{min}, {max}]")));
                }
                let fraction = rng.gen_range(min..=max);
                crop_retain(cloud, fraction, rng)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Perturbation of each copy inside FPS-mix.
    pub light: LightTransform,
    /// Mix ratio is drawn uniformly from this interval per sample.
    pub mix_ratio: (f64, f64),
    pub weak: Vec<AugmentOp>,
    pub strong: Vec<AugmentOp>,
    /// Every augmented cloud is resampled to this many points.
    pub model_points: usize,
}

const JITTER: AugmentOp = AugmentOp::Jitter {
    sigma: 0.01,
    clip: 0.05,
};
const SCALE: AugmentOp = AugmentOp::Scale { lo: 2.0 / 3.0, hi: 1.5 };
const CROP_WEAK: AugmentOp = AugmentOp::Crop { min: 0.6, max: 0.9 };
const CROP_STRONG: AugmentOp = AugmentOp::Crop { min: 0.5, max: 0.8 };

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::from_id("JCw/JCsS").expect("built-in policy")
    }
}

impl AugmentPolicy {
    /// Builds a policy from an id such as `"JCw/JCsS"`: weak ops, a slash,
    /// then strong ops. `J` jitter, `S` scale, `Cw`/`Cs` weak/strong crop.
    pub fn from_id(id: &str) -> Result<Self> {
        let (weak, strong) = id
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("policy id {id:?} lacks '/'")))?;
        let policy = Self {
            light: LightTransform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            mix_ratio: (0.3, 0.7),
            weak: parse_ops(weak)?,
            strong: parse_ops(strong)?,
            model_points: 256,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn ops(&self, strength: Strength) -> &[AugmentOp] {
        match strength {
            Strength::Weak => &self.weak,
            Strength::Strong => &self.strong,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mix_ratio;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::invalid(format!("mix ratio range [{lo}, {hi}]")));
        }
        if self.model_points == 0 {
            return Err(Error::invalid("model point count must be positive"));
        }
        let kinds = |ops: &[AugmentOp]| {
            let mut k: Vec<u8> = ops.iter().map(AugmentOp::kind).collect();
            k.sort_unstable();
            k.dedup();
            k
        };
        let crop = |ops: &[AugmentOp]| {
            ops.iter().find_map(|op| match *op {
                AugmentOp::Crop { min, max } => Some((min, max)),
                _ => None,
            })
        };
        let harder_crop = match (crop(&self.weak), crop(&self.strong)) {
            (Some((wmin, wmax)), Some((smin, smax))) => {
                if !(wmin > smin && wmax > smax) {
                    return Err(Error::invalid("weak crop must retain more points than strong crop"));
                }
                true
            }
            _ => false,
        };
        let (wk, sk) = (kinds(&self.weak), kinds(&self.strong));
        if !wk.iter().all(|k| sk.contains(k)) || !(sk.len() > wk.len() || harder_crop) {
            return Err(Error::invalid("strong operations must extend the weak ones"));
        }
        Ok(())
    }
}

fn parse_ops(s: &str) -> Result<Vec<AugmentOp>> {
    let mut ops = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        let op = match c {
            'J' => JITTER,
            'S' => SCALE,
            'C' => match chars.next() {
                Some('w') => CROP_WEAK,
                Some('s') => CROP_STRONG,
                _ => return Err(Error::invalid(format!("crop in {s:?} needs 'w' or 's'"))),
            },
            other => return Err(Error::invalid(format!("unknown augmentation {other:?} in {s:?}"))),
        };
        ops.push(op);
    }
    Ok(ops)
}

/// Applies an operation list in order, without resampling.
pub fn apply_ops<R: Rng + ?Sized>(cloud: &PointCloud, ops: &[AugmentOp], rng: &mut R) -> Result<PointCloud> {
    let mut out = cloud.clone();
    for op in ops {
        out = op.apply(&out, rng)?;
    }
    Ok(out)
}

/// FPS-mix with a ratio drawn from the policy's interval.
pub fn policy_mix<R: Rng + ?Sized>(cloud: &PointCloud, policy: &AugmentPolicy, rng: &mut R) -> Result<PointCloud> {
    let (lo, hi) = policy.mix_ratio;
    let ratio = rng.gen_range(lo..=hi);
    fps_mix(cloud, ratio, &policy.light, &policy.light, rng)
}

/// FPS-mix, then the strength's operations, then resampling to
/// `policy.model_points`.
pub fn apply_policy<R: Rng + ?Sized>(
    cloud: &PointCloud,
    policy: &AugmentPolicy,
    strength: Strength,
    rng: &mut R,
) -> Result<PointCloud> {
    let mixed = policy_mix(cloud, policy, rng)?;
    let out = apply_ops(&mixed, policy.ops(strength), rng)?;
    resample_to(&out, policy.model_points, rng)
}

/// Weak and strong views derived from one shared FPS-mixed cloud.
pub fn weak_strong_pair<R: Rng + ?Sized>(
    cloud: &PointCloud,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(PointCloud, PointCloud)> {
    let mixed = policy_mix(cloud, policy, rng)?;
    let weak = apply_ops(&mixed, &policy.weak, rng)?;
    let weak = resample_to(&weak, policy.model_points, rng)?;
    let strong = apply_ops(&mixed, &policy.strong, rng)?;
    let strong = resample_to(&strong, policy.model_points, rng)?;
    Ok((weak, strong))
}
