//! Procedural source/target domain pairs, the cloud text format, and dataset
//! manifests.
//!
//! Cloud files are `pcuda v1 <m>` followed by `m` lines of `x y z`, written
//! with 17 significant digits so reading back is bit-exact.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::crop_retain;
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, resample_to, Point, PointCloud};

const CLOUD_MAGIC: &str = "pcuda v1";
const MANIFEST_MAGIC: &str = "# pcuda-manifest v1";
const MIN_RAW_POINTS: usize = 64;

/// Parametric primitive families, one per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    PlaneWithLegs,
    RodWithDisc,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Box,
        ShapeKind::PlaneWithLegs,
        ShapeKind::RodWithDisc,
        ShapeKind::Cylinder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::PlaneWithLegs => "plane_with_legs",
            ShapeKind::RodWithDisc => "rod_with_disc",
            ShapeKind::Cylinder => "cylinder",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape kind {s:?}")))
    }
}

/// Surface patch of a generated shape.
#[derive(Clone, Copy, Debug)]
enum Part {
    /// Axis-aligned box surface.
    Box { dims: Point, center: Point },
    /// Z-aligned cylinder starting at `base`, optionally with end caps.
    Cylinder {
        radius: f64,
        height: f64,
        base: Point,
        caps: bool,
    },
}

impl Part {
    fn area(&self) -> f64 {
        match *self {
            Part::Box { dims: [a, b, c], .. } => 2.0 * (a * b + b * c + a * c),
            Part::Cylinder {
                radius, height, caps, ..
            } => {
                let side = 2.0 * std::f64::consts::PI * radius * height;
                side + if caps {
                    2.0 * std::f64::consts::PI * radius * radius
                } else {
                    0.0
                }
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match *self {
            Part::Box { dims, center } => {
                let [a, b, c] = dims;
                let faces = [b * c, b * c, a * c, a * c, a * b, a * b];
                let face = WeightedIndex::new(faces).expect("positive box dims").sample(rng);
                let axis = face / 2;
                let sign = if face % 2 == 0 { -0.5 } else { 0.5 };
                let mut p = [0.0; 3];
                for (i, v) in p.iter_mut().enumerate() {
                    *v = if i == axis {
                        sign * dims[i]
                    } else {
                        (rng.gen::<f64>() - 0.5) * dims[i]
                    };
                }
                [p[0] + center[0], p[1] + center[1], p[2] + center[2]]
            }
            Part::Cylinder {
                radius,
                height,
                base,
                caps,
            } => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let side = 2.0 * std::f64::consts::PI * radius * height;
                let cap = if caps {
                    std::f64::consts::PI * radius * radius
                } else {
                    0.0
                };
                let u = rng.gen::<f64>() * (side + 2.0 * cap);
                let (r, z) = if u < side {
                    (radius, rng.gen::<f64>() * height)
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    (r, if u < side + cap { 0.0 } else { height })
                };
                [base[0] + r * theta.cos(), base[1] + r * theta.sin(), base[2] + z]
            }
        }
    }
}

fn sample_parts<R: Rng + ?Sized>(parts: &[Part], m: usize, rng: &mut R) -> Result<PointCloud> {
    let areas: Vec<f64> = parts.iter().map(Part::area).collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::invalid(format!("shape parts: {e}")))?;
    PointCloud::new((0..m).map(|_| parts[pick.sample(rng)].sample(rng)).collect())
}

/// `m` points on the surface of a box centered at the origin.
pub fn sample_box<R: Rng + ?Sized>(dims: Point, m: usize, rng: &mut R) -> Result<PointCloud> {
    if dims.iter().any(|d| !(*d > 0.0)) || m == 0 {
        return Err(Error::invalid(format!("box {dims:?} with {m} points")));
    }
    sample_parts(&[Part::Box { dims, center: [0.0; 3] }], m, rng)
}

/// `m` points on a capped cylinder of the given size, centered at the origin.
pub fn sample_cylinder<R: Rng + ?Sized>(radius: f64, height: f64, m: usize, rng: &mut R) -> Result<PointCloud> {
    if !(radius > 0.0 && height > 0.0) || m == 0 {
        return Err(Error::invalid(format!(
            "cylinder r={radius} h={height} with {m} points"
        )));
    }
    let part = Part::Cylinder {
        radius,
        height,
        base: [0.0, 0.0, -height / 2.0],
        caps: true,
    };
    sample_parts(&[part], m, rng)
}

fn shape_parts<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> Vec<Part> {
    match kind {
        ShapeKind::Box => vec![Part::Box {
            dims: [
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.3..1.0),
            ],
            center: [0.0; 3],
        }],
        ShapeKind::PlaneWithLegs => {
            let (w, d, h) = (
                rng.gen_range(0.8..1.2),
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.5..0.9),
            );
            let leg_r = 0.03;
            let mut parts = vec![Part::Box {
                dims: [w, d, 0.04],
                center: [0.0, 0.0, h],
            }];
            for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                parts.push(Part::Cylinder {
                    radius: leg_r,
                    height: h - 0.02,
                    base: [sx * (w / 2.0 - 0.06), sy * (d / 2.0 - 0.06), 0.0],
                    caps: false,
                });
            }
            parts
        }
        ShapeKind::RodWithDisc => {
            let (disc_r, rod_h) = (rng.gen_range(0.3..0.5), rng.gen_range(0.8..1.4));
            vec![
                Part::Cylinder {
                    radius: disc_r,
                    height: 0.04,
                    base: [0.0; 3],
                    caps: true,
                },
                Part::Cylinder {
                    radius: 0.03,
                    height: rod_h,
                    base: [0.0, 0.0, 0.04],
                    caps: true,
                },
            ]
        }
        ShapeKind::Cylinder => vec![Part::Cylinder {
            radius: rng.gen_range(0.25..0.45),
            height: rng.gen_range(0.6..1.2),
            base: [0.0; 3],
            caps: true,
        }],
    }
}

/// Surface-sampled primitive of the given family with random size and yaw,
/// normalized to the unit sphere.
pub fn generate_shape<R: Rng + ?Sized>(kind: ShapeKind, m_raw: usize, rng: &mut R) -> Result<PointCloud> {
    if m_raw < MIN_RAW_POINTS {
        return Err(Error::invalid(format!(
            "shapes need at least {MIN_RAW_POINTS} points, got {m_raw}"
        )));
    }
    let parts = shape_parts(kind, rng);
    let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = yaw.sin_cos();
    let raw = sample_parts(&parts, m_raw, rng)?;
    let rotated = raw
        .points()
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect();
    normalize_unit_sphere(&PointCloud::new(rotated)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completeness {
    Complete,
    Occluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Uniform,
    /// Keep probability grows with depth rank along a random view direction.
    ViewBiased,
}

/// How a domain corrupts clean shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainRecipe {
    /// Points drawn from the primitive before corruption.
    pub raw_points: usize,
    pub completeness: Completeness,
    /// Fraction of points removed by the occluding half-space, within [0.1, 0.5].
    pub removed: [f64; 2],
    pub density: Density,
    pub noise_sigma: f64,
    /// Magnitude range of the random centroid shift.
    pub shift: [f64; 2],
}

impl Default for DomainRecipe {
    fn default() -> Self {
        Self::source()
    }
}

impl DomainRecipe {
    /// Clean, complete, centered shapes.
    pub fn source() -> Self {
        Self {
            raw_points: 256,
            completeness: Completeness::Complete,
            removed: [0.1, 0.5],
            density: Density::Uniform,
            noise_sigma: 0.0,
            shift: [0.0, 0.0],
        }
    }

    /// Partial, noisy, off-center scans.
    pub fn target() -> Self {
        Self {
            raw_points: 1024,
            completeness: Completeness::Occluded,
            removed: [0.1, 0.5],
            density: Density::ViewBiased,
            noise_sigma: 0.02,
            shift: [0.1, 0.25],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.raw_points < MIN_RAW_POINTS {
            return Err(Error::invalid(format!(
                "raw_points {} < {MIN_RAW_POINTS}",
                self.raw_points
            )));
        }
        let [lo, hi] = self.removed;
        if !(0.1 <= lo && lo <= hi && hi <= 0.5) {
            return Err(Error::invalid(format!(
                "removed fraction range {:?} outside [0.1, 0.5]",
                self.removed
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma {}", self.noise_sigma)));
        }
        let [lo, hi] = self.shift;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("shift range {:?}", self.shift)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DomainSample {
    pub cloud: PointCloud,
    /// Rigid offset applied last.
    pub shift: Point,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v: Point = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Keeps point `i` with probability `0.25 + 0.75·(rank_i + 1)/m`, ranking by
/// depth along a random view direction.
fn view_thin<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> Result<PointCloud> {
    let dir = unit_vector(rng);
    let pts = cloud.points();
    let m = pts.len();
    let depth: Vec<f64> = pts
        .iter()
        .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| depth[a].total_cmp(&depth[b]).then(a.cmp(&b)));
    let mut rank = vec![0; m];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let kept: Vec<usize> = (0..m)
        .filter(|&i| rng.gen::<f64>() < 0.25 + 0.75 * (rank[i] + 1) as f64 / m as f64)
        .collect();
    if kept.len() < 2 {
        return Err(Error::Degenerate("view thinning kept fewer than two points".into()));
    }
    cloud.select(&kept)
}

/// Crop (if occluded), view thinning (if view-biased), Gaussian noise, then a
/// random rigid shift.
pub fn apply_domain<R: Rng + ?Sized>(cloud: &PointCloud, recipe: &DomainRecipe, rng: &mut R) -> Result<DomainSample> {
    recipe.validate()?;
    let mut out = cloud.clone();
    if recipe.completeness == Completeness::Occluded {
        let removed = rng.gen_range(recipe.removed[0]..=recipe.removed[1]);
        out = crop_retain(&out, 1.0 - removed, rng)?;
    }
    if recipe.density == Density::ViewBiased {
        out = view_thin(&out, rng)?;
    }
    if recipe.noise_sigma > 0.0 {
        let s = recipe.noise_sigma;
        let noisy = out
            .points()
            .iter()
            .map(|p| {
                let n: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                [p[0] + s * n[0], p[1] + s * n[1], p[2] + s * n[2]]
            })
            .collect();
        out = PointCloud::new(noisy)?;
    }
    let mut shift = [0.0; 3];
    if recipe.shift[1] > 0.0 {
        let mag = rng.gen_range(recipe.shift[0]..=recipe.shift[1]);
        let dir = unit_vector(rng);
        shift = [mag * dir[0], mag * dir[1], mag * dir[2]];
        out = out.translated(shift);
    }
    Ok(DomainSample { cloud: out, shift })
}

pub fn write_cloud_to<W: Write>(cloud: &PointCloud, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CLOUD_MAGIC} {}", cloud.len())?;
    for p in cloud.points() {
        writeln!(w, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2])?;
    }
    Ok(())
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_cloud_to(cloud, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses the cloud format; `path` only labels diagnostics.
pub fn read_cloud_from<R: BufRead>(reader: R, path: &Path) -> Result<PointCloud> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "empty file")),
    };
    let count: usize = header
        .strip_prefix(CLOUD_MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::parse(path, 1, format!("expected `{CLOUD_MAGIC} <count>`, found {header:?}")))?;
    let mut points = Vec::with_capacity(count);
    let mut line_no = 1;
    for line in lines {
        line_no += 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(Error::parse(
                path,
                line_no,
                format!("header declares {count} points but more follow"),
            ));
        }
        let mut p = [0.0; 3];
        let mut toks = line.split_whitespace();
        for (k, v) in p.iter_mut().enumerate() {
            let tok = toks
                .next()
                .ok_or_else(|| Error::parse(path, line_no, format!("expected 3 coordinates, found {k}")))?;
            *v = tok
                .parse::<f64>()
                .map_err(|_| Error::parse(path, line_no, format!("coordinate {} is not a number: {tok:?}", k + 1)))?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("coordinate {} is not finite", k + 1),
                ));
            }
        }
        if toks.next().is_some() {
            return Err(Error::parse(path, line_no, "expected 3 coordinates, found more"));
        }
        points.push(p);
    }
    if points.len() != count {
        return Err(Error::parse(
            path,
            1,
            format!("header declares {count} points, file has {}", points.len()),
        ));
    }
    PointCloud::new(points).map_err(|e| Error::parse(path, 1, e.to_string()))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cloud_from(BufReader::new(file), path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

macro_rules! text_enum {
    ($ty:ty, $($variant:ident => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(Error::invalid(format!("unknown {} {s:?}", stringify!($ty).to_lowercase()))),
                }
            }
        }
    };
}

text_enum!(Domain, Source => "source", Target => "target");
text_enum!(Split, Train => "train", Test => "test");

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub class: usize,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub classes: Vec<ShapeKind>,
    pub source: DomainRecipe,
    pub target: DomainRecipe,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn select(&self, domain: Domain, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(move |e| e.domain == domain && e.split == split)
    }

    /// Entry counts per class for one domain and split.
    pub fn class_counts(&self, domain: Domain, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in self.select(domain, split) {
            counts[e.class] += 1;
        }
        counts
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let classes: Vec<&str> = self.classes.iter().map(|c| c.name()).collect();
        writeln!(w, "{MANIFEST_MAGIC}")?;
        writeln!(w, "# seed {}", self.seed)?;
        writeln!(w, "# classes {}", classes.join(" "))?;
        let source = serde_json::to_string(&self.source).map_err(std::io::Error::other)?;
        let target = serde_json::to_string(&self.target).map_err(std::io::Error::other)?;
        writeln!(w, "# recipe source {source}")?;
        writeln!(w, "# recipe target {target}")?;
        for e in &self.entries {
            writeln!(w, "{} {} {} {}", e.path.display(), e.class, e.domain, e.split)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut seed = None;
        let mut classes = None;
        let mut source = None;
        let mut target = None;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let n = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let err = |msg: String| Error::parse(path, n, msg);
            if n == 1 {
                if line != MANIFEST_MAGIC {
                    return Err(err(format!("expected `{MANIFEST_MAGIC}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, rest) = meta.split_once(' ').unwrap_or((meta, ""));
                match key {
                    "seed" => seed = Some(rest.parse().map_err(|_| err(format!("bad seed {rest:?}")))?),
                    "classes" => {
                        classes = Some(
                            rest.split_whitespace()
                                .map(str::parse)
                                .collect::<Result<Vec<ShapeKind>>>()
                                .map_err(|e| err(e.to_string()))?,
                        )
                    }
                    "recipe" => {
                        let (which, json) = rest
                            .split_once(' ')
                            .ok_or_else(|| err("recipe needs a domain".into()))?;
                        let recipe: DomainRecipe =
                            serde_json::from_str(json).map_err(|e| err(format!("recipe: {e}")))?;
                        match which.parse::<Domain>().map_err(|e| err(e.to_string()))? {
                            Domain::Source => source = Some(recipe),
                            Domain::Target => target = Some(recipe),
                        }
                    }
                    _ => return Err(err(format!("unknown header key {key:?}"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [p, class, domain, split] = fields[..] else {
                return Err(err(format!("expected `path class domain split`, found {line:?}")));
            };
            let class: usize = class.parse().map_err(|_| err(format!("bad class {class:?}")))?;
            let ncls = classes.as_ref().map_or(0, Vec::len);
            if class >= ncls {
                return Err(err(format!("class {class} outside the {ncls} declared classes")));
            }
            if !seen.insert(p.to_string()) {
                return Err(err(format!("duplicate path {p:?}")));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(p),
                class,
                domain: domain.parse().map_err(|e: Error| err(e.to_string()))?,
                split: split.parse().map_err(|e: Error| err(e.to_string()))?,
            });
        }
        let missing = |what: &str| Error::parse(path, 1, format!("manifest header lacks {what}"));
        Ok(Self {
            seed: seed.ok_or_else(|| missing("seed"))?,
            classes: classes.ok_or_else(|| missing("classes"))?,
            source: source.ok_or_else(|| missing("source recipe"))?,
            target: target.ok_or_else(|| missing("target recipe"))?,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    /// Reads every cloud of a domain/split in manifest order with its class.
    pub fn load_split(&self, domain: Domain, split: Split) -> Result<Vec<(PointCloud, usize)>> {
        self.manifest
            .select(domain, split)
            .map(|e| Ok((read_cloud(&self.root.join(&e.path))?, e.class)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Points per stored cloud.
    pub points: usize,
    pub source: DomainRecipe,
    pub target: DomainRecipe,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: ShapeKind::ALL.to_vec(),
            train_per_class: 100,
            test_per_class: 50,
            points: 256,
            source: DomainRecipe::source(),
            target: DomainRecipe::target(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("per-class counts must be at least 1"));
        }
        if self.points < 2 {
            return Err(Error::invalid(format!("{} points per cloud", self.points)));
        }
        self.source.validate()?;
        self.target.validate()
    }
}

/// Mixes the coordinates of one sample into a 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// One stored cloud: shape, domain corruption, then resampling to `points`.
pub fn generate_sample(
    config: &DataConfig,
    domain: Domain,
    split: Split,
    class: usize,
    index: usize,
) -> Result<PointCloud> {
    let seed = derive_seed(config.seed, &[domain as u64, split as u64, class as u64, index as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recipe = match domain {
        Domain::Source => &config.source,
        Domain::Target => &config.target,
    };
    let shape = generate_shape(config.classes[class], recipe.raw_points, &mut rng)?;
    let sample = apply_domain(&shape, recipe, &mut rng)?;
    if sample.cloud.len() == config.points {
        Ok(sample.cloud)
    } else {
        resample_to(&sample.cloud, config.points, &mut rng)
    }
}

/// Generates both domains, writes every cloud under `out_dir`, and saves
/// `out_dir/manifest.txt`.
pub fn build_dataset(config: &DataConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let mut entries = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for (split, per_class) in [
            (Split::Train, config.train_per_class),
            (Split::Test, config.test_per_class),
        ] {
            let rel = PathBuf::from(domain.to_string()).join(split.to_string());
            let dir = out_dir.join(&rel);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for index in 0..per_class {
                for (class, kind) in config.classes.iter().enumerate() {
                    let cloud = generate_sample(config, domain, split, class, index)?;
                    let name = format!("{kind}_{index:04}.pcd");
                    write_cloud(&dir.join(&name), &cloud)?;
                    entries.push(ManifestEntry {
                        path: rel.join(name),
                        class,
                        domain,
                        split,
                    });
                }
            }
        }
    }
    let manifest = DatasetManifest {
        seed: config.seed,
        classes: config.classes.clone(),
        source: config.source.clone(),
        target: config.target.clone(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}
