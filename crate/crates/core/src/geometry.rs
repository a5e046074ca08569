//! Point-set primitives: centroid, spans, normalization, sampling and
//! neighborhoods. Distances are compared squared throughout.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::invalid(format!("unknown axis {other:?}"))),
        }
    }
}

/// A non-empty set of finite 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("point cloud with no points".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset (or reordering, or repetition) of the points by index.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn translated(&self, offset: Point) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }

    pub fn scaled(&self, factors: Point) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] * factors[0], p[1] * factors[1], p[2] * factors[2]])
                .collect(),
        }
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisSpan {
    pub axis: Axis,
    pub length: f64,
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub fn centroid(cloud: &PointCloud) -> Point {
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in cloud.points() {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|v| v / n)
}

pub fn axis_span(cloud: &PointCloud, axis: Axis) -> AxisSpan {
    let (lo, hi) = cloud.bounds();
    let a = axis.index();
    AxisSpan {
        axis,
        length: hi[a] - lo[a],
    }
}

/// Centers the cloud on its centroid and scales the farthest point to norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let c = centroid(cloud);
    let centered = cloud.translated([-c[0], -c[1], -c[2]]);
    let radius = centered
        .points()
        .iter()
        .map(|p| dist2(p, &[0.0; 3]))
        .fold(0.0, f64::max)
        .sqrt();
    if cloud.len() < 2 || !(radius > 1e-12) {
        return Err(Error::Degenerate(
            "cannot normalize a cloud whose points all coincide".into(),
        ));
    }
    let s = 1.0 / radius;
    Ok(centered.scaled([s, s, s]))
}

/// Greedy max-min subset of `k` indices.
///
/// The first pick is the point farthest from the centroid; each later pick
/// maximizes the distance to the already selected set. Ties go to the lowest
/// index.
pub fn farthest_point_sampling(cloud: &PointCloud, k: usize) -> Result<Vec<usize>> {
    let m = cloud.len();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("FPS of {k} from {m} points")));
    }
    let pts = cloud.points();
    let c = centroid(cloud);
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = dist2(p, &c);
        if d > best {
            best = d;
            first = i;
        }
    }

    let mut selected = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut order = Vec::with_capacity(k);
    let mut current = first;
    loop {
        selected[current] = true;
        order.push(current);
        if order.len() == k {
            break;
        }
        let anchor = pts[current];
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..m {
            if selected[i] {
                continue;
            }
            let d = dist2(&pts[i], &anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(order)
}

/// For each point, the `k` nearest other points (ties to the lowest index).
pub fn knn(cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    let m = cloud.len();
    if k == 0 || k >= m {
        return Err(Error::invalid(format!("{k} neighbors requested among {m} points")));
    }
    let pts = cloud.points();
    let mut out = Vec::with_capacity(m);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(m - 1);
    for (i, p) in pts.iter().enumerate() {
        scratch.clear();
        scratch.extend(
            pts.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, q)| (dist2(p, q), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
            scratch.truncate(k);
        }
        scratch.sort_by(cmp);
        out.push(scratch.iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// `k` distinct points drawn without replacement, in draw order.
pub fn random_subsample<R: Rng + ?Sized>(cloud: &PointCloud, k: usize, rng: &mut R) -> Result<PointCloud> {
    let m = cloud.len();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("subsample of {k} from {m} points")));
    }
    cloud.select(&index::sample(rng, m, k).into_vec())
}

/// Brings a cloud to exactly `k` points: subsample when larger, otherwise
/// keep every point and pad with uniformly drawn repeats.
pub fn resample_to<R: Rng + ?Sized>(cloud: &PointCloud, k: usize, rng: &mut R) -> Result<PointCloud> {
    let m = cloud.len();
    if k == 0 {
        return Err(Error::invalid("resample to zero points"));
    }
    if m >= k {
        return random_subsample(cloud, k, rng);
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.extend((m..k).map(|_| rng.gen_range(0..m)));
    cloud.select(&idx)
}
