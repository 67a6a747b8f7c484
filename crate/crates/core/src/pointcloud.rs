//! Point-cloud primitives and the preprocessing chain.
//!
//! A raw depth-derived cloud passes through voxel downsampling, a depth ROI
//! crop, largest-connected-component extraction, unit-sphere normalization
//! and fixed-width resampling before it reaches the classifier. All
//! operations are pure and permutation-insensitive at the set level.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{rf, Real};

/// An unordered set of 3D points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<R> {
    points: Vec<[R; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CloudError {
    #[error("cloud is empty")]
    Empty,
    #[error("cloud is degenerate: all points coincide")]
    Degenerate,
    #[error("cloud contains a non-finite coordinate")]
    NonFinite,
}

/// Preprocessing stage names, used to attribute failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Voxel,
    Roi,
    Component,
    Normalize,
    Resample,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Voxel => "voxel",
            Stage::Roi => "roi",
            Stage::Component => "component",
            Stage::Normalize => "normalize",
            Stage::Resample => "resample",
        };
        f.write_str(s)
    }
}

/// A frame failed preprocessing; the caller drops the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("frame preprocessing failed at {stage} stage: {source}")]
pub struct PreprocessError {
    pub stage: Stage,
    pub source: CloudError,
}

/// Parameters for the preprocessing chain.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Depth ROI lower bound in meters (inclusive).
    pub roi_min: f64,
    /// Depth ROI upper bound in meters (inclusive).
    pub roi_max: f64,
    /// Connectivity radius for component extraction, in meters.
    pub component_radius: f64,
    /// Fixed point count fed to the classifier.
    pub target_points: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.005,
            roi_min: 0.1,
            roi_max: 0.6,
            component_radius: 0.02,
            target_points: 1500,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.voxel_size > 0.0) {
            return Err(format!("voxel_size must be > 0, got {}", self.voxel_size));
        }
        if !(0.0 <= self.roi_min && self.roi_min < self.roi_max) {
            return Err(format!(
                "require 0 <= roi_min < roi_max, got [{}, {}]",
                self.roi_min, self.roi_max
            ));
        }
        if !(self.component_radius > 0.0) {
            return Err(format!(
                "component_radius must be > 0, got {}",
                self.component_radius
            ));
        }
        if self.target_points < 1 {
            return Err("target_points must be >= 1".to_string());
        }
        Ok(())
    }
}

impl<R: Real> PointCloud<R> {
    /// Build a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<[R; 3]>) -> Result<Self, CloudError> {
        if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(CloudError::NonFinite);
        }
        Ok(Self { points })
    }

    /// Build from coordinates already known to be finite.
    pub(crate) fn from_valid(points: Vec<[R; 3]>) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        Self { points }
    }

    pub fn empty() -> Self {
        Self { points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[R; 3]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[R; 3]> {
        self.points
    }

    pub fn centroid(&self) -> Option<[R; 3]> {
        if self.points.is_empty() {
            return None;
        }
        let mut acc = [R::zero(); 3];
        for p in &self.points {
            for k in 0..3 {
                acc[k] += p[k];
            }
        }
        let n = rf::<R>(self.points.len() as f64);
        Some([acc[0] / n, acc[1] / n, acc[2] / n])
    }

    /// Lexicographically sorted copy of the points; the canonical order used
    /// wherever a deterministic sequence is needed from set semantics.
    pub fn sorted_points(&self) -> Vec<[R; 3]> {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates are totally ordered"));
        pts
    }
}

#[inline]
fn dist2<R: Real>(a: &[R; 3], b: &[R; 3]) -> R {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn voxel_index<R: Real>(p: &[R; 3], voxel: R) -> (i64, i64, i64) {
    // mathematical floor: negative coordinates bin correctly
    let i = (p[0] / voxel).floor().to_i64().expect("voxel index fits i64");
    let j = (p[1] / voxel).floor().to_i64().expect("voxel index fits i64");
    let k = (p[2] / voxel).floor().to_i64().expect("voxel index fits i64");
    (i, j, k)
}

/// Bin points into a regular grid and emit one centroid per occupied voxel.
pub fn voxel_downsample<R: Real>(cloud: &PointCloud<R>, voxel_size: R) -> PointCloud<R> {
    assert!(voxel_size > R::zero(), "voxel_size must be positive");
    let mut bins: std::collections::BTreeMap<(i64, i64, i64), ([R; 3], usize)> =
        std::collections::BTreeMap::new();
    for p in cloud.points() {
        let idx = voxel_index(p, voxel_size);
        let entry = bins.entry(idx).or_insert(([R::zero(); 3], 0));
        for k in 0..3 {
            entry.0[k] += p[k];
        }
        entry.1 += 1;
    }
    let points = bins
        .into_values()
        .map(|(sum, n)| {
            let n = rf::<R>(n as f64);
            [sum[0] / n, sum[1] / n, sum[2] / n]
        })
        .collect();
    PointCloud::from_valid(points)
}

/// Retain points whose depth coordinate lies in `[roi_min, roi_max]`,
/// inclusive on both ends.
pub fn roi_crop<R: Real>(cloud: &PointCloud<R>, roi_min: R, roi_max: R) -> PointCloud<R> {
    assert!(roi_min < roi_max, "roi_min must be below roi_max");
    let points = cloud
        .points()
        .iter()
        .filter(|p| roi_min <= p[2] && p[2] <= roi_max)
        .copied()
        .collect();
    PointCloud::from_valid(points)
}

/// Extract the connected component with the most points, where two points
/// are connected iff their Euclidean distance is at most `radius`.
///
/// Uses a uniform spatial hash with cell size = radius and a 27-cell
/// neighborhood scan; the quadratic union-find variant lives in the test
/// suite as an oracle.
pub fn largest_component<R: Real>(
    cloud: &PointCloud<R>,
    radius: R,
) -> Result<PointCloud<R>, CloudError> {
    assert!(radius > R::zero(), "radius must be positive");
    let pts = cloud.points();
    if pts.is_empty() {
        return Err(CloudError::Empty);
    }
    let r2 = radius * radius;
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(voxel_index(p, radius)).or_default().push(i);
    }

    let mut component = vec![usize::MAX; pts.len()];
    let mut best: (usize, usize) = (0, 0); // (size, component id)
    let mut n_components = 0usize;
    let mut stack = Vec::new();
    for root in 0..pts.len() {
        if component[root] != usize::MAX {
            continue;
        }
        let id = n_components;
        n_components += 1;
        let mut size = 0usize;
        component[root] = id;
        stack.push(root);
        while let Some(i) = stack.pop() {
            size += 1;
            let (ci, cj, ck) = voxel_index(&pts[i], radius);
            for di in -1..=1 {
                for dj in -1..=1 {
                    for dk in -1..=1 {
                        let Some(cell) = grid.get(&(ci + di, cj + dj, ck + dk)) else {
                            continue;
                        };
                        for &j in cell {
                            if component[j] == usize::MAX && dist2(&pts[i], &pts[j]) <= r2 {
                                component[j] = id;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, id);
        }
    }

    let points = pts
        .iter()
        .zip(&component)
        .filter(|(_, &c)| c == best.1)
        .map(|(p, _)| *p)
        .collect();
    Ok(PointCloud::from_valid(points))
}

/// Center the cloud at the origin and scale so the farthest point sits on
/// the unit sphere.
pub fn normalize_unit_sphere<R: Real>(cloud: &PointCloud<R>) -> Result<PointCloud<R>, CloudError> {
    let pts = cloud.points();
    if pts.is_empty() {
        return Err(CloudError::Empty);
    }
    let c = cloud.centroid().expect("non-empty cloud has a centroid");
    let mut centered: Vec<[R; 3]> = pts
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let mut max2 = R::zero();
    for p in &centered {
        let n2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if n2 > max2 {
            max2 = n2;
        }
    }
    let scale = max2.sqrt();
    if scale <= rf::<R>(1e-12) {
        return Err(CloudError::Degenerate);
    }
    for p in &mut centered {
        for k in 0..3 {
            p[k] = p[k] / scale;
        }
    }
    Ok(PointCloud::from_valid(centered))
}

/// Resample to exactly `target_points` points: a uniform subset without
/// replacement when the cloud is larger, the full cloud plus uniform
/// duplicates when smaller. Points are pre-sorted lexicographically so the
/// result depends only on the point set and the seed.
pub fn resample_fixed<R: Real>(
    cloud: &PointCloud<R>,
    target_points: usize,
    seed: u64,
) -> Result<PointCloud<R>, CloudError> {
    if cloud.is_empty() {
        return Err(CloudError::Empty);
    }
    let pts = cloud.sorted_points();
    let n = pts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = if n >= target_points {
        let mut chosen = rand::seq::index::sample(&mut rng, n, target_points).into_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| pts[i]).collect()
    } else {
        let mut out = pts.clone();
        for _ in n..target_points {
            out.push(pts[rng.random_range(0..n)]);
        }
        out
    };
    Ok(PointCloud::from_valid(points))
}

/// Run the full chain: voxel -> ROI -> largest component -> normalize ->
/// resample. Stage failures are wrapped so the caller can drop the frame.
pub fn preprocess_frame<R: Real>(
    cloud: &PointCloud<R>,
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<PointCloud<R>, PreprocessError> {
    cfg.validate().expect("config validated by caller");
    let wrap = |stage: Stage| move |source: CloudError| PreprocessError { stage, source };

    let voxeled = voxel_downsample(cloud, rf(cfg.voxel_size));
    let cropped = roi_crop(&voxeled, rf(cfg.roi_min), rf(cfg.roi_max));
    if cropped.is_empty() {
        return Err(PreprocessError {
            stage: Stage::Roi,
            source: CloudError::Empty,
        });
    }
    let component =
        largest_component(&cropped, rf(cfg.component_radius)).map_err(wrap(Stage::Component))?;
    let normalized = normalize_unit_sphere(&component).map_err(wrap(Stage::Normalize))?;
    resample_fixed(&normalized, cfg.target_points, seed).map_err(wrap(Stage::Resample))
}

/// Read the ASCII cloud format: one `x y z` triple per line, meters,
/// `#` comments and blank lines skipped.
pub fn read_xyz<R: Real>(reader: impl BufRead) -> std::io::Result<PointCloud<R>> {
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let mut p = [R::zero(); 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: {}", lineno + 1, e),
                )
            })?;
            if !v.is_finite() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: non-finite coordinate", lineno + 1),
                ));
            }
            p[k] = rf(v);
        }
        points.push(p);
    }
    Ok(PointCloud::from_valid(points))
}

pub fn read_xyz_file<R: Real>(path: impl AsRef<Path>) -> std::io::Result<PointCloud<R>> {
    let file = std::fs::File::open(path)?;
    read_xyz(std::io::BufReader::new(file))
}

pub fn write_xyz<R: Real>(cloud: &PointCloud<R>, writer: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()
}

pub fn write_xyz_file<R: Real>(cloud: &PointCloud<R>, path: impl AsRef<Path>) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_xyz(cloud, file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_non_finite() {
        assert_eq!(
            PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).unwrap_err(),
            CloudError::NonFinite
        );
        assert_eq!(
            PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]).unwrap_err(),
            CloudError::NonFinite
        );
    }

    #[test]
    fn voxel_empty_and_single() {
        let empty: PointCloud<f64> = PointCloud::empty();
        assert!(voxel_downsample(&empty, 0.005).is_empty());
        let one = cloud(&[[0.1, 0.2, 0.3]]);
        assert_eq!(voxel_downsample(&one, 0.005).points(), one.points());
    }

    #[test]
    fn voxel_merges_cell_mates_to_centroid() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.002, 0.0, 0.0]]);
        let out = voxel_downsample(&c, 0.005);
        assert_eq!(out.len(), 1);
        let p = out.points()[0];
        assert!((p[0] - 0.001).abs() < 1e-15 && p[1] == 0.0 && p[2] == 0.0);
    }

    #[test]
    fn voxel_negative_coordinates_use_mathematical_floor() {
        // -0.001 and +0.001 straddle zero and must land in different cells
        let c = cloud(&[[-0.001, 0.0, 0.0], [0.001, 0.0, 0.0]]);
        assert_eq!(voxel_downsample(&c, 0.005).len(), 2);
    }

    #[test]
    fn roi_bounds_inclusive() {
        let c = cloud(&[
            [0.0, 0.0, 0.3],
            [0.0, 0.0, 0.7],
            [0.0, 0.0, 0.1],
            [0.0, 0.0, 0.6],
            [0.0, 0.0, 0.09],
        ]);
        let out = roi_crop(&c, 0.1, 0.6);
        let zs: Vec<f64> = out.points().iter().map(|p| p[2]).collect();
        assert_eq!(zs, vec![0.3, 0.1, 0.6]);
    }

    #[test]
    fn largest_component_picks_bigger_cluster() {
        let mut pts = Vec::new();
        for i in 0..100 {
            pts.push([i as f64 * 0.005, 0.0, 0.0]);
        }
        for i in 0..20 {
            pts.push([10.0 + i as f64 * 0.005, 0.0, 0.0]);
        }
        let out = largest_component(&cloud(&pts), 0.02).unwrap();
        assert_eq!(out.len(), 100);
        assert!(out.points().iter().all(|p| p[0] < 1.0));
    }

    #[test]
    fn largest_component_empty_errors() {
        let empty: PointCloud<f64> = PointCloud::empty();
        assert_eq!(largest_component(&empty, 0.02).unwrap_err(), CloudError::Empty);
    }

    #[test]
    fn normalize_two_points() {
        let out = normalize_unit_sphere(&cloud(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_canonical_is_fixed_point() {
        let c = cloud(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(normalize_unit_sphere(&c).unwrap().points(), c.points());
    }

    #[test]
    fn normalize_degenerate_errors() {
        let c = cloud(&[[5.0, 5.0, 5.0], [5.0, 5.0, 5.0]]);
        assert_eq!(normalize_unit_sphere(&c).unwrap_err(), CloudError::Degenerate);
    }

    #[test]
    fn resample_subset_and_identity_and_upsample() {
        let pts: Vec<[f64; 3]> = (0..2000).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = cloud(&pts);
        let down = resample_fixed(&c, 1500, 7).unwrap();
        assert_eq!(down.len(), 1500);
        assert!(down.points().iter().all(|p| pts.contains(p)));

        let exact: Vec<[f64; 3]> = (0..1500).map(|i| [i as f64, 0.0, 0.0]).collect();
        let same = resample_fixed(&cloud(&exact), 1500, 7).unwrap();
        assert_eq!(same.points(), &exact[..]);

        let small: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let up = resample_fixed(&cloud(&small), 15, 7).unwrap();
        assert_eq!(up.len(), 15);
        let mut distinct: Vec<[f64; 3]> = up.points().to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        assert_eq!(distinct, small);
    }

    #[test]
    fn resample_order_independent_given_seed() {
        let pts: Vec<[f64; 3]> = (0..100).map(|i| [i as f64, 1.0, 2.0]).collect();
        let mut rev = pts.clone();
        rev.reverse();
        let a = resample_fixed(&cloud(&pts), 40, 3).unwrap();
        let b = resample_fixed(&cloud(&rev), 40, 3).unwrap();
        assert_eq!(a.points(), b.points());
    }

    #[test]
    fn resample_empty_errors() {
        let empty: PointCloud<f64> = PointCloud::empty();
        assert_eq!(resample_fixed(&empty, 10, 0).unwrap_err(), CloudError::Empty);
    }

    #[test]
    fn preprocess_fails_on_all_cropped() {
        let c = cloud(&[[0.0, 0.0, 0.7], [0.01, 0.0, 0.8]]);
        let err = preprocess_frame(&c, &PreprocessConfig::default(), 0).unwrap_err();
        assert_eq!(err.stage, Stage::Roi);
    }

    #[test]
    fn xyz_roundtrip_and_reject_bad_lines() {
        let c = cloud(&[[0.125, -0.25, 0.5], [1.0, 2.0, 3.0]]);
        let mut buf = Vec::new();
        write_xyz(&c, &mut buf).unwrap();
        let back: PointCloud<f64> = read_xyz(&buf[..]).unwrap();
        assert_eq!(back.points(), c.points());

        assert!(read_xyz::<f64>("1 2".as_bytes()).is_err());
        assert!(read_xyz::<f64>("1 2 3 4".as_bytes()).is_err());
        assert!(read_xyz::<f64>("1 nan 3".as_bytes()).is_err());
        let ok: PointCloud<f64> = read_xyz("# header\n\n1 2 3\n".as_bytes()).unwrap();
        assert_eq!(ok.len(), 1);
    }
}
