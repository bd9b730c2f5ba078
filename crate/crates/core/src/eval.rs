//! Correspondence quality metrics.

use crate::error::{Error, Result};
use crate::geodesics::GeodesicMatrix;
use crate::geometry::PointCloud;
use crate::matching::DenseMap;

/// True target index for every source point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth(Vec<usize>);

impl GroundTruth {
    pub fn new(targets: Vec<usize>, target_size: usize) -> Result<Self> {
        if let Some((i, &j)) = targets.iter().enumerate().find(|(_, &j)| j >= target_size) {
            return Err(Error::InvalidArgument(format!(
                "ground-truth entry {i} = {j} outside target of size {target_size}"
            )));
        }
        Ok(Self(targets))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.0
    }

    pub fn as_map(&self) -> DenseMap {
        DenseMap::new_unchecked(self.0.clone())
    }
}

fn check_sizes(map: &DenseMap, gt: &GroundTruth, target: &PointCloud) -> Result<()> {
    if map.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "map vs ground truth",
            expected: gt.len(),
            found: map.len(),
        });
    }
    let needed = map.min_target_size().max(gt.0.iter().map(|&j| j + 1).max().unwrap_or(0));
    if needed > target.len() {
        return Err(Error::DimensionMismatch {
            what: "target cloud size",
            expected: needed,
            found: target.len(),
        });
    }
    Ok(())
}

fn errors<'a>(map: &'a DenseMap, gt: &'a GroundTruth, target: &'a PointCloud) -> impl Iterator<Item = f64> + 'a {
    map.targets()
        .iter()
        .zip(gt.targets())
        .map(|(&a, &b)| (target.point(a) - target.point(b)).norm())
}

/// Mean Euclidean distance between mapped and true target points.
pub fn euclidean_error(map: &DenseMap, gt: &GroundTruth, target: &PointCloud) -> Result<f64> {
    check_sizes(map, gt, target)?;
    if map.is_empty() {
        return Err(Error::Empty("correspondence map"));
    }
    Ok(errors(map, gt, target).sum::<f64>() / map.len() as f64)
}

/// Fraction of points whose error is strictly below `eps` times the diameter of the target.
pub fn accuracy(map: &DenseMap, gt: &GroundTruth, target: &PointCloud, eps: f64) -> Result<f64> {
    let diameter = target.diameter();
    accuracy_with_diameter(map, gt, target, eps, diameter)
}

/// As [`accuracy`] with a precomputed target diameter, for evaluating many tolerances.
pub fn accuracy_with_diameter(
    map: &DenseMap,
    gt: &GroundTruth,
    target: &PointCloud,
    eps: f64,
    diameter: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("tolerance {eps} outside [0, 1]")));
    }
    check_sizes(map, gt, target)?;
    if map.is_empty() {
        return Err(Error::Empty("correspondence map"));
    }
    let limit = eps * diameter;
    let hits = errors(map, gt, target).filter(|&e| e < limit).count();
    Ok(hits as f64 / map.len() as f64)
}

/// Normaliser used when no mesh area is available.
pub fn default_area_scale(target: &PointCloud) -> f64 {
    target.bbox_diagonal()
}

/// Mean geodesic distance between mapped and true target points, divided by `area_scale`.
pub fn geodesic_error(map: &DenseMap, gt: &GroundTruth, geodesics: &GeodesicMatrix, area_scale: f64) -> Result<f64> {
    if !(area_scale > 0.0) || !area_scale.is_finite() {
        return Err(Error::InvalidArgument(format!("area scale must be positive, got {area_scale}")));
    }
    if map.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "map vs ground truth",
            expected: gt.len(),
            found: map.len(),
        });
    }
    if map.is_empty() {
        return Err(Error::Empty("correspondence map"));
    }
    let needed = map.min_target_size().max(gt.0.iter().map(|&j| j + 1).max().unwrap_or(0));
    if needed > geodesics.len() {
        return Err(Error::DimensionMismatch {
            what: "geodesic matrix size",
            expected: needed,
            found: geodesics.len(),
        });
    }
    let mut sum = 0.0;
    for (&a, &b) in map.targets().iter().zip(gt.targets()) {
        let d = geodesics.get(a, b);
        if !d.is_finite() {
            return Err(Error::InfiniteGeodesic { from: a, to: b });
        }
        sum += d;
    }
    Ok(sum / map.len() as f64 / area_scale)
}
