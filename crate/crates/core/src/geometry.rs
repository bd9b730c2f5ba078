//! Point cloud containers, farthest point sampling, exhaustive nearest
//! neighbours and chamfer distances.
//!
//! Everything here is a pure function of its inputs. Ties in sampling and
//! neighbour search always resolve toward the lowest index.

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Ordered set of 3D points. Index `i` names the same point for the lifetime
/// of the value.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self { points })
    }

    pub fn from_slice(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn centroid(&self) -> Point3 {
        self.points.iter().sum::<Point3>() / self.points.len() as f64
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    /// Largest pairwise Euclidean distance (brute force, O(N²)).
    pub fn diameter(&self) -> f64 {
        self.points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                self.points[i + 1..]
                    .iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
            .sqrt()
    }

    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
        }
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Row-oriented view shared by point clouds and feature matrices so the same
/// neighbour search serves both.
pub trait RowSet: Sync {
    fn n_rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
}

impl RowSet for PointCloud {
    fn n_rows(&self) -> usize {
        self.points.len()
    }
    fn dim(&self) -> usize {
        3
    }
    fn row(&self, i: usize) -> &[f64] {
        self.points[i].as_slice()
    }
}

impl RowSet for [Point3] {
    fn n_rows(&self) -> usize {
        self.len()
    }
    fn dim(&self) -> usize {
        3
    }
    fn row(&self, i: usize) -> &[f64] {
        self[i].as_slice()
    }
}

/// Transform that maps a raw cloud into its normalized frame:
/// `q = (p - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationRecord {
    pub center: Point3,
    pub scale: f64,
    /// Set when the cloud had zero extent and `scale` fell back to 1.
    pub degenerate: bool,
}

impl NormalizationRecord {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| (p - self.center) / self.scale)
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|q| q * self.scale + self.center)
    }
}

/// Centers the cloud on its centroid and scales it so the longest
/// bounding-box edge has unit length.
pub fn normalize_cloud(cloud: &PointCloud) -> (PointCloud, NormalizationRecord) {
    let center = cloud.centroid();
    let (lo, hi) = cloud.bounds();
    let extent = (hi - lo).max();
    let (scale, degenerate) = if extent > 0.0 {
        (extent, false)
    } else {
        (1.0, true)
    };
    let record = NormalizationRecord {
        center,
        scale,
        degenerate,
    };
    (record.apply(cloud), record)
}

/// Row-selection matrix Π with exactly one 1 per row, stored sparsely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMatrix {
    source_size: usize,
    selected: Vec<usize>,
}

impl SelectionMatrix {
    pub fn new(source_size: usize, selected: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; source_size];
        for &i in &selected {
            if i >= source_size {
                return Err(Error::InvalidArgument(format!(
                    "selected index {i} out of range for {source_size} points"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "selected index {i} appears twice"
                )));
            }
        }
        Ok(Self {
            source_size,
            selected,
        })
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Entry `(row, col)` of the equivalent dense binary matrix.
    pub fn entry(&self, row: usize, col: usize) -> u8 {
        u8::from(self.selected[row] == col)
    }

    /// `Π · P`.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if cloud.len() != self.source_size {
            return Err(Error::DimensionMismatch {
                what: "selection matrix columns",
                expected: self.source_size,
                found: cloud.len(),
            });
        }
        cloud.select(&self.selected)
    }
}

/// Greedy farthest point sampling starting from `seed`.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: usize) -> Result<SelectionMatrix> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {n} points"
        )));
    }
    if seed >= n {
        return Err(Error::InvalidArgument(format!(
            "seed index {seed} out of range for {n} points"
        )));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = seed;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            // Strict comparison keeps the lowest index on ties.
            if !taken[i] && min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    SelectionMatrix::new(n, selected)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims<Q: RowSet + ?Sized, R: RowSet + ?Sized>(query: &Q, reference: &R) -> Result<()> {
    if query.dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            what: "neighbour search row width",
            expected: reference.dim(),
            found: query.dim(),
        });
    }
    if reference.n_rows() == 0 {
        return Err(Error::Empty("neighbour search reference"));
    }
    Ok(())
}

/// `k` nearest rows of `reference` for one query row, ascending distance,
/// ties to the lowest index.
pub(crate) fn knn_row<R: RowSet + ?Sized>(q: &[f64], reference: &R, k: usize) -> Vec<Neighbor> {
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let m = reference.n_rows();
    let cand: Vec<(f64, usize)> = if k <= SMALL_K {
        // Sorted buffer of the best k so far. Indices arrive in increasing
        // order, so a strict `<` against the worst entry keeps lowest-index ties.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for j in 0..m {
            let d = sq_dist(q, reference.row(j));
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let at = best.partition_point(|e| e.0 <= d);
            best.insert(at, (d, j));
            best.truncate(k);
        }
        best
    } else {
        let mut all: Vec<(f64, usize)> = (0..m).map(|j| (sq_dist(q, reference.row(j)), j)).collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, by_key);
            all.truncate(k);
        }
        all.sort_unstable_by(by_key);
        all
    };
    cand.into_iter()
        .map(|(d2, j)| Neighbor {
            index: j,
            distance: d2.sqrt(),
        })
        .collect()
}

/// Largest `k` served by the insertion buffer in [`knn_row`].
const SMALL_K: usize = 48;

/// Brute-force k-nearest-neighbour search over row sets.
pub fn knn<Q, R>(query: &Q, reference: &R, k: usize) -> Result<Vec<Vec<Neighbor>>>
where
    Q: RowSet + ?Sized,
    R: RowSet + ?Sized,
{
    check_dims(query, reference)?;
    if k == 0 || k > reference.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} with {} reference rows",
            reference.n_rows()
        )));
    }
    if query.dim() >= WIDE_ROWS {
        return Ok(knn_wide(query, reference, k));
    }
    Ok((0..query.n_rows())
        .into_par_iter()
        .map(|i| knn_row(query.row(i), reference, k))
        .collect())
}

/// Row width from which neighbour search goes through a matrix product.
const WIDE_ROWS: usize = 16;
const BLOCK_ROWS: usize = 256;

fn to_matrix<R: RowSet + ?Sized>(rows: &R, range: std::ops::Range<usize>) -> DMatrix<f64> {
    let d = rows.dim();
    DMatrix::from_fn(range.len(), d, |r, c| rows.row(range.start + r)[c])
}

/// Candidates ranked by `|q|² + |r|² − 2 q·r` from a block matrix product,
/// then re-ranked with exact distances so the result equals the brute-force
/// one (a small candidate margin absorbs the rounding of the expansion).
fn knn_wide<Q, R>(query: &Q, reference: &R, k: usize) -> Vec<Vec<Neighbor>>
where
    Q: RowSet + ?Sized,
    R: RowSet + ?Sized,
{
    let m = reference.n_rows();
    let reference_t = to_matrix(reference, 0..m).transpose();
    let ref_norms: Vec<f64> = (0..m)
        .map(|j| reference.row(j).iter().map(|x| x * x).sum())
        .collect();
    let margin = (k + 8).min(m);
    let starts: Vec<usize> = (0..query.n_rows()).step_by(BLOCK_ROWS).collect();
    starts
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + BLOCK_ROWS).min(query.n_rows());
            let dots = to_matrix(query, start..end) * &reference_t;
            (start..end)
                .map(|i| {
                    let q = query.row(i);
                    let qn: f64 = q.iter().map(|x| x * x).sum();
                    let mut cand: Vec<(f64, usize)> = (0..m)
                        .map(|j| (qn + ref_norms[j] - 2.0 * dots[(i - start, j)], j))
                        .collect();
                    if margin < m {
                        cand.select_nth_unstable_by(margin - 1, |a, b| {
                            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                        });
                        cand.truncate(margin);
                    }
                    for c in &mut cand {
                        c.0 = sq_dist(q, reference.row(c.1));
                    }
                    cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    cand.truncate(k);
                    cand.into_iter()
                        .map(|(d2, j)| Neighbor {
                            index: j,
                            distance: d2.sqrt(),
                        })
                        .collect()
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Index and squared distance of the nearest reference row for every query
/// row.
pub fn nearest<Q, R>(query: &Q, reference: &R) -> Result<Vec<(usize, f64)>>
where
    Q: RowSet + ?Sized,
    R: RowSet + ?Sized,
{
    check_dims(query, reference)?;
    if query.n_rows() == 0 {
        return Err(Error::Empty("neighbour search query"));
    }
    Ok((0..query.n_rows())
        .into_par_iter()
        .map(|i| {
            let q = query.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..reference.n_rows() {
                let d = sq_dist(q, reference.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect())
}

/// Mean over `a` of the squared distance to the nearest point of `b`.
pub fn one_sided_chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer operand"));
    }
    let nn = nearest(a, b)?;
    Ok(nn.iter().map(|(_, d)| d).sum::<f64>() / a.len() as f64)
}

/// Symmetric chamfer distance: squared distances, mean per direction, summed.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    Ok(one_sided_chamfer(a, b)? + one_sided_chamfer(b, a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_slice(pts).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::from_slice(&[[0.0, f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn normalize_unit_cube() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        let (out, rec) = normalize_cloud(&cloud(&pts));
        assert_eq!(rec.center, Point3::new(0.5, 0.5, 0.5));
        assert_eq!(rec.scale, 1.0);
        assert!(!rec.degenerate);
        assert!(out.centroid().norm() < 1e-15);
        let (lo, hi) = out.bounds();
        assert_eq!(hi - lo, Point3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn normalize_single_point_is_degenerate() {
        let (out, rec) = normalize_cloud(&cloud(&[[3.0, 4.0, 5.0]]));
        assert_eq!(out.point(0), &Point3::zeros());
        assert_eq!(rec.center, Point3::new(3.0, 4.0, 5.0));
        assert_eq!(rec.scale, 1.0);
        assert!(rec.degenerate);
    }

    #[test]
    fn normalize_segment() {
        let (out, rec) = normalize_cloud(&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]));
        assert_eq!(rec.scale, 2.0);
        assert_eq!(out.point(0), &Point3::new(-0.5, 0.0, 0.0));
        assert_eq!(out.point(1), &Point3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn fps_collinear() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let s = farthest_point_sample(&c, 3, 0).unwrap();
        assert_eq!(s.selected(), &[0, 2, 1]);
        assert_eq!(farthest_point_sample(&c, 1, 2).unwrap().selected(), &[2]);
        assert!(farthest_point_sample(&c, 4, 0).is_err());
        assert!(farthest_point_sample(&c, 0, 0).is_err());
        assert!(farthest_point_sample(&c, 2, 3).is_err());
    }

    #[test]
    fn selection_matrix_rows() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let s = SelectionMatrix::new(3, vec![2, 0]).unwrap();
        for row in 0..2 {
            let ones: u8 = (0..3).map(|col| s.entry(row, col)).sum();
            assert_eq!(ones, 1);
        }
        assert_eq!(s.apply(&c).unwrap().point(0).x, 2.0);
        assert!(SelectionMatrix::new(3, vec![1, 1]).is_err());
        assert!(SelectionMatrix::new(3, vec![3]).is_err());
    }

    #[test]
    fn knn_examples() {
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let r = cloud(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let res = knn(&q, &r, 2).unwrap();
        assert_eq!(res[0][0], Neighbor { index: 0, distance: 1.0 });
        assert_eq!(res[0][1], Neighbor { index: 1, distance: 2.0 });

        let tie = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert_eq!(knn(&q, &tie, 1).unwrap()[0][0].index, 0);

        assert!(knn(&q, &r, 0).is_err());
        assert!(knn(&q, &r, 3).is_err());
    }

    #[test]
    fn knn_self_query() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        for (i, row) in knn(&c, &c, 1).unwrap().iter().enumerate() {
            assert_eq!(row[0].index, i);
            assert_eq!(row[0].distance, 0.0);
        }
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(a.points(), a.points()).unwrap(), 0.0);
        assert_eq!(chamfer(a.points(), b.points()).unwrap(), 2.0);

        let b2 = cloud(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(one_sided_chamfer(a.points(), b2.points()).unwrap(), 0.0);

        let a2 = cloud(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(one_sided_chamfer(a2.points(), b.points()).unwrap(), 2.5);
        assert!(one_sided_chamfer(&[], b.points()).is_err());
    }

    fn brute_fps(pts: &[Point3], m: usize, seed: usize) -> Vec<usize> {
        let mut sel = vec![seed];
        while sel.len() < m {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (i, p) in pts.iter().enumerate() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| (p - pts[s]).norm())
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    fn arb_cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec(
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y, z)| Point3::new(x, y, z)),
            1..max,
        )
    }

    struct Wide(Vec<Vec<f64>>);

    impl RowSet for Wide {
        fn n_rows(&self) -> usize {
            self.0.len()
        }
        fn dim(&self) -> usize {
            self.0[0].len()
        }
        fn row(&self, i: usize) -> &[f64] {
            &self.0[i]
        }
    }

    proptest! {
        #[test]
        fn wide_knn_equals_exhaustive(
            rows in prop::collection::vec(prop::collection::vec(-2i32..3, 20), 2..300),
            kf in 0.0f64..1.0,
        ) {
            // Small integer entries produce many exact ties.
            let w = Wide(rows.iter().map(|r| r.iter().map(|&x| x as f64 * 0.5).collect()).collect());
            let k = 1 + ((w.n_rows() - 1) as f64 * kf) as usize;
            let got = knn(&w, &w, k).unwrap();
            for (i, row) in got.iter().enumerate() {
                let want = knn_row(w.row(i), &w, k);
                prop_assert_eq!(row, &want);
            }
        }

        #[test]
        fn fps_matches_brute_force(pts in arb_cloud(64), mf in 0.0f64..1.0, sf in 0.0f64..1.0) {
            let n = pts.len();
            let m = 1 + ((n - 1) as f64 * mf) as usize;
            let seed = ((n - 1) as f64 * sf) as usize;
            let c = PointCloud::new(pts.clone()).unwrap();
            let got = farthest_point_sample(&c, m, seed).unwrap();
            prop_assert_eq!(got.selected(), &brute_fps(&pts, m, seed)[..]);
        }

        #[test]
        fn fps_full_is_permutation(pts in arb_cloud(40)) {
            let c = PointCloud::new(pts).unwrap();
            let mut sel = farthest_point_sample(&c, c.len(), 0).unwrap().selected().to_vec();
            sel.sort_unstable();
            prop_assert_eq!(sel, (0..c.len()).collect::<Vec<_>>());
        }

        #[test]
        fn chamfer_symmetric_nonnegative(a in arb_cloud(30), b in arb_cloud(30)) {
            let ab = chamfer(&a, &b).unwrap();
            let ba = chamfer(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn one_sided_zero_on_subset(b in arb_cloud(30), take in 1usize..30) {
            let a: Vec<Point3> = b.iter().take(take).copied().collect();
            prop_assert_eq!(one_sided_chamfer(&a, &b).unwrap(), 0.0);
        }

        #[test]
        fn knn_distances_sorted(q in arb_cloud(10), r in arb_cloud(30), kf in 0.0f64..1.0) {
            let k = 1 + ((r.len() - 1) as f64 * kf) as usize;
            for row in knn(&q[..], &r[..], k).unwrap() {
                prop_assert_eq!(row.len(), k);
                for w in row.windows(2) {
                    prop_assert!(w[0].distance <= w[1].distance);
                }
            }
        }

        #[test]
        fn normalize_round_trip(pts in arb_cloud(50), shift in -100.0f64..100.0, s in 0.01f64..100.0) {
            let raw = PointCloud::new(pts.iter().map(|p| p * s + Point3::repeat(shift)).collect()).unwrap();
            let (norm, rec) = normalize_cloud(&raw);
            let back = rec.invert(&norm);
            let scale = raw.points().iter().map(|p| p.amax()).fold(1e-300, f64::max);
            for (p, q) in raw.points().iter().zip(back.points()) {
                prop_assert!((p - q).amax() <= 1e-12 * scale);
            }
        }
    }
}
