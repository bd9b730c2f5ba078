//! Soft and hard correspondences between feature rows, the smoothness loss
//! and total-loss assembly.

use rayon::prelude::*;

use crate::deformation::{arap_energy, deformation_loss, DeformationGraph, MatchMode, TransformSet};
use crate::error::{Error, Result};
use crate::geodesics::{geodesic_similarity_loss, GeodesicMatrix, DEFAULT_SIMILARITY_K};
use crate::geometry::{chamfer, knn, nearest, Point3, PointCloud, RowSet};
use crate::projection::FeatureMatrix;

pub const DEFAULT_TOP_N: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Row-stochastic sparse matching matrix with at most `top_n` entries per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftCorrespondence {
    cols: usize,
    top_n: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl SoftCorrespondence {
    /// Validates positivity, distinct in-range indices, row sums of 1 (to
    /// 1e-9) and the per-row entry bound.
    pub fn new(cols: usize, top_n: usize, entries: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        Self::with_tolerance(cols, top_n, entries, 1e-9)
    }

    /// As [`SoftCorrespondence::new`], accepting row sums within `tol` of one
    /// (weights stored in single precision drift by a few ulps).
    pub fn with_tolerance(cols: usize, top_n: usize, entries: Vec<Vec<(usize, f64)>>, tol: f64) -> Result<Self> {
        for (i, row) in entries.iter().enumerate() {
            if row.is_empty() || row.len() > top_n {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has {} entries (allowed 1..={top_n})",
                    row.len()
                )));
            }
            let mut seen: Vec<usize> = row.iter().map(|e| e.0).collect();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != row.len() || seen.last().is_some_and(|&j| j >= cols) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has repeated or out-of-range target indices"
                )));
            }
            if row.iter().any(|e| !(e.1 > 0.0) || !e.1.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {i} has a non-positive weight")));
            }
            let sum: f64 = row.iter().map(|e| e.1).sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { cols, top_n, entries })
    }

    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn top_n(&self) -> usize {
        self.top_n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[Vec<(usize, f64)>] {
        &self.entries
    }

    /// Hard correspondence: the heaviest entry of every row.
    pub fn argmax(&self) -> DenseMap {
        DenseMap::new_unchecked(
            self.entries
                .iter()
                .map(|row| {
                    row.iter()
                        .fold((usize::MAX, f64::NEG_INFINITY), |best, &(j, w)| {
                            if w > best.1 || (w == best.1 && j < best.0) { (j, w) } else { best }
                        })
                        .0
                })
                .collect(),
        )
    }
}

/// One target index per source index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseMap(Vec<usize>);

impl DenseMap {
    pub fn new(targets: Vec<usize>, target_size: usize) -> Result<Self> {
        if let Some((i, &j)) = targets.iter().enumerate().find(|(_, &j)| j >= target_size) {
            return Err(Error::InvalidArgument(format!(
                "map entry {i} = {j} outside target of size {target_size}"
            )));
        }
        Ok(Self(targets))
    }

    pub(crate) fn new_unchecked(targets: Vec<usize>) -> Self {
        Self(targets)
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
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

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    /// Largest target index plus one (0 for an empty map).
    pub fn min_target_size(&self) -> usize {
        self.0.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub deform: f64,
    pub arap: f64,
    pub smooth: f64,
    pub geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            deform: 0.05,
            arap: 0.005,
            smooth: 0.5,
            geo: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("deform", self.deform),
            ("arap", self.arap),
            ("smooth", self.smooth),
            ("geo", self.geo),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub deform: f64,
    pub arap: f64,
    pub smooth: f64,
    pub geo: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(deform: f64, arap: f64, smooth: f64, geo: f64, w: &LossWeights) -> Self {
        Self {
            deform,
            arap,
            smooth,
            geo,
            total: w.deform * deform + w.arap * arap + w.smooth * smooth + w.geo * geo,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.deform, self.arap, self.smooth, self.geo, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

impl std::ops::Add for LossBreakdown {
    type Output = LossBreakdown;
    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            deform: self.deform + o.deform,
            arap: self.arap + o.arap,
            smooth: self.smooth + o.smooth,
            geo: self.geo + o.geo,
            total: self.total + o.total,
        }
    }
}

fn check_widths(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            what: "feature width",
            expected: a.cols(),
            found: b.cols(),
        });
    }
    Ok(())
}

/// Scores `−‖F_S[i] − F_T[j]‖² / temperature`, softmax over the row, the
/// `top_n` largest kept and renormalized. Entries that underflow to zero
/// weight are dropped.
pub fn soft_correspondence(
    source: &FeatureMatrix,
    target: &FeatureMatrix,
    top_n: usize,
    temperature: f64,
) -> Result<SoftCorrespondence> {
    check_widths(source, target)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    let keep = top_n.min(target.rows());
    let entries = knn(source, target, keep)?
        .into_par_iter()
        .map(|row| {
            // Softmax restricted to the kept entries equals the full-row
            // softmax followed by renormalization.
            let best = row[0].distance * row[0].distance;
            let raw: Vec<(usize, f64)> = row
                .iter()
                .map(|nb| (nb.index, (-(nb.distance * nb.distance - best) / temperature).exp()))
                .filter(|e| e.1 > 0.0)
                .collect();
            let total: f64 = raw.iter().map(|e| e.1).sum();
            raw.into_iter().map(|(j, w)| (j, w / total)).collect()
        })
        .collect();
    Ok(SoftCorrespondence {
        cols: target.rows(),
        top_n,
        entries,
    })
}

/// Row `i` of the result is `Σ w · V[j]` over the entries of row `i`.
pub fn pull_back<V: RowSet + ?Sized>(pi: &SoftCorrespondence, values: &V) -> Result<FeatureMatrix> {
    if pi.cols() != values.n_rows() {
        return Err(Error::DimensionMismatch {
            what: "correspondence columns vs pulled-back rows",
            expected: pi.cols(),
            found: values.n_rows(),
        });
    }
    let d = values.dim();
    let data: Vec<f64> = pi
        .entries
        .par_iter()
        .flat_map_iter(|row| {
            let mut out = vec![0.0; d];
            for &(j, w) in row {
                for (o, v) in out.iter_mut().zip(values.row(j)) {
                    *o += w * v;
                }
            }
            out
        })
        .collect();
    FeatureMatrix::new(pi.rows(), d, data)
}

pub fn pull_back_points(pi: &SoftCorrespondence, target: &PointCloud) -> Result<Vec<Point3>> {
    let m = pull_back(pi, target)?;
    Ok((0..m.rows())
        .map(|r| Point3::from_column_slice(m.row(r)))
        .collect())
}

/// `chamfer(T, Π̂ T)`.
pub fn smoothness_loss(pi: &SoftCorrespondence, target: &PointCloud) -> Result<f64> {
    chamfer(target.points(), &pull_back_points(pi, target)?)
}

/// Nearest target row for every source row, ties to the lowest index.
pub fn hard_match<Q: RowSet + ?Sized, R: RowSet + ?Sized>(source: &Q, target: &R) -> Result<DenseMap> {
    Ok(DenseMap(
        knn(source, target, 1)?.into_iter().map(|row| row[0].index).collect(),
    ))
}

/// Nearest target point for each point, by 3D distance.
pub fn nearest_point_map(source: &[Point3], target: &PointCloud) -> Result<DenseMap> {
    Ok(DenseMap(
        nearest(source, target.points())?.into_iter().map(|(j, _)| j).collect(),
    ))
}

/// Everything the loss needs about one matching direction.
pub struct DirectedProblem<'a> {
    pub graph: &'a DeformationGraph,
    pub source: &'a PointCloud,
    pub target: &'a PointCloud,
    pub features: &'a FeatureMatrix,
    pub geodesics: Option<&'a GeodesicMatrix>,
    pub mode: MatchMode,
}

/// Weighted sum of deformation, ARAP, smoothness and geodesic-similarity
/// terms for one direction. Without a geodesic matrix the last term is 0.
pub fn total_loss(
    problem: &DirectedProblem<'_>,
    x: &TransformSet,
    pi: &SoftCorrespondence,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let deform = deformation_loss(problem.graph, x, problem.source, problem.target, problem.mode)?;
    let arap = arap_energy(problem.graph, x)?;
    let smooth = smoothness_loss(pi, problem.target)?;
    let geo = match problem.geodesics {
        Some(m) => geodesic_similarity_loss(
            problem.features,
            m,
            DEFAULT_SIMILARITY_K.min(problem.features.rows().saturating_sub(1)).max(1),
        )?,
        None => 0.0,
    };
    Ok(LossBreakdown::weighted(deform, arap, smooth, geo, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::GraphParams;
    use proptest::prelude::*;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn soft_examples() {
        let f = fm(&[vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]]);
        let pi = soft_correspondence(&f, &f, 3, 0.07).unwrap();
        for i in 0..3 {
            assert_eq!(pi.row(i), &[(i, 1.0)]);
        }

        let s = fm(&[vec![0.0]]);
        let t = fm(&[vec![1.0], vec![2.0]]);
        let pi = soft_correspondence(&s, &t, 10, 1.0).unwrap();
        let e = (-3.0f64).exp();
        assert_eq!(pi.row(0).len(), 2);
        assert!((pi.row(0)[0].1 - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((pi.row(0)[1].1 - e / (1.0 + e)).abs() < 1e-15);

        let t = fm(&[vec![-1.0], vec![1.0], vec![5.0]]);
        let pi = soft_correspondence(&s, &t, 2, 0.5).unwrap();
        assert_eq!(pi.row(0), &[(0, 0.5), (1, 0.5)]);

        assert!(soft_correspondence(&s, &fm(&[vec![1.0, 2.0]]), 2, 1.0).is_err());
        assert!(soft_correspondence(&s, &t, 2, 0.0).is_err());
    }

    #[test]
    fn pull_back_examples() {
        let pi = SoftCorrespondence::new(2, 2, vec![vec![(0, 0.5), (1, 0.5)]; 3]).unwrap();
        let v = fm(&[vec![0.0], vec![2.0]]);
        let out = pull_back(&pi, &v).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0]);

        let perm = SoftCorrespondence::new(2, 1, vec![vec![(1, 1.0)], vec![(0, 1.0)]]).unwrap();
        assert_eq!(pull_back(&perm, &v).unwrap().data(), &[2.0, 0.0]);
        assert!(pull_back(&perm, &fm(&[vec![1.0]])).is_err());
    }

    #[test]
    fn smoothness_examples() {
        let t = PointCloud::from_slice(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let id = SoftCorrespondence::new(2, 1, vec![vec![(0, 1.0)], vec![(1, 1.0)]]).unwrap();
        assert_eq!(smoothness_loss(&id, &t).unwrap(), 0.0);
        let swap = SoftCorrespondence::new(2, 1, vec![vec![(1, 1.0)], vec![(0, 1.0)]]).unwrap();
        assert_eq!(smoothness_loss(&swap, &t).unwrap(), 0.0);
        // {a, b} against {a}: mean 0.5 one way, 0 the other.
        let collapsed = SoftCorrespondence::new(2, 1, vec![vec![(0, 1.0)]; 2]).unwrap();
        assert_eq!(smoothness_loss(&collapsed, &t).unwrap(), 0.5);
    }

    #[test]
    fn hard_match_examples() {
        let f = fm(&[vec![0.0], vec![3.0], vec![7.0]]);
        assert_eq!(hard_match(&f, &f).unwrap(), DenseMap::identity(3));
        let t = fm(&[vec![0.0], vec![1.0]]);
        assert_eq!(hard_match(&fm(&[vec![0.6]]), &t).unwrap().targets(), &[1]);
        assert_eq!(hard_match(&fm(&[vec![0.5]]), &t).unwrap().targets(), &[0]);
    }

    #[test]
    fn correspondence_validation() {
        assert!(SoftCorrespondence::new(2, 2, vec![vec![(0, 0.5), (0, 0.5)]]).is_err());
        assert!(SoftCorrespondence::new(2, 2, vec![vec![(0, 0.7)]]).is_err());
        assert!(SoftCorrespondence::new(2, 1, vec![vec![(0, 0.5), (1, 0.5)]]).is_err());
        assert!(SoftCorrespondence::new(2, 2, vec![vec![(2, 1.0)]]).is_err());
        assert!(DenseMap::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn total_loss_terms_and_linearity() {
        let s = PointCloud::from_slice(&[[0.0; 3], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]]).unwrap();
        let graph = DeformationGraph::build(&s, GraphParams::default()).unwrap();
        let f = FeatureMatrix::from_cloud(&s);
        let pi = soft_correspondence(&f, &f, 10, 0.07).unwrap();
        let p = DirectedProblem {
            graph: &graph,
            source: &s,
            target: &s,
            features: &f,
            geodesics: None,
            mode: MatchMode::Full,
        };
        let x = TransformSet::identity(graph.node_count());
        let zero = total_loss(&p, &x, &pi, &LossWeights::default()).unwrap();
        assert_eq!(zero, LossBreakdown::default());

        let collapsed = SoftCorrespondence::new(4, 1, vec![vec![(0, 1.0)]; 4]).unwrap();
        let w = LossWeights::default();
        let base = total_loss(&p, &x, &collapsed, &w).unwrap();
        let doubled = total_loss(&p, &x, &collapsed, &LossWeights { smooth: 2.0 * w.smooth, ..w }).unwrap();
        assert!(base.smooth > 0.0);
        assert_eq!(doubled.total - base.total, w.smooth * base.smooth);
    }

    #[test]
    fn paper_weights() {
        let w = LossWeights::default();
        assert_eq!((w.deform, w.arap, w.smooth, w.geo), (0.05, 0.005, 0.5, 0.02));
        assert_eq!(DEFAULT_TOP_N, 10);
    }

    fn arb_features() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..5).prop_flat_map(|d| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..30),
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..30),
            )
        })
    }

    proptest! {
        #[test]
        fn soft_rows_are_stochastic((a, b) in arb_features(), n in 1usize..15, t in 0.001f64..10.0) {
            let pi = soft_correspondence(&fm(&a), &fm(&b), n, t).unwrap();
            let checked = SoftCorrespondence::new(pi.cols(), n, pi.entries().to_vec());
            prop_assert!(checked.is_ok());
        }

        #[test]
        fn hard_match_scale_invariant((a, b) in arb_features(), c in 0.01f64..100.0) {
            let (fa, fb) = (fm(&a), fm(&b));
            prop_assert_eq!(
                hard_match(&fa, &fb).unwrap(),
                hard_match(&fa.scaled(c), &fb.scaled(c)).unwrap()
            );
        }

        #[test]
        fn cold_softmax_concentrates(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Well separated: integer lattice targets, sources near targets.
            let t: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
            let s: Vec<Vec<f64>> = (0..10)
                .map(|_| {
                    let j = rng.random_range(0..20);
                    vec![t[j][0] + rng.random_range(-0.2..0.2), t[j][1] + rng.random_range(-0.2..0.2)]
                })
                .collect();
            let (fs, ft) = (fm(&s), fm(&t));
            let pi = soft_correspondence(&fs, &ft, 10, 1e-4).unwrap();
            let hard = hard_match(&fs, &ft).unwrap();
            for i in 0..s.len() {
                let mass: f64 = pi.row(i).iter().filter(|e| e.0 == hard.get(i)).map(|e| e.1).sum();
                prop_assert!(mass > 1.0 - 1e-6);
            }
        }
    }
}
