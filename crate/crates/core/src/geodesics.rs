//! Heat-method geodesic distances on raw point clouds and the local angular
//! similarity loss between embedding distances and surface distances.
//!
//! The operator is a Gaussian-weighted symmetric kNN graph Laplacian. The
//! heat step solves `(A + t·L) u = δ_s` where `A` is the lumped mass scaled
//! to carry area units (trace `N·h²`) and `t = time_scale·h²`; both scale with
//! the square of the cloud size, so distances are exactly scale-equivariant.
//! Gradients come from weighted least-squares fits in each point's PCA
//! tangent plane, and the final Poisson step integrates the unit field along
//! graph edges using the same weights as `L`.

use nalgebra::{Matrix2, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud, RowSet};
use crate::linalg::{EnvelopeCholesky, SymmetricSparse};

pub const DEFAULT_LAPLACIAN_K: usize = 8;
pub const DEFAULT_SIMILARITY_K: usize = 10;

/// Graph Laplacian `L = D − W` over a symmetrized kNN graph together with a
/// positive lumped mass.
#[derive(Clone, Debug)]
pub struct PointCloudLaplacian {
    pub stiffness: SymmetricSparse,
    /// Diagonal mass, normalized to unit trace.
    pub mass: Vec<f64>,
    /// Mean kNN distance; also the Gaussian bandwidth.
    pub mean_edge: f64,
    pub k: usize,
    /// Symmetric adjacency with edge weights.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    /// Connected component label per point, labels are dense from 0.
    pub component: Vec<usize>,
    pub component_count: usize,
}

impl PointCloudLaplacian {
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn is_connected(&self) -> bool {
        self.component_count == 1
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.component_count];
        for &c in &self.component {
            sizes[c] += 1;
        }
        sizes
    }

    /// Undirected edge list `(i, j, weight)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.stiffness.upper.iter().map(|&(i, j, a)| (i, j, -a))
    }
}

pub fn build_laplacian(cloud: &PointCloud, k: usize) -> Result<PointCloudLaplacian> {
    let n = cloud.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "laplacian needs 1 <= k < N, got k = {k} with N = {n}"
        )));
    }
    let lists = knn(cloud, cloud, k + 1)?;
    let lists: Vec<Vec<(usize, f64)>> = lists
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .filter(|nb| nb.index != i)
                .take(k)
                .map(|nb| (nb.index, nb.distance))
                .collect()
        })
        .collect();
    let h = lists.iter().flatten().map(|&(_, d)| d).sum::<f64>() / (n * k) as f64;
    if h <= 0.0 {
        return Err(Error::InvalidArgument(
            "all neighbourhoods have zero extent".into(),
        ));
    }
    let mut pairs: Vec<(usize, usize, f64)> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&(j, d)| (i.min(j), i.max(j), d)))
        .collect();
    pairs.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    pairs.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);

    let mut diag = vec![0.0; n];
    let mut upper = Vec::with_capacity(pairs.len());
    let mut neighbors = vec![Vec::new(); n];
    for &(i, j, d) in &pairs {
        let w = (-(d * d) / (h * h)).exp();
        diag[i] += w;
        diag[j] += w;
        upper.push((i, j, -w));
        neighbors[i].push((j, w));
        neighbors[j].push((i, w));
    }
    let total: f64 = diag.iter().sum();
    let mass: Vec<f64> = diag.iter().map(|d| d / total).collect();

    let mut component = vec![usize::MAX; n];
    let mut count = 0;
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        component[start] = count;
        while let Some(v) = stack.pop() {
            for &(w, _) in &neighbors[v] {
                if component[w] == usize::MAX {
                    component[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }

    Ok(PointCloudLaplacian {
        stiffness: SymmetricSparse { diag, upper },
        mass,
        mean_edge: h,
        k,
        neighbors,
        component,
        component_count: count,
    })
}

/// Pairwise surface distances, row-major `N × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicMatrix {
    n: usize,
    data: Vec<f64>,
}

impl GeodesicMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                what: "geodesic matrix payload",
                expected: n * n,
                found: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        Self::new(n, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `max |M − Mᵀ| / max M`.
    pub fn relative_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut top: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
                top = top.max(self.get(i, j));
            }
        }
        if top > 0.0 {
            worst / top
        } else {
            0.0
        }
    }

    /// `(M + Mᵀ) / 2`, exactly symmetric.
    pub fn symmetrized(&self) -> GeodesicMatrix {
        let n = self.n;
        let mut data = self.data.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
            data[i * n + i] = 0.0;
        }
        GeodesicMatrix { n, data }
    }
}

/// Prefactored heat-method solver for one cloud.
pub struct HeatGeodesics {
    points: Vec<Vector3<f64>>,
    neighbors: Vec<Vec<(usize, f64)>>,
    /// Per point, `(j, g_j)` with `∇u_i ≈ Σ g_j (u_j − u_i)`.
    gradient_ops: Vec<Vec<(usize, Vector3<f64>)>>,
    heat: EnvelopeCholesky,
    poisson: EnvelopeCholesky,
    heat_mass: Vec<f64>,
}

impl HeatGeodesics {
    /// `time_scale` multiplies the default heat time `t = h²`.
    pub fn new(lap: &PointCloudLaplacian, cloud: &PointCloud, time_scale: f64) -> Result<Self> {
        let n = cloud.len();
        if lap.len() != n {
            return Err(Error::DimensionMismatch {
                what: "laplacian size",
                expected: n,
                found: lap.len(),
            });
        }
        if !lap.is_connected() {
            return Err(Error::Disconnected {
                count: lap.component_count,
                sizes: lap.component_sizes(),
            });
        }
        if !(time_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "heat time scale must be positive, got {time_scale}"
            )));
        }
        let h2 = lap.mean_edge * lap.mean_edge;
        let area = n as f64 * h2;
        let heat_mass: Vec<f64> = lap.mass.iter().map(|m| m * area).collect();
        let t = time_scale * h2;
        let heat = EnvelopeCholesky::factor(&lap.stiffness.scaled(t).with_added_diagonal(&heat_mass))?;
        let mean_diag = lap.stiffness.diag.iter().sum::<f64>() / n as f64;
        let poisson = EnvelopeCholesky::factor(&lap.stiffness.with_added_diagonal(&vec![1e-10 * mean_diag; n]))?;

        let points = cloud.points().to_vec();
        let gradient_ops = (0..n)
            .into_par_iter()
            .map(|i| tangent_gradient_operator(&points, i, &lap.neighbors[i]))
            .collect();
        Ok(Self {
            points,
            neighbors: lap.neighbors.clone(),
            gradient_ops,
            heat,
            poisson,
            heat_mass,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Raw (unsymmetrized) distances from `source` to every point.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let n = self.len();
        let mut rhs = vec![0.0; n];
        rhs[source] = 1.0;
        let u = self.heat.solve(&rhs);

        let field: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let g: Vector3<f64> = self.gradient_ops[i]
                    .iter()
                    .map(|(j, gj)| gj * (u[*j] - u[i]))
                    .sum();
                let norm = g.norm();
                if norm > 0.0 && norm.is_finite() {
                    -g / norm
                } else {
                    Vector3::zeros()
                }
            })
            .collect();

        // The field is undefined at the source itself, so edges touching it
        // use the other endpoint's direction alone.
        let edge_field = |i: usize, j: usize| -> Vector3<f64> {
            if i == source {
                field[j]
            } else if j == source {
                field[i]
            } else {
                0.5 * (field[i] + field[j])
            }
        };
        let mut div: Vec<f64> = (0..n)
            .map(|i| {
                self.neighbors[i]
                    .iter()
                    .map(|&(j, w)| w * edge_field(i, j).dot(&(self.points[i] - self.points[j])))
                    .sum()
            })
            .collect();
        let mean = div.iter().sum::<f64>() / n as f64;
        div.iter_mut().for_each(|d| *d -= mean);

        let phi = self.poisson.solve(&div);
        let base = phi[source];
        phi.into_iter()
            .enumerate()
            .map(|(i, p)| if i == source { 0.0 } else { (p - base).max(0.0) })
            .collect()
    }

    pub fn rows(&self, sources: &[usize]) -> Result<Vec<Vec<f64>>> {
        if let Some(&s) = sources.iter().find(|&&s| s >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "source {s} out of range for {} points",
                self.len()
            )));
        }
        Ok(sources.par_iter().map(|&s| self.distances_from(s)).collect())
    }

    /// Raw all-pairs matrix, row `s` holds distances from source `s`.
    pub fn all_pairs_raw(&self) -> GeodesicMatrix {
        let rows: Vec<Vec<f64>> = (0..self.len()).into_par_iter().map(|s| self.distances_from(s)).collect();
        GeodesicMatrix::from_rows(rows).expect("square by construction")
    }

    pub fn all_pairs(&self) -> GeodesicMatrix {
        self.all_pairs_raw().symmetrized()
    }

    pub fn heat_mass(&self) -> &[f64] {
        &self.heat_mass
    }
}

/// Least-squares gradient stencil in the PCA tangent plane of point `i`.
fn tangent_gradient_operator(
    points: &[Vector3<f64>],
    i: usize,
    neighbors: &[(usize, f64)],
) -> Vec<(usize, Vector3<f64>)> {
    let p = points[i];
    let count = neighbors.len() as f64 + 1.0;
    let centroid = (p + neighbors.iter().map(|&(j, _)| points[j]).sum::<Vector3<f64>>()) / count;
    let mut cov = (p - centroid) * (p - centroid).transpose();
    for &(j, _) in neighbors {
        let d = points[j] - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into();

    let mut normal = Matrix2::zeros();
    let qs: Vec<Vector2<f64>> = neighbors
        .iter()
        .map(|&(j, _)| {
            let d = points[j] - p;
            Vector2::new(d.dot(&e1), d.dot(&e2))
        })
        .collect();
    for (q, &(_, w)) in qs.iter().zip(neighbors) {
        normal += w * q * q.transpose();
    }
    let pinv = pseudo_inverse_2x2(&normal);
    qs.iter()
        .zip(neighbors)
        .map(|(q, &(j, w))| {
            let c = pinv * q * w;
            (j, e1 * c.x + e2 * c.y)
        })
        .collect()
}

fn pseudo_inverse_2x2(a: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(*a);
    let top = eig.eigenvalues.amax();
    let mut out = Matrix2::zeros();
    for k in 0..2 {
        let l = eig.eigenvalues[k];
        if l > 1e-12 * top {
            let v = eig.eigenvectors.column(k);
            out += v * v.transpose() / l;
        }
    }
    out
}

/// Convenience wrapper: distances from each requested source (raw rows).
pub fn heat_geodesics(
    lap: &PointCloudLaplacian,
    cloud: &PointCloud,
    sources: &[usize],
    time_scale: f64,
) -> Result<Vec<Vec<f64>>> {
    HeatGeodesics::new(lap, cloud, time_scale)?.rows(sources)
}

/// All-pairs symmetrized heat geodesics with default parameters.
pub fn geodesic_matrix(cloud: &PointCloud, k: usize, time_scale: f64) -> Result<GeodesicMatrix> {
    let lap = build_laplacian(cloud, k)?;
    Ok(HeatGeodesics::new(&lap, cloud, time_scale)?.all_pairs())
}

/// Mean over points of `1 − cos(d_i, m_i)` where `d_i` are the embedding
/// distances to the `k` nearest other rows of `features` and `m_i` the
/// surface distances to the same rows.
pub fn geodesic_similarity_loss<F: RowSet + ?Sized>(
    features: &F,
    geodesics: &GeodesicMatrix,
    k: usize,
) -> Result<f64> {
    let n = features.n_rows();
    if geodesics.len() != n {
        return Err(Error::DimensionMismatch {
            what: "geodesic matrix vs feature rows",
            expected: n,
            found: geodesics.len(),
        });
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "similarity neighbourhood k = {k} needs 0 < k < N = {n}"
        )));
    }
    let lists = knn(features, features, k + 1)?;
    let terms: Result<Vec<f64>> = lists
        .into_par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut dot = 0.0;
            let mut dd = 0.0;
            let mut mm = 0.0;
            for nb in row.into_iter().filter(|nb| nb.index != i).take(k) {
                let m = geodesics.get(i, nb.index);
                if !m.is_finite() {
                    return Err(Error::InfiniteGeodesic { from: i, to: nb.index });
                }
                dot += nb.distance * m;
                dd += nb.distance * nb.distance;
                mm += m * m;
            }
            if dd == 0.0 || mm == 0.0 {
                Ok(0.0)
            } else {
                Ok((1.0 - dot / (dd.sqrt() * mm.sqrt())).clamp(0.0, 1.0))
            }
        })
        .collect();
    Ok(terms?.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    fn grid(n: usize, spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let c = grid(6, 0.1);
        let lap = build_laplacian(&c, 8).unwrap();
        let ones = vec![1.0; c.len()];
        let r = lap.stiffness.mul_vec(&ones);
        let scale = lap.stiffness.diag.iter().cloned().fold(0.0, f64::max);
        assert!(r.iter().all(|x| x.abs() <= 1e-10 * scale));
        assert!((lap.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(lap.mass.iter().all(|&m| m > 0.0));
        assert!(lap.is_connected());
    }

    #[test]
    fn chain_k1_is_tridiagonal() {
        let c = PointCloud::from_slice(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let lap = build_laplacian(&c, 1).unwrap();
        let mut edges: Vec<(usize, usize)> = lap.edges().map(|(i, j, _)| (i, j)).collect();
        edges.sort_unstable();
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        // k = 2: interior points link to both sides, the end points also
        // reach two steps inward.
        let lap2 = build_laplacian(&c, 2).unwrap();
        let mut e2: Vec<(usize, usize)> = lap2.edges().map(|(i, j, _)| (i, j)).collect();
        e2.sort_unstable();
        assert_eq!(e2, vec![(0, 1), (0, 2), (1, 2), (2, 3), (2, 4), (3, 4)]);
        let h = lap2.mean_edge;
        assert!((h - 1.2).abs() < 1e-12);
        let w1 = (-1.0 / (h * h)).exp();
        assert!((lap2.stiffness.diag[2] - 2.0 * w1 - 2.0 * (-4.0 / (h * h)).exp()).abs() < 1e-15);
    }

    #[test]
    fn two_clusters_are_two_components() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push([i as f64 * 0.1, 0.0, 0.0]);
            pts.push([100.0 + i as f64 * 0.1, 0.0, 0.0]);
        }
        let c = PointCloud::from_slice(&pts).unwrap();
        let lap = build_laplacian(&c, 4).unwrap();
        assert_eq!(lap.component_count, 2);
        assert_eq!(lap.component_sizes(), vec![10, 10]);
        match HeatGeodesics::new(&lap, &c, 1.0) {
            Err(Error::Disconnected { count: 2, .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected disconnected error"),
        }
    }

    #[test]
    fn laplacian_is_psd_on_samples() {
        let c = grid(7, 1.0);
        let lap = build_laplacian(&c, 8).unwrap();
        for s in 0..20u64 {
            let x: Vec<f64> = (0..c.len()).map(|i| (((i as u64 * 2654435761 + s * 97) % 1000) as f64 / 500.0) - 1.0).collect();
            let lx = lap.stiffness.mul_vec(&x);
            let q: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
            let nrm: f64 = x.iter().map(|a| a * a).sum();
            assert!(q / nrm >= -1e-9);
        }
    }

    #[test]
    fn self_distance_zero_and_matrix_symmetric() {
        let c = grid(8, 0.5);
        let lap = build_laplacian(&c, 8).unwrap();
        let solver = HeatGeodesics::new(&lap, &c, 1.0).unwrap();
        let raw = solver.all_pairs_raw();
        for i in 0..c.len() {
            assert_eq!(raw.get(i, i), 0.0);
        }
        let m = raw.symmetrized();
        for i in 0..c.len() {
            for j in 0..c.len() {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert!(m.data().iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn similarity_loss_parallel_vectors() {
        let c = PointCloud::from_slice(&[[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [7.0, 0.0, 0.0]]).unwrap();
        let n = c.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = 2.5 * (c.point(i) - c.point(j)).norm();
            }
        }
        let m = GeodesicMatrix::new(n, data).unwrap();
        let loss = geodesic_similarity_loss(&c, &m, 2).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(geodesic_similarity_loss(&c, &m, 4).is_err());
        assert!(geodesic_similarity_loss(&c, &m, 0).is_err());
    }

    #[test]
    fn similarity_loss_rejects_infinite_neighbour() {
        let c = PointCloud::from_slice(&[[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let mut m = GeodesicMatrix::new(3, vec![0.0, 1.0, 3.0, 1.0, 0.0, 2.0, 3.0, 2.0, 0.0]).unwrap();
        m.data[1] = f64::INFINITY;
        assert!(matches!(
            geodesic_similarity_loss(&c, &m, 1),
            Err(Error::InfiniteGeodesic { from: 0, to: 1 })
        ));
    }

    #[test]
    fn similarity_loss_bounded() {
        let c = grid(5, 1.0);
        let n = c.len();
        let data: Vec<f64> = (0..n * n).map(|x| ((x * 7919) % 101) as f64).collect();
        let m = GeodesicMatrix::new(n, data).unwrap();
        let loss = geodesic_similarity_loss(&c, &m, 6).unwrap();
        assert!((0.0..=1.0).contains(&loss));
    }
}
