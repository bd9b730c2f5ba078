//! Embedded deformation graph: FPS-sampled nodes carrying rigid transforms
//! that are blended onto the cloud, plus the ARAP regularizer and the
//! chamfer-based deformation loss.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    chamfer, farthest_point_sample, knn, one_sided_chamfer, Point3, PointCloud, SelectionMatrix,
};

pub const DEFAULT_K_NODE: usize = 6;
pub const DEFAULT_K_SKIN: usize = 4;

/// 6D parameters of the identity rotation.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Full-to-full or partial-to-full matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatchMode {
    #[default]
    Full,
    /// The source covers only part of the target; only the source-to-target
    /// chamfer direction is used.
    Partial,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Full => "full",
            MatchMode::Partial => "partial",
        }
    }
}

impl std::str::FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MatchMode::Full),
            "partial" => Ok(MatchMode::Partial),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected 'full' or 'partial')"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphParams {
    /// `None` selects `⌊N/2⌋` nodes.
    pub node_count: Option<usize>,
    pub k_node: usize,
    pub k_skin: usize,
    /// FPS start index.
    pub seed: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            node_count: None,
            k_node: DEFAULT_K_NODE,
            k_skin: DEFAULT_K_SKIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGraph {
    nodes: Vec<Point3>,
    selection: SelectionMatrix,
    node_neighbors: Vec<Vec<usize>>,
    skin: Vec<Vec<(usize, f64)>>,
}

impl DeformationGraph {
    pub fn build(cloud: &PointCloud, params: GraphParams) -> Result<Self> {
        let n = cloud.len();
        let m = params.node_count.unwrap_or(n / 2);
        if m == 0 || m > n {
            return Err(Error::InvalidArgument(format!(
                "node count {m} invalid for {n} points"
            )));
        }
        if params.k_skin == 0 {
            return Err(Error::InvalidArgument("k_skin must be at least 1".into()));
        }
        let selection = farthest_point_sample(cloud, m, params.seed)?;
        let node_cloud = selection.apply(cloud)?;
        let nodes = node_cloud.points().to_vec();

        let mut node_neighbors = vec![Vec::new(); m];
        let k_node = params.k_node.min(m - 1);
        if k_node > 0 {
            for (h, row) in knn(&node_cloud, &node_cloud, k_node + 1)?.into_iter().enumerate() {
                for nb in row.into_iter().filter(|nb| nb.index != h).take(k_node) {
                    node_neighbors[h].push(nb.index);
                    node_neighbors[nb.index].push(h);
                }
            }
            for list in &mut node_neighbors {
                list.sort_unstable();
                list.dedup();
            }
        }

        let reach = (params.k_skin + 1).min(m);
        let skin = knn(cloud, &node_cloud, reach)?
            .into_iter()
            .map(|row| {
                let used = params.k_skin.min(row.len());
                let d_max = if row.len() > params.k_skin {
                    row[params.k_skin].distance
                } else {
                    // Fewer nodes than k_skin + 1: reach twice the farthest used node.
                    2.0 * row[used - 1].distance
                };
                let nearest = (row[0].index, 1.0);
                if d_max <= 0.0 {
                    return vec![nearest];
                }
                let raw: Vec<(usize, f64)> = row[..used]
                    .iter()
                    .map(|nb| (nb.index, (1.0 - nb.distance / d_max).max(0.0).powi(2)))
                    .collect();
                let total: f64 = raw.iter().map(|(_, w)| w).sum();
                if total <= 0.0 {
                    return vec![nearest];
                }
                raw.into_iter().map(|(h, w)| (h, w / total)).collect()
            })
            .collect();

        Ok(Self {
            nodes,
            selection,
            node_neighbors,
            skin,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn point_count(&self) -> usize {
        self.skin.len()
    }

    /// Rest positions `g` of the nodes.
    pub fn nodes(&self) -> &[Point3] {
        &self.nodes
    }

    pub fn selection(&self) -> &SelectionMatrix {
        &self.selection
    }

    /// Symmetrized node 1-ring ψ(h).
    pub fn node_neighbors(&self) -> &[Vec<usize>] {
        &self.node_neighbors
    }

    /// Per point, `(node, weight)` pairs with weights summing to 1.
    pub fn skin(&self) -> &[Vec<(usize, f64)>] {
        &self.skin
    }

    pub fn directed_edge_count(&self) -> usize {
        self.node_neighbors.iter().map(Vec::len).sum()
    }
}

/// Per-node rigid transforms: 6D rotation parameters Θ and translations Δ.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSet {
    pub theta: Vec<[f64; 6]>,
    pub delta: Vec<Vector3<f64>>,
}

impl TransformSet {
    pub fn identity(m: usize) -> Self {
        Self {
            theta: vec![IDENTITY_6D; m],
            delta: vec![Vector3::zeros(); m],
        }
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            theta: vec![[0.0; 6]; m],
            delta: vec![Vector3::zeros(); m],
        }
    }

    /// Every node carries the same rigid motion `x ↦ R x + t`.
    pub fn global_rigid(graph: &DeformationGraph, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let c0 = rotation.column(0);
        let c1 = rotation.column(1);
        let theta = [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]];
        Self {
            theta: vec![theta; graph.node_count()],
            delta: graph
                .nodes()
                .iter()
                .map(|g| rotation * g + translation - g)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn param_count(&self) -> usize {
        9 * self.len()
    }

    /// Flat layout `[Θ (m×6), Δ (m×3)]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend(self.theta.iter().flatten());
        v.extend(self.delta.iter().flat_map(|d| [d.x, d.y, d.z]));
        v
    }

    pub fn from_flat(m: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 9 * m {
            return Err(Error::DimensionMismatch {
                what: "flat transform parameters",
                expected: 9 * m,
                found: v.len(),
            });
        }
        let theta = v[..6 * m]
            .chunks_exact(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect();
        let delta = v[6 * m..]
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        Ok(Self { theta, delta })
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().flatten().all(|x| x.is_finite())
            && self.delta.iter().all(|d| d.iter().all(|x| x.is_finite()))
    }

    /// Rotation matrices of every node.
    pub fn rotations(&self) -> Result<Vec<Matrix3<f64>>> {
        self.theta
            .iter()
            .enumerate()
            .map(|(h, t)| {
                rotation_from_6d(t).map_err(|_| Error::DegenerateRotation { node: Some(h) })
            })
            .collect()
    }

    pub(crate) fn check(&self, graph: &DeformationGraph) -> Result<()> {
        if self.len() != graph.node_count() || self.delta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                what: "transform set vs graph nodes",
                expected: graph.node_count(),
                found: self.len(),
            });
        }
        Ok(())
    }
}

/// Gram-Schmidt map from two 3-vectors to a rotation with columns
/// `b1 = a1/|a1|`, `b2 ∝ a2 − (a2·b1) b1`, `b3 = b1 × b2`.
pub fn rotation_from_6d(theta: &[f64; 6]) -> Result<Matrix3<f64>> {
    let f = GramSchmidt::forward(theta)?;
    Ok(Matrix3::from_columns(&[f.b1, f.b2, f.b1.cross(&f.b2)]))
}

struct GramSchmidt {
    a2: Vector3<f64>,
    n1: f64,
    n2: f64,
    b1: Vector3<f64>,
    b2: Vector3<f64>,
}

impl GramSchmidt {
    fn forward(theta: &[f64; 6]) -> Result<Self> {
        let a1 = Vector3::new(theta[0], theta[1], theta[2]);
        let a2 = Vector3::new(theta[3], theta[4], theta[5]);
        let n1 = a1.norm();
        if !(n1 > 0.0) || !n1.is_finite() {
            return Err(Error::DegenerateRotation { node: None });
        }
        let b1 = a1 / n1;
        let u2 = a2 - b1 * a2.dot(&b1);
        let n2 = u2.norm();
        if !(n2 > 1e-12 * a2.norm()) || !n2.is_finite() {
            return Err(Error::DegenerateRotation { node: None });
        }
        Ok(Self {
            a2,
            n1,
            n2,
            b1,
            b2: u2 / n2,
        })
    }
}

/// Pulls a gradient with respect to the rotation matrix back onto the six
/// parameters.
pub fn rotation_6d_backward(theta: &[f64; 6], grad_r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let GramSchmidt { a2, n1, n2, b1, b2 } = GramSchmidt::forward(theta)?;
    let g1: Vector3<f64> = grad_r.column(0).into();
    let g2: Vector3<f64> = grad_r.column(1).into();
    let g3: Vector3<f64> = grad_r.column(2).into();

    // b3 = b1 × b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);
    // b2 = u2 / |u2|
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
    // u2 = a2 − (b1·a2) b1
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * b1.dot(&a2) + a2 * gu2.dot(&b1);
    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

pub(crate) fn deform_with(graph: &DeformationGraph, x: &TransformSet, rot: &[Matrix3<f64>], cloud: &PointCloud) -> Vec<Point3> {
    let g = graph.nodes();
    cloud
        .points()
        .par_iter()
        .zip(graph.skin().par_iter())
        .map(|(p, skin)| {
            skin.iter()
                .map(|&(h, w)| w * (rot[h] * (p - g[h]) + g[h] + x.delta[h]))
                .sum()
        })
        .collect()
}

fn check_cloud(graph: &DeformationGraph, cloud: &PointCloud) -> Result<()> {
    if cloud.len() != graph.point_count() {
        return Err(Error::DimensionMismatch {
            what: "cloud vs deformation graph",
            expected: graph.point_count(),
            found: cloud.len(),
        });
    }
    Ok(())
}

/// Blends node-anchored rigid motions onto every point:
/// `ŝ_i = Σ_h w_ih (R_h (p_i − g_h) + g_h + Δ_h)`.
pub fn deform(graph: &DeformationGraph, x: &TransformSet, cloud: &PointCloud) -> Result<PointCloud> {
    Ok(PointCloud::new(deform_points(graph, x, cloud)?).unwrap_or_else(|_| unreachable!()))
}

pub(crate) fn deform_points(graph: &DeformationGraph, x: &TransformSet, cloud: &PointCloud) -> Result<Vec<Point3>> {
    x.check(graph)?;
    check_cloud(graph, cloud)?;
    let rot = x.rotations()?;
    Ok(deform_with(graph, x, &rot, cloud))
}

/// Accumulates `∂E/∂R_h` and `∂E/∂Δ_h` given `∂E/∂ŝ_i` for every deformed
/// point.
pub(crate) fn deform_backward(
    graph: &DeformationGraph,
    cloud: &PointCloud,
    grad_points: &[Vector3<f64>],
    grad_rot: &mut [Matrix3<f64>],
    grad: &mut TransformSet,
) {
    let g = graph.nodes();
    for ((p, skin), gp) in cloud.points().iter().zip(graph.skin()).zip(grad_points) {
        for &(h, w) in skin {
            grad_rot[h] += w * gp * (p - g[h]).transpose();
            grad.delta[h] += w * gp;
        }
    }
}

/// Mean over directed node edges of
/// `‖R_h (g_l − g_h) + Δ_h + g_h − (g_l + Δ_l)‖²`.
pub fn arap_energy(graph: &DeformationGraph, x: &TransformSet) -> Result<f64> {
    x.check(graph)?;
    let rot = x.rotations()?;
    Ok(arap_with(graph, x, &rot, None))
}

fn arap_residual(graph: &DeformationGraph, x: &TransformSet, rot: &[Matrix3<f64>], h: usize, l: usize) -> Vector3<f64> {
    let g = graph.nodes();
    rot[h] * (g[l] - g[h]) + x.delta[h] + g[h] - (g[l] + x.delta[l])
}

pub(crate) fn arap_with(
    graph: &DeformationGraph,
    x: &TransformSet,
    rot: &[Matrix3<f64>],
    mut grad: Option<(&mut [Matrix3<f64>], &mut TransformSet, f64)>,
) -> f64 {
    let edges = graph.directed_edge_count();
    if edges == 0 {
        return 0.0;
    }
    let scale = 1.0 / edges as f64;
    let g = graph.nodes();
    let mut total = 0.0;
    for (h, ring) in graph.node_neighbors().iter().enumerate() {
        for &l in ring {
            let d = arap_residual(graph, x, rot, h, l);
            total += d.norm_squared();
            if let Some((grad_rot, grad_x, weight)) = grad.as_mut() {
                let gd = d * (2.0 * scale * *weight);
                grad_rot[h] += gd * (g[l] - g[h]).transpose();
                grad_x.delta[h] += gd;
                grad_x.delta[l] -= gd;
            }
        }
    }
    total * scale
}

/// Chamfer between the deformed source and the target; one-sided in
/// partial mode.
pub fn deformation_loss(
    graph: &DeformationGraph,
    x: &TransformSet,
    source: &PointCloud,
    target: &PointCloud,
    mode: MatchMode,
) -> Result<f64> {
    let deformed = deform_points(graph, x, source)?;
    match mode {
        MatchMode::Full => chamfer(&deformed, target.points()),
        MatchMode::Partial => one_sided_chamfer(&deformed, target.points()),
    }
}
