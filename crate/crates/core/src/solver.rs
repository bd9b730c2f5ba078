//! Alternating registration: refresh correspondences, descend on the node
//! transforms with nearest-neighbour assignments frozen, repeat; then read
//! off the dense map.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use log::{debug, info};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deformation::{
    arap_with, deform_backward, deform_with, rotation_6d_backward, DeformationGraph, GraphParams,
    MatchMode, TransformSet,
};
use crate::error::{Error, Result};
use crate::geodesics::{
    geodesic_matrix, geodesic_similarity_loss, GeodesicMatrix, DEFAULT_LAPLACIAN_K, DEFAULT_SIMILARITY_K,
};
use crate::geometry::{nearest, normalize_cloud, NormalizationRecord, Point3, PointCloud};
use crate::linalg::{EnvelopeCholesky, SymmetricSparse};
use crate::matching::{
    nearest_point_map, smoothness_loss, soft_correspondence, DenseMap, LossBreakdown, LossWeights,
    DEFAULT_TEMPERATURE, DEFAULT_TOP_N,
};
use crate::projection::{
    assemble_visual_features, compose_input_features, positional_encoding, project_depth,
    pull_back_features, Axis, BlendWeights, FeatureImage, FeatureMatrix, ProjectionRecord,
    DEFAULT_PE_BANDS,
};

const EARLY_STOP_RELATIVE: f64 = 1e-6;
const WARMUP_RELATIVE: f64 = 1e-3;
const MAX_HALVINGS: usize = 30;
const FD_STEP: f64 = 1e-5;
const FD_COMPONENTS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub step_size: f64,
    pub step_decay: f64,
    pub weights: LossWeights,
    pub top_n: usize,
    pub temperature: f64,
    pub mode: MatchMode,
    /// Check the analytic gradient against central differences on the first
    /// inner step of every outer iteration.
    pub fd_check: bool,
    pub seed: u64,
    pub graph: GraphParams,
    pub blend: BlendWeights,
    pub pe_bands: usize,
    pub similarity_k: usize,
    /// Strength α of the `(I + α L_node)⁻¹` smoothing applied to descent
    /// directions; 0 disables it.
    pub smoothing: f64,
    /// Maximum number of leading outer iterations that only fit a global
    /// similarity; the phase ends early once it stops improving.
    pub rigid_warmup: usize,
    /// ARAP weight multiplier at the first non-rigid outer iteration; it
    /// decays geometrically to 1 over `stiffness_iters` iterations.
    pub stiffness_start: f64,
    pub stiffness_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_iters: 30,
            inner_iters: 25,
            step_size: 0.05,
            step_decay: 0.97,
            weights: LossWeights::default(),
            top_n: DEFAULT_TOP_N,
            temperature: DEFAULT_TEMPERATURE,
            mode: MatchMode::Full,
            fd_check: false,
            seed: 0,
            graph: GraphParams::default(),
            blend: BlendWeights::default(),
            pe_bands: DEFAULT_PE_BANDS,
            similarity_k: DEFAULT_SIMILARITY_K,
            smoothing: 10.0,
            rigid_warmup: 10,
            stiffness_start: 1000.0,
            stiffness_iters: 15,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return bad("iteration counts must be at least 1".into());
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad(format!("step_size {}", self.step_size));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return bad(format!("step_decay {} outside (0, 1]", self.step_decay));
        }
        if self.top_n == 0 || !(self.temperature > 0.0) {
            return bad("top_n and temperature must be positive".into());
        }
        if self.pe_bands == 0 || self.similarity_k == 0 {
            return bad("pe_bands and similarity_k must be positive".into());
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return bad(format!("smoothing {}", self.smoothing));
        }
        if !(self.stiffness_start >= 1.0) || !self.stiffness_start.is_finite() {
            return bad(format!("stiffness_start {} must be at least 1", self.stiffness_start));
        }
        self.weights.validate()
    }

    /// ARAP multiplier for the `k`-th non-rigid outer iteration.
    pub fn stiffness_schedule(&self, k: usize) -> f64 {
        if k >= self.stiffness_iters {
            1.0
        } else {
            self.stiffness_start.powf(1.0 - k as f64 / self.stiffness_iters as f64)
        }
    }
}

/// Nearest-neighbour pairs inside the chamfer, held fixed during an inner
/// loop. `forward[i]` is the target nearest to deformed source point `i`;
/// `backward[j]` the deformed source point nearest to target `j` (absent in
/// partial mode).
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenAssignments {
    pub forward: Vec<usize>,
    pub backward: Option<Vec<usize>>,
}

impl FrozenAssignments {
    pub fn compute(deformed: &[Point3], target: &PointCloud, mode: MatchMode) -> Result<Self> {
        let forward = nearest(deformed, target.points())?.into_iter().map(|(j, _)| j).collect();
        let backward = match mode {
            MatchMode::Full => Some(
                nearest(target.points(), deformed)?
                    .into_iter()
                    .map(|(i, _)| i)
                    .collect(),
            ),
            MatchMode::Partial => None,
        };
        Ok(Self { forward, backward })
    }
}

fn frozen_chamfer(deformed: &[Point3], target: &PointCloud, frozen: &FrozenAssignments) -> f64 {
    let t = target.points();
    let mut total = deformed
        .iter()
        .zip(&frozen.forward)
        .map(|(s, &j)| (s - t[j]).norm_squared())
        .sum::<f64>()
        / deformed.len() as f64;
    if let Some(back) = &frozen.backward {
        total += t
            .iter()
            .zip(back)
            .map(|(tj, &i)| (deformed[i] - tj).norm_squared())
            .sum::<f64>()
            / t.len() as f64;
    }
    total
}

fn check_frozen(graph: &DeformationGraph, target: &PointCloud, frozen: &FrozenAssignments) -> Result<()> {
    let n = graph.point_count();
    let bad_len = frozen.forward.len() != n
        || frozen.backward.as_ref().is_some_and(|b| b.len() != target.len());
    let bad_index = frozen.forward.iter().any(|&j| j >= target.len())
        || frozen.backward.as_ref().is_some_and(|b| b.iter().any(|&i| i >= n));
    if bad_len || bad_index {
        return Err(Error::InvalidArgument("frozen assignments do not fit the clouds".into()));
    }
    Ok(())
}

/// `λ_deform · L_deform + λ_arap · L_arap` with the chamfer pairs frozen.
pub fn frozen_objective(
    graph: &DeformationGraph,
    x: &TransformSet,
    source: &PointCloud,
    target: &PointCloud,
    frozen: &FrozenAssignments,
    weights: &LossWeights,
) -> Result<f64> {
    x.check(graph)?;
    check_frozen(graph, target, frozen)?;
    let rot = x.rotations()?;
    let deformed = deform_with(graph, x, &rot, source);
    Ok(weights.deform * frozen_chamfer(&deformed, target, frozen)
        + weights.arap * arap_with(graph, x, &rot, None))
}

/// Gradient of [`frozen_objective`] with respect to every Θ and Δ entry.
/// The smoothness and geodesic terms do not depend on the transforms and
/// contribute nothing.
pub fn loss_gradient(
    graph: &DeformationGraph,
    x: &TransformSet,
    source: &PointCloud,
    target: &PointCloud,
    frozen: &FrozenAssignments,
    weights: &LossWeights,
) -> Result<TransformSet> {
    x.check(graph)?;
    check_frozen(graph, target, frozen)?;
    let rot = x.rotations()?;
    let deformed = deform_with(graph, x, &rot, source);
    let t = target.points();
    let n = deformed.len() as f64;
    let mut grad_points: Vec<Point3> = deformed
        .iter()
        .zip(&frozen.forward)
        .map(|(s, &j)| (s - t[j]) * (2.0 * weights.deform / n))
        .collect();
    if let Some(back) = &frozen.backward {
        let m = t.len() as f64;
        for (tj, &i) in t.iter().zip(back) {
            grad_points[i] += (deformed[i] - tj) * (2.0 * weights.deform / m);
        }
    }
    let nodes = graph.node_count();
    let mut grad_rot = vec![Matrix3::zeros(); nodes];
    let mut grad = TransformSet::zeros(nodes);
    deform_backward(graph, source, &grad_points, &mut grad_rot, &mut grad);
    arap_with(graph, x, &rot, Some((&mut grad_rot, &mut grad, weights.arap)));
    for h in 0..nodes {
        grad.theta[h] = rotation_6d_backward(&x.theta[h], &grad_rot[h])
            .map_err(|_| Error::DegenerateRotation { node: Some(h) })?;
    }
    Ok(grad)
}

/// Loss terms of one outer iteration; `backward` is the target-to-source
/// direction (full mode only).
#[derive(Clone, Debug, PartialEq)]
pub struct OuterRecord {
    pub forward: LossBreakdown,
    pub backward: Option<LossBreakdown>,
    /// Accepted gradient steps over both directions.
    pub accepted_steps: usize,
    /// ARAP multiplier the inner steps descended with.
    pub stiffness: f64,
    /// Frozen-assignment objective (with the annealed ARAP weight) before
    /// and after the inner steps.
    pub frozen_start: f64,
    pub frozen_end: f64,
}

impl OuterRecord {
    pub fn combined(&self) -> LossBreakdown {
        match self.backward {
            Some(b) => self.forward + b,
            None => self.forward,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub transforms: TransformSet,
    /// Transforms deforming the target toward the source (full mode).
    pub target_transforms: Option<TransformSet>,
    pub map: DenseMap,
    pub history: Vec<OuterRecord>,
    pub mode: MatchMode,
    /// Set when the relative decrease over an outer iteration dropped below
    /// the early-stop threshold.
    pub converged: bool,
    pub wall_time: Duration,
}

/// Equality ignores the wall time.
impl PartialEq for SolveReport {
    fn eq(&self, other: &Self) -> bool {
        self.transforms == other.transforms
            && self.target_transforms == other.target_transforms
            && self.map == other.map
            && self.history == other.history
            && self.mode == other.mode
            && self.converged == other.converged
    }
}

impl SolveReport {
    pub fn final_loss(&self) -> Option<LossBreakdown> {
        self.history.last().map(OuterRecord::combined)
    }

    /// One line per outer iteration. In partial mode the deformation term is
    /// labelled as unilateral.
    pub fn to_log(&self) -> String {
        let deform_name = match self.mode {
            MatchMode::Full => "L_deform",
            MatchMode::Partial => "L_deform_unilateral",
        };
        let mut out = String::new();
        for (k, rec) in self.history.iter().enumerate() {
            let b = rec.combined();
            let _ = writeln!(
                out,
                "iter {k}: {deform_name}={:.9e} L_arap={:.9e} L_smooth={:.9e} L_geo={:.9e} total={:.9e}",
                b.deform, b.arap, b.smooth, b.geo, b.total
            );
        }
        let _ = writeln!(
            out,
            "converged={} outer_iters={} mode={}",
            self.converged,
            self.history.len(),
            self.mode.as_str()
        );
        out
    }
}

/// Optional per-cloud inputs to [`register`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RegisterInputs<'a> {
    pub source_visual: Option<&'a FeatureMatrix>,
    pub target_visual: Option<&'a FeatureMatrix>,
    pub source_geodesics: Option<&'a GeodesicMatrix>,
    pub target_geodesics: Option<&'a GeodesicMatrix>,
}

/// Channel-wise `(I + α L)⁻¹` over the node graph.
struct Smoother(Option<EnvelopeCholesky>);

impl Smoother {
    fn new(graph: &DeformationGraph, alpha: f64) -> Result<Self> {
        if alpha == 0.0 {
            return Ok(Self(None));
        }
        let ring = graph.node_neighbors();
        let diag = ring.iter().map(|r| 1.0 + alpha * r.len() as f64).collect();
        let upper = ring
            .iter()
            .enumerate()
            .flat_map(|(h, r)| r.iter().filter(move |&&l| l > h).map(move |&l| (h, l, -alpha)))
            .collect();
        Ok(Self(Some(EnvelopeCholesky::factor(&SymmetricSparse { diag, upper })?)))
    }

    fn apply(&self, g: &TransformSet) -> TransformSet {
        let Some(chol) = &self.0 else {
            return g.clone();
        };
        let mut out = g.clone();
        for c in 0..6 {
            let col: Vec<f64> = g.theta.iter().map(|t| t[c]).collect();
            for (o, v) in out.theta.iter_mut().zip(chol.solve(&col)) {
                o[c] = v;
            }
        }
        for c in 0..3 {
            let col: Vec<f64> = g.delta.iter().map(|d| d[c]).collect();
            for (o, v) in out.delta.iter_mut().zip(chol.solve(&col)) {
                o[c] = v;
            }
        }
        out
    }
}

struct OuterOutcome {
    loss: LossBreakdown,
    accepted: usize,
    frozen_start: f64,
    frozen_end: f64,
}

struct Direction<'a> {
    label: &'static str,
    source: &'a PointCloud,
    target: &'a PointCloud,
    graph: DeformationGraph,
    smoother: Smoother,
    source_visual: Option<&'a FeatureMatrix>,
    target_features: FeatureMatrix,
    geodesics: Option<&'a GeodesicMatrix>,
    mode: MatchMode,
    x: TransformSet,
    /// Per node, the `(point, skin weight)` pairs it influences.
    node_points: Vec<Vec<(usize, f64)>>,
}

impl<'a> Direction<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        label: &'static str,
        source: &'a PointCloud,
        target: &'a PointCloud,
        source_visual: Option<&'a FeatureMatrix>,
        target_visual: Option<&'a FeatureMatrix>,
        geodesics: Option<&'a GeodesicMatrix>,
        mode: MatchMode,
        config: &SolverConfig,
    ) -> Result<Self> {
        for (visual, cloud) in [(source_visual, source), (target_visual, target)] {
            if let Some(v) = visual {
                if v.rows() != cloud.len() {
                    return Err(Error::DimensionMismatch {
                        what: "visual feature rows vs cloud",
                        expected: cloud.len(),
                        found: v.rows(),
                    });
                }
            }
        }
        if let Some(m) = geodesics {
            if m.len() != source.len() {
                return Err(Error::DimensionMismatch {
                    what: "geodesic matrix vs cloud",
                    expected: source.len(),
                    found: m.len(),
                });
            }
        }
        let graph = DeformationGraph::build(source, config.graph)?;
        let smoother = Smoother::new(&graph, config.smoothing)?;
        let target_features = compose_input_features(
            target_visual,
            &positional_encoding(target, config.pe_bands),
            config.blend,
        )?;
        let x = TransformSet::identity(graph.node_count());
        let mut node_points = vec![Vec::new(); graph.node_count()];
        for (i, skin) in graph.skin().iter().enumerate() {
            for &(h, w) in skin {
                node_points[h].push((i, w));
            }
        }
        Ok(Self {
            label,
            source,
            target,
            graph,
            smoother,
            source_visual,
            target_features,
            geodesics,
            mode,
            x,
            node_points,
        })
    }

    fn deformed(&self) -> Result<Vec<Point3>> {
        let rot = self.x.rotations()?;
        Ok(deform_with(&self.graph, &self.x, &rot, self.source))
    }

    /// Unweighted deformation and ARAP terms at the current transforms, with
    /// fresh nearest neighbours.
    fn optimized_terms(&self) -> Result<(f64, f64)> {
        let deformed = self.deformed()?;
        let frozen = FrozenAssignments::compute(&deformed, self.target, self.mode)?;
        let deform = frozen_chamfer(&deformed, self.target, &frozen);
        let arap = arap_with(&self.graph, &self.x, &self.x.rotations()?, None);
        Ok((deform, arap))
    }

    fn objective(&self, weights: &LossWeights) -> Result<f64> {
        let (d, a) = self.optimized_terms()?;
        Ok(weights.deform * d + weights.arap * a)
    }

    /// One outer iteration. `step = None` is a warm-up iteration: only the
    /// similarity block step is taken. The inner steps descend on the frozen
    /// objective with the ARAP weight multiplied by `stiffness`; the
    /// returned terms are always weighted with the configured weights.
    fn outer(
        &mut self,
        outer: usize,
        step: Option<f64>,
        stiffness: f64,
        config: &SolverConfig,
    ) -> Result<OuterOutcome> {
        let reported = &config.weights;
        let annealed = LossWeights {
            arap: reported.arap * stiffness,
            ..*reported
        };
        let w = &annealed;
        let deformed = self.deformed()?;
        let deformed_cloud = PointCloud::new(deformed.clone())?;
        let features = compose_input_features(
            self.source_visual,
            &positional_encoding(&deformed_cloud, config.pe_bands),
            config.blend,
        )?;
        let pi = soft_correspondence(&features, &self.target_features, config.top_n, config.temperature)?;
        let smooth = smoothness_loss(&pi, self.target)?;
        let geo = match self.geodesics {
            Some(m) if features.rows() > 1 => {
                geodesic_similarity_loss(&features, m, config.similarity_k.min(features.rows() - 1))?
            }
            _ => 0.0,
        };

        let frozen = FrozenAssignments::compute(&deformed, self.target, self.mode)?;
        let eval = |x: &TransformSet| -> Option<f64> {
            frozen_objective(&self.graph, x, self.source, self.target, &frozen, w)
                .ok()
                .filter(|f| f.is_finite())
        };
        let mut current = eval(&self.x).ok_or_else(|| Error::NonFiniteLoss {
            outer,
            inner: 0,
            detail: format!("{} objective at start of outer iteration", self.label),
        })?;
        let start = current;
        let pairs = self.frozen_pairs(&frozen);
        let system = match step {
            Some(_) => Some(self.translation_system(&pairs, w)?),
            None => None,
        };
        let mut accepted = 0;
        for inner in 0..config.inner_iters {
            let mut accept = |x: &mut TransformSet, trial: TransformSet| {
                if let Some(f) = eval(&trial) {
                    if f <= current {
                        *x = trial;
                        current = f;
                    }
                }
            };
            if let Some(trial) = self.similarity_block_step(&pairs)? {
                accept(&mut self.x, trial);
            }
            if let Some(system) = &system {
                let trial = self.local_rotation_step(&pairs, w)?;
                accept(&mut self.x, trial);
                let trial = self.global_translation_step(&pairs, system, w)?;
                accept(&mut self.x, trial);
            }
            let grad = loss_gradient(&self.graph, &self.x, self.source, self.target, &frozen, w)?;
            if config.fd_check && inner == 0 {
                self.check_gradient(&grad, &frozen, w, config.seed, outer)?;
            }
            let Some(step) = step else {
                break;
            };
            let dir = self.smoother.apply(&grad).to_flat();
            let norm = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !(norm > 0.0) {
                break;
            }
            let base = self.x.to_flat();
            let mut eta = step;
            let mut moved = false;
            for _ in 0..MAX_HALVINGS {
                let trial: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p - eta * d / norm).collect();
                let trial = TransformSet::from_flat(self.x.len(), &trial)?;
                if let Some(f) = eval(&trial) {
                    if f <= current {
                        moved = f < current || trial != self.x;
                        self.x = trial;
                        current = f;
                        break;
                    }
                }
                eta *= 0.5;
            }
            if !moved {
                break;
            }
            accepted += 1;
        }
        debug!("{} outer {outer}: {accepted} accepted steps, frozen objective {current:.6e}", self.label);

        let (deform, arap) = self.optimized_terms()?;
        let out = LossBreakdown::weighted(deform, arap, smooth, geo, reported);
        if !out.is_finite() {
            return Err(Error::NonFiniteLoss {
                outer,
                inner: config.inner_iters,
                detail: format!("{} loss terms {out:?}", self.label),
            });
        }
        Ok(OuterOutcome {
            loss: out,
            accepted,
            frozen_start: start,
            frozen_end: current,
        })
    }

    /// Frozen chamfer pairs `(source point, target point, weight)` without
    /// the `λ_deform` factor.
    fn frozen_pairs(&self, frozen: &FrozenAssignments) -> Vec<(usize, usize, f64)> {
        let n = frozen.forward.len() as f64;
        let mut pairs: Vec<(usize, usize, f64)> =
            frozen.forward.iter().enumerate().map(|(i, &j)| (i, j, 1.0 / n)).collect();
        if let Some(back) = &frozen.backward {
            let m = back.len() as f64;
            pairs.extend(back.iter().enumerate().map(|(j, &i)| (i, j, 1.0 / m)));
        }
        pairs
    }

    /// Best global similarity for the frozen pairs, composed onto every node
    /// transform: rotations are left-multiplied and node positions follow
    /// exactly, while scale inside a node's support is left to the
    /// translations. ARAP residuals only rotate under the rigid part.
    fn similarity_block_step(&self, pairs: &[(usize, usize, f64)]) -> Result<Option<TransformSet>> {
        let deformed = self.deformed()?;
        let t = self.target.points();
        let Some((q, scale, tau)) = weighted_similarity(pairs.iter().map(|&(i, j, w)| (deformed[i], t[j], w)))
        else {
            return Ok(None);
        };
        let nodes = self.graph.nodes();
        let rot = self.x.rotations()?;
        let mut out = self.x.clone();
        for h in 0..out.len() {
            let r = q * rot[h];
            out.theta[h] = rotation_to_6d(&r);
            out.delta[h] = scale * q * (nodes[h] + self.x.delta[h]) + tau - nodes[h];
        }
        Ok(Some(out))
    }

    /// Every node rotation replaced by its exact minimizer with all other
    /// parameters held: a Procrustes problem over the node's ARAP edges and
    /// the frozen pairs of the points it skins.
    fn local_rotation_step(&self, pairs: &[(usize, usize, f64)], w: &LossWeights) -> Result<TransformSet> {
        let rot = self.x.rotations()?;
        let deformed = deform_with(&self.graph, &self.x, &rot, self.source);
        let mut per_point: Vec<Vec<(usize, f64)>> = vec![Vec::new(); deformed.len()];
        for &(i, j, c) in pairs {
            per_point[i].push((j, c * w.deform));
        }
        let edges = self.graph.directed_edge_count();
        let ca = if edges > 0 { w.arap / edges as f64 } else { 0.0 };
        let g = self.graph.nodes();
        let t = self.target.points();
        let p = self.source.points();
        let mut out = self.x.clone();
        for h in 0..out.len() {
            let mut cov = Matrix3::zeros();
            for &l in &self.graph.node_neighbors()[h] {
                let y = g[l] + self.x.delta[l] - g[h] - self.x.delta[h];
                cov += ca * y * (g[l] - g[h]).transpose();
            }
            for &(i, wih) in &self.node_points[h] {
                let a = wih * (p[i] - g[h]);
                let rest = deformed[i] - rot[h] * a;
                for &(j, c) in &per_point[i] {
                    cov += c * (t[j] - rest) * a.transpose();
                }
            }
            if let Some(r) = nearest_rotation(&cov) {
                out.theta[h] = rotation_to_6d(&r);
            }
        }
        Ok(out)
    }

    /// Normal-equation matrix of the frozen objective in the node
    /// translations. It does not depend on the transforms, so one factor
    /// serves a whole outer iteration.
    fn translation_system(&self, pairs: &[(usize, usize, f64)], w: &LossWeights) -> Result<EnvelopeCholesky> {
        let m = self.graph.node_count();
        let mut diag = vec![0.0; m];
        let mut off: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
        let mut add = |h: usize, l: usize, v: f64| {
            if h == l {
                diag[h] += v;
            } else {
                *off.entry((h.min(l), h.max(l))).or_insert(0.0) += if h < l { v } else { 0.0 };
            }
        };
        let skin = self.graph.skin();
        for &(i, _, c) in pairs {
            for &(h, wh) in &skin[i] {
                for &(l, wl) in &skin[i] {
                    add(h, l, w.deform * c * wh * wl);
                }
            }
        }
        let edges = self.graph.directed_edge_count();
        if edges > 0 {
            let ca = w.arap / edges as f64;
            for (h, ring) in self.graph.node_neighbors().iter().enumerate() {
                for &l in ring {
                    add(h, h, ca);
                    add(l, l, ca);
                    add(h.min(l), h.max(l), -ca);
                }
            }
        }
        let scale = diag.iter().fold(0.0f64, |a, &b| a.max(b)).max(f64::MIN_POSITIVE);
        diag.iter_mut().for_each(|d| *d += 1e-12 * scale);
        let upper = off.into_iter().map(|((h, l), v)| (h, l, v)).collect();
        EnvelopeCholesky::factor(&SymmetricSparse { diag, upper })
    }

    /// Exact minimizer of the frozen objective over all node translations
    /// with the rotations held.
    fn global_translation_step(
        &self,
        pairs: &[(usize, usize, f64)],
        system: &EnvelopeCholesky,
        w: &LossWeights,
    ) -> Result<TransformSet> {
        let rot = self.x.rotations()?;
        let m = self.graph.node_count();
        let zero = TransformSet {
            theta: self.x.theta.clone(),
            delta: vec![Point3::zeros(); m],
        };
        let base = deform_with(&self.graph, &zero, &rot, self.source);
        let t = self.target.points();
        let g = self.graph.nodes();
        let skin = self.graph.skin();
        let mut rhs = vec![Point3::zeros(); m];
        for &(i, j, c) in pairs {
            let r = base[i] - t[j];
            for &(h, wh) in &skin[i] {
                rhs[h] -= w.deform * c * wh * r;
            }
        }
        let edges = self.graph.directed_edge_count();
        if edges > 0 {
            let ca = w.arap / edges as f64;
            for (h, ring) in self.graph.node_neighbors().iter().enumerate() {
                for &l in ring {
                    let e = rot[h] * (g[l] - g[h]) + g[h] - g[l];
                    rhs[h] -= ca * e;
                    rhs[l] += ca * e;
                }
            }
        }
        let mut out = zero;
        for c in 0..3 {
            let col: Vec<f64> = rhs.iter().map(|v| v[c]).collect();
            for (d, v) in out.delta.iter_mut().zip(system.solve(&col)) {
                d[c] = v;
            }
        }
        Ok(out)
    }

    fn check_gradient(
        &self,
        grad: &TransformSet,
        frozen: &FrozenAssignments,
        weights: &LossWeights,
        seed: u64,
        outer: usize,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((outer as u64) << 32) ^ self.label.len() as u64);
        let base = self.x.to_flat();
        let analytic = grad.to_flat();
        let f = |v: &[f64]| -> Result<f64> {
            let x = TransformSet::from_flat(self.x.len(), v)?;
            frozen_objective(&self.graph, &x, self.source, self.target, frozen, weights)
        };
        for _ in 0..FD_COMPONENTS.min(base.len()) {
            let k = rng.random_range(0..base.len());
            let numeric = central_difference(&f, &base, k)?;
            if !gradient_agrees(analytic[k], numeric) {
                return Err(Error::GradientCheck {
                    outer,
                    component: k,
                    analytic: analytic[k],
                    numeric,
                });
            }
        }
        Ok(())
    }
}

fn rotation_to_6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Rotation maximizing `tr(Rᵀ C)`.
fn nearest_rotation(cov: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    if !(cov.amax() > 0.0) || !cov.iter().all(|v| v.is_finite()) {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Some(u * d * v_t)
}

/// Rotation `Q`, scale `c` and translation `τ` minimizing
/// `Σ w ‖c Q a + τ − b‖²`.
fn weighted_similarity(
    pairs: impl Iterator<Item = (Point3, Point3, f64)> + Clone,
) -> Option<(Matrix3<f64>, f64, Point3)> {
    let total: f64 = pairs.clone().map(|p| p.2).sum();
    if !(total > 0.0) {
        return None;
    }
    let ca = pairs.clone().map(|(a, _, w)| a * w).sum::<Point3>() / total;
    let cb = pairs.clone().map(|(_, b, w)| b * w).sum::<Point3>() / total;
    let cov: Matrix3<f64> = pairs.clone().map(|(a, b, w)| (b - cb) * (a - ca).transpose() * w).sum();
    let pairs_var: f64 = pairs.map(|(a, _, w)| (a - ca).norm_squared() * w).sum();
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let var: f64 = pairs_var;
    let q = u * d * v_t;
    let scale = (svd.singular_values[0] + svd.singular_values[1] + d[(2, 2)] * svd.singular_values[2]) / var;
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    Some((q, scale, cb - scale * q * ca))
}

/// Central difference of `f` along coordinate `k` with step 1e-5.
pub fn central_difference(f: &impl Fn(&[f64]) -> Result<f64>, at: &[f64], k: usize) -> Result<f64> {
    let mut plus = at.to_vec();
    let mut minus = at.to_vec();
    plus[k] += FD_STEP;
    minus[k] -= FD_STEP;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * FD_STEP))
}

/// Relative error at most 1e-4 with an absolute floor of 1e-8.
pub fn gradient_agrees(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= (1e-4 * analytic.abs().max(numeric.abs())).max(1e-8)
}

/// Registers `source` onto `target` starting from identity transforms.
pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    inputs: RegisterInputs<'_>,
    config: &SolverConfig,
) -> Result<SolveReport> {
    config.validate()?;
    let start = Instant::now();
    let mut forward = Direction::new(
        "S->T",
        source,
        target,
        inputs.source_visual,
        inputs.target_visual,
        inputs.source_geodesics,
        config.mode,
        config,
    )?;
    let mut backward = match config.mode {
        MatchMode::Full => Some(Direction::new(
            "T->S",
            target,
            source,
            inputs.target_visual,
            inputs.source_visual,
            inputs.target_geodesics,
            MatchMode::Full,
            config,
        )?),
        MatchMode::Partial => None,
    };
    let w = &config.weights;
    let objective = |f: &Direction, b: &Option<Direction>| -> Result<f64> {
        Ok(f.objective(w)? + b.as_ref().map_or(Ok(0.0), |b| b.objective(w))?)
    };
    let mut previous = objective(&forward, &backward)?;
    let mut history = Vec::with_capacity(config.outer_iters);
    let mut converged = false;
    let mut step = config.step_size;
    let mut warming = config.rigid_warmup > 0;
    let mut annealing_step = 0;
    for outer in 0..config.outer_iters {
        let phase_step = (!warming).then_some(step);
        let stiffness = if warming {
            1.0
        } else {
            config.stiffness_schedule(annealing_step)
        };
        let f = forward.outer(outer, phase_step, stiffness, config)?;
        let b = match backward.as_mut() {
            Some(d) => Some(d.outer(outer, phase_step, stiffness, config)?),
            None => None,
        };
        let rec = OuterRecord {
            forward: f.loss,
            backward: b.as_ref().map(|b| b.loss),
            accepted_steps: f.accepted + b.as_ref().map_or(0, |b| b.accepted),
            stiffness,
            frozen_start: f.frozen_start + b.as_ref().map_or(0.0, |b| b.frozen_start),
            frozen_end: f.frozen_end + b.as_ref().map_or(0.0, |b| b.frozen_end),
        };
        let c = rec.combined();
        info!(
            "outer {outer}: L_deform={:.6e} L_arap={:.6e} L_smooth={:.6e} L_geo={:.6e} total={:.6e}",
            c.deform, c.arap, c.smooth, c.geo, c.total
        );
        history.push(rec);
        let current = objective(&forward, &backward)?;
        let decrease = if previous > 0.0 { (previous - current) / previous } else { 0.0 };
        previous = current;
        if warming {
            if decrease < WARMUP_RELATIVE || outer + 1 >= config.rigid_warmup {
                debug!("warm-up ends after outer iteration {outer}");
                warming = false;
            }
            continue;
        }
        annealing_step += 1;
        if stiffness == 1.0 && decrease < EARLY_STOP_RELATIVE {
            converged = true;
            break;
        }
        step *= config.step_decay;
    }
    let map = nearest_point_map(&forward.deformed()?, target)?;
    Ok(SolveReport {
        transforms: forward.x,
        target_transforms: backward.map(|b| b.x),
        map,
        history,
        mode: config.mode,
        converged,
        wall_time: start.elapsed(),
    })
}

/// Per-pixel features for the three views `[z, x, y]` of one cloud, with
/// the projection records that place each point; records are recomputed
/// from the normalized cloud when absent.
#[derive(Clone, Debug)]
pub struct ViewFeatures {
    pub images: [FeatureImage; 3],
    pub records: Option<[ProjectionRecord; 3]>,
}

impl ViewFeatures {
    /// Gathers per-point features from all three views.
    pub fn lift(&self, normalized: &PointCloud) -> Result<FeatureMatrix> {
        let mut per_view = Vec::with_capacity(3);
        for (v, axis) in Axis::ALL.iter().enumerate() {
            let image = &self.images[v];
            let rec = match &self.records {
                Some(r) => r[v].clone(),
                None => project_depth(normalized, *axis, image.height, image.width)?.1,
            };
            if rec.len() != normalized.len() {
                return Err(Error::DimensionMismatch {
                    what: "projection record vs cloud",
                    expected: normalized.len(),
                    found: rec.len(),
                });
            }
            per_view.push(pull_back_features(image, &rec)?);
        }
        assemble_visual_features(&per_view[0], &per_view[1], &per_view[2])
    }
}

#[derive(Clone, Debug)]
pub struct MatchOptions {
    pub source_features: Option<ViewFeatures>,
    pub target_features: Option<ViewFeatures>,
    /// Precomputed geodesic matrices (on the given clouds; geodesic
    /// distances are scale-equivariant and rescaled internally).
    pub source_geodesics: Option<GeodesicMatrix>,
    pub target_geodesics: Option<GeodesicMatrix>,
    /// Compute missing geodesic matrices when `λ_geo > 0`.
    pub compute_geodesics: bool,
    pub geodesic_k: usize,
    pub geodesic_time_scale: f64,
    /// In partial mode, scale the source by the target's normalization
    /// scale instead of its own, so a crop keeps its size relative to the
    /// full shape. Independent scaling blows a half-crop up to the size of
    /// the whole target, which the one-sided loss cannot undo.
    pub partial_shared_scale: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            source_features: None,
            target_features: None,
            source_geodesics: None,
            target_geodesics: None,
            compute_geodesics: true,
            geodesic_k: DEFAULT_LAPLACIAN_K,
            geodesic_time_scale: 1.0,
            partial_shared_scale: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatchResult {
    /// Indices refer to the raw input order of both clouds.
    pub map: DenseMap,
    pub report: SolveReport,
    pub source_normalization: NormalizationRecord,
    pub target_normalization: NormalizationRecord,
}

fn scaled_geodesics(m: &GeodesicMatrix, scale: f64) -> Result<GeodesicMatrix> {
    GeodesicMatrix::new(m.len(), m.data().iter().map(|d| d / scale).collect())
}

/// End-to-end: normalize both clouds, lift optional visual features,
/// prepare geodesics, register and return the map.
pub fn match_pair(
    source_raw: &PointCloud,
    target_raw: &PointCloud,
    options: &MatchOptions,
    config: &SolverConfig,
) -> Result<MatchResult> {
    let (target, target_norm) = normalize_cloud(target_raw);
    let (source, source_norm) = match normalize_cloud(source_raw) {
        (_, own) if config.mode == MatchMode::Partial && options.partial_shared_scale => {
            let shared = NormalizationRecord {
                scale: target_norm.scale,
                ..own
            };
            (shared.apply(source_raw), shared)
        }
        independent => independent,
    };
    let source_visual = options.source_features.as_ref().map(|f| f.lift(&source)).transpose()?;
    let target_visual = options.target_features.as_ref().map(|f| f.lift(&target)).transpose()?;

    let want_geo = config.weights.geo > 0.0;
    let need_target = config.mode == MatchMode::Full;
    let prepare = |given: &Option<GeodesicMatrix>, cloud: &PointCloud, norm: &NormalizationRecord, which: &str| {
        if !want_geo {
            return Ok(None);
        }
        match given {
            Some(m) => {
                if m.len() != cloud.len() {
                    return Err(Error::DimensionMismatch {
                        what: "geodesic matrix vs cloud",
                        expected: cloud.len(),
                        found: m.len(),
                    });
                }
                scaled_geodesics(m, norm.scale).map(Some)
            }
            None if options.compute_geodesics => {
                info!("computing {which} geodesics ({} points)", cloud.len());
                geodesic_matrix(cloud, options.geodesic_k.min(cloud.len() - 1), options.geodesic_time_scale)
                    .map(Some)
            }
            None => Err(Error::InvalidArgument(format!(
                "λ_geo > 0 but no {which} geodesic matrix was given and computation is disabled"
            ))),
        }
    };
    let source_geo = prepare(&options.source_geodesics, &source, &source_norm, "source")?;
    let target_geo = if need_target {
        prepare(&options.target_geodesics, &target, &target_norm, "target")?
    } else {
        None
    };

    let report = register(
        &source,
        &target,
        RegisterInputs {
            source_visual: source_visual.as_ref(),
            target_visual: target_visual.as_ref(),
            source_geodesics: source_geo.as_ref(),
            target_geodesics: target_geo.as_ref(),
        },
        config,
    )?;
    Ok(MatchResult {
        map: report.map.clone(),
        report,
        source_normalization: source_norm,
        target_normalization: target_norm,
    })
}
