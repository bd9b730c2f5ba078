//! Plain `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Keys are namespaced
//! (`solver.outer_iters`, `loss.arap`, ...). Unknown keys are rejected with the
//! closest valid key as a hint; absent keys keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::deformation::MatchMode;
use crate::error::{Error, Result};
use crate::geodesics::DEFAULT_LAPLACIAN_K;
use crate::solver::{MatchOptions, SolverConfig};

pub const DEFAULT_IMAGE_SIZE: usize = 224;

/// Every recognised key with a one-line description.
pub const SCHEMA: &[(&str, &str)] = &[
    ("solver.outer_iters", "outer iterations (correspondence refreshes)"),
    ("solver.inner_iters", "descent steps per outer iteration"),
    ("solver.step_size", "initial gradient step"),
    ("solver.step_decay", "step multiplier applied after each outer iteration, in (0, 1]"),
    ("solver.mode", "full | partial"),
    ("solver.fd_check", "verify gradients against finite differences (true | false)"),
    ("solver.seed", "seed for randomised checks"),
    ("solver.smoothing", "smoothing strength for descent directions, 0 disables"),
    ("solver.rigid_warmup", "maximum similarity-only outer iterations"),
    ("solver.stiffness_start", "initial ARAP weight multiplier (>= 1)"),
    ("solver.stiffness_iters", "outer iterations over which the multiplier decays to 1"),
    ("loss.deform", "chamfer term weight"),
    ("loss.arap", "ARAP term weight"),
    ("loss.smooth", "smoothness term weight"),
    ("loss.geo", "geodesic-similarity term weight"),
    ("matching.top_n", "entries kept per row of the soft correspondence"),
    ("matching.temperature", "softmax temperature"),
    ("matching.partial_shared_scale", "partial mode: scale the source by the target's normalization (true | false)"),
    ("graph.nodes", "deformation-graph node count, or 'auto' for half the points"),
    ("graph.k_node", "node-to-node neighbours"),
    ("graph.k_skin", "nodes blended per point"),
    ("graph.fps_start", "farthest-point-sampling start index"),
    ("features.pe_bands", "positional-encoding frequency bands"),
    ("features.visual_weight", "blend weight of visual features"),
    ("features.positional_weight", "blend weight of positional encoding"),
    ("projection.height", "projected image height in pixels"),
    ("projection.width", "projected image width in pixels"),
    ("geodesics.k", "neighbours in the Laplacian graph"),
    ("geodesics.time_scale", "heat time multiplier on h^2"),
    ("geodesics.similarity_k", "feature-space neighbours in the geodesic-similarity loss"),
    ("geodesics.compute", "compute missing geodesic matrices (true | false)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub geodesic_k: usize,
    pub geodesic_time_scale: f64,
    pub compute_geodesics: bool,
    pub partial_shared_scale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            image_height: DEFAULT_IMAGE_SIZE,
            image_width: DEFAULT_IMAGE_SIZE,
            geodesic_k: DEFAULT_LAPLACIAN_K,
            geodesic_time_scale: 1.0,
            compute_geodesics: true,
            partial_shared_scale: true,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("bad value '{raw}' for {key}: {e}")))
}

fn suggestion(key: &str) -> Option<&'static str> {
    SCHEMA
        .iter()
        .map(|&(k, _)| (k, strsim::levenshtein(key, k)))
        .filter(|&(k, d)| d <= k.len().max(key.len()) / 2)
        .min_by_key(|&(_, d)| d)
        .map(|(k, _)| k)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", ln + 1)));
            }
            cfg.set(key, raw)
                .map_err(|e| Error::Config(format!("line {}: {}", ln + 1, e.to_string().trim_start_matches("config error: "))))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let s = &mut self.solver;
        match key {
            "solver.outer_iters" => s.outer_iters = value(key, raw)?,
            "solver.inner_iters" => s.inner_iters = value(key, raw)?,
            "solver.step_size" => s.step_size = value(key, raw)?,
            "solver.step_decay" => s.step_decay = value(key, raw)?,
            "solver.mode" => s.mode = value::<MatchMode>(key, raw)?,
            "solver.fd_check" => s.fd_check = value(key, raw)?,
            "solver.seed" => s.seed = value(key, raw)?,
            "solver.smoothing" => s.smoothing = value(key, raw)?,
            "solver.rigid_warmup" => s.rigid_warmup = value(key, raw)?,
            "solver.stiffness_start" => s.stiffness_start = value(key, raw)?,
            "solver.stiffness_iters" => s.stiffness_iters = value(key, raw)?,
            "loss.deform" => s.weights.deform = value(key, raw)?,
            "loss.arap" => s.weights.arap = value(key, raw)?,
            "loss.smooth" => s.weights.smooth = value(key, raw)?,
            "loss.geo" => s.weights.geo = value(key, raw)?,
            "matching.top_n" => s.top_n = value(key, raw)?,
            "matching.temperature" => s.temperature = value(key, raw)?,
            "matching.partial_shared_scale" => self.partial_shared_scale = value(key, raw)?,
            "graph.nodes" => {
                s.graph.node_count = if raw == "auto" { None } else { Some(value(key, raw)?) }
            }
            "graph.k_node" => s.graph.k_node = value(key, raw)?,
            "graph.k_skin" => s.graph.k_skin = value(key, raw)?,
            "graph.fps_start" => s.graph.seed = value(key, raw)?,
            "features.pe_bands" => s.pe_bands = value(key, raw)?,
            "features.visual_weight" => s.blend.visual = value(key, raw)?,
            "features.positional_weight" => s.blend.positional = value(key, raw)?,
            "projection.height" => self.image_height = value(key, raw)?,
            "projection.width" => self.image_width = value(key, raw)?,
            "geodesics.k" => self.geodesic_k = value(key, raw)?,
            "geodesics.time_scale" => self.geodesic_time_scale = value(key, raw)?,
            "geodesics.similarity_k" => s.similarity_k = value(key, raw)?,
            "geodesics.compute" => self.compute_geodesics = value(key, raw)?,
            _ => {
                let hint = suggestion(key).map(|k| format!(" (did you mean {k}?)")).unwrap_or_default();
                return Err(Error::Config(format!("unknown key {key}{hint}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.solver
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("projection size must be positive".into()));
        }
        if self.geodesic_k == 0 {
            return Err(Error::Config("geodesics.k must be at least 1".into()));
        }
        if !(self.geodesic_time_scale > 0.0) || !self.geodesic_time_scale.is_finite() {
            return Err(Error::Config("geodesics.time_scale must be positive".into()));
        }
        Ok(())
    }

    /// Match options carrying this config's geodesic settings and no inputs.
    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            compute_geodesics: self.compute_geodesics,
            geodesic_k: self.geodesic_k,
            geodesic_time_scale: self.geodesic_time_scale,
            partial_shared_scale: self.partial_shared_scale,
            ..Default::default()
        }
    }

    /// Serialises every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let s = &self.solver;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("solver.outer_iters", s.outer_iters.to_string());
        put("solver.inner_iters", s.inner_iters.to_string());
        put("solver.step_size", format!("{:?}", s.step_size));
        put("solver.step_decay", format!("{:?}", s.step_decay));
        put("solver.mode", s.mode.as_str().to_string());
        put("solver.fd_check", s.fd_check.to_string());
        put("solver.seed", s.seed.to_string());
        put("solver.smoothing", format!("{:?}", s.smoothing));
        put("solver.rigid_warmup", s.rigid_warmup.to_string());
        put("solver.stiffness_start", format!("{:?}", s.stiffness_start));
        put("solver.stiffness_iters", s.stiffness_iters.to_string());
        put("loss.deform", format!("{:?}", s.weights.deform));
        put("loss.arap", format!("{:?}", s.weights.arap));
        put("loss.smooth", format!("{:?}", s.weights.smooth));
        put("loss.geo", format!("{:?}", s.weights.geo));
        put("matching.top_n", s.top_n.to_string());
        put("matching.temperature", format!("{:?}", s.temperature));
        put("matching.partial_shared_scale", self.partial_shared_scale.to_string());
        put("graph.nodes", s.graph.node_count.map_or("auto".into(), |n| n.to_string()));
        put("graph.k_node", s.graph.k_node.to_string());
        put("graph.k_skin", s.graph.k_skin.to_string());
        put("graph.fps_start", s.graph.seed.to_string());
        put("features.pe_bands", s.pe_bands.to_string());
        put("features.visual_weight", format!("{:?}", s.blend.visual));
        put("features.positional_weight", format!("{:?}", s.blend.positional));
        put("projection.height", self.image_height.to_string());
        put("projection.width", self.image_width.to_string());
        put("geodesics.k", self.geodesic_k.to_string());
        put("geodesics.time_scale", format!("{:?}", self.geodesic_time_scale));
        put("geodesics.similarity_k", s.similarity_k.to_string());
        put("geodesics.compute", self.compute_geodesics.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().image_height, 224);
    }

    #[test]
    fn values_are_applied() {
        let c = RunConfig::parse("solver.mode = partial\nloss.geo=0 # off\ngraph.nodes = 40\nprojection.width = 64\n").unwrap();
        assert_eq!(c.solver.mode, MatchMode::Partial);
        assert_eq!(c.solver.weights.geo, 0.0);
        assert_eq!(c.solver.graph.node_count, Some(40));
        assert_eq!(c.image_width, 64);
    }

    #[test]
    fn misspelled_key_gets_suggestion() {
        let err = RunConfig::parse("solver.outer_iter = 3").unwrap_err().to_string();
        assert!(err.contains("did you mean solver.outer_iters"), "{err}");
        let err = RunConfig::parse("los.arap = 1").unwrap_err().to_string();
        assert!(err.contains("loss.arap"), "{err}");
        let err = RunConfig::parse("zzz = 1").unwrap_err().to_string();
        assert!(!err.contains("did you mean"), "{err}");
    }

    #[test]
    fn bad_lines_rejected() {
        assert!(RunConfig::parse("solver.outer_iters").is_err());
        assert!(RunConfig::parse("solver.outer_iters = many").is_err());
        assert!(RunConfig::parse("solver.outer_iters = 0").is_err());
        assert!(RunConfig::parse("solver.mode = sideways").is_err());
        assert!(RunConfig::parse("loss.arap = 1\nloss.arap = 2").is_err());
        assert!(RunConfig::parse("geodesics.time_scale = -1").is_err());
    }

    #[test]
    fn text_roundtrip_covers_schema() {
        let mut c = RunConfig::default();
        c.solver.step_size = 0.1 + 0.2;
        c.solver.graph.node_count = Some(7);
        c.compute_geodesics = false;
        c.partial_shared_scale = false;
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let schema: Vec<&str> = SCHEMA.iter().map(|s| s.0).collect();
        assert_eq!(keys, schema);
    }
}
