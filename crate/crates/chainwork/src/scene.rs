//! Scene files: parsing, validation, particle sampling, stable time steps.
//!
//! The JSON scene format is strict (unknown keys are rejected) and fully
//! documented in `docs/scene-format.md`. Defaults are filled during parsing
//! so a parsed [`SceneSpec`] is always complete and validated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControllerSpec, LossSpec};
use crate::forward::ParticleState;
use crate::kernel_math::Material;
use crate::real::{Real, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// CFL-style constant in `stable_dt`; conservative since actuation stresses
/// add stiffness on top of the elastic modulus.
pub const CFL_CONSTANT: f64 = 0.5;

/// Cells of clearance every shape must keep from the domain boundary:
/// one for the quadratic stencil, one for travel headroom.
pub const DOMAIN_MARGIN_CELLS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene syntax error at line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("invalid scene: {0}")]
    Validation(String),
    #[error("shape {index} produced no particles")]
    EmptyShape { index: usize },
}

fn invalid(msg: impl Into<String>) -> SceneError {
    SceneError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_dx")]
    pub dx: f64,
    /// Time step. Defaults to `stable_dt` of the scene when omitted.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_res")]
    pub grid_res: [usize; 2],
    #[serde(default)]
    pub gravity: [f64; 2],
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_ppc")]
    pub particles_per_cell: usize,
    #[serde(default)]
    pub seed: u64,
    /// Amplitude of the in-subcell sampling jitter in [0, 1]. Zero yields a
    /// perfectly regular lattice (used by gradcheck scenes).
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_dx() -> f64 {
    1.0 / 64.0
}
fn default_res() -> [usize; 2] {
    [64, 64]
}
fn default_steps() -> usize {
    100
}
fn default_ppc() -> usize {
    4
}
fn default_jitter() -> f64 {
    1.0
}

impl SimConfig {
    /// Time step after default resolution. Call only on validated scenes.
    pub fn dt(&self) -> f64 {
        self.dt.expect("dt resolved during validation")
    }

    /// Domain extent covered by the node grid.
    pub fn domain(&self) -> [f64; 2] {
        [
            (self.grid_res[0] - 1) as f64 * self.dx,
            (self.grid_res[1] - 1) as f64 * self.dx,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Box,
    Ball,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    /// Full extents of a box shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[f64; 2]>,
    /// Radius of a ball shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_young")]
    pub youngs_modulus: f64,
    #[serde(default = "default_poisson")]
    pub poisson_ratio: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub group: u32,
    #[serde(default)]
    pub actuator: Option<u32>,
}

fn default_density() -> f64 {
    1.0
}
fn default_young() -> f64 {
    10.0
}
fn default_poisson() -> f64 {
    0.3
}

impl ShapeSpec {
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let c = self.center;
        match self.kind {
            ShapeKind::Box => {
                let size = self.size.unwrap_or_default();
                (
                    [c[0] - size[0] / 2.0, c[1] - size[1] / 2.0],
                    [c[0] + size[0] / 2.0, c[1] + size[1] / 2.0],
                )
            }
            ShapeKind::Ball => {
                let r = self.radius.unwrap_or_default();
                ([c[0] - r, c[1] - r], [c[0] + r, c[1] + r])
            }
        }
    }

    /// Membership test. Boxes are half-open (`min <= p < max`) so that boxes
    /// aligned to cell boundaries sample an exact particle count.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self.kind {
            ShapeKind::Box => {
                let (lo, hi) = self.bounds();
                p[0] >= lo[0] && p[0] < hi[0] && p[1] >= lo[1] && p[1] < hi[1]
            }
            ShapeKind::Ball => {
                let r = self.radius.unwrap_or_default();
                let dx = p[0] - self.center[0];
                let dy = p[1] - self.center[1];
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Sticky,
    Slip,
    Friction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WallSide {
    Left,
    Right,
    Bottom,
    Top,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum BoundaryLocation {
    /// Band of nodes along one domain wall.
    Wall(WallSide),
    /// Axis-aligned or oblique half-space obstacle: the condition applies at
    /// nodes with `normal . x <= offset`, with the outward unit normal
    /// pointing into the free domain.
    Halfspace { normal: [f64; 2], offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub kind: BoundaryKind,
    #[serde(default)]
    pub friction: f64,
    pub location: BoundaryLocation,
    /// Width of the node band for wall boundaries, in nodes.
    #[serde(default = "default_wall_width")]
    pub width: usize,
}

fn default_wall_width() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "default_config")]
    pub config: SimConfig,
    pub shapes: Vec<ShapeSpec>,
    #[serde(default)]
    pub boundaries: Vec<BoundarySpec>,
    #[serde(default)]
    pub controller: Option<ControllerSpec>,
    #[serde(default)]
    pub objective: Option<LossSpec>,
    #[serde(default)]
    pub target: Option<[f64; 2]>,
    /// Non-fatal validation findings (e.g. dt above the stability bound).
    /// Regenerated on every parse; not part of the serialized format.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

fn default_config() -> SimConfig {
    serde_json::from_str("{}").expect("all SimConfig fields have defaults")
}

/// Parse and validate a scene document, filling defaults.
pub fn parse_scene(text: &str) -> Result<SceneSpec, SceneError> {
    let mut spec: SceneSpec = serde_json::from_str(text).map_err(|e| SceneError::Syntax {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    validate_scene(&mut spec)?;
    Ok(spec)
}

/// Serialize a scene back to its JSON document form.
pub fn serialize_scene(spec: &SceneSpec) -> String {
    serde_json::to_string_pretty(spec).expect("scene serialization cannot fail")
}

/// Validate a specification in place: fills the default dt, resolves loss
/// targets, and records stability warnings.
pub fn validate_scene(spec: &mut SceneSpec) -> Result<(), SceneError> {
    let cfg = &spec.config;
    if !(cfg.dx > 0.0) {
        return Err(invalid("dx must be > 0"));
    }
    if cfg.grid_res[0] < 3 || cfg.grid_res[1] < 3 {
        return Err(invalid("grid_res must be >= 3 per axis"));
    }
    if cfg.particles_per_cell == 0 {
        return Err(invalid("particles_per_cell must be >= 1"));
    }
    let k = (cfg.particles_per_cell as f64).sqrt().round() as usize;
    if k * k != cfg.particles_per_cell {
        return Err(invalid(
            "particles_per_cell must be a perfect square (lattice subdivision)",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.jitter) {
        return Err(invalid("jitter must be in [0, 1]"));
    }
    if spec.shapes.is_empty() {
        return Err(invalid("scene must declare at least one shape"));
    }

    let domain = cfg.domain();
    let margin = DOMAIN_MARGIN_CELLS * cfg.dx;
    for (i, shape) in spec.shapes.iter().enumerate() {
        if !(shape.density > 0.0) {
            return Err(invalid(format!("shape {i}: density must be > 0")));
        }
        if !(shape.youngs_modulus > 0.0) {
            return Err(invalid(format!("shape {i}: youngs_modulus must be > 0")));
        }
        if !(0.0..0.5).contains(&shape.poisson_ratio) {
            return Err(invalid(format!("shape {i}: poisson_ratio must be < 0.5 and >= 0")));
        }
        match shape.kind {
            ShapeKind::Box => {
                if shape.radius.is_some() {
                    return Err(invalid(format!("shape {i}: box does not take a radius")));
                }
                let size = shape
                    .size
                    .ok_or_else(|| invalid(format!("shape {i}: box requires a size")))?;
                if !(size[0] > 0.0 && size[1] > 0.0) {
                    return Err(invalid(format!("shape {i}: box size must be positive")));
                }
            }
            ShapeKind::Ball => {
                if shape.size.is_some() {
                    return Err(invalid(format!("shape {i}: ball does not take a size")));
                }
                let radius = shape
                    .radius
                    .ok_or_else(|| invalid(format!("shape {i}: ball requires a radius")))?;
                if !(radius > 0.0) {
                    return Err(invalid(format!("shape {i}: ball radius must be positive")));
                }
            }
        }
        let (lo, hi) = shape.bounds();
        for axis in 0..2 {
            if lo[axis] < margin || hi[axis] > domain[axis] - margin {
                return Err(invalid(format!(
                    "shape {i} extends past the {DOMAIN_MARGIN_CELLS}-cell domain margin \
                     (bounds [{:.4}, {:.4}] on axis {axis}, allowed [{:.4}, {:.4}])",
                    lo[axis],
                    hi[axis],
                    margin,
                    domain[axis] - margin
                )));
            }
        }
    }

    for (i, bc) in spec.boundaries.iter().enumerate() {
        if bc.friction < 0.0 {
            return Err(invalid(format!("boundary {i}: friction must be >= 0")));
        }
        if let BoundaryLocation::Halfspace { normal, .. } = bc.location {
            let norm = (normal[0] * normal[0] + normal[1] * normal[1]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(invalid(format!(
                    "boundary {i}: halfspace normal must be a unit vector (norm = {norm})"
                )));
            }
        }
        if bc.width == 0 {
            return Err(invalid(format!("boundary {i}: wall width must be >= 1 node")));
        }
    }

    if let Some(ctrl) = &spec.controller {
        ctrl.validate(&spec.shapes, spec.target).map_err(invalid)?;
    }
    let groups: std::collections::BTreeSet<u32> = spec.shapes.iter().map(|s| s.group).collect();
    if let Some(obj) = &mut spec.objective {
        obj.resolve_and_validate(&groups, spec.target, spec.controller.is_some())
            .map_err(invalid)?;
    }

    // dt default and stability warning.
    let dt_bound = stable_dt(spec);
    let dt = *spec.config.dt.get_or_insert(dt_bound);
    if !(dt > 0.0) {
        return Err(invalid("dt must be > 0"));
    }
    spec.warnings.clear();
    if dt > dt_bound * (1.0 + 1e-12) {
        spec.warnings.push(format!(
            "dt = {dt:.3e} exceeds the explicit-integration bound stable_dt = {dt_bound:.3e}"
        ));
    }
    Ok(())
}

/// Explicit-integration time-step bound `C dx sqrt(rho / E)`, minimized over
/// shapes so the stiffest, lightest material governs.
pub fn stable_dt(spec: &SceneSpec) -> f64 {
    spec.shapes
        .iter()
        .map(|s| CFL_CONSTANT * spec.config.dx * (s.density / s.youngs_modulus).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Sample particles for every shape on a jittered lattice with
/// `particles_per_cell` candidates per cell. Deterministic for a given seed.
pub fn sample_particles<T: Real>(spec: &SceneSpec) -> Result<ParticleState<T>, SceneError> {
    let cfg = &spec.config;
    let dx = cfg.dx;
    let k = (cfg.particles_per_cell as f64).sqrt().round() as usize;
    let sub = dx / k as f64;
    let vol0 = dx * dx / cfg.particles_per_cell as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut state = ParticleState::default();
    for (index, shape) in spec.shapes.iter().enumerate() {
        let (lo, hi) = shape.bounds();
        let cell_lo = [(lo[0] / dx).floor() as usize, (lo[1] / dx).floor() as usize];
        let cell_hi = [
            (hi[0] / dx).ceil() as usize + 1,
            (hi[1] / dx).ceil() as usize + 1,
        ];
        let before = state.len();
        let material =
            Material::from_young_poisson(shape.youngs_modulus, shape.poisson_ratio);
        for cx in cell_lo[0]..cell_hi[0] {
            for cy in cell_lo[1]..cell_hi[1] {
                for sx in 0..k {
                    for sy in 0..k {
                        // Draw jitter unconditionally to keep the stream
                        // aligned with the candidate lattice.
                        let jx: f64 = rng.gen::<f64>() - 0.5;
                        let jy: f64 = rng.gen::<f64>() - 0.5;
                        let px = (cx as f64 + (sx as f64 + 0.5) / k as f64) * dx
                            + jx * sub * cfg.jitter;
                        let py = (cy as f64 + (sy as f64 + 0.5) / k as f64) * dx
                            + jy * sub * cfg.jitter;
                        if !shape.contains([px, py]) {
                            continue;
                        }
                        state.x.push(Vec2::new(T::of_f64(px), T::of_f64(py)));
                        state.v.push(Vec2::new(
                            T::of_f64(shape.velocity[0]),
                            T::of_f64(shape.velocity[1]),
                        ));
                        state.f.push(crate::real::Mat2::identity());
                        state.c.push(crate::real::Mat2::zeros());
                        state.mass.push(T::of_f64(shape.density * vol0));
                        state.vol0.push(T::of_f64(vol0));
                        state.mu.push(T::of_f64(material.mu));
                        state.lambda.push(T::of_f64(material.lambda));
                        state.young.push(T::of_f64(shape.youngs_modulus));
                        state.poisson.push(T::of_f64(shape.poisson_ratio));
                        state.group.push(shape.group);
                        state.actuator.push(shape.actuator.map(|a| a as i32).unwrap_or(-1));
                    }
                }
            }
        }
        if state.len() == before {
            return Err(SceneError::EmptyShape { index });
        }
    }
    Ok(state)
}
