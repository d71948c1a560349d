//! Closed-loop controller, actuation stress assembly, and loss definitions.
//!
//! The controller is a single affine+tanh layer `a = tanh(W z + b)` over an
//! observation vector `z = (target, per-group CoM, per-group mean velocity)`,
//! in that order, with groups listed in the configured observation order.
//! Per-actuator channels become material-space actuation stresses through one
//! of four diagonal layouts (isotropic / vertical / horizontal / per-axis),
//! scaled by a configured stress scale.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::real::{Mat2, Real, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    ClosedLoop,
    /// Per-step actuation vectors supplied externally (trajectory
    /// optimization); no observation or affine layer.
    OpenLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActuationMode {
    /// One channel per actuator, applied as Diag(a, a).
    #[default]
    Isotropic,
    /// One channel per actuator, applied as Diag(0, a).
    Vertical,
    /// One channel per actuator, applied as Diag(a, 0).
    Horizontal,
    /// Two channels per actuator, applied as Diag(ax, ay).
    PerAxis,
}

impl ActuationMode {
    pub fn channels(self) -> usize {
        match self {
            ActuationMode::PerAxis => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    #[serde(default)]
    pub kind: ControllerKind,
    /// Actuator ids in output order.
    pub actuators: Vec<u32>,
    #[serde(default)]
    pub mode: ActuationMode,
    /// Stress magnitude of a fully-on channel (pressure units).
    pub stress_scale: f64,
    /// Groups whose CoM and mean velocity enter the observation, in order.
    /// Defaults to all shape groups sorted ascending.
    #[serde(default)]
    pub observed_groups: Option<Vec<u32>>,
    /// Initial W, row-major (n_outputs x n_obs). Defaults to zeros.
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
    /// Initial b. Defaults to zeros.
    #[serde(default)]
    pub bias: Option<Vec<f64>>,
}

impl ControllerSpec {
    pub fn n_outputs(&self) -> usize {
        self.actuators.len() * self.mode.channels()
    }

    pub fn resolved_observed_groups(&self, shapes: &[crate::scene::ShapeSpec]) -> Vec<u32> {
        match &self.observed_groups {
            Some(g) => g.clone(),
            None => {
                let set: BTreeSet<u32> = shapes.iter().map(|s| s.group).collect();
                set.into_iter().collect()
            }
        }
    }

    pub fn n_obs(&self, shapes: &[crate::scene::ShapeSpec]) -> usize {
        2 + 4 * self.resolved_observed_groups(shapes).len()
    }

    pub fn validate(
        &self,
        shapes: &[crate::scene::ShapeSpec],
        target: Option<[f64; 2]>,
    ) -> Result<(), String> {
        if self.actuators.is_empty() {
            return Err("controller: actuators list is empty".into());
        }
        if !self.stress_scale.is_finite() {
            return Err("controller: stress_scale must be finite".into());
        }
        let shape_actuators: BTreeSet<u32> =
            shapes.iter().filter_map(|s| s.actuator).collect();
        for &a in &self.actuators {
            if !shape_actuators.contains(&a) {
                return Err(format!("controller references actuator {a} with no particles"));
            }
        }
        let shape_groups: BTreeSet<u32> = shapes.iter().map(|s| s.group).collect();
        for g in self.resolved_observed_groups(shapes) {
            if !shape_groups.contains(&g) {
                return Err(format!("controller observes undefined group {g}"));
            }
        }
        match self.kind {
            ControllerKind::ClosedLoop => {
                if target.is_none() {
                    return Err("closed-loop controller requires a scene target".into());
                }
                let (n_out, n_obs) = (self.n_outputs(), self.n_obs(shapes));
                if let Some(w) = &self.weights {
                    if w.len() != n_out || w.iter().any(|row| row.len() != n_obs) {
                        return Err(format!(
                            "controller weights must be {n_out} x {n_obs}"
                        ));
                    }
                }
                if let Some(b) = &self.bias {
                    if b.len() != n_out {
                        return Err(format!("controller bias must have length {n_out}"));
                    }
                }
            }
            ControllerKind::OpenLoop => {
                if self.weights.is_some() || self.bias.is_some() {
                    return Err("open-loop controller takes no weights or bias".into());
                }
            }
        }
        Ok(())
    }
}

/// Actuator-to-stress mapping shared by closed- and open-loop actuation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorMap<T> {
    pub actuators: Vec<u32>,
    pub mode: ActuationMode,
    pub scale: T,
}

impl<T: Real> ActuatorMap<T> {
    pub fn n_outputs(&self) -> usize {
        self.actuators.len() * self.mode.channels()
    }

    /// Output-channel base index of an actuator id, if mapped.
    #[inline]
    pub fn channel_of(&self, actuator_id: i32) -> Option<usize> {
        if actuator_id < 0 {
            return None;
        }
        self.actuators
            .iter()
            .position(|&a| a as i32 == actuator_id)
            .map(|j| j * self.mode.channels())
    }

    /// Material-space actuation stress of one particle given the actuation
    /// vector. Unactuated particles get zero.
    #[inline]
    pub fn stress(&self, a: &[T], actuator_id: i32) -> Mat2<T> {
        match self.channel_of(actuator_id) {
            None => Mat2::zeros(),
            Some(ch) => {
                let s = self.scale;
                match self.mode {
                    ActuationMode::Isotropic => {
                        Mat2::new(s * a[ch], T::zero(), T::zero(), s * a[ch])
                    }
                    ActuationMode::Vertical => {
                        Mat2::new(T::zero(), T::zero(), T::zero(), s * a[ch])
                    }
                    ActuationMode::Horizontal => {
                        Mat2::new(s * a[ch], T::zero(), T::zero(), T::zero())
                    }
                    ActuationMode::PerAxis => {
                        Mat2::new(s * a[ch], T::zero(), T::zero(), s * a[ch + 1])
                    }
                }
            }
        }
    }

    /// Reverse of [`stress`]: fold one particle's stress gradient into the
    /// actuation-channel gradient.
    #[inline]
    pub fn stress_adjoint(&self, g_sigma: &Mat2<T>, actuator_id: i32, g_a: &mut [T]) {
        if let Some(ch) = self.channel_of(actuator_id) {
            let s = self.scale;
            match self.mode {
                ActuationMode::Isotropic => {
                    g_a[ch] += s * (g_sigma[(0, 0)] + g_sigma[(1, 1)])
                }
                ActuationMode::Vertical => g_a[ch] += s * g_sigma[(1, 1)],
                ActuationMode::Horizontal => g_a[ch] += s * g_sigma[(0, 0)],
                ActuationMode::PerAxis => {
                    g_a[ch] += s * g_sigma[(0, 0)];
                    g_a[ch + 1] += s * g_sigma[(1, 1)];
                }
            }
        }
    }
}

/// Fully-resolved closed-loop controller parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller<T> {
    /// Row-major n_outputs x n_obs.
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub n_obs: usize,
    pub observed_groups: Vec<u32>,
    pub map: ActuatorMap<T>,
}

impl<T: Real> Controller<T> {
    pub fn n_outputs(&self) -> usize {
        self.b.len()
    }
}

/// Particle indices of each observed group, in observation order.
#[derive(Debug, Clone, Default)]
pub struct GroupIndex {
    pub ids: Vec<u32>,
    pub members: Vec<Vec<u32>>,
}

impl GroupIndex {
    /// Index all groups present in the particle array, ascending by id.
    pub fn from_particles(groups: &[u32]) -> Self {
        let ids: Vec<u32> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let members = ids
            .iter()
            .map(|&id| {
                groups
                    .iter()
                    .enumerate()
                    .filter(|(_, &g)| g == id)
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        GroupIndex { ids, members }
    }

    pub fn members_of(&self, id: u32) -> Option<&[u32]> {
        self.ids.iter().position(|&g| g == id).map(|i| self.members[i].as_slice())
    }
}

/// Mass-weighted center of mass and mean velocity of a particle subset.
pub fn group_stats<T: Real>(
    x: &[Vec2<T>],
    v: &[Vec2<T>],
    mass: &[T],
    members: &[u32],
) -> (T, Vec2<T>, Vec2<T>) {
    let mut m_total = T::zero();
    let mut com = Vec2::zeros();
    let mut mean_v = Vec2::zeros();
    for &i in members {
        let i = i as usize;
        m_total += mass[i];
        com += x[i] * mass[i];
        mean_v += v[i] * mass[i];
    }
    (m_total, com / m_total, mean_v / m_total)
}

/// Observation vector: target, then each observed group's CoM, then each
/// observed group's mean velocity.
pub fn observe<T: Real>(
    x: &[Vec2<T>],
    v: &[Vec2<T>],
    mass: &[T],
    index: &GroupIndex,
    observed: &[u32],
    target: Vec2<T>,
) -> Vec<T> {
    let mut z = Vec::with_capacity(2 + 4 * observed.len());
    z.push(target.x);
    z.push(target.y);
    let stats: Vec<_> = observed
        .iter()
        .map(|&g| {
            let members = index.members_of(g).expect("observed group validated");
            group_stats(x, v, mass, members)
        })
        .collect();
    for (_, com, _) in &stats {
        z.push(com.x);
        z.push(com.y);
    }
    for (_, _, mean_v) in &stats {
        z.push(mean_v.x);
        z.push(mean_v.y);
    }
    z
}

/// Controller activation: componentwise tanh(W z + b).
pub fn act<T: Real>(w: &[T], b: &[T], n_obs: usize, z: &[T]) -> Vec<T> {
    assert_eq!(z.len(), n_obs, "observation length mismatch");
    assert_eq!(w.len(), b.len() * n_obs, "weight matrix shape mismatch");
    b.iter()
        .enumerate()
        .map(|(i, &bi)| {
            let mut u = bi;
            for (j, &zj) in z.iter().enumerate() {
                u += w[i * n_obs + j] * zj;
            }
            u.tanh()
        })
        .collect()
}

/// Reverse of [`act`]: accumulate dL/dW, dL/db and return dL/dz given the
/// actuation gradient and the recorded (z, a).
pub fn act_adjoint<T: Real>(
    w: &[T],
    n_obs: usize,
    z: &[T],
    a: &[T],
    g_a: &[T],
    g_w: &mut [T],
    g_b: &mut [T],
) -> Vec<T> {
    let mut g_z = vec![T::zero(); n_obs];
    for (i, (&ai, &gai)) in a.iter().zip(g_a).enumerate() {
        let gu = gai * (T::one() - ai * ai);
        g_b[i] += gu;
        for (j, gz) in g_z.iter_mut().enumerate() {
            g_w[i * n_obs + j] += gu * z[j];
            *gz += w[i * n_obs + j] * gu;
        }
    }
    g_z
}

/// Reverse of [`observe`]: scatter an observation gradient into per-particle
/// state and mass gradients. The target slots are constants.
#[allow(clippy::too_many_arguments)]
pub fn observe_adjoint<T: Real>(
    x: &[Vec2<T>],
    v: &[Vec2<T>],
    mass: &[T],
    index: &GroupIndex,
    observed: &[u32],
    g_z: &[T],
    g_x: &mut [Vec2<T>],
    g_v: &mut [Vec2<T>],
    g_mass: &mut [T],
) {
    for (slot, &g) in observed.iter().enumerate() {
        let members = index.members_of(g).expect("observed group validated");
        let (m_total, com, mean_v) = group_stats(x, v, mass, members);
        let g_com = Vec2::new(g_z[2 + 2 * slot], g_z[3 + 2 * slot]);
        let base_v = 2 + 2 * observed.len();
        let g_mv = Vec2::new(g_z[base_v + 2 * slot], g_z[base_v + 2 * slot + 1]);
        for &i in members {
            let i = i as usize;
            let wgt = mass[i] / m_total;
            g_x[i] += g_com * wgt;
            g_v[i] += g_mv * wgt;
            g_mass[i] += (g_com.dot(&(x[i] - com)) + g_mv.dot(&(v[i] - mean_v))) / m_total;
        }
    }
}

// ---------------------------------------------------------------------------
// Loss definitions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum LossSpec {
    /// 0.5 * || com(group, final) - target ||^2
    FinalComDistance { group: u32, target: Option<[f64; 2]> },
    /// direction . com(group, final); a linear probe of the final CoM.
    FinalComProjection { group: u32, direction: [f64; 2] },
    /// (1/n) sum over group of |v_p(final)|^2
    FinalMeanSqVelocity { group: u32 },
    /// Negated group mean velocity projected toward the target, integrated
    /// over the episode. The direction is fixed from the initial CoM.
    RunningGoalVelocity { group: u32, target: Option<[f64; 2]> },
    /// sum_t dt * a_t . a_t
    ActuationCost,
    WeightedSum { terms: Vec<WeightedTerm> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTerm {
    pub weight: f64,
    pub loss: LossSpec,
}

impl LossSpec {
    /// Fill absent targets from the scene target and check group references.
    pub fn resolve_and_validate(
        &mut self,
        groups: &BTreeSet<u32>,
        scene_target: Option<[f64; 2]>,
        has_actuation: bool,
    ) -> Result<(), String> {
        match self {
            LossSpec::FinalComDistance { group, target }
            | LossSpec::RunningGoalVelocity { group, target } => {
                if !groups.contains(group) {
                    return Err(format!("objective references undefined group {group}"));
                }
                if target.is_none() {
                    *target = Some(
                        scene_target.ok_or("objective requires a target (none in scene)")?,
                    );
                }
                Ok(())
            }
            LossSpec::FinalComProjection { group, direction } => {
                if !groups.contains(group) {
                    return Err(format!("objective references undefined group {group}"));
                }
                if !direction.iter().all(|d| d.is_finite()) {
                    return Err("objective direction must be finite".into());
                }
                Ok(())
            }
            LossSpec::FinalMeanSqVelocity { group } => {
                if !groups.contains(group) {
                    return Err(format!("objective references undefined group {group}"));
                }
                Ok(())
            }
            LossSpec::ActuationCost => {
                if !has_actuation {
                    return Err("actuation_cost objective requires a controller".into());
                }
                Ok(())
            }
            LossSpec::WeightedSum { terms } => {
                for term in terms {
                    if !term.weight.is_finite() {
                        return Err("objective weights must be finite".into());
                    }
                    term.loss.resolve_and_validate(groups, scene_target, has_actuation)?;
                }
                Ok(())
            }
        }
    }

    /// Visit the flattened (weight, leaf-loss) terms.
    pub fn for_each_term(&self, weight: f64, f: &mut impl FnMut(f64, &LossSpec)) {
        match self {
            LossSpec::WeightedSum { terms } => {
                for t in terms {
                    t.loss.for_each_term(weight * t.weight, f);
                }
            }
            leaf => f(weight, leaf),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_particle_setup() -> (Vec<Vec2<f64>>, Vec<Vec2<f64>>, Vec<f64>, GroupIndex) {
        let x = vec![Vec2::new(0.0, 0.0), Vec2::new(2.0, 0.0)];
        let v = vec![Vec2::zeros(), Vec2::zeros()];
        let mass = vec![1.0, 1.0];
        let index = GroupIndex::from_particles(&[0, 0]);
        (x, v, mass, index)
    }

    #[test]
    fn observe_layout_and_values() {
        let (x, v, mass, index) = two_particle_setup();
        let z = observe(&x, &v, &mass, &index, &[0], Vec2::new(5.0, 5.0));
        assert_eq!(z, vec![5.0, 5.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn observe_weighted_mean() {
        let x = vec![Vec2::new(0.0, 0.0), Vec2::new(4.0, 0.0)];
        let v = vec![Vec2::zeros(), Vec2::zeros()];
        let mass = vec![1.0, 3.0];
        let index = GroupIndex::from_particles(&[0, 0]);
        let z = observe(&x, &v, &mass, &index, &[0], Vec2::zeros());
        assert_relative_eq!(z[2], 3.0);
        assert_relative_eq!(z[3], 0.0);
    }

    #[test]
    fn observe_translation_shifts_only_positions() {
        let (x, v, mass, index) = two_particle_setup();
        let target = Vec2::new(0.3, 0.4);
        let z0 = observe(&x, &v, &mass, &index, &[0], target);
        let d = Vec2::new(0.7, -0.2);
        let xs: Vec<_> = x.iter().map(|p| p + d).collect();
        let z1 = observe(&xs, &v, &mass, &index, &[0], target);
        assert_relative_eq!(z1[2] - z0[2], d.x, epsilon = 1e-15);
        assert_relative_eq!(z1[3] - z0[3], d.y, epsilon = 1e-15);
        assert_eq!(&z0[..2], &z1[..2]);
        assert_eq!(&z0[4..], &z1[4..]);
    }

    #[test]
    fn act_zero_params_is_zero() {
        let w = vec![0.0; 6];
        let b = vec![0.0; 2];
        let a = act(&w, &b, 3, &[0.4, -0.5, 1.0]);
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn act_saturates() {
        let a = act::<f64>(&[0.0], &[20.0], 1, &[0.0]);
        assert!((a[0] - 1.0).abs() <= 1e-15);
        // Away from full saturation the output stays strictly inside (-1, 1).
        let a = act::<f64>(&[0.0], &[5.0], 1, &[0.0]);
        assert!(a[0] < 1.0 && a[0] > -1.0);
    }

    #[test]
    fn act_taylor_expansion_for_small_inputs() {
        // W = I, b = 0: a_i = tanh(z_i) ~ z - z^3/3 for |z| <= 1e-3.
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![0.0, 0.0];
        let z = [1e-3_f64, -7e-4];
        let a = act(&w, &b, 2, &z);
        for (ai, zi) in a.iter().zip(z) {
            assert!((ai - (zi - zi.powi(3) / 3.0)).abs() <= 1e-9);
        }
    }

    #[test]
    fn act_is_one_lipschitz_componentwise() {
        let w = vec![0.9, -1.4];
        let b = vec![0.2];
        let z1 = [0.4_f64, 0.1];
        let z2 = [0.45_f64, 0.1];
        let u1 = 0.9 * z1[0] - 1.4 * z1[1] + 0.2;
        let u2 = 0.9 * z2[0] - 1.4 * z2[1] + 0.2;
        let a1 = act(&w, &b, 2, &z1)[0];
        let a2 = act(&w, &b, 2, &z2)[0];
        assert!((a1 - a2).abs() <= (u1 - u2).abs() + 1e-15);
    }

    #[test]
    fn actuation_stress_mapping() {
        let map = ActuatorMap { actuators: vec![3, 5], mode: ActuationMode::Isotropic, scale: 10.0 };
        // a = 0 -> zero stress everywhere.
        assert_eq!(map.stress(&[0.0, 0.0], 3), Mat2::zeros());
        // Full-on channel with scale 10 on actuator id 5 (channel 1).
        let s = map.stress(&[0.0, 1.0], 5);
        assert_eq!(s, Mat2::new(10.0, 0.0, 0.0, 10.0));
        // Unmapped and unactuated particles get zero: no cross-group leak.
        assert_eq!(map.stress(&[1.0, 1.0], -1), Mat2::zeros());
        assert_eq!(map.stress(&[1.0, 1.0], 7), Mat2::zeros());
    }

    #[test]
    fn vertical_mode_touches_only_yy() {
        let map = ActuatorMap { actuators: vec![0], mode: ActuationMode::Vertical, scale: 2.0 };
        let s = map.stress(&[0.5], 0);
        assert_eq!(s, Mat2::new(0.0, 0.0, 0.0, 1.0));
        let mut ga = vec![0.0];
        map.stress_adjoint(&Mat2::new(3.0, 0.0, 0.0, 4.0), 0, &mut ga);
        assert_relative_eq!(ga[0], 8.0);
    }

    #[test]
    fn act_adjoint_saturated_gradient_vanishes() {
        let w = vec![0.0_f64, 0.0];
        let z = [1.0, 1.0];
        let a = act(&w, &[25.0], 2, &z);
        let mut gw = vec![0.0; 2];
        let mut gb = vec![0.0; 1];
        let gz = act_adjoint(&w, 2, &z, &a, &[1.0], &mut gw, &mut gb);
        assert!(gb[0].abs() <= 1e-15);
        assert!(gw.iter().all(|g| g.abs() <= 1e-15));
        assert!(gz.iter().all(|g| g.abs() <= 1e-15));
    }

    #[test]
    fn act_adjoint_matches_finite_difference() {
        let n_obs = 3;
        let w = vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4];
        let b = vec![0.05, -0.03];
        let z = vec![0.2, -0.6, 0.4];
        let g_a = [0.7, -1.3];
        let loss = |w: &[f64], b: &[f64], z: &[f64]| -> f64 {
            act(w, b, n_obs, z).iter().zip(g_a).map(|(a, g)| a * g).sum()
        };
        let mut gw = vec![0.0; 6];
        let mut gb = vec![0.0; 2];
        let a = act(&w, &b, n_obs, &z);
        let gz = act_adjoint(&w, n_obs, &z, &a, &g_a, &mut gw, &mut gb);
        let h = 1e-7;
        for i in 0..6 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&wp, &b, &z) - loss(&wm, &b, &z)) / (2.0 * h);
            assert_relative_eq!(gw[i], fd, max_relative = 1e-6, epsilon = 1e-10);
        }
        for j in 0..n_obs {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fd = (loss(&w, &b, &zp) - loss(&w, &b, &zm)) / (2.0 * h);
            assert_relative_eq!(gz[j], fd, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn observe_adjoint_matches_finite_difference() {
        let x = vec![Vec2::new(0.1, 0.2), Vec2::new(0.5, 0.3), Vec2::new(0.4, 0.9)];
        let v = vec![Vec2::new(1.0, -0.5), Vec2::new(0.2, 0.8), Vec2::new(-0.3, 0.1)];
        let mass = vec![1.0, 2.0, 0.5];
        let groups = [0u32, 0, 1];
        let index = GroupIndex::from_particles(&groups);
        let observed = [0u32, 1];
        let target = Vec2::new(0.7, 0.7);
        let g_z: Vec<f64> = (0..10).map(|i| 0.3 + 0.1 * i as f64).collect();

        let loss = |x: &[Vec2<f64>], v: &[Vec2<f64>], m: &[f64]| -> f64 {
            observe(x, v, m, &index, &observed, target)
                .iter()
                .zip(&g_z)
                .map(|(z, g)| z * g)
                .sum()
        };

        let mut gx = vec![Vec2::zeros(); 3];
        let mut gv = vec![Vec2::zeros(); 3];
        let mut gm = vec![0.0; 3];
        observe_adjoint(&x, &v, &mass, &index, &observed, &g_z, &mut gx, &mut gv, &mut gm);

        let h = 1e-7;
        for i in 0..3 {
            for axis in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i][axis] += h;
                xm[i][axis] -= h;
                let fd = (loss(&xp, &v, &mass) - loss(&xm, &v, &mass)) / (2.0 * h);
                assert_relative_eq!(gx[i][axis], fd, max_relative = 1e-6, epsilon = 1e-10);

                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[i][axis] += h;
                vm[i][axis] -= h;
                let fd = (loss(&x, &vp, &mass) - loss(&x, &vm, &mass)) / (2.0 * h);
                assert_relative_eq!(gv[i][axis], fd, max_relative = 1e-6, epsilon = 1e-10);
            }
            let mut mp = mass.clone();
            let mut mm = mass.clone();
            mp[i] += h;
            mm[i] -= h;
            let fd = (loss(&x, &v, &mp) - loss(&x, &v, &mm)) / (2.0 * h);
            assert_relative_eq!(gm[i], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }
}
