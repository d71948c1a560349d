//! One MLS-MPM time step (P2G, grid operations, G2P) with actuation,
//! gravity, boundary projection, and full tape recording.
//!
//! Transfers follow the APIC form: particles scatter mass, momentum and the
//! stress-contributed impulse `G_p = -(4/dx^2) dt V_p^0 P_p F_p^T + m_p C_p`
//! to their 3x3 node stencil; grid momentum is normalized, gravity applied,
//! boundaries projected; particles gather velocity and the affine matrix C
//! back and update F and x. Every quantity the adjoint needs is recorded per
//! step, so the backward pass never re-runs the forward model.
//!
//! Parallel scatter uses per-chunk partial grids merged in a fixed order, so
//! results are bit-reproducible for a given thread count and agree across
//! thread counts up to summation roundoff.

use rayon::prelude::*;
use thiserror::Error;

use crate::control::{self, ActuatorMap, Controller, ControllerKind, GroupIndex};
use crate::kernel_math::{bspline_stencil, pk1_stress, KernelError};
use crate::real::{vec2_from_f64, Mat2, Real, Vec2};
use crate::scene::{BoundaryKind, BoundaryLocation, SceneError, SceneSpec, WallSide};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step {step}, particle {particle}: {source}")]
    Particle {
        step: usize,
        particle: usize,
        source: KernelError,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Fraction of the mean particle mass below which a grid node is treated as
/// empty, guarding the momentum normalization against stray kernel tails.
pub const EMPTY_NODE_FRACTION: f64 = 1e-10;

/// Structure-of-arrays particle storage. The first four arrays evolve per
/// step; the rest are constants of the scene (possibly updated between
/// episodes by an optimizer).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleState<T> {
    pub x: Vec<Vec2<T>>,
    pub v: Vec<Vec2<T>>,
    pub f: Vec<Mat2<T>>,
    pub c: Vec<Mat2<T>>,
    pub mass: Vec<T>,
    pub vol0: Vec<T>,
    pub mu: Vec<T>,
    pub lambda: Vec<T>,
    pub young: Vec<T>,
    pub poisson: Vec<T>,
    pub group: Vec<u32>,
    /// Actuator id or -1 for unactuated particles.
    pub actuator: Vec<i32>,
}

/// Per-step dynamic fields of the particle state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleDyn<T> {
    pub x: Vec<Vec2<T>>,
    pub v: Vec<Vec2<T>>,
    pub f: Vec<Mat2<T>>,
    pub c: Vec<Mat2<T>>,
}

/// Step-invariant particle fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleConsts<T> {
    pub mass: Vec<T>,
    pub vol0: Vec<T>,
    pub mu: Vec<T>,
    pub lambda: Vec<T>,
    pub young: Vec<T>,
    pub poisson: Vec<T>,
    pub group: Vec<u32>,
    pub actuator: Vec<i32>,
}

impl<T: Real> ParticleState<T> {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dyn_snapshot(&self) -> ParticleDyn<T> {
        ParticleDyn {
            x: self.x.clone(),
            v: self.v.clone(),
            f: self.f.clone(),
            c: self.c.clone(),
        }
    }

    pub fn consts_snapshot(&self) -> ParticleConsts<T> {
        ParticleConsts {
            mass: self.mass.clone(),
            vol0: self.vol0.clone(),
            mu: self.mu.clone(),
            lambda: self.lambda.clone(),
            young: self.young.clone(),
            poisson: self.poisson.clone(),
            group: self.group.clone(),
            actuator: self.actuator.clone(),
        }
    }

    /// Multiply the mass of every particle in a group; used by density
    /// identification.
    pub fn scale_group_mass(&mut self, group: u32, factor: T) {
        for (m, &g) in self.mass.iter_mut().zip(&self.group) {
            if g == group {
                *m *= factor;
            }
        }
    }

    /// Replace per-particle Young's moduli, recomputing the Lame parameters
    /// with each particle's stored Poisson ratio.
    pub fn set_young(&mut self, young: &[T]) {
        assert_eq!(young.len(), self.len());
        for i in 0..self.len() {
            let mat = crate::kernel_math::Material::from_young_poisson(young[i], self.poisson[i]);
            self.young[i] = young[i];
            self.mu[i] = mat.mu;
            self.lambda[i] = mat.lambda;
        }
    }

    pub fn total_mass(&self) -> T {
        self.mass.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    pub fn total_momentum(&self) -> Vec2<T> {
        self.mass
            .iter()
            .zip(&self.v)
            .fold(Vec2::zeros(), |acc, (&m, v)| acc + v * m)
    }
}

/// Per-node boundary condition, resolved at scene build time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NodeBc<T> {
    #[default]
    None,
    Sticky,
    Slip(Vec2<T>),
    Friction(Vec2<T>, T),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams<T> {
    pub dx: T,
    pub inv_dx: T,
    pub dt: T,
    pub res: [usize; 2],
    pub gravity: Vec2<T>,
    pub mass_cutoff: T,
}

impl<T: Real> SimParams<T> {
    pub fn n_nodes(&self) -> usize {
        self.res[0] * self.res[1]
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        ix * self.res[1] + iy
    }

    #[inline]
    pub fn node_pos(&self, idx: usize) -> Vec2<T> {
        let ix = idx / self.res[1];
        let iy = idx % self.res[1];
        Vec2::new(T::of_usize(ix) * self.dx, T::of_usize(iy) * self.dx)
    }
}

/// Actuation source of a simulation.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Actuation<T> {
    #[default]
    None,
    Controller(Controller<T>),
    OpenLoop {
        map: ActuatorMap<T>,
        /// One actuation vector per step, each already in [-1, 1].
        schedule: Vec<Vec<T>>,
    },
}

impl<T: Real> Actuation<T> {
    pub fn map(&self) -> Option<&ActuatorMap<T>> {
        match self {
            Actuation::None => None,
            Actuation::Controller(c) => Some(&c.map),
            Actuation::OpenLoop { map, .. } => Some(map),
        }
    }
}

/// Background grid state: node masses, momenta and velocities.
#[derive(Debug, Clone, Default)]
pub struct GridState<T> {
    pub m: Vec<T>,
    pub p: Vec<Vec2<T>>,
    pub v: Vec<Vec2<T>>,
}

impl<T: Real> GridState<T> {
    fn zeroed(n: usize) -> Self {
        GridState {
            m: vec![T::zero(); n],
            p: vec![Vec2::zeros(); n],
            v: vec![Vec2::zeros(); n],
        }
    }

    pub fn total_mass(&self) -> T {
        self.m.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    pub fn total_momentum(&self) -> Vec2<T> {
        self.p.iter().fold(Vec2::zeros(), |a, b| a + b)
    }
}

/// Sparse per-step grid snapshot: only nodes above the mass cutoff, indices
/// ascending. `v_in` is the velocity after normalization and gravity but
/// before boundary projection; `v_out` the projected velocity used by G2P.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridRecord<T> {
    pub idx: Vec<u32>,
    pub m: Vec<T>,
    pub p: Vec<Vec2<T>>,
    pub v_in: Vec<Vec2<T>>,
    pub v_out: Vec<Vec2<T>>,
}

/// Observation and actuation of one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepObs<T> {
    /// Observation vector; empty for open-loop schedules.
    pub z: Vec<T>,
    pub a: Vec<T>,
}

/// Everything the adjoint pass needs about one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    /// Particle state at the start of the step.
    pub particles: ParticleDyn<T>,
    /// Material-space actuation stress per particle; `None` means all zero.
    pub sigma: Option<Vec<Mat2<T>>>,
    pub grid: GridRecord<T>,
    pub obs: Option<StepObs<T>>,
}

/// Complete memo of one simulation: the adjoint pass consumes only this.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub params: SimParams<T>,
    pub bc: Vec<NodeBc<T>>,
    pub actuation: Actuation<T>,
    pub target: Vec2<T>,
    pub consts: ParticleConsts<T>,
    pub records: Vec<StepRecord<T>>,
    pub final_state: ParticleDyn<T>,
    pub threads: usize,
}

impl<T: Real> Tape<T> {
    pub fn n_steps(&self) -> usize {
        self.records.len()
    }

    pub fn n_particles(&self) -> usize {
        self.consts.mass.len()
    }

    /// Dynamic particle state at time t, 0 <= t <= n_steps.
    pub fn dyn_at(&self, t: usize) -> &ParticleDyn<T> {
        if t < self.records.len() {
            &self.records[t].particles
        } else {
            debug_assert_eq!(t, self.records.len());
            &self.final_state
        }
    }
}

/// Static execution context of one scene: parameters, per-node boundary
/// conditions, actuation source, and threading.
#[derive(Debug, Clone)]
pub struct World<T> {
    pub params: SimParams<T>,
    pub bc: Vec<NodeBc<T>>,
    pub actuation: Actuation<T>,
    pub target: Vec2<T>,
    pub threads: usize,
}

impl<T: Real> World<T> {
    pub fn from_scene(spec: &SceneSpec, state: &ParticleState<T>) -> Result<Self, SceneError> {
        let cfg = &spec.config;
        let dx = T::of_f64(cfg.dx);
        let n = state.len().max(1);
        let mean_mass = state.total_mass() / T::of_usize(n);
        let params = SimParams {
            dx,
            inv_dx: T::one() / dx,
            dt: T::of_f64(cfg.dt()),
            res: cfg.grid_res,
            gravity: vec2_from_f64(cfg.gravity),
            mass_cutoff: T::of_f64(EMPTY_NODE_FRACTION) * mean_mass,
        };
        let bc = resolve_boundaries(spec, &params);
        let actuation = build_actuation::<T>(spec);
        Ok(World {
            params,
            bc,
            actuation,
            target: spec.target.map(vec2_from_f64).unwrap_or_else(Vec2::zeros),
            threads: 1,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }
}

/// Build the actuation source declared by the scene controller, with zero
/// initial weights / schedule unless the scene provides them.
pub fn build_actuation<T: Real>(spec: &SceneSpec) -> Actuation<T> {
    let Some(ctrl) = &spec.controller else {
        return Actuation::None;
    };
    let map = ActuatorMap {
        actuators: ctrl.actuators.clone(),
        mode: ctrl.mode,
        scale: T::of_f64(ctrl.stress_scale),
    };
    match ctrl.kind {
        ControllerKind::OpenLoop => {
            let n_out = map.n_outputs();
            Actuation::OpenLoop {
                map,
                schedule: vec![vec![T::zero(); n_out]; spec.config.steps],
            }
        }
        ControllerKind::ClosedLoop => {
            let observed_groups = ctrl.resolved_observed_groups(&spec.shapes);
            let n_obs = 2 + 4 * observed_groups.len();
            let n_out = map.n_outputs();
            let w = match &ctrl.weights {
                Some(rows) => rows
                    .iter()
                    .flat_map(|r| r.iter().map(|&v| T::of_f64(v)))
                    .collect(),
                None => vec![T::zero(); n_out * n_obs],
            };
            let b = match &ctrl.bias {
                Some(b) => b.iter().map(|&v| T::of_f64(v)).collect(),
                None => vec![T::zero(); n_out],
            };
            Actuation::Controller(Controller { w, b, n_obs, observed_groups, map })
        }
    }
}

fn resolve_boundaries<T: Real>(spec: &SceneSpec, params: &SimParams<T>) -> Vec<NodeBc<T>> {
    let [nx, ny] = params.res;
    let mut bc = vec![NodeBc::None; nx * ny];
    for b in &spec.boundaries {
        let make = |normal: Vec2<T>| match b.kind {
            BoundaryKind::Sticky => NodeBc::Sticky,
            BoundaryKind::Slip => NodeBc::Slip(normal),
            BoundaryKind::Friction => NodeBc::Friction(normal, T::of_f64(b.friction)),
        };
        match &b.location {
            BoundaryLocation::Wall(side) => {
                let w = b.width;
                let (normal, test): (Vec2<T>, Box<dyn Fn(usize, usize) -> bool>) = match side {
                    WallSide::Left => (Vec2::new(T::one(), T::zero()), Box::new(move |ix, _| ix < w)),
                    WallSide::Right => (
                        Vec2::new(-T::one(), T::zero()),
                        Box::new(move |ix, _| ix + w >= nx),
                    ),
                    WallSide::Bottom => {
                        (Vec2::new(T::zero(), T::one()), Box::new(move |_, iy| iy < w))
                    }
                    WallSide::Top => (
                        Vec2::new(T::zero(), -T::one()),
                        Box::new(move |_, iy| iy + w >= ny),
                    ),
                };
                for ix in 0..nx {
                    for iy in 0..ny {
                        if test(ix, iy) {
                            bc[params.node_index(ix, iy)] = make(normal);
                        }
                    }
                }
            }
            BoundaryLocation::Halfspace { normal, offset } => {
                let n = vec2_from_f64::<T>(*normal);
                let off = T::of_f64(*offset);
                for idx in 0..nx * ny {
                    if params.node_pos(idx).dot(&n) <= off {
                        bc[idx] = make(n);
                    }
                }
            }
        }
    }
    bc
}

/// Boundary projection of one node velocity.
#[inline]
pub fn project_bc<T: Real>(bc: &NodeBc<T>, v: Vec2<T>) -> Vec2<T> {
    match bc {
        NodeBc::None => v,
        NodeBc::Sticky => Vec2::zeros(),
        NodeBc::Slip(n) => {
            let ln = v.dot(n);
            if ln < T::zero() {
                v - n * ln
            } else {
                v
            }
        }
        NodeBc::Friction(n, c) => friction_project(v, n, *c),
    }
}

/// Coulomb-style friction projection: the inward normal component is removed
/// and the tangential speed decays proportionally to it.
#[inline]
pub fn friction_project<T: Real>(v: Vec2<T>, n: &Vec2<T>, c: T) -> Vec2<T> {
    let ln = v.dot(n);
    let vt = v - n * ln;
    let lt = (vt.norm_squared() + T::friction_eps()).sqrt();
    let vhat = vt / lt;
    let lts = (lt + c * ln.min(T::zero())).max(T::zero());
    vhat * lts + n * ln.max(T::zero())
}

pub(crate) fn chunk_len(n: usize, threads: usize) -> usize {
    n.div_ceil(threads.max(1)).max(1)
}

/// Forward stepper holding the grid scratch state of one scene.
pub struct Simulator<T> {
    pub world: World<T>,
    grid: GridState<T>,
    v_pre: Vec<Vec2<T>>,
    partial_m: Vec<Vec<T>>,
    partial_p: Vec<Vec<Vec2<T>>>,
    group_index: GroupIndex,
    pool: Option<rayon::ThreadPool>,
}

impl<T: Real> Simulator<T> {
    pub fn new(world: World<T>, state: &ParticleState<T>) -> Self {
        let n_nodes = world.params.n_nodes();
        let threads = world.threads;
        let pool = (threads > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool construction")
        });
        Simulator {
            grid: GridState::zeroed(n_nodes),
            v_pre: vec![Vec2::zeros(); n_nodes],
            partial_m: if threads > 1 {
                vec![vec![T::zero(); n_nodes]; threads]
            } else {
                Vec::new()
            },
            partial_p: if threads > 1 {
                vec![vec![Vec2::zeros(); n_nodes]; threads]
            } else {
                Vec::new()
            },
            group_index: GroupIndex::from_particles(&state.group),
            pool,
            world,
        }
    }

    /// Convenience constructor: sample particles and build the world.
    pub fn from_scene(spec: &SceneSpec) -> Result<(Self, ParticleState<T>), SimError> {
        let state = crate::scene::sample_particles::<T>(spec)?;
        let world = World::from_scene(spec, &state)?;
        Ok((Simulator::new(world, &state), state))
    }

    pub fn grid(&self) -> &GridState<T> {
        &self.grid
    }

    pub fn pre_projection_v(&self) -> &[Vec2<T>] {
        &self.v_pre
    }

    pub fn group_index(&self) -> &GroupIndex {
        &self.group_index
    }

    pub fn set_open_loop_schedule(&mut self, schedule: Vec<Vec<T>>) {
        if let Actuation::OpenLoop { schedule: s, .. } = &mut self.world.actuation {
            *s = schedule;
        } else {
            panic!("scene has no open-loop actuation");
        }
    }

    pub fn set_controller_params(&mut self, w: Vec<T>, b: Vec<T>) {
        if let Actuation::Controller(c) = &mut self.world.actuation {
            assert_eq!(w.len(), c.w.len());
            assert_eq!(b.len(), c.b.len());
            c.w = w;
            c.b = b;
        } else {
            panic!("scene has no closed-loop controller");
        }
    }

    /// Particle-to-grid transfer. Fills node masses and momenta.
    pub fn p2g(
        &mut self,
        state: &ParticleState<T>,
        sigma: Option<&[Mat2<T>]>,
        step: usize,
    ) -> Result<(), SimError> {
        let n = state.len();
        let params = self.world.params;
        if self.pool.is_none() {
            self.grid.m.fill(T::zero());
            self.grid.p.fill(Vec2::zeros());
            p2g_chunk(&params, state, sigma, 0..n, &mut self.grid.m, &mut self.grid.p)
                .map_err(|(particle, source)| SimError::Particle { step, particle, source })?;
            return Ok(());
        }

        let pool = self.pool.as_ref().unwrap();
        let chunk = chunk_len(n, self.world.threads);
        let partial_m = &mut self.partial_m;
        let partial_p = &mut self.partial_p;
        let results: Vec<Result<(), (usize, KernelError)>> = pool.install(|| {
            partial_m
                .par_iter_mut()
                .zip(partial_p.par_iter_mut())
                .enumerate()
                .map(|(ci, (pm, pp))| {
                    pm.fill(T::zero());
                    pp.fill(Vec2::zeros());
                    let lo = (ci * chunk).min(n);
                    let hi = ((ci + 1) * chunk).min(n);
                    p2g_chunk(&params, state, sigma, lo..hi, pm, pp)
                })
                .collect()
        });
        if let Some((particle, source)) = results
            .into_iter()
            .filter_map(|r| r.err())
            .min_by_key(|(p, _)| *p)
        {
            return Err(SimError::Particle { step, particle, source });
        }
        // Merge partial grids in fixed chunk order.
        let partial_m = &self.partial_m;
        let partial_p = &self.partial_p;
        let gm = &mut self.grid.m;
        let gp = &mut self.grid.p;
        pool.install(|| {
            gm.par_iter_mut().zip(gp.par_iter_mut()).enumerate().for_each(|(i, (m, p))| {
                let mut am = T::zero();
                let mut ap = Vec2::zeros();
                for (pm, pp) in partial_m.iter().zip(partial_p) {
                    am += pm[i];
                    ap += pp[i];
                }
                *m = am;
                *p = ap;
            });
        });
        Ok(())
    }

    /// Grid operations: momentum normalization, gravity, boundary projection.
    /// Pre-projection velocities stay available via [`pre_projection_v`].
    pub fn grid_ops(&mut self) {
        let params = self.world.params;
        let bc = &self.world.bc;
        let gm = &self.grid.m;
        let gp = &self.grid.p;
        let gdt = params.gravity * params.dt;
        let body = |i: usize, v_pre: &mut Vec2<T>, v_out: &mut Vec2<T>| {
            if gm[i] > params.mass_cutoff {
                let vp = gp[i] / gm[i] + gdt;
                *v_pre = vp;
                *v_out = project_bc(&bc[i], vp);
            } else {
                *v_pre = Vec2::zeros();
                *v_out = Vec2::zeros();
            }
        };
        match &self.pool {
            None => {
                for (i, (vp, vo)) in self.v_pre.iter_mut().zip(self.grid.v.iter_mut()).enumerate() {
                    body(i, vp, vo);
                }
            }
            Some(pool) => {
                let v_pre = &mut self.v_pre;
                let v_out = &mut self.grid.v;
                pool.install(|| {
                    v_pre
                        .par_iter_mut()
                        .zip(v_out.par_iter_mut())
                        .enumerate()
                        .for_each(|(i, (vp, vo))| body(i, vp, vo));
                });
            }
        }
    }

    /// Grid-to-particle transfer: gather velocities and affine matrices,
    /// update deformation gradients and positions in place.
    pub fn g2p(&self, state: &mut ParticleState<T>, step: usize) -> Result<(), SimError> {
        let n = state.len();
        let params = self.world.params;
        let grid_v = &self.grid.v;
        match &self.pool {
            None => g2p_chunk(&params, grid_v, 0, &mut state.x, &mut state.v, &mut state.f, &mut state.c)
                .map_or(Ok(()), |(particle, source)| {
                    Err(SimError::Particle { step, particle, source })
                }),
            Some(pool) => {
                let chunk = chunk_len(n, self.world.threads);
                let errs: Vec<Option<(usize, KernelError)>> = pool.install(|| {
                    state
                        .x
                        .par_chunks_mut(chunk)
                        .zip(state.v.par_chunks_mut(chunk))
                        .zip(state.f.par_chunks_mut(chunk))
                        .zip(state.c.par_chunks_mut(chunk))
                        .enumerate()
                        .map(|(ci, (((xs, vs), fs), cs))| {
                            g2p_chunk(&params, grid_v, ci * chunk, xs, vs, fs, cs)
                        })
                        .collect()
                });
                match errs.into_iter().flatten().min_by_key(|(p, _)| *p) {
                    Some((particle, source)) => Err(SimError::Particle { step, particle, source }),
                    None => Ok(()),
                }
            }
        }
    }

    /// Run one full time step, returning the tape record.
    pub fn step(
        &mut self,
        state: &mut ParticleState<T>,
        step_idx: usize,
    ) -> Result<StepRecord<T>, SimError> {
        let particles = state.dyn_snapshot();

        // Controller / schedule -> per-particle actuation stress.
        let obs = match &self.world.actuation {
            Actuation::None => None,
            Actuation::Controller(c) => {
                let z = control::observe(
                    &state.x,
                    &state.v,
                    &state.mass,
                    &self.group_index,
                    &c.observed_groups,
                    self.world.target,
                );
                let a = control::act(&c.w, &c.b, c.n_obs, &z);
                Some(StepObs { z, a })
            }
            Actuation::OpenLoop { map, schedule } => {
                let a = schedule
                    .get(step_idx)
                    .cloned()
                    .unwrap_or_else(|| vec![T::zero(); map.n_outputs()]);
                Some(StepObs { z: Vec::new(), a })
            }
        };
        let sigma: Option<Vec<Mat2<T>>> = match (&self.world.actuation, &obs) {
            (Actuation::None, _) => None,
            (actuation, Some(o)) => {
                let map = actuation.map().expect("actuation has a map");
                Some(state.actuator.iter().map(|&id| map.stress(&o.a, id)).collect())
            }
            _ => unreachable!(),
        };

        self.p2g(state, sigma.as_deref(), step_idx)?;
        self.grid_ops();
        self.g2p(state, step_idx)?;

        // Sparse grid snapshot of the populated nodes, ascending indices.
        let cutoff = self.world.params.mass_cutoff;
        let mut grid = GridRecord::default();
        for (i, &m) in self.grid.m.iter().enumerate() {
            if m > cutoff {
                grid.idx.push(i as u32);
                grid.m.push(m);
                grid.p.push(self.grid.p[i]);
                grid.v_in.push(self.v_pre[i]);
                grid.v_out.push(self.grid.v[i]);
            }
        }

        Ok(StepRecord { particles, sigma, grid, obs })
    }

    /// Run `steps` steps from `state`, producing the complete tape.
    pub fn run(&mut self, mut state: ParticleState<T>, steps: usize) -> Result<Tape<T>, SimError> {
        let mut records = Vec::with_capacity(steps);
        for t in 0..steps {
            records.push(self.step(&mut state, t)?);
        }
        Ok(Tape {
            params: self.world.params,
            bc: self.world.bc.clone(),
            actuation: self.world.actuation.clone(),
            target: self.world.target,
            consts: state.consts_snapshot(),
            records,
            final_state: state.dyn_snapshot(),
            threads: self.world.threads,
        })
    }
}

/// Forward-simulate a validated scene, returning the complete tape.
pub fn simulate<T: Real>(spec: &SceneSpec) -> Result<Tape<T>, SimError> {
    simulate_with_threads(spec, 1)
}

pub fn simulate_with_threads<T: Real>(
    spec: &SceneSpec,
    threads: usize,
) -> Result<Tape<T>, SimError> {
    let state = crate::scene::sample_particles::<T>(spec)?;
    let world = World::from_scene(spec, &state)?.with_threads(threads);
    let mut sim = Simulator::new(world, &state);
    sim.run(state, spec.config.steps)
}

fn p2g_chunk<T: Real>(
    params: &SimParams<T>,
    state: &ParticleState<T>,
    sigma: Option<&[Mat2<T>]>,
    range: std::ops::Range<usize>,
    m: &mut [T],
    p: &mut [Vec2<T>],
) -> Result<(), (usize, KernelError)> {
    let four = T::of_f64(4.0);
    let d_inv = four * params.inv_dx * params.inv_dx;
    for i in range {
        let xp = state.x[i];
        let st = bspline_stencil(xp, params.dx, params.res).map_err(|e| (i, e))?;
        let fp = state.f[i];
        let mut pk1 = pk1_stress(
            &fp,
            &crate::kernel_math::Material { mu: state.mu[i], lambda: state.lambda[i] },
        )
        .map_err(|e| (i, e))?;
        if let Some(s) = sigma {
            debug_assert!((s[i] - s[i].transpose()).norm() <= T::default_epsilon());
            pk1 += fp * s[i];
        }
        let g = pk1 * fp.transpose() * (-d_inv * params.dt * state.vol0[i])
            + state.c[i] * state.mass[i];
        let mv = state.v[i] * state.mass[i];
        let mp = state.mass[i];
        for kx in 0..3 {
            let nx = T::of_usize(st.base[0] + kx) * params.dx;
            for ky in 0..3 {
                let w = st.wx[kx] * st.wy[ky];
                let node = params.node_index(st.base[0] + kx, st.base[1] + ky);
                let dpos = Vec2::new(nx - xp.x, T::of_usize(st.base[1] + ky) * params.dx - xp.y);
                m[node] += w * mp;
                p[node] += (mv + g * dpos) * w;
            }
        }
    }
    Ok(())
}

fn g2p_chunk<T: Real>(
    params: &SimParams<T>,
    grid_v: &[Vec2<T>],
    base_index: usize,
    xs: &mut [Vec2<T>],
    vs: &mut [Vec2<T>],
    fs: &mut [Mat2<T>],
    cs: &mut [Mat2<T>],
) -> Option<(usize, KernelError)> {
    let four = T::of_f64(4.0);
    let d_inv = four * params.inv_dx * params.inv_dx;
    for i in 0..xs.len() {
        let xp = xs[i];
        let st = match bspline_stencil(xp, params.dx, params.res) {
            Ok(st) => st,
            Err(e) => return Some((base_index + i, e)),
        };
        let mut v_new = Vec2::zeros();
        let mut b = Mat2::zeros();
        for kx in 0..3 {
            let nx = T::of_usize(st.base[0] + kx) * params.dx;
            for ky in 0..3 {
                let w = st.wx[kx] * st.wy[ky];
                let node = params.node_index(st.base[0] + kx, st.base[1] + ky);
                let vi = grid_v[node];
                let dpos = Vec2::new(nx - xp.x, T::of_usize(st.base[1] + ky) * params.dx - xp.y);
                v_new += vi * w;
                b += vi * dpos.transpose() * w;
            }
        }
        let c_new = b * d_inv;
        let f_new = (Mat2::identity() + c_new * params.dt) * fs[i];
        let det = f_new.determinant();
        if !(det > T::zero()) {
            return Some((base_index + i, KernelError::InvertedElement { det: det.as_f64() }));
        }
        vs[i] = v_new;
        cs[i] = c_new;
        fs[i] = f_new;
        xs[i] = xp + v_new * params.dt;
    }
    None
}
