//! Reverse-mode pass walking the tape backward.
//!
//! For each recorded step, gradients flow in the reverse of the forward
//! cycle: particle-state outputs fold into velocity/affine adjoints, scatter
//! to grid velocity adjoints, pass backward through boundary projection and
//! momentum normalization, and gather back to the step-start particle state.
//! Per-particle mass and stiffness gradients and controller parameter
//! gradients accumulate along the way. The pass consumes only tape contents;
//! the forward model is never re-run.
//!
//! Notation below: `g_q` is dL/dq; `_out` buffers refer to the step's output
//! state (time t+1), `_in` to its input state (time t).

use thiserror::Error;

use crate::control::{self, GroupIndex, LossSpec};
use crate::forward::{Actuation, GridRecord, NodeBc, ParticleDyn, StepRecord, Tape};
use crate::kernel_math::{
    bspline_stencil, cofactor, contract_jacobian, pk1_stress, pk1_stress_jacobian, polar_2d,
    KernelError, Material,
};
use crate::real::{Mat2, Real, Vec2};

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("backward step {step}, particle {particle}: {source}")]
    Kernel {
        step: usize,
        particle: usize,
        source: KernelError,
    },
    #[error("loss/scene mismatch: {0}")]
    Loss(String),
}

/// Gradients of the loss with respect to the initial dynamic state plus all
/// parameter accumulators gathered across the episode.
#[derive(Debug, Clone)]
pub struct AdjointState<T> {
    pub x: Vec<Vec2<T>>,
    pub v: Vec<Vec2<T>>,
    pub f: Vec<Mat2<T>>,
    pub c: Vec<Mat2<T>>,
    /// dL/dm_p, including the loss's own dependence on the mass weights.
    pub mass: Vec<T>,
    /// dL/dE_p through the Lame parameters.
    pub young: Vec<T>,
    /// dL/dW (row-major) and dL/db of the closed-loop controller; empty
    /// without one.
    pub controller_w: Vec<T>,
    pub controller_b: Vec<T>,
    /// dL/da_t per step for open-loop schedules; empty otherwise.
    pub schedule: Vec<Vec<T>>,
    /// Loss value of the episode.
    pub loss: T,
}

impl<T: Real> AdjointState<T> {
    fn zeros(tape: &Tape<T>) -> Self {
        let n = tape.n_particles();
        let (nw, nb) = match &tape.actuation {
            Actuation::Controller(c) => (c.w.len(), c.b.len()),
            _ => (0, 0),
        };
        let schedule = match &tape.actuation {
            Actuation::OpenLoop { map, .. } => {
                vec![vec![T::zero(); map.n_outputs()]; tape.n_steps()]
            }
            _ => Vec::new(),
        };
        AdjointState {
            x: vec![Vec2::zeros(); n],
            v: vec![Vec2::zeros(); n],
            f: vec![Mat2::zeros(); n],
            c: vec![Mat2::zeros(); n],
            mass: vec![T::zero(); n],
            young: vec![T::zero(); n],
            controller_w: vec![T::zero(); nw],
            controller_b: vec![T::zero(); nb],
            schedule,
            loss: T::zero(),
        }
    }
}

/// Evaluate the scalar loss of a completed tape.
pub fn eval_loss<T: Real>(tape: &Tape<T>, loss: &LossSpec) -> Result<T, AdjointError> {
    let index = GroupIndex::from_particles(&tape.consts.group);
    let mut total = T::zero();
    let mut err = None;
    loss.for_each_term(1.0, &mut |w, leaf| {
        if err.is_some() {
            return;
        }
        match eval_leaf(tape, &index, leaf) {
            Ok(v) => total += T::of_f64(w) * v,
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

fn members_of<'a>(index: &'a GroupIndex, group: u32) -> Result<&'a [u32], AdjointError> {
    index
        .members_of(group)
        .ok_or_else(|| AdjointError::Loss(format!("loss references undefined group {group}")))
}

fn eval_leaf<T: Real>(
    tape: &Tape<T>,
    index: &GroupIndex,
    leaf: &LossSpec,
) -> Result<T, AdjointError> {
    let consts = &tape.consts;
    let fin = &tape.final_state;
    match leaf {
        LossSpec::FinalComDistance { group, target } => {
            let members = members_of(index, *group)?;
            let (_, com, _) = control::group_stats(&fin.x, &fin.v, &consts.mass, members);
            let t = target.ok_or_else(|| AdjointError::Loss("unresolved target".into()))?;
            let d = com - crate::real::vec2_from_f64(t);
            Ok(d.norm_squared() * T::of_f64(0.5))
        }
        LossSpec::FinalComProjection { group, direction } => {
            let members = members_of(index, *group)?;
            let (_, com, _) = control::group_stats(&fin.x, &fin.v, &consts.mass, members);
            Ok(com.dot(&crate::real::vec2_from_f64(*direction)))
        }
        LossSpec::FinalMeanSqVelocity { group } => {
            let members = members_of(index, *group)?;
            let n = T::of_usize(members.len());
            let sum = members
                .iter()
                .map(|&i| fin.v[i as usize].norm_squared())
                .fold(T::zero(), |a, b| a + b);
            Ok(sum / n)
        }
        LossSpec::RunningGoalVelocity { group, target } => {
            let members = members_of(index, *group)?;
            let t = target.ok_or_else(|| AdjointError::Loss("unresolved target".into()))?;
            let dir = goal_direction(tape, index, *group, t)?;
            let dt = tape.params.dt;
            let mut total = T::zero();
            for s in 1..=tape.n_steps() {
                let dyn_s = tape.dyn_at(s);
                let (_, _, mean_v) =
                    control::group_stats(&dyn_s.x, &dyn_s.v, &consts.mass, members);
                total -= mean_v.dot(&dir) * dt;
            }
            Ok(total)
        }
        LossSpec::ActuationCost => {
            let dt = tape.params.dt;
            let mut total = T::zero();
            for rec in &tape.records {
                if let Some(obs) = &rec.obs {
                    total += obs.a.iter().map(|&a| a * a).fold(T::zero(), |x, y| x + y) * dt;
                }
            }
            Ok(total)
        }
        LossSpec::WeightedSum { .. } => unreachable!("flattened by for_each_term"),
    }
}

/// Unit vector from the group's initial CoM toward the target. Held constant
/// over the episode, so no gradient flows through it.
fn goal_direction<T: Real>(
    tape: &Tape<T>,
    index: &GroupIndex,
    group: u32,
    target: [f64; 2],
) -> Result<Vec2<T>, AdjointError> {
    let members = members_of(index, group)?;
    let start = tape.dyn_at(0);
    let (_, com0, _) = control::group_stats(&start.x, &start.v, &tape.consts.mass, members);
    let d = crate::real::vec2_from_f64::<T>(target) - com0;
    let norm = d.norm();
    if norm <= T::default_epsilon() {
        return Err(AdjointError::Loss(
            "running_goal_velocity target coincides with the initial CoM".into(),
        ));
    }
    Ok(d / norm)
}

/// Initialize an adjoint state with the terminal loss seeds only (gradients
/// of the loss with respect to the final particle state and masses).
pub fn seed_loss<T: Real>(
    tape: &Tape<T>,
    loss: &LossSpec,
) -> Result<AdjointState<T>, AdjointError> {
    let index = GroupIndex::from_particles(&tape.consts.group);
    let mut adj = AdjointState::zeros(tape);
    adj.loss = eval_loss(tape, loss)?;
    seed_terminal(tape, &index, loss, &mut adj.x, &mut adj.v, &mut adj.mass)?;
    Ok(adj)
}

fn seed_terminal<T: Real>(
    tape: &Tape<T>,
    index: &GroupIndex,
    loss: &LossSpec,
    g_x: &mut [Vec2<T>],
    g_v: &mut [Vec2<T>],
    g_mass: &mut [T],
) -> Result<(), AdjointError> {
    let consts = &tape.consts;
    let fin = &tape.final_state;
    let mut err = None;
    loss.for_each_term(1.0, &mut |w, leaf| {
        if err.is_some() {
            return;
        }
        let w = T::of_f64(w);
        let r = (|| -> Result<(), AdjointError> {
            match leaf {
                LossSpec::FinalComDistance { group, target } => {
                    let members = members_of(index, *group)?;
                    let (m_total, com, _) =
                        control::group_stats(&fin.x, &fin.v, &consts.mass, members);
                    let t =
                        target.ok_or_else(|| AdjointError::Loss("unresolved target".into()))?;
                    let d = com - crate::real::vec2_from_f64(t);
                    for &i in members {
                        let i = i as usize;
                        g_x[i] += d * (w * consts.mass[i] / m_total);
                        g_mass[i] += w * d.dot(&(fin.x[i] - com)) / m_total;
                    }
                }
                LossSpec::FinalComProjection { group, direction } => {
                    let members = members_of(index, *group)?;
                    let (m_total, com, _) =
                        control::group_stats(&fin.x, &fin.v, &consts.mass, members);
                    let dir = crate::real::vec2_from_f64(*direction);
                    for &i in members {
                        let i = i as usize;
                        g_x[i] += dir * (w * consts.mass[i] / m_total);
                        g_mass[i] += w * dir.dot(&(fin.x[i] - com)) / m_total;
                    }
                }
                LossSpec::FinalMeanSqVelocity { group } => {
                    let members = members_of(index, *group)?;
                    let n = T::of_usize(members.len());
                    let two = T::of_f64(2.0);
                    for &i in members {
                        let i = i as usize;
                        g_v[i] += fin.v[i] * (two * w / n);
                    }
                }
                // Running terms seed per step during the backward walk.
                LossSpec::RunningGoalVelocity { .. } | LossSpec::ActuationCost => {}
                LossSpec::WeightedSum { .. } => unreachable!(),
            }
            Ok(())
        })();
        if let Err(e) = r {
            err = Some(e);
        }
    });
    err.map_or(Ok(()), Err)
}

/// Per-step seeds of running loss terms on the output state of step t.
fn seed_running<T: Real>(
    tape: &Tape<T>,
    index: &GroupIndex,
    loss: &LossSpec,
    t: usize,
    g_v_out: &mut [Vec2<T>],
    g_mass: &mut [T],
) -> Result<(), AdjointError> {
    let consts = &tape.consts;
    let state = tape.dyn_at(t + 1);
    let dt = tape.params.dt;
    let mut err = None;
    loss.for_each_term(1.0, &mut |w, leaf| {
        if err.is_some() {
            return;
        }
        if let LossSpec::RunningGoalVelocity { group, target } = leaf {
            let r = (|| -> Result<(), AdjointError> {
                let members = members_of(index, *group)?;
                let t_pos =
                    target.ok_or_else(|| AdjointError::Loss("unresolved target".into()))?;
                let dir = goal_direction(tape, index, *group, t_pos)?;
                let (m_total, _, mean_v) =
                    control::group_stats(&state.x, &state.v, &consts.mass, members);
                let w = T::of_f64(w);
                for &i in members {
                    let i = i as usize;
                    g_v_out[i] -= dir * (w * dt * consts.mass[i] / m_total);
                    g_mass[i] -= w * dt * dir.dot(&(state.v[i] - mean_v)) / m_total;
                }
                Ok(())
            })();
            if let Err(e) = r {
                err = Some(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Actuation-cost seeds: dL/da_t += 2 w dt a_t.
fn seed_actuation<T: Real>(loss: &LossSpec, dt: T, a: &[T], g_a: &mut [T]) {
    loss.for_each_term(1.0, &mut |w, leaf| {
        if matches!(leaf, LossSpec::ActuationCost) {
            let two_w_dt = T::of_f64(2.0 * w) * dt;
            for (g, &ai) in g_a.iter_mut().zip(a) {
                *g += two_w_dt * ai;
            }
        }
    });
}

/// Adjoint of the boundary projection at one node: transform a gradient with
/// respect to the projected velocity into one with respect to the
/// pre-projection velocity, recomputing the projection intermediates.
pub fn project_bc_adjoint<T: Real>(bc: &NodeBc<T>, v_in: Vec2<T>, g: Vec2<T>) -> Vec2<T> {
    match bc {
        NodeBc::None => g,
        NodeBc::Sticky => Vec2::zeros(),
        NodeBc::Slip(n) => {
            if v_in.dot(n) < T::zero() {
                g - n * n.dot(&g)
            } else {
                g
            }
        }
        NodeBc::Friction(n, c) => {
            let heav = |x: T| if x >= T::zero() { T::one() } else { T::zero() };
            let ln = v_in.dot(n);
            let vt = v_in - n * ln;
            let lt = (vt.norm_squared() + T::friction_eps()).sqrt();
            let vhat = vt / lt;
            let r = lt + *c * ln.min(T::zero());

            let g_lts = g.dot(&vhat);
            let g_vhat = g * r.max(T::zero());
            let g_lt = -vt.dot(&g_vhat) / (lt * lt) + g_lts * heav(r);
            let g_vt = (vt * g_lt + g_vhat) / lt;
            let g_ln = -g_vt.dot(n) + g_lts * heav(r) * *c * heav(-ln) + heav(ln) * n.dot(&g);
            n * g_ln + g_vt
        }
    }
}

/// Working buffers of one backward pass.
struct BackwardPass<'a, T: Real> {
    tape: &'a Tape<T>,
    loss: &'a LossSpec,
    index: GroupIndex,
    // Particle adjoints for the step output (t+1) and input (t) states.
    gx_out: Vec<Vec2<T>>,
    gv_out: Vec<Vec2<T>>,
    gf_out: Vec<Mat2<T>>,
    gc_out: Vec<Mat2<T>>,
    gx_in: Vec<Vec2<T>>,
    gv_in: Vec<Vec2<T>>,
    gf_in: Vec<Mat2<T>>,
    gc_in: Vec<Mat2<T>>,
    // Per-particle P and sigma adjoints of the current step.
    g_pk1: Vec<Mat2<T>>,
    g_sigma: Vec<Mat2<T>>,
    // Dense node buffers.
    gv_grid: Vec<Vec2<T>>,
    gp_grid: Vec<Vec2<T>>,
    gm_grid: Vec<T>,
    vout_grid: Vec<Vec2<T>>,
}

/// Full reverse pass: loss seeds, then per step (newest to oldest) the
/// particle-output fold, G2P scatter, boundary and grid adjoints, P2G
/// gather, parameter gradients, and the actuation adjoint.
pub fn backprop<T: Real>(tape: &Tape<T>, loss: &LossSpec) -> Result<AdjointState<T>, AdjointError> {
    let n = tape.n_particles();
    let n_nodes = tape.params.n_nodes();
    for (t, rec) in tape.records.iter().enumerate() {
        if rec.particles.x.len() != n {
            return Err(AdjointError::Loss(format!(
                "tape record {t} has {} particles, expected {n}",
                rec.particles.x.len()
            )));
        }
    }

    let mut adj = AdjointState::zeros(tape);
    adj.loss = eval_loss(tape, loss)?;
    let index = GroupIndex::from_particles(&tape.consts.group);
    let mut pass = BackwardPass {
        tape,
        loss,
        index,
        gx_out: vec![Vec2::zeros(); n],
        gv_out: vec![Vec2::zeros(); n],
        gf_out: vec![Mat2::zeros(); n],
        gc_out: vec![Mat2::zeros(); n],
        gx_in: vec![Vec2::zeros(); n],
        gv_in: vec![Vec2::zeros(); n],
        gf_in: vec![Mat2::zeros(); n],
        gc_in: vec![Mat2::zeros(); n],
        g_pk1: vec![Mat2::zeros(); n],
        g_sigma: vec![Mat2::zeros(); n],
        gv_grid: vec![Vec2::zeros(); n_nodes],
        gp_grid: vec![Vec2::zeros(); n_nodes],
        gm_grid: vec![T::zero(); n_nodes],
        vout_grid: vec![Vec2::zeros(); n_nodes],
    };

    seed_terminal(tape, &pass.index, loss, &mut pass.gx_out, &mut pass.gv_out, &mut adj.mass)?;

    for t in (0..tape.n_steps()).rev() {
        pass.step_backward(t, &mut adj)?;
        // The freshly-computed input adjoints become the output adjoints of
        // the previous step.
        std::mem::swap(&mut pass.gx_out, &mut pass.gx_in);
        std::mem::swap(&mut pass.gv_out, &mut pass.gv_in);
        std::mem::swap(&mut pass.gf_out, &mut pass.gf_in);
        std::mem::swap(&mut pass.gc_out, &mut pass.gc_in);
        pass.gx_in.fill(Vec2::zeros());
        pass.gv_in.fill(Vec2::zeros());
        pass.gf_in.fill(Mat2::zeros());
        pass.gc_in.fill(Mat2::zeros());
    }

    adj.x.copy_from_slice(&pass.gx_out);
    adj.v.copy_from_slice(&pass.gv_out);
    adj.f.copy_from_slice(&pass.gf_out);
    adj.c.copy_from_slice(&pass.gc_out);
    Ok(adj)
}

impl<T: Real> BackwardPass<'_, T> {
    fn step_backward(&mut self, t: usize, adj: &mut AdjointState<T>) -> Result<(), AdjointError> {
        let tape = self.tape;
        let rec = &tape.records[t];

        seed_running(tape, &self.index, self.loss, t, &mut self.gv_out, &mut adj.mass)?;
        self.fold_outputs(rec);
        self.scatter_grid(rec);
        self.boundary_and_grid_adjoint(&rec.grid);
        self.gather_particles(t, rec, adj)?;
        self.actuation_adjoint(t, rec, adj);
        Ok(())
    }

    /// Steps A and B: fold position adjoints into velocity adjoints and
    /// deformation-gradient adjoints into affine-matrix adjoints.
    fn fold_outputs(&mut self, rec: &StepRecord<T>) {
        let dt = self.tape.params.dt;
        for p in 0..self.gx_out.len() {
            self.gv_out[p] += self.gx_out[p] * dt;
            self.gc_out[p] += self.gf_out[p] * rec.particles.f[p].transpose() * dt;
        }
    }

    /// Step C: adjoint of G2P. Scatters particle gradients to the grid
    /// velocity adjoint.
    fn scatter_grid(&mut self, rec: &StepRecord<T>) {
        let params = &self.tape.params;
        let d_inv = T::of_f64(4.0) * params.inv_dx * params.inv_dx;
        self.gv_grid.fill(Vec2::zeros());
        for p in 0..rec.particles.x.len() {
            let xp = rec.particles.x[p];
            // Positions were validated during the forward pass.
            let st = bspline_stencil(xp, params.dx, params.res).expect("taped position in range");
            let gv = self.gv_out[p];
            let gc = self.gc_out[p];
            for kx in 0..3 {
                let nx = T::of_usize(st.base[0] + kx) * params.dx;
                for ky in 0..3 {
                    let w = st.wx[kx] * st.wy[ky];
                    let node = params.node_index(st.base[0] + kx, st.base[1] + ky);
                    let dpos =
                        Vec2::new(nx - xp.x, T::of_usize(st.base[1] + ky) * params.dx - xp.y);
                    self.gv_grid[node] += (gv + gc * dpos * d_inv) * w;
                }
            }
        }
    }

    /// Steps L, D, E: boundary projection adjoint, then momentum and mass
    /// adjoints on the populated nodes.
    fn boundary_and_grid_adjoint(&mut self, grid: &GridRecord<T>) {
        self.gp_grid.fill(Vec2::zeros());
        self.gm_grid.fill(T::zero());
        self.vout_grid.fill(Vec2::zeros());
        for (k, &idx) in grid.idx.iter().enumerate() {
            let i = idx as usize;
            let g_star = self.gv_grid[i];
            let g_pre = project_bc_adjoint(&self.tape.bc[i], grid.v_in[k], g_star);
            self.gv_grid[i] = g_pre;
            let m = grid.m[k];
            self.gp_grid[i] = g_pre / m;
            // v = p/m + dt g  =>  dL/dm = -(p/m^2) . dL/dv
            self.gm_grid[i] = -(grid.p[k] / (m * m)).dot(&g_pre);
            self.vout_grid[i] = grid.v_out[k];
        }
    }

    /// Steps F through K plus the parameter gradients: per-particle gather
    /// of grid adjoints into the step-start particle adjoints.
    fn gather_particles(
        &mut self,
        t: usize,
        rec: &StepRecord<T>,
        adj: &mut AdjointState<T>,
    ) -> Result<(), AdjointError> {
        let tape = self.tape;
        let params = &tape.params;
        let consts = &tape.consts;
        let next: &ParticleDyn<T> = tape.dyn_at(t + 1);
        let d_inv = T::of_f64(4.0) * params.inv_dx * params.inv_dx;
        let dt = params.dt;
        let two = T::of_f64(2.0);

        for p in 0..rec.particles.x.len() {
            let xp = rec.particles.x[p];
            let vp = rec.particles.v[p];
            let fp = rec.particles.f[p];
            let cp = rec.particles.c[p];
            let sigma_p = rec.sigma.as_ref().map(|s| s[p]).unwrap_or_else(Mat2::zeros);
            let mass = consts.mass[p];
            let mat = Material { mu: consts.mu[p], lambda: consts.lambda[p] };

            let st = bspline_stencil(xp, params.dx, params.res)
                .map_err(|source| AdjointError::Kernel { step: t, particle: p, source })?;
            let pk1_el = pk1_stress(&fp, &mat)
                .map_err(|source| AdjointError::Kernel { step: t, particle: p, source })?;
            let p_total = pk1_el + fp * sigma_p;
            let kp = d_inv * dt * consts.vol0[p];
            let g_mat = p_total * fp.transpose() * (-kp) + cp * mass;

            let gv_out_p = self.gv_out[p];
            let gc_out_p = self.gc_out[p];

            let mut s1 = Mat2::zeros(); // sum N g_p dpos^T
            let mut s2 = Mat2::zeros(); // sum N dpos g_p^T
            let mut gv_acc = Vec2::zeros();
            let mut gx_acc = Vec2::zeros();
            let mut gm_sum = T::zero();
            let mut gp_dot_vcd = T::zero();

            for kx in 0..3 {
                let nx = T::of_usize(st.base[0] + kx) * params.dx;
                for ky in 0..3 {
                    let w = st.wx[kx] * st.wy[ky];
                    let node = params.node_index(st.base[0] + kx, st.base[1] + ky);
                    let dpos =
                        Vec2::new(nx - xp.x, T::of_usize(st.base[1] + ky) * params.dx - xp.y);
                    let gradw = st.grad_wrt_particle(kx, ky, params.inv_dx);
                    let gp_i = self.gp_grid[node];
                    let gm_i = self.gm_grid[node];
                    let v_star = self.vout_grid[node];

                    // Step F: momentum transfer of m_p v_p.
                    gv_acc += gp_i * w;
                    // Shared outer-product sums for steps G, H, I.
                    s1 += gp_i * dpos.transpose() * w;
                    s2 += dpos * gp_i.transpose() * w;
                    // Step J: all five x_p dependencies.
                    gx_acc += gradw * gv_out_p.dot(&v_star);
                    gx_acc += (gradw * v_star.dot(&(gc_out_p * dpos))
                        - gc_out_p.transpose() * v_star * w)
                        * d_inv;
                    let mom = vp * mass + g_mat * dpos;
                    gx_acc += gradw * gp_i.dot(&mom) - g_mat.transpose() * gp_i * w;
                    gx_acc += gradw * (gm_i * mass);
                    // Mass-gradient pieces of P2G.
                    gm_sum += gm_i * w;
                    gp_dot_vcd += gp_i.dot(&(vp + cp * dpos)) * w;
                }
            }

            // Step G.
            let g_pk1 = s1 * fp * (-kp);
            // Step H: chain through F^{n+1}, the constitutive Jacobian, the
            // actuation product, and the F^T factor inside G_p.
            let jac = pk1_stress_jacobian(&fp, &mat)
                .map_err(|source| AdjointError::Kernel { step: t, particle: p, source })?;
            let mut gf = (Mat2::identity() + next.c[p] * dt).transpose() * self.gf_out[p];
            gf += contract_jacobian(&g_pk1, &jac);
            gf += g_pk1 * sigma_p.transpose();
            gf += s2 * p_total * (-kp);

            self.gx_in[p] += self.gx_out[p] + gx_acc;
            self.gv_in[p] += gv_acc * mass;
            self.gf_in[p] += gf;
            // Step I.
            self.gc_in[p] += s1 * mass;
            // Step K.
            self.g_pk1[p] = g_pk1;
            self.g_sigma[p] = fp.transpose() * g_pk1;

            // Parameter gradients: mass through m_i and p_i, stiffness
            // through the Lame parameters (dmu/dE = mu/E, dlambda/dE =
            // lambda/E at fixed Poisson ratio).
            adj.mass[p] += gm_sum + gp_dot_vcd;
            let r = polar_2d(&fp)
                .map_err(|source| AdjointError::Kernel { step: t, particle: p, source })?;
            let dp_dmu = (fp - r) * two;
            let dp_dlambda = cofactor(&fp) * (fp.determinant() - T::one());
            adj.young[p] += (g_pk1.dot(&dp_dmu) * consts.mu[p]
                + g_pk1.dot(&dp_dlambda) * consts.lambda[p])
                / consts.young[p];
        }
        Ok(())
    }

    /// Reverse of the actuation path: stress adjoints aggregate into
    /// channel gradients, then through tanh into (W, b) and the observation
    /// (closed loop) or straight into the schedule gradient (open loop).
    fn actuation_adjoint(&mut self, t: usize, rec: &StepRecord<T>, adj: &mut AdjointState<T>) {
        let tape = self.tape;
        let Some(obs) = &rec.obs else { return };
        let map = match &tape.actuation {
            Actuation::None => return,
            a => a.map().expect("actuation has a map"),
        };
        let mut g_a = vec![T::zero(); map.n_outputs()];
        for (p, &id) in tape.consts.actuator.iter().enumerate() {
            map.stress_adjoint(&self.g_sigma[p], id, &mut g_a);
        }
        seed_actuation(self.loss, tape.params.dt, &obs.a, &mut g_a);

        match &tape.actuation {
            Actuation::OpenLoop { .. } => {
                adj.schedule[t].copy_from_slice(&g_a);
            }
            Actuation::Controller(ctrl) => {
                let g_z = control::act_adjoint(
                    &ctrl.w,
                    ctrl.n_obs,
                    &obs.z,
                    &obs.a,
                    &g_a,
                    &mut adj.controller_w,
                    &mut adj.controller_b,
                );
                // Closed-loop term: the observation reads the step-start
                // state, so its adjoint joins the step-input buffers.
                control::observe_adjoint(
                    &rec.particles.x,
                    &rec.particles.v,
                    &tape.consts.mass,
                    &self.index,
                    &ctrl.observed_groups,
                    &g_z,
                    &mut self.gx_in,
                    &mut self.gv_in,
                    &mut adj.mass,
                );
            }
            Actuation::None => unreachable!(),
        }
    }
}
