//! Grid-transfer kernel and constitutive model.
//!
//! Quadratic B-spline weights over a 3x3 node stencil, 2D polar
//! decomposition, and the fixed-corotated first Piola-Kirchhoff stress
//! `P = 2 mu (F - R) + lambda (J - 1) J F^-T` together with its analytic
//! derivative `dP/dF`. The derivative includes the closed-form `dR/dF`
//! obtained from `R = rot(theta)`, `theta = atan2(F10 - F01, F00 + F11)`,
//! which avoids differentiating an SVD.

use thiserror::Error;

use crate::real::{Mat2, Mat4, Real, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("position ({x}, {y}) outside the valid stencil range of the grid")]
    OutOfRange { x: f64, y: f64 },
    #[error("inverted element: det(F) = {det:e} <= 0")]
    InvertedElement { det: f64 },
}

/// Lame parameters of one particle's material (pressure units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material<T> {
    pub mu: T,
    pub lambda: T,
}

impl<T: Real> Material<T> {
    /// Plane-strain conversion from Young's modulus and Poisson ratio:
    /// mu = E / (2 (1 + nu)), lambda = E nu / ((1 + nu)(1 - 2 nu)).
    pub fn from_young_poisson(young: T, poisson: T) -> Self {
        let one = T::one();
        let two = T::of_f64(2.0);
        let mu = young / (two * (one + poisson));
        let lambda = young * poisson / ((one + poisson) * (one - two * poisson));
        Material { mu, lambda }
    }
}

/// Quadratic B-spline weights of one particle over its 3x3 node stencil.
///
/// `base` is the lowest grid node of the stencil. `wx`/`wy` are the per-axis
/// weights and `dwx`/`dwy` their derivatives with respect to the
/// dimensionless node offset `u = (x_i - x_p) / dx`, used by the adjoint.
#[derive(Debug, Clone, Copy)]
pub struct StencilWeights<T> {
    pub base: [usize; 2],
    pub wx: [T; 3],
    pub wy: [T; 3],
    pub dwx: [T; 3],
    pub dwy: [T; 3],
}

impl<T: Real> StencilWeights<T> {
    /// Combined 2D weight of stencil node (kx, ky).
    #[inline]
    pub fn w(&self, kx: usize, ky: usize) -> T {
        self.wx[kx] * self.wy[ky]
    }

    /// Gradient of the 2D weight with respect to the particle position,
    /// `d N(x_i - x_p) / d x_p` (note the sign: N is evaluated at x_i - x_p).
    #[inline]
    pub fn grad_wrt_particle(&self, kx: usize, ky: usize, inv_dx: T) -> Vec2<T> {
        Vec2::new(
            -self.dwx[kx] * self.wy[ky] * inv_dx,
            -self.wx[kx] * self.dwy[ky] * inv_dx,
        )
    }
}

#[inline]
fn axis_weights<T: Real>(fx: T) -> ([T; 3], [T; 3]) {
    // fx = x/dx - base, in [0.5, 1.5]. Node offsets u_k = k - fx.
    let half = T::of_f64(0.5);
    let three_half = T::of_f64(1.5);
    let two = T::of_f64(2.0);
    let w = [
        half * (three_half - fx) * (three_half - fx),
        T::of_f64(0.75) - (fx - T::one()) * (fx - T::one()),
        half * (fx - half) * (fx - half),
    ];
    // dN/du at u_k (derivative w.r.t. the node-side offset).
    let dw = [three_half - fx, two * (fx - T::one()), -(fx - half)];
    (w, dw)
}

/// Quadratic B-spline stencil of a particle at `x` on a grid with cell size
/// `dx` and `res` nodes per axis. Errors when the 3x3 stencil would index
/// outside the grid.
pub fn bspline_stencil<T: Real>(
    x: Vec2<T>,
    dx: T,
    res: [usize; 2],
) -> Result<StencilWeights<T>, KernelError> {
    let half = T::of_f64(0.5);
    let gx = x.x / dx;
    let gy = x.y / dx;
    let bx = (gx - half).floor();
    let by = (gy - half).floor();
    let out_of_range = |v: T, n: usize| v < T::zero() || v.as_f64() as isize + 2 >= n as isize;
    if !gx.is_finite() || !gy.is_finite() || out_of_range(bx, res[0]) || out_of_range(by, res[1]) {
        return Err(KernelError::OutOfRange {
            x: x.x.as_f64(),
            y: x.y.as_f64(),
        });
    }
    let (wx, dwx) = axis_weights(gx - bx);
    let (wy, dwy) = axis_weights(gy - by);
    Ok(StencilWeights {
        base: [bx.as_f64() as usize, by.as_f64() as usize],
        wx,
        wy,
        dwx,
        dwy,
    })
}

/// Rotation factor of the polar decomposition F = R S, for det(F) > 0.
pub fn polar_2d<T: Real>(f: &Mat2<T>) -> Result<Mat2<T>, KernelError> {
    let det = f.determinant();
    if !(det > T::zero()) {
        return Err(KernelError::InvertedElement { det: det.as_f64() });
    }
    // R = rot(theta), theta = atan2(c - b, a + d). Given det > 0 the pair
    // (a+d, c-b) is never both zero.
    let s = f[(0, 0)] + f[(1, 1)];
    let t = f[(1, 0)] - f[(0, 1)];
    let r = (s * s + t * t).sqrt();
    let (c, sn) = (s / r, t / r);
    Ok(Mat2::new(c, -sn, sn, c))
}

/// Cofactor matrix J F^-T, linear in F in 2D.
#[inline]
pub fn cofactor<T: Real>(f: &Mat2<T>) -> Mat2<T> {
    Mat2::new(f[(1, 1)], -f[(1, 0)], -f[(0, 1)], f[(0, 0)])
}

/// Fixed-corotated first Piola-Kirchhoff stress.
pub fn pk1_stress<T: Real>(f: &Mat2<T>, mat: &Material<T>) -> Result<Mat2<T>, KernelError> {
    let r = polar_2d(f)?;
    let j = f.determinant();
    let two_mu = T::of_f64(2.0) * mat.mu;
    Ok((f - r) * two_mu + cofactor(f) * (mat.lambda * (j - T::one())))
}

/// Analytic dP/dF of the fixed-corotated stress, as a 4x4 matrix in
/// row-major pair indexing: out[(2a+b, 2g+h)] = dP_ab / dF_gh.
///
/// This equals the Hessian of the energy density, so it is symmetric.
pub fn pk1_stress_jacobian<T: Real>(
    f: &Mat2<T>,
    mat: &Material<T>,
) -> Result<Mat4<T>, KernelError> {
    let det = f.determinant();
    if !(det > T::zero()) {
        return Err(KernelError::InvertedElement { det: det.as_f64() });
    }
    let two = T::of_f64(2.0);
    let s = f[(0, 0)] + f[(1, 1)];
    let t = f[(1, 0)] - f[(0, 1)];
    let r2 = s * s + t * t;
    let r = r2.sqrt();
    let (cos, sin) = (s / r, t / r);

    // dtheta/dF: theta = atan2(t, s), ds/dF = I, dt/dF = [[0,-1],[1,0]].
    let dtheta = [
        [-t / r2, -s / r2], //
        [s / r2, -t / r2],
    ];
    // dR/dtheta = [[-sin, -cos], [cos, -sin]].
    let dr_dtheta = [[-sin, -cos], [cos, -sin]];

    let k = cofactor(f);
    let jm1 = det - T::one();
    let mut out = Mat4::zeros();
    for a in 0..2 {
        for b in 0..2 {
            for g in 0..2 {
                for h in 0..2 {
                    let row = 2 * a + b;
                    let col = 2 * g + h;
                    let ident = if a == g && b == h { T::one() } else { T::zero() };
                    // Elastic part: 2 mu (I - dR/dF).
                    let elastic = two * mat.mu * (ident - dr_dtheta[a][b] * dtheta[g][h]);
                    // Volumetric part: lambda [K x K + (J-1) dK/dF], with
                    // dK_ab/dF_gh = delta_gh delta_ab - delta_ah delta_bg.
                    let dk = {
                        let d1 = if g == h && a == b { T::one() } else { T::zero() };
                        let d2 = if a == h && b == g { T::one() } else { T::zero() };
                        d1 - d2
                    };
                    let vol = mat.lambda * (k[(g, h)] * k[(a, b)] + jm1 * dk);
                    out[(row, col)] = elastic + vol;
                }
            }
        }
    }
    Ok(out)
}

/// Contraction g : dP/dF -> out[ab] = sum_gh g[gh] * jac[(gh),(ab)], the
/// adjoint propagation of a P-gradient backward through the constitutive map.
#[inline]
pub fn contract_jacobian<T: Real>(g: &Mat2<T>, jac: &Mat4<T>) -> Mat2<T> {
    let mut out = Mat2::zeros();
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = T::zero();
            for gg in 0..2 {
                for h in 0..2 {
                    acc += g[(gg, h)] * jac[(2 * gg + h, 2 * a + b)];
                }
            }
            out[(a, b)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rot(theta: f64) -> Mat2<f64> {
        Mat2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos())
    }

    #[test]
    fn stencil_on_node() {
        let s = bspline_stencil(Vec2::new(0.5, 0.5), 0.1, [16, 16]).unwrap();
        assert_eq!(s.base, [4, 4]);
        for w in [s.wx, s.wy] {
            assert_relative_eq!(w[0], 0.125, max_relative = 1e-15);
            assert_relative_eq!(w[1], 0.75, max_relative = 1e-15);
            assert_relative_eq!(w[2], 0.125, max_relative = 1e-15);
        }
    }

    #[test]
    fn stencil_at_quarter_offset() {
        // x/dx = 1.25: per-node weights are N(-1.25), N(-0.25), N(0.75).
        let s = bspline_stencil(Vec2::new(1.25, 1.25), 1.0, [8, 8]).unwrap();
        assert_eq!(s.base, [0, 0]);
        assert_relative_eq!(s.wx[0], 0.03125, max_relative = 1e-15);
        assert_relative_eq!(s.wx[1], 0.6875, max_relative = 1e-15);
        assert_relative_eq!(s.wx[2], 0.28125, max_relative = 1e-15);
    }

    #[test]
    fn stencil_out_of_range() {
        assert!(bspline_stencil(Vec2::new(0.01, 0.5), 0.1, [16, 16]).is_err());
        assert!(bspline_stencil(Vec2::new(1.46, 0.5), 0.1, [16, 16]).is_err());
        assert!(bspline_stencil(Vec2::new(f64::NAN, 0.5), 0.1, [16, 16]).is_err());
    }

    #[test]
    fn axis_weight_derivative_matches_finite_difference() {
        let dx = 0.02;
        let h = 1e-7;
        // Test points chosen away from the B-spline knots so the stencil
        // base does not shift across the finite-difference probe.
        for &x in &[0.311, 0.3542, 0.3999, 0.4207] {
            let s = bspline_stencil(Vec2::new(x, 0.4), dx, [64, 64]).unwrap();
            let sp = bspline_stencil(Vec2::new(x + h, 0.4), dx, [64, 64]).unwrap();
            let sm = bspline_stencil(Vec2::new(x - h, 0.4), dx, [64, 64]).unwrap();
            assert_eq!(s.base, sp.base);
            assert_eq!(s.base, sm.base);
            for k in 0..3 {
                let fd = (sp.wx[k] - sm.wx[k]) / (2.0 * h);
                let analytic = -s.dwx[k] / dx; // d/dx_p = -(1/dx) dN/du
                assert_relative_eq!(analytic, fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_linear_reproduction(
            px in 0.05f64..0.95, py in 0.05f64..0.95
        ) {
            let dx = 1.0 / 63.0;
            let s = bspline_stencil(Vec2::new(px, py), dx, [64, 64]).unwrap();
            let mut sum = 0.0;
            let mut first_moment = Vec2::new(0.0, 0.0);
            let mut dsum = Vec2::new(0.0, 0.0);
            for kx in 0..3 {
                for ky in 0..3 {
                    let w = s.w(kx, ky);
                    prop_assert!(w >= 0.0);
                    let node = Vec2::new(
                        (s.base[0] + kx) as f64 * dx,
                        (s.base[1] + ky) as f64 * dx,
                    );
                    sum += w;
                    first_moment += (node - Vec2::new(px, py)) * w;
                    dsum += s.grad_wrt_particle(kx, ky, 1.0 / dx);
                }
            }
            prop_assert!((sum - 1.0).abs() <= 1e-14);
            prop_assert!(first_moment.norm() <= 1e-14);
            prop_assert!(dsum.norm() <= 1e-11);
        }

        #[test]
        fn pk1_rotation_equivariance(theta in -3.0f64..3.0, phi in -3.0f64..3.0,
                                     s1 in 0.5f64..2.0, s2 in 0.5f64..2.0) {
            let mat = Material { mu: 1.3, lambda: 0.7 };
            let f = rot(phi) * Mat2::new(s1, 0.1, 0.0, s2);
            if f.determinant() <= 0.05 { return Ok(()); }
            let q = rot(theta);
            let p = pk1_stress(&f, &mat).unwrap();
            let pq = pk1_stress(&(q * f), &mat).unwrap();
            let diff = (pq - q * p).norm();
            prop_assert!(diff <= 1e-12 * (1.0 + p.norm()));
        }
    }

    #[test]
    fn polar_examples() {
        let id: Mat2<f64> = Mat2::identity();
        assert_relative_eq!(polar_2d(&id).unwrap(), id, epsilon = 1e-15);

        let r = rot(0.7);
        let f = r * Mat2::new(2.0, 0.0, 0.0, 0.5);
        assert_relative_eq!(polar_2d(&f).unwrap(), r, epsilon = 1e-14);

        let spd = Mat2::new(2.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(polar_2d(&spd).unwrap(), id, epsilon = 1e-15);

        assert!(matches!(
            polar_2d(&Mat2::new(1.0, 0.0, 0.0, -1.0)),
            Err(KernelError::InvertedElement { .. })
        ));
    }

    #[test]
    fn pk1_examples() {
        let id: Mat2<f64> = Mat2::identity();
        let mat = Material { mu: 1.0, lambda: 0.0 };
        assert_relative_eq!(pk1_stress(&id, &mat).unwrap(), Mat2::zeros(), epsilon = 1e-15);

        let f = Mat2::new(2.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(
            pk1_stress(&f, &mat).unwrap(),
            Mat2::new(2.0, 0.0, 0.0, 0.0),
            epsilon = 1e-14
        );

        let mat = Material { mu: 0.0, lambda: 1.0 };
        assert_relative_eq!(
            pk1_stress(&f, &mat).unwrap(),
            Mat2::new(1.0, 0.0, 0.0, 2.0),
            epsilon = 1e-14
        );
    }

    fn jacobian_fd(f: &Mat2<f64>, mat: &Material<f64>, h: f64) -> Mat4<f64> {
        let mut out = Mat4::zeros();
        for g in 0..2 {
            for hh in 0..2 {
                let mut fp = *f;
                let mut fm = *f;
                fp[(g, hh)] += h;
                fm[(g, hh)] -= h;
                let pp = pk1_stress(&fp, mat).unwrap();
                let pm = pk1_stress(&fm, mat).unwrap();
                for a in 0..2 {
                    for b in 0..2 {
                        out[(2 * a + b, 2 * g + hh)] = (pp[(a, b)] - pm[(a, b)]) / (2.0 * h);
                    }
                }
            }
        }
        out
    }

    fn max_rel(a: &Mat4<f64>, b: &Mat4<f64>) -> f64 {
        let scale = a.norm().max(b.norm()).max(1e-12);
        (a - b).norm() / scale
    }

    #[test]
    fn pk1_jacobian_matches_finite_difference_at_identity() {
        let mat = Material { mu: 1.0, lambda: 0.0 };
        let id = Mat2::identity();
        let jac = pk1_stress_jacobian(&id, &mat).unwrap();
        let fd = jacobian_fd(&id, &mat, 1e-6);
        assert!(max_rel(&jac, &fd) <= 1e-8, "rel err {}", max_rel(&jac, &fd));
    }

    #[test]
    fn pk1_jacobian_matches_finite_difference_random() {
        // 100 deterministic pseudo-random well-conditioned F.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let theta: f64 = rng.gen_range(-3.0..3.0);
            let phi: f64 = rng.gen_range(-3.0..3.0);
            let s1: f64 = rng.gen_range(0.5..2.0);
            let s2: f64 = rng.gen_range(0.5..2.0);
            let f = rot(theta) * Mat2::new(s1, 0.0, 0.0, s2) * rot(phi);
            let mat = Material {
                mu: rng.gen_range(0.1..3.0),
                lambda: rng.gen_range(0.0..3.0),
            };
            let jac = pk1_stress_jacobian(&f, &mat).unwrap();
            let fd = jacobian_fd(&f, &mat, 1e-6);
            let rel = max_rel(&jac, &fd);
            assert!(rel <= 1e-7, "rel err {rel} at F = {f}");

            // Hessian symmetry in pair indices.
            let asym = (jac - jac.transpose()).norm() / jac.norm().max(1e-12);
            assert!(asym <= 1e-12, "asymmetry {asym}");
        }
    }

    #[test]
    fn lame_conversion() {
        let m: Material<f64> = Material::from_young_poisson(1.0, 0.0);
        assert_relative_eq!(m.mu, 0.5);
        assert_relative_eq!(m.lambda, 0.0);
        let m = Material::from_young_poisson(10.0, 0.3);
        assert_relative_eq!(m.mu, 10.0 / 2.6, max_relative = 1e-15);
        assert_relative_eq!(m.lambda, 10.0 * 0.3 / (1.3 * 0.4), max_relative = 1e-15);
    }

    #[test]
    fn contract_jacobian_is_transpose_application() {
        let mat = Material { mu: 0.8, lambda: 1.1 };
        let f = Mat2::new(1.1, 0.2, -0.1, 0.9);
        let jac = pk1_stress_jacobian(&f, &mat).unwrap();
        let g = Mat2::new(0.3, -0.4, 0.5, 0.6);
        let out = contract_jacobian(&g, &jac);
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for gg in 0..2 {
                    for h in 0..2 {
                        acc += g[(gg, h)] * jac[(2 * gg + h, 2 * a + b)];
                    }
                }
                assert_relative_eq!(out[(a, b)], acc);
            }
        }
    }
}
