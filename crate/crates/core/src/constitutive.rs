//! Pointwise stress laws: small-strain linear isotropic elasticity and a
//! transversely isotropic hyperelastic law.
//!
//! Both laws are written once over [`Real`] so they evaluate on plain `f64`
//! and on tape variables (batched: every entry of a `Var` is an independent
//! material point). Displacement gradients use `grad_u[i][j] = du_i / ds_j`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Symmetric 2x2 tensor stored by its independent components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2<T> {
    pub s11: T,
    pub s12: T,
    pub s22: T,
}

impl<T> Sym2<T> {
    pub fn to_array(self) -> [T; 3] {
        [self.s11, self.s12, self.s22]
    }
}

impl Sym2<f64> {
    pub fn to_matrix(self) -> [[f64; 2]; 2] {
        [[self.s11, self.s12], [self.s12, self.s22]]
    }
}

pub type Grad2<T> = [[T; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoParams {
    pub e: f64,
    pub nu: f64,
}

impl IsoParams {
    pub fn new(e: f64, nu: f64) -> Result<Self> {
        let p = Self { e, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e > 0.0) {
            return Err(Error::InvalidArgument(format!("Young's modulus must be positive, got {}", self.e)));
        }
        if !(0.0..0.5).contains(&self.nu) {
            return Err(Error::InvalidArgument(format!("Poisson's ratio must lie in [0, 0.5), got {}", self.nu)));
        }
        Ok(())
    }

    /// Lamé parameters `(lambda, mu)`.
    pub fn lame(&self) -> (f64, f64) {
        let (cl, cm) = lame_per_unit_modulus(self.nu);
        (cl * self.e, cm * self.e)
    }
}

/// Lamé parameters for `E = 1`.
pub fn lame_per_unit_modulus(nu: f64) -> (f64, f64) {
    (nu / ((1.0 - 2.0 * nu) * (1.0 + nu)), 1.0 / (2.0 * (1.0 + nu)))
}

/// `lambda tr(eps) I + 2 mu eps` with `eps` the symmetric part of `grad_u`.
pub fn linear_isotropic_stress(grad_u: &Grad2<f64>, p: &IsoParams) -> Result<Sym2<f64>> {
    p.validate()?;
    Ok(linear_isotropic_stress_with(grad_u, &p.e, p.nu))
}

/// Linear isotropic law with a (possibly differentiable) modulus `e`.
pub fn linear_isotropic_stress_with<T: Real>(grad_u: &Grad2<T>, e: &T, nu: f64) -> Sym2<T> {
    let (cl, cm) = lame_per_unit_modulus(nu);
    let e11 = grad_u[0][0].clone();
    let e22 = grad_u[1][1].clone();
    let shear = grad_u[0][1].clone() + grad_u[1][0].clone();
    let diag = cl + 2.0 * cm;
    Sym2 {
        s11: e.clone() * (e11.scale(diag) + e22.scale(cl)),
        s12: e.clone() * shear.scale(cm),
        s22: e.clone() * (e11.scale(cl) + e22.scale(diag)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransIsoParams {
    /// Transverse Young's modulus.
    pub e: f64,
    /// Axial Young's modulus.
    pub e_a: f64,
    pub nu: f64,
    /// Axial shear modulus.
    pub g_a: f64,
    pub axis: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransIsoConstants {
    pub n: f64,
    pub m: f64,
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TransIsoParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("E", self.e), ("E_a", self.e_a), ("G_a", self.g_a)] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let norm = self.axis[0].hypot(self.axis[1]);
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("axis must be a unit vector, |a| = {norm}")));
        }
        Ok(())
    }
}

/// Derived material constants, evaluated in dependency order.
pub fn transiso_constants(p: &TransIsoParams) -> Result<TransIsoConstants> {
    p.validate()?;
    let (e, e_a, nu, g_a) = (p.e, p.e_a, p.nu, p.g_a);
    let n = e_a / e;
    let m = 1.0 - nu - 2.0 * n * nu * nu;
    if m == 0.0 {
        return Err(Error::DegenerateMaterial(format!(
            "m = 1 - nu - 2 n nu^2 vanishes (n = {n}, nu = {nu})"
        )));
    }
    let lambda = e * (nu + n * nu * nu) / (m * (1.0 + nu));
    let mu = e / (2.0 * (1.0 + nu));
    let alpha = mu - g_a;
    let beta = e * nu * nu * (1.0 - n) / (4.0 * m * (1.0 + nu));
    let gamma = e_a * (1.0 - nu) / (8.0 * m) - (lambda + 2.0 * mu) / 8.0 + alpha / 2.0 - beta;
    Ok(TransIsoConstants {
        n,
        m,
        lambda,
        mu,
        alpha,
        beta,
        gamma,
    })
}

/// Transversely isotropic stress; fails for inverted states (`det F <= 0`).
pub fn transiso_stress(grad_u: &Grad2<f64>, p: &TransIsoParams) -> Result<Sym2<f64>> {
    let c = transiso_constants(p)?;
    let j = (1.0 + grad_u[0][0]) * (1.0 + grad_u[1][1]) - grad_u[0][1] * grad_u[1][0];
    if !(j > 0.0) {
        return Err(Error::InvertedElement(j));
    }
    Ok(transiso_stress_with(grad_u, &c, p.axis))
}

/// Transversely isotropic stress for precomputed constants, any [`Real`].
pub fn transiso_stress_with<T: Real>(grad_u: &Grad2<T>, c: &TransIsoConstants, a: [f64; 2]) -> Sym2<T> {
    let f11 = grad_u[0][0].offset(1.0);
    let f12 = grad_u[0][1].clone();
    let f21 = grad_u[1][0].clone();
    let f22 = grad_u[1][1].offset(1.0);

    let b11 = f11.clone() * f11.clone() + f12.clone() * f12.clone();
    let b12 = f11.clone() * f21.clone() + f12.clone() * f22.clone();
    let b22 = f21.clone() * f21.clone() + f22.clone() * f22.clone();
    let c11 = f11.clone() * f11.clone() + f21.clone() * f21.clone();
    let c12 = f11.clone() * f12.clone() + f21.clone() * f22.clone();
    let c22 = f12.clone() * f12.clone() + f22.clone() * f22.clone();
    let j = f11 * f22 - f12 * f21;

    let i1m2 = (c11.clone() + c22.clone()).offset(-2.0);
    let i4m1 = (c11.scale(a[0] * a[0]) + c12.scale(2.0 * a[0] * a[1]) + c22.scale(a[1] * a[1])).offset(-1.0);

    // B a
    let ba1 = b11.scale(a[0]) + b12.scale(a[1]);
    let ba2 = b12.scale(a[0]) + b22.scale(a[1]);

    let coef_b = i4m1.scale(2.0 * c.beta);
    let coef_a = (i1m2.scale(c.beta) + i4m1.scale(2.0 * c.gamma)).offset(c.alpha).scale(2.0);
    let vol = j.offset(-1.0).scale(c.lambda);

    let comp = |b: &T, b_minus_i: T, aa: f64, sym_ba: T, diag: bool| -> T {
        let mut s = coef_b.clone() * b.clone() + coef_a.scale(aa) - sym_ba.scale(c.alpha)
            + b_minus_i.scale(c.mu) / j.clone();
        if diag {
            s = s + vol.clone();
        }
        s / j.clone()
    };

    Sym2 {
        s11: comp(&b11, b11.offset(-1.0), a[0] * a[0], ba1.scale(2.0 * a[0]), true),
        s12: comp(&b12, b12.clone(), a[0] * a[1], ba1.scale(a[1]) + ba2.scale(a[0]), false),
        s22: comp(&b22, b22.offset(-1.0), a[1] * a[1], ba2.scale(2.0 * a[1]), true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use proptest::prelude::*;

    fn fibre_inclusion() -> TransIsoParams {
        TransIsoParams {
            e: 1.0,
            e_a: 3.0,
            nu: 0.3,
            g_a: 1.154,
            axis: [1.0, 0.0],
        }
    }

    fn iso_reduction(e: f64, nu: f64) -> TransIsoParams {
        TransIsoParams {
            e,
            e_a: e,
            nu,
            g_a: e / (2.0 * (1.0 + nu)),
            axis: [1.0, 0.0],
        }
    }

    fn max_diff(a: Sym2<f64>, b: Sym2<f64>) -> f64 {
        let (a, b) = (a.to_array(), b.to_array());
        (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_gradient_gives_zero_stress() {
        let p = IsoParams::new(1.0, 0.3).unwrap();
        let s = linear_isotropic_stress(&[[0.0; 2]; 2], &p).unwrap();
        assert_eq!(s.to_array(), [0.0; 3]);
        let s = transiso_stress(&[[0.0; 2]; 2], &fibre_inclusion()).unwrap();
        assert_eq!(s.to_array(), [0.0; 3]);
    }

    #[test]
    fn uniaxial_strain_example() {
        let p = IsoParams::new(1.0, 0.3).unwrap();
        let (l, m) = p.lame();
        assert!((l - 0.576_923_076_923_077).abs() < 1e-12);
        assert!((m - 0.384_615_384_615_384_6).abs() < 1e-12);
        let s = linear_isotropic_stress(&[[0.01, 0.0], [0.0, 0.0]], &p).unwrap();
        assert!((s.s11 - (l * 0.01 + 2.0 * m * 0.01)).abs() < 1e-15);
        assert!((s.s22 - l * 0.01).abs() < 1e-15);
        assert_eq!(s.s12, 0.0);
    }

    #[test]
    fn rejects_incompressible_poisson_ratio() {
        assert!(matches!(IsoParams::new(1.0, 0.5), Err(Error::InvalidArgument(_))));
        let p = IsoParams { e: 1.0, nu: 0.6 };
        assert!(linear_isotropic_stress(&[[0.0; 2]; 2], &p).is_err());
    }

    #[test]
    fn doubling_modulus_doubles_stress() {
        let g = [[0.01, -0.003], [0.002, -0.004]];
        let s1 = linear_isotropic_stress(&g, &IsoParams::new(1.0, 0.3).unwrap()).unwrap();
        let s2 = linear_isotropic_stress(&g, &IsoParams::new(2.0, 0.3).unwrap()).unwrap();
        for k in 0..3 {
            assert_eq!(s2.to_array()[k], 2.0 * s1.to_array()[k]);
        }
    }

    #[test]
    fn inclusion_constants() {
        let c = transiso_constants(&fibre_inclusion()).unwrap();
        // hand evaluation of the chain for E = 1, E_a = 3, nu = 0.3, G_a = 1.154
        let lambda = 0.57 / 0.208;
        let mu = 1.0 / 2.6;
        let alpha = mu - 1.154;
        let beta = -0.18 / 0.832;
        let gamma = 2.1 / 1.28 - (lambda + 2.0 * mu) / 8.0 + alpha / 2.0 - beta;
        assert_eq!(c.n, 3.0);
        assert!((c.m - 0.16).abs() < 1e-15);
        for (got, want) in [
            (c.lambda, lambda),
            (c.mu, mu),
            (c.alpha, alpha),
            (c.beta, beta),
            (c.gamma, gamma),
        ] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((c.lambda - 2.74038).abs() < 1e-5);
        assert!((c.mu - 0.38462).abs() < 1e-5);
        assert!((c.alpha + 0.76938).abs() < 1e-5);
        assert!((c.beta + 0.21635).abs() < 1e-5);
        assert!((c.gamma - 1.03357).abs() < 1e-5);
    }

    #[test]
    fn isotropic_reduction_constants() {
        let c = transiso_constants(&iso_reduction(1.0, 0.3)).unwrap();
        assert_eq!(c.n, 1.0);
        assert_eq!(c.beta, 0.0);
        assert_eq!(c.alpha, 0.0);
        assert!(c.gamma.abs() < 1e-15);
    }

    #[test]
    fn modulus_ratio_is_scale_invariant() {
        let mut p = fibre_inclusion();
        let n1 = transiso_constants(&p).unwrap().n;
        p.e *= 7.5;
        p.e_a *= 7.5;
        assert_eq!(transiso_constants(&p).unwrap().n, n1);
    }

    #[test]
    fn degenerate_material() {
        // m = 1 - 0.5 - 2 n 0.25 = 0 for n = 1
        let p = TransIsoParams {
            e: 1.0,
            e_a: 1.0,
            nu: 0.5,
            g_a: 1.0,
            axis: [1.0, 0.0],
        };
        assert!(matches!(transiso_constants(&p), Err(Error::DegenerateMaterial(_))));
    }

    #[test]
    fn inverted_state_is_rejected() {
        let g = [[-2.0, 0.0], [0.0, 0.0]];
        assert!(matches!(transiso_stress(&g, &fibre_inclusion()), Err(Error::InvertedElement(_))));
    }

    #[test]
    fn isotropic_reduction_matches_linear_law() {
        let p = iso_reduction(1.0, 0.3);
        let iso = IsoParams::new(1.0, 0.3).unwrap();
        let dir = [[0.6, -0.3], [0.5, -0.55]];
        let norm = (0.36f64 + 0.09 + 0.25 + 0.3025).sqrt();
        let err = |scale: f64| {
            let g = [
                [dir[0][0] * scale, dir[0][1] * scale],
                [dir[1][0] * scale, dir[1][1] * scale],
            ];
            max_diff(transiso_stress(&g, &p).unwrap(), linear_isotropic_stress(&g, &iso).unwrap())
        };
        assert!(err(1e-4 / norm) < 1e-8);
        let mut prev = err(1e-2);
        for k in 1..5 {
            let e = err(1e-2 / 2f64.powi(k));
            let ratio = prev / e;
            assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
            prev = e;
        }
    }

    #[test]
    fn stiff_axis_carries_more_stress() {
        let p = fibre_inclusion();
        let s = transiso_stress(&[[0.01, 0.0], [0.0, 0.0]], &p).unwrap();
        assert!(s.s11 > s.s22);
        // stiffer than the transverse (E = 1) isotropic response
        let iso = linear_isotropic_stress(&[[0.01, 0.0], [0.0, 0.0]], &IsoParams::new(1.0, 0.3).unwrap()).unwrap();
        assert!(s.s11 > iso.s11);
        // stretching across the axis instead gives the weaker response
        let t = transiso_stress(&[[0.0, 0.0], [0.0, 0.01]], &p).unwrap();
        assert!(s.s11 > t.s22);
    }

    #[test]
    fn differentiable_through_tape() {
        let g0 = [[0.012, -0.004], [0.007, -0.009]];
        let e0 = 1.7;
        let c = transiso_constants(&fibre_inclusion()).unwrap();
        // objective: weighted sum of stress components from both laws
        let plain = |g: &Grad2<f64>, e: f64| {
            let a = linear_isotropic_stress_with(g, &e, 0.3);
            let b = transiso_stress_with(g, &c, [1.0, 0.0]);
            a.s11 + 2.0 * a.s12 - 0.5 * a.s22 + b.s11 - 3.0 * b.s12 + 0.7 * b.s22
        };
        let tape = Tape::new();
        let gv: Vec<_> = (0..4).map(|k| tape.param(Tensor::scalar(g0[k / 2][k % 2]))).collect();
        let ev = tape.param(Tensor::scalar(e0));
        let grad = [[gv[0], gv[1]], [gv[2], gv[3]]];
        let a = linear_isotropic_stress_with(&grad, &ev, 0.3);
        let b = transiso_stress_with(&grad, &c, [1.0, 0.0]);
        let obj = a.s11 + a.s12.scale(2.0) - a.s22.scale(0.5) + b.s11 - b.s12.scale(3.0) + b.s22.scale(0.7);
        assert!((obj.item() - plain(&g0, e0)).abs() < 1e-14);
        let grads = tape.backward(obj).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let (i, j) = (k / 2, k % 2);
            let mut gp = g0;
            let mut gm = g0;
            gp[i][j] += h;
            gm[i][j] -= h;
            let fd = (plain(&gp, e0) - plain(&gm, e0)) / (2.0 * h);
            let ad = grads.get(gv[k]).item();
            assert!((ad - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{ad} vs {fd}");
        }
        let fd = (plain(&g0, e0 + h) - plain(&g0, e0 - h)) / (2.0 * h);
        let ad = grads.get(ev).item();
        assert!((ad - fd).abs() <= 1e-5 * fd.abs().max(1.0));
    }

    proptest! {
        #[test]
        fn linear_law_is_linear(
            g1 in prop::array::uniform4(-0.1f64..0.1),
            g2 in prop::array::uniform4(-0.1f64..0.1),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let p = IsoParams::new(1.3, 0.3).unwrap();
            let m = |g: [f64; 4]| [[g[0], g[1]], [g[2], g[3]]];
            let comb = [0, 1, 2, 3].map(|k| a * g1[k] + b * g2[k]);
            let lhs = linear_isotropic_stress(&m(comb), &p).unwrap().to_array();
            let s1 = linear_isotropic_stress(&m(g1), &p).unwrap().to_array();
            let s2 = linear_isotropic_stress(&m(g2), &p).unwrap().to_array();
            for k in 0..3 {
                prop_assert!((lhs[k] - (a * s1[k] + b * s2[k])).abs() < 1e-14);
            }
        }

        #[test]
        fn transiso_invariant_under_axis_flip(
            g in prop::array::uniform4(-0.2f64..0.2),
            theta in 0.0f64..std::f64::consts::PI,
        ) {
            let mut p = fibre_inclusion();
            p.axis = [theta.cos(), theta.sin()];
            let m = [[g[0], g[1]], [g[2], g[3]]];
            let s = transiso_stress(&m, &p).unwrap();
            p.axis = [-p.axis[0], -p.axis[1]];
            let t = transiso_stress(&m, &p).unwrap();
            prop_assert!(max_diff(s, t) < 1e-14);
        }
    }
}
