//! Blinn-Phong forward reflectance in the scaled-normal parametrisation
//! (N, r, a) and its analytic Jacobian.
//!
//! The per-light component is l_k·L_kᵀN + r·h_k·max{0, 𝓗_kᵀN}^(1+exp(a)).
//! Carrying the albedo inside N and writing the shininess as 1 + exp(a)
//! keeps the model continuously differentiable, including across the
//! clamp at 𝓗_kᵀN = 0.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{PsError, Result};
use crate::rlm::RlmProblem;
use crate::types::{LightingConfig, PixelUnknowns, ProjectionMode, ProjectionModel};

/// Unit view direction at centered pixel coordinates (x, y).
///
/// Orthographic cameras look along (0,0,1) everywhere. Perspective cameras
/// use (x, y, f), normalised by default; `raw_view` keeps the unnormalised
/// vector, which makes the halfway construction depend on the pixel units.
pub fn view_direction(
    projection: &ProjectionModel,
    xy: (f64, f64),
    raw_view: bool,
) -> Vector3<f64> {
    match projection.mode {
        ProjectionMode::Orthographic => Vector3::new(0.0, 0.0, 1.0),
        ProjectionMode::Perspective => {
            let v = Vector3::new(xy.0, xy.1, projection.focal_length_px);
            if raw_view {
                v
            } else {
                v.normalize()
            }
        }
    }
}

/// Unit halfway vectors (L_k + v)/‖L_k + v‖, one per light, fixed per pixel.
#[derive(Debug, Clone)]
pub struct HalfwaySet {
    h: Vec<Vector3<f64>>,
}

impl HalfwaySet {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn vectors(&self) -> &[Vector3<f64>] {
        &self.h
    }
}

pub fn halfway_vectors(lighting: &LightingConfig, view: &Vector3<f64>) -> Result<HalfwaySet> {
    let mut h = Vec::with_capacity(lighting.len());
    for (k, light) in lighting.directions().iter().enumerate() {
        let sum = light + view;
        let norm = sum.norm();
        if norm < 1e-12 {
            return Err(PsError::DegenerateHalfway { index: k });
        }
        h.push(sum / norm);
    }
    Ok(HalfwaySet { h })
}

/// One pixel's nonlinear fitting problem: lighting, halfway vectors and the
/// observed intensity stack.
#[derive(Debug, Clone)]
pub struct BpPixelProblem<'a> {
    lighting: &'a LightingConfig,
    halfways: HalfwaySet,
    y_delta: DVector<f64>,
}

impl<'a> BpPixelProblem<'a> {
    pub fn new(
        lighting: &'a LightingConfig,
        halfways: HalfwaySet,
        y_delta: DVector<f64>,
    ) -> Result<Self> {
        let m = lighting.len();
        if halfways.len() != m || y_delta.len() != m {
            return Err(PsError::Validation(format!(
                "inconsistent pixel problem: {m} lights, {} halfways, {} observations",
                halfways.len(),
                y_delta.len()
            )));
        }
        Ok(BpPixelProblem {
            lighting,
            halfways,
            y_delta,
        })
    }

    pub fn lighting(&self) -> &LightingConfig {
        self.lighting
    }

    pub fn halfways(&self) -> &HalfwaySet {
        &self.halfways
    }

    pub fn observations(&self) -> &DVector<f64> {
        &self.y_delta
    }

    pub fn num_lights(&self) -> usize {
        self.lighting.len()
    }
}

impl RlmProblem for BpPixelProblem<'_> {
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        bp_reflectance(&PixelUnknowns::from_vector(x), self)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        bp_jacobian(&PixelUnknowns::from_vector(x), self)
    }

    fn observed(&self) -> &DVector<f64> {
        &self.y_delta
    }
}

/// Forward model: predicted intensities for all m lights.
pub fn bp_reflectance(x: &PixelUnknowns, prob: &BpPixelProblem<'_>) -> DVector<f64> {
    let alpha = x.shininess();
    let dirs = prob.lighting.directions();
    let diffuse = prob.lighting.diffuse();
    let specular = prob.lighting.specular();
    let halfways = prob.halfways.vectors();
    DVector::from_fn(prob.num_lights(), |k, _| {
        let lambertian = diffuse[k] * dirs[k].dot(&x.n);
        let s = halfways[k].dot(&x.n).max(0.0);
        if s > 0.0 {
            lambertian + x.r * specular[k] * s.powf(alpha)
        } else {
            lambertian
        }
    })
}

/// Analytic m×5 Jacobian with columns (∂N₁, ∂N₂, ∂N₃, ∂r, ∂a).
///
/// With s_k = max{0, 𝓗_kᵀN} and α = 1 + exp(a):
///   ∂/∂N = l_k L_k + r h_k α s_kᵅ⁻¹ 𝓗_k,
///   ∂/∂r = h_k s_kᵅ,
///   ∂/∂a = r h_k exp(a) s_kᵅ ln s_k.
/// Every specular contribution is taken as its limit 0 at s_k = 0; the
/// a-column in particular branches instead of evaluating ln(0).
pub fn bp_jacobian(x: &PixelUnknowns, prob: &BpPixelProblem<'_>) -> DMatrix<f64> {
    let alpha = x.shininess();
    let exp_a = x.a.exp();
    let dirs = prob.lighting.directions();
    let diffuse = prob.lighting.diffuse();
    let specular = prob.lighting.specular();
    let halfways = prob.halfways.vectors();
    let m = prob.num_lights();
    let mut jac = DMatrix::zeros(m, 5);
    for k in 0..m {
        let l = dirs[k];
        jac[(k, 0)] = diffuse[k] * l.x;
        jac[(k, 1)] = diffuse[k] * l.y;
        jac[(k, 2)] = diffuse[k] * l.z;
        let h = halfways[k];
        let s = h.dot(&x.n).max(0.0);
        if s > 0.0 {
            let s_pow_am1 = s.powf(alpha - 1.0);
            let s_pow_a = s_pow_am1 * s;
            let coeff = x.r * specular[k] * alpha * s_pow_am1;
            jac[(k, 0)] += coeff * h.x;
            jac[(k, 1)] += coeff * h.y;
            jac[(k, 2)] += coeff * h.z;
            jac[(k, 3)] = specular[k] * s_pow_a;
            jac[(k, 4)] = x.r * specular[k] * exp_a * s_pow_a * s.ln();
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use proptest::prelude::*;

    use super::*;
    use crate::lambertian::build_light_matrix;

    fn unit(v: Vector3<f64>) -> Vector3<f64> {
        v.normalize()
    }

    fn tilted_lights() -> LightingConfig {
        LightingConfig::uniform(
            vec![
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(0.3, 0.0, 1.0),
                Vector3::new(-0.3, 0.1, 1.0),
                Vector3::new(0.0, -0.35, 1.0),
                Vector3::new(0.2, 0.25, 1.0),
            ],
            1.0,
        )
        .unwrap()
    }

    fn ortho() -> ProjectionModel {
        ProjectionModel::orthographic(8, 8)
    }

    #[test]
    fn orthographic_view_is_z() {
        assert_eq!(
            view_direction(&ortho(), (37.0, -12.0), false),
            Vector3::new(0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn perspective_view_on_and_off_axis() {
        let proj = ProjectionModel::perspective(100.0, 8, 8).unwrap();
        let on_axis = view_direction(&proj, (0.0, 0.0), false);
        assert!((on_axis - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        let off = view_direction(&proj, (100.0, 0.0), false);
        let expected = Vector3::new(1.0, 0.0, 1.0) / 2.0f64.sqrt();
        assert!((off - expected).norm() < 1e-15);
        let raw = view_direction(&proj, (100.0, 0.0), true);
        assert_eq!(raw, Vector3::new(100.0, 0.0, 100.0));
    }

    #[test]
    fn halfway_basic_and_degenerate() {
        let view = Vector3::new(0.0, 0.0, 1.0);
        let lighting =
            LightingConfig::uniform(vec![Vector3::z(), Vector3::x(), Vector3::y()], 1.0).unwrap();
        let hs = halfway_vectors(&lighting, &view).unwrap();
        assert!((hs.vectors()[0] - Vector3::z()).norm() < 1e-15);
        let expected = Vector3::new(1.0, 0.0, 1.0) / 2.0f64.sqrt();
        assert!((hs.vectors()[1] - expected).norm() < 1e-15);

        let opposing = LightingConfig::uniform(
            vec![Vector3::new(0.0, 0.0, -1.0), Vector3::x(), Vector3::y()],
            1.0,
        )
        .unwrap();
        assert!(matches!(
            halfway_vectors(&opposing, &view),
            Err(PsError::DegenerateHalfway { index: 0 })
        ));
    }

    fn problem<'a>(lighting: &'a LightingConfig, y: DVector<f64>) -> BpPixelProblem<'a> {
        let hs = halfway_vectors(lighting, &Vector3::z()).unwrap();
        BpPixelProblem::new(lighting, hs, y).unwrap()
    }

    #[test]
    fn pure_lambertian_when_r_zero() {
        let lighting = tilted_lights();
        let prob = problem(&lighting, DVector::zeros(5));
        let x = PixelUnknowns::new(Vector3::z(), 0.0, 0.0);
        let pred = bp_reflectance(&x, &prob);
        assert!((pred[0] - 1.0).abs() < 1e-15);
        let lmat = build_light_matrix(&lighting).unwrap();
        let lambertian = lmat.matrix() * x.n;
        assert_eq!(pred, lambertian);
    }

    #[test]
    fn hand_computed_specular_value() {
        // N = L = v = z, l = h = 1, r = 0.5, a = 0 so alpha = 2: 1 + 0.5·1² = 1.5
        let lighting =
            LightingConfig::uniform(vec![Vector3::z(), Vector3::x(), Vector3::y()], 1.0).unwrap();
        let prob = problem(&lighting, DVector::zeros(3));
        let x = PixelUnknowns::new(Vector3::z(), 0.5, 0.0);
        let pred = bp_reflectance(&x, &prob);
        assert!((pred[0] - 1.5).abs() < 1e-15, "pred = {}", pred[0]);
    }

    #[test]
    fn backfacing_halfway_clamps_to_diffuse() {
        let lighting = tilted_lights();
        let prob = problem(&lighting, DVector::zeros(5));
        // normal pointing away from every halfway vector
        let x = PixelUnknowns::new(Vector3::new(0.0, 0.0, -1.0), 0.7, 1.0);
        let pred = bp_reflectance(&x, &prob);
        let lmat = build_light_matrix(&lighting).unwrap();
        let lambertian = lmat.matrix() * x.n;
        assert_eq!(pred, lambertian);
        let jac = bp_jacobian(&x, &prob);
        for k in 0..5 {
            assert_eq!(jac[(k, 3)], 0.0);
            assert_eq!(jac[(k, 4)], 0.0);
        }
    }

    #[test]
    fn jacobian_r_zero_matches_light_matrix() {
        let lighting = tilted_lights();
        let prob = problem(&lighting, DVector::zeros(5));
        let x = PixelUnknowns::new(unit(Vector3::new(0.1, 0.2, 1.0)) * 0.8, 0.0, 0.5);
        let jac = bp_jacobian(&x, &prob);
        let lmat = build_light_matrix(&lighting).unwrap();
        for k in 0..5 {
            for j in 0..3 {
                assert!((jac[(k, j)] - lmat.matrix()[(k, j)]).abs() < 1e-15);
            }
            assert_eq!(jac[(k, 4)], 0.0, "a-column must vanish at r = 0");
            assert!(jac[(k, 3)] > 0.0, "r-column stays live for s > 0");
        }
    }

    /// Central finite differences of the forward model, step 1e-6.
    fn fd_jacobian(x: &PixelUnknowns, prob: &BpPixelProblem<'_>) -> DMatrix<f64> {
        let h = 1e-6;
        let x0 = x.to_vector();
        let m = prob.num_lights();
        let mut jac = DMatrix::zeros(m, 5);
        for j in 0..5 {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = bp_reflectance(&PixelUnknowns::from_vector(&plus), prob);
            let fm = bp_reflectance(&PixelUnknowns::from_vector(&minus), prob);
            for k in 0..m {
                jac[(k, j)] = (fp[k] - fm[k]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences_at_interior_point() {
        let lighting = tilted_lights();
        let prob = problem(&lighting, DVector::zeros(5));
        let x = PixelUnknowns::new(unit(Vector3::new(0.15, -0.1, 1.0)) * 0.75, 0.4, 1.2);
        for h in prob.halfways().vectors() {
            assert!(h.dot(&x.n) > 0.1, "interior point requirement");
        }
        let analytic = bp_jacobian(&x, &prob);
        let numeric = fd_jacobian(&x, &prob);
        let rel = (&analytic - &numeric).norm() / analytic.norm();
        assert!(rel <= 1e-6, "relative error {rel}");
    }

    #[test]
    fn clamp_boundary_is_continuous() {
        // s = 1e-8: specular value and the r/a sensitivities must be far
        // below 1e-6 for alpha >= 1.5; the N-column contribution decays
        // like s^(alpha-1) and needs alpha >= 2 to pass the same bound.
        let lighting =
            LightingConfig::uniform(vec![Vector3::z(), Vector3::x(), Vector3::y()], 1.0).unwrap();
        let hs = halfway_vectors(&lighting, &Vector3::z()).unwrap();
        let prob = BpPixelProblem::new(&lighting, hs, DVector::zeros(3)).unwrap();
        let s = 1e-8f64;
        for alpha in [1.5, 2.0, 5.0, 20.0] {
            let a = (alpha - 1.0f64).ln();
            // normal tilted so that H₀ᵀN = s exactly, others negative
            let n = Vector3::new(-(1.0 - s * s).sqrt(), 0.0, s);
            let x = PixelUnknowns::new(n, 1.0, a);
            let value = bp_reflectance(&x, &prob)[0] - 1.0 * Vector3::z().dot(&n);
            assert!(value.abs() < 1e-6, "alpha {alpha}: specular {value}");
            let jac = bp_jacobian(&x, &prob);
            assert!(
                jac[(0, 3)].abs() < 1e-6,
                "alpha {alpha}: dr {}",
                jac[(0, 3)]
            );
            assert!(
                jac[(0, 4)].abs() < 1e-6,
                "alpha {alpha}: da {}",
                jac[(0, 4)]
            );
            if alpha >= 2.0 {
                let spec_n = jac[(0, 2)] - 1.0;
                assert!(spec_n.abs() < 1e-6, "alpha {alpha}: dNz {spec_n}");
            }
        }
    }

    proptest! {
        #[test]
        fn jacobian_finite_difference_property(
            nx in -0.25f64..0.25, ny in -0.25f64..0.25,
            albedo in 0.4f64..1.0,
            r in 0.05f64..1.0,
            a in -0.7f64..2.5,
        ) {
            let lighting = tilted_lights();
            let prob = problem(&lighting, DVector::zeros(5));
            let x = PixelUnknowns::new(unit(Vector3::new(nx, ny, 1.0)) * albedo, r, a);
            prop_assume!(prob.halfways().vectors().iter().all(|h| h.dot(&x.n) >= 0.1));
            let analytic = bp_jacobian(&x, &prob);
            let numeric = fd_jacobian(&x, &prob);
            let rel = (&analytic - &numeric).norm() / analytic.norm();
            prop_assert!(rel <= 1e-5, "relative error {}", rel);
        }

        #[test]
        fn nondecreasing_in_r(
            r1 in 0.0f64..1.0,
            dr in 0.0f64..1.0,
            a in -1.0f64..2.0,
        ) {
            let lighting = tilted_lights();
            let prob = problem(&lighting, DVector::zeros(5));
            let n = unit(Vector3::new(0.1, 0.05, 1.0)) * 0.8;
            let lo = bp_reflectance(&PixelUnknowns::new(n, r1, a), &prob);
            let hi = bp_reflectance(&PixelUnknowns::new(n, r1 + dr, a), &prob);
            for k in 0..5 {
                prop_assert!(hi[k] >= lo[k] - 1e-12);
            }
        }
    }
}
