//! Classical photometric stereo: the per-pixel linear least-squares fit of
//! the scaled normal, with the diffuse albedo recovered as its length.

use nalgebra::{DMatrix, DVector, Dyn, Vector3, SVD};

use crate::error::{PsError, Result};
use crate::types::LightingConfig;

/// Pixels whose solved normal is shorter than this are treated as dark.
pub const DARK_PIXEL_NORM: f64 = 1e-8;

/// Singular values below this fraction of the largest one do not count
/// towards the rank.
const RANK_TOLERANCE: f64 = 1e-10;

/// Stacked light matrix with rows l_k·L_kᵀ, factorised once and shared by
/// every pixel of an image.
#[derive(Debug, Clone)]
pub struct LightMatrix {
    mat: DMatrix<f64>,
    svd: SVD<f64, Dyn, Dyn>,
    rank: usize,
}

/// Builds the m×3 light matrix and checks it is solvable.
pub fn build_light_matrix(lighting: &LightingConfig) -> Result<LightMatrix> {
    LightMatrix::new(lighting)
}

impl LightMatrix {
    pub fn new(lighting: &LightingConfig) -> Result<Self> {
        let m = lighting.len();
        let mat = DMatrix::from_fn(m, 3, |k, j| {
            lighting.diffuse()[k] * lighting.directions()[k][j]
        });
        Self::from_matrix(mat)
    }

    /// Rank check and factorisation of an explicit stacked matrix; used for
    /// per-pixel submatrices when a shadow threshold removes rows.
    pub fn from_matrix(mat: DMatrix<f64>) -> Result<Self> {
        if mat.ncols() != 3 {
            return Err(PsError::Validation(format!(
                "light matrix must have 3 columns, got {}",
                mat.ncols()
            )));
        }
        let svd = mat.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 0.0 && s >= RANK_TOLERANCE * smax)
            .count();
        if rank < 3 {
            return Err(PsError::DegenerateLighting { rank });
        }
        Ok(LightMatrix { mat, svd, rank })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rows(&self) -> usize {
        self.mat.nrows()
    }

    /// Minimum-residual solve of L N = I through the stored factorisation.
    fn lstsq(&self, rhs: &DVector<f64>) -> Vector3<f64> {
        let u = self.svd.u.as_ref().expect("svd computed with u");
        let v_t = self.svd.v_t.as_ref().expect("svd computed with v_t");
        let mut n = Vector3::zeros();
        for i in 0..3 {
            let c = u.column(i).dot(rhs) / self.svd.singular_values[i];
            n += c * Vector3::new(v_t[(i, 0)], v_t[(i, 1)], v_t[(i, 2)]);
        }
        n
    }
}

/// Outcome of a single-pixel classical solve.
#[derive(Debug, Clone, Copy)]
pub struct ClassicalFit {
    /// Solution of the normal equations; its length is the albedo.
    pub scaled_normal: Vector3<f64>,
    pub albedo: f64,
    /// Unit normal, or (0,0,1) for dark pixels.
    pub unit_normal: Vector3<f64>,
    /// Set when the scaled normal is too short to orient; callers mark the
    /// pixel as skipped.
    pub dark: bool,
}

/// Solves min_N ‖L N − I‖² for one pixel.
pub fn solve_classical_ps(lmat: &LightMatrix, intensities: &DVector<f64>) -> Result<ClassicalFit> {
    if intensities.len() != lmat.rows() {
        return Err(PsError::Validation(format!(
            "{} intensities for a {}-row light matrix",
            intensities.len(),
            lmat.rows()
        )));
    }
    if !intensities.iter().all(|v| v.is_finite()) {
        return Err(PsError::Validation(
            "observed intensities must be finite".into(),
        ));
    }
    let n = lmat.lstsq(intensities);
    let albedo = n.norm();
    if albedo <= DARK_PIXEL_NORM {
        Ok(ClassicalFit {
            scaled_normal: n,
            albedo,
            unit_normal: Vector3::new(0.0, 0.0, 1.0),
            dark: true,
        })
    } else {
        Ok(ClassicalFit {
            scaled_normal: n,
            albedo,
            unit_normal: n / albedo,
            dark: false,
        })
    }
}
