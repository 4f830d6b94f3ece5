//! Synthetic sphere rendering under the specular forward model, seeded
//! Gaussian noise, the average angular error metric and normal color coding.

use nalgebra::{DVector, Vector3};
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::blinn_phong::{bp_reflectance, halfway_vectors, BpPixelProblem};
use crate::error::{PsError, Result};
use crate::types::{
    pixel_coordinates, Dataset, GrayImage, LightingConfig, Mask, PixelUnknowns, ProjectionModel,
};

/// Identifier of the noise generator, recorded in run reports so seeds stay
/// portable: one ChaCha12 stream per sample index, Box-Muller transform.
pub const NOISE_RNG_ALGORITHM: &str = "chacha12-stream-per-sample-box-muller";

/// Orthographic sphere scene with constant material.
#[derive(Debug, Clone)]
pub struct SphereScene {
    pub image_size: usize,
    pub radius_fraction: f64,
    pub rho_d: f64,
    pub rho_s: f64,
    pub alpha: f64,
    pub lighting: LightingConfig,
    pub sigma: f64,
    pub seed: u64,
}

/// Five lights tilted at most 30° from the view axis, at uneven azimuths so
/// the highlights are not perfectly symmetric.
pub fn default_sphere_lighting() -> LightingConfig {
    let tilt = 30.0f64.to_radians();
    let mut dirs = vec![Vector3::new(0.0, 0.0, 1.0)];
    for az_deg in [10.0f64, 100.0, 190.0, 280.0] {
        let az = az_deg.to_radians();
        dirs.push(Vector3::new(
            tilt.sin() * az.cos(),
            tilt.sin() * az.sin(),
            tilt.cos(),
        ));
    }
    LightingConfig::uniform(dirs, 1.0).expect("static lighting is valid")
}

impl SphereScene {
    /// Default synthetic test scene: tight visible highlights that do not
    /// saturate (peak intensity 1.0), over a bright diffuse base. The sharp
    /// lobe keeps most observations specular-free per pixel, which is what
    /// makes the five-image fit statistically workable.
    pub fn standard() -> Self {
        SphereScene {
            image_size: 128,
            radius_fraction: 0.9,
            rho_d: 0.85,
            rho_s: 0.15,
            alpha: 100.0,
            lighting: default_sphere_lighting(),
            sigma: 0.005,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(PsError::Validation("image_size must be > 0".into()));
        }
        if !(self.radius_fraction > 0.0 && self.radius_fraction <= 1.0) {
            return Err(PsError::Validation(format!(
                "radius_fraction must lie in (0,1], got {}",
                self.radius_fraction
            )));
        }
        if !(self.rho_d > 0.0 && self.rho_d <= 1.0) {
            return Err(PsError::Validation(format!(
                "rho_d must lie in (0,1], got {}",
                self.rho_d
            )));
        }
        if !(self.rho_s >= 0.0 && self.rho_s <= 1.0) {
            return Err(PsError::Validation(format!(
                "rho_s must lie in [0,1], got {}",
                self.rho_s
            )));
        }
        if !(self.alpha > 1.0) {
            return Err(PsError::Validation(format!(
                "alpha must be > 1, got {}",
                self.alpha
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(PsError::Validation(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Auxiliary specular coefficient of the (N, r, a) parametrisation.
    pub fn r_coefficient(&self) -> f64 {
        self.rho_s / self.rho_d.powf(self.alpha)
    }

    pub fn log_shininess(&self) -> f64 {
        (self.alpha - 1.0).ln()
    }
}

/// Constant-material ground truth over the rendered disk.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub normals: Vec<Vector3<f64>>,
    pub mask: Mask,
    pub rho_d: f64,
    pub rho_s: f64,
    pub alpha: f64,
}

/// Outward unit normal of the sphere at centered coordinates, if inside.
pub fn sphere_normal(x: f64, y: f64, radius: f64) -> Option<Vector3<f64>> {
    let rr = x * x + y * y;
    let r2 = radius * radius;
    if rr <= r2 {
        Some(Vector3::new(
            x / radius,
            y / radius,
            (1.0 - rr / r2).max(0.0).sqrt(),
        ))
    } else {
        None
    }
}

/// Renders the scene and returns the dataset together with its ground truth.
///
/// Pixel values are the plain forward-model intensities plus noise; they are
/// intentionally left unclamped in memory. The disk is the object mask.
pub fn render_sphere(scene: &SphereScene) -> Result<(Dataset, GroundTruth)> {
    scene.validate()?;
    let size = scene.image_size;
    let radius = scene.radius_fraction * size as f64 / 2.0;
    let projection = ProjectionModel::orthographic(size, size);
    let m = scene.lighting.len();

    let halfways = halfway_vectors(&scene.lighting, &Vector3::new(0.0, 0.0, 1.0))?;
    let prob = BpPixelProblem::new(&scene.lighting, halfways, DVector::zeros(m))?;
    let r = scene.r_coefficient();
    let a = scene.log_shininess();

    let mut images = vec![GrayImage::zeros(size, size); m];
    let mut mask = Mask::filled(size, size, false);
    let mut normals = vec![Vector3::zeros(); size * size];

    for row in 0..size {
        for col in 0..size {
            let (x, y) = pixel_coordinates(row, col, &projection);
            if let Some(n) = sphere_normal(x, y, radius) {
                mask.set(row, col, true);
                normals[row * size + col] = n;
                let unknowns = PixelUnknowns::new(scene.rho_d * n, r, a);
                let predicted = bp_reflectance(&unknowns, &prob);
                for k in 0..m {
                    images[k].set(row, col, predicted[k]);
                }
            }
        }
    }

    add_gaussian_noise(&mut images, scene.sigma, scene.seed)?;

    let truth = GroundTruth {
        normals,
        mask: mask.clone(),
        rho_d: scene.rho_d,
        rho_s: scene.rho_s,
        alpha: scene.alpha,
    };
    let ds = Dataset::new(images, mask, scene.lighting.clone(), projection)?;
    Ok((ds, truth))
}

/// One standard normal draw keyed by (seed, sample index). Keyed generation
/// makes the noise field independent of evaluation order.
fn keyed_normal(seed: u64, sample: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Adds IID N(0, σ²) noise to every sample of every image. σ = 0 leaves the
/// images bit-identical.
pub fn add_gaussian_noise(images: &mut [GrayImage], sigma: f64, seed: u64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(PsError::InvalidArgument(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    for (k, img) in images.iter_mut().enumerate() {
        let (w, h) = (img.width(), img.height());
        let base = (k * w * h) as u64;
        for row in 0..h {
            for col in 0..w {
                let z = keyed_normal(seed, base + (row * w + col) as u64);
                let v = img.get(row, col) + sigma * z;
                img.set(row, col, v);
            }
        }
    }
    Ok(())
}

/// Mean angular error in degrees over the mask: arccos(clamp(estᵀgt, −1, 1)).
pub fn aae(est: &[Vector3<f64>], gt: &[Vector3<f64>], mask: &Mask) -> Result<f64> {
    let n = mask.width() * mask.height();
    if est.len() != n || gt.len() != n {
        return Err(PsError::Validation(format!(
            "normal fields ({}, {}) do not match mask size {n}",
            est.len(),
            gt.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (row, col) in mask.iter_set() {
        let i = row * mask.width() + col;
        let dot = est[i].dot(&gt[i]).clamp(-1.0, 1.0);
        sum += dot.acos();
        count += 1;
    }
    if count == 0 {
        return Err(PsError::EmptyMask);
    }
    Ok((sum / count as f64).to_degrees())
}

/// RGB = (n + 1)/2 channel-wise on the mask, black outside.
pub fn colorize_normals(normals: &[Vector3<f64>], mask: &Mask) -> image::RgbImage {
    let (w, h) = (mask.width(), mask.height());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let color = if mask.get(row, col) {
                let n = normals[row * w + col];
                [
                    (255.0 * (n.x + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8,
                    (255.0 * (n.y + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8,
                    (255.0 * (n.z + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8,
                ]
            } else {
                [0, 0, 0]
            };
            img.put_pixel(col as u32, row as u32, image::Rgb(color));
        }
    }
    img
}
