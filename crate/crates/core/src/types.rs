//! Domain data model shared by all solvers: lighting, projection,
//! image buffers, per-pixel unknowns and result maps.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector3};

use crate::error::{PsError, Result};

/// Tolerance below which a loaded light direction counts as already unit.
const UNIT_TOLERANCE: f64 = 1e-12;

/// Calibrated lighting: unit directions with per-light diffuse and specular
/// intensities.
#[derive(Debug, Clone)]
pub struct LightingConfig {
    directions: Vec<Vector3<f64>>,
    diffuse: Vec<f64>,
    specular: Vec<f64>,
}

impl LightingConfig {
    /// Builds a lighting configuration, normalising directions to unit length.
    ///
    /// A warning is logged for any direction whose norm deviates from 1 by
    /// more than 1e-12 before normalisation.
    pub fn new(
        directions: Vec<Vector3<f64>>,
        diffuse: Vec<f64>,
        specular: Vec<f64>,
    ) -> Result<Self> {
        let m = directions.len();
        if m < 3 {
            return Err(PsError::Validation(format!(
                "m >= 3 required: got {m} light directions"
            )));
        }
        if diffuse.len() != m || specular.len() != m {
            return Err(PsError::Validation(format!(
                "lighting arrays disagree: {m} directions, {} diffuse, {} specular",
                diffuse.len(),
                specular.len()
            )));
        }
        let mut unit = Vec::with_capacity(m);
        for (k, dir) in directions.into_iter().enumerate() {
            if !dir.iter().all(|v| v.is_finite()) {
                return Err(PsError::Validation(format!(
                    "light direction {k} is not finite"
                )));
            }
            let norm = dir.norm();
            if norm == 0.0 {
                return Err(PsError::Validation(format!("light direction {k} is zero")));
            }
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                log::warn!("light direction {k} has norm {norm}; normalising");
            }
            unit.push(dir / norm);
        }
        for (k, &l) in diffuse.iter().enumerate() {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(PsError::Validation(format!(
                    "diffuse intensity {k} must be >= 0, got {l}"
                )));
            }
        }
        for (k, &h) in specular.iter().enumerate() {
            if !(h >= 0.0) || !h.is_finite() {
                return Err(PsError::Validation(format!(
                    "specular intensity {k} must be >= 0, got {h}"
                )));
            }
        }
        Ok(LightingConfig {
            directions: unit,
            diffuse,
            specular,
        })
    }

    /// Same diffuse and specular intensity for every light.
    pub fn uniform(directions: Vec<Vector3<f64>>, intensity: f64) -> Result<Self> {
        let m = directions.len();
        LightingConfig::new(directions, vec![intensity; m], vec![intensity; m])
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vector3<f64>] {
        &self.directions
    }

    pub fn diffuse(&self) -> &[f64] {
        &self.diffuse
    }

    pub fn specular(&self) -> &[f64] {
        &self.specular
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    Orthographic,
    Perspective,
}

/// Camera projection. The focal length is only meaningful in perspective
/// mode; the principal point is stored as (x = column, y = row) pixels.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionModel {
    pub mode: ProjectionMode,
    pub focal_length_px: f64,
    pub principal_point: [f64; 2],
}

impl ProjectionModel {
    pub fn orthographic(width: usize, height: usize) -> Self {
        ProjectionModel {
            mode: ProjectionMode::Orthographic,
            focal_length_px: 1.0,
            principal_point: Self::image_center(width, height),
        }
    }

    pub fn perspective(focal_length_px: f64, width: usize, height: usize) -> Result<Self> {
        let model = ProjectionModel {
            mode: ProjectionMode::Perspective,
            focal_length_px,
            principal_point: Self::image_center(width, height),
        };
        model.validate()?;
        Ok(model)
    }

    /// Pixel-center convention: a width-W row has centers 0..W-1, so the
    /// geometric center sits at (W-1)/2.
    pub fn image_center(width: usize, height: usize) -> [f64; 2] {
        [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ProjectionMode::Perspective
            && !(self.focal_length_px > 0.0 && self.focal_length_px.is_finite())
        {
            return Err(PsError::Validation(format!(
                "focal length must be > 0 in perspective mode, got {}",
                self.focal_length_px
            )));
        }
        Ok(())
    }

    /// Projection for the next-coarser pyramid level (half resolution).
    pub fn halved(&self) -> Self {
        ProjectionModel {
            mode: self.mode,
            focal_length_px: self.focal_length_px / 2.0,
            principal_point: [self.principal_point[0] / 2.0, self.principal_point[1] / 2.0],
        }
    }
}

/// Centered pixel coordinates in pixels, with y increasing upward so that
/// normals with positive z face the camera.
pub fn pixel_coordinates(row: usize, col: usize, projection: &ProjectionModel) -> (f64, f64) {
    let [cx, cy] = projection.principal_point;
    (col as f64 - cx, cy - row as f64)
}

/// Row-major grayscale image with f64 samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(PsError::Validation(format!(
                "image buffer has {} samples, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Boolean object-domain mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(PsError::Validation(format!(
                "mask buffer has {} samples, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Row-major iteration over in-mask pixel coordinates.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let width = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / width, i % width))
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }
}

/// A calibrated multi-illumination capture: m grayscale images over a shared
/// object mask, with known lighting and projection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    pub mask: Mask,
    pub lighting: LightingConfig,
    pub projection: ProjectionModel,
}

impl Dataset {
    pub fn new(
        images: Vec<GrayImage>,
        mask: Mask,
        lighting: LightingConfig,
        projection: ProjectionModel,
    ) -> Result<Self> {
        if images.len() < 3 {
            return Err(PsError::Validation(format!(
                "m >= 3 required: got {} images",
                images.len()
            )));
        }
        if images.len() != lighting.len() {
            return Err(PsError::Validation(format!(
                "{} images but {} lights",
                images.len(),
                lighting.len()
            )));
        }
        let (w, h) = (images[0].width(), images[0].height());
        for (k, img) in images.iter().enumerate() {
            if img.width() != w || img.height() != h {
                return Err(PsError::Validation(format!(
                    "image {k} is {}x{}, expected {w}x{h}",
                    img.width(),
                    img.height()
                )));
            }
            if !img.as_slice().iter().all(|v| v.is_finite()) {
                return Err(PsError::Validation(format!(
                    "image {k} contains non-finite samples"
                )));
            }
        }
        if mask.width() != w || mask.height() != h {
            return Err(PsError::Validation(format!(
                "mask is {}x{}, expected {w}x{h}",
                mask.width(),
                mask.height()
            )));
        }
        if mask.count_set() == 0 {
            return Err(PsError::EmptyMask);
        }
        projection.validate()?;
        Ok(Dataset {
            images,
            mask,
            lighting,
            projection,
        })
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    /// Stacked observed intensities at one pixel.
    pub fn intensities_at(&self, row: usize, col: usize) -> DVector<f64> {
        DVector::from_fn(self.images.len(), |k, _| self.images[k].get(row, col))
    }
}

/// Per-pixel unknowns of the specular model: the scaled normal N (its length
/// carries the diffuse albedo), the auxiliary specular coefficient r and the
/// log-shininess a with shininess 1 + exp(a).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelUnknowns {
    pub n: Vector3<f64>,
    pub r: f64,
    pub a: f64,
}

impl PixelUnknowns {
    pub fn new(n: Vector3<f64>, r: f64, a: f64) -> Self {
        PixelUnknowns { n, r, a }
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        assert_eq!(x.len(), 5, "pixel unknowns are a 5-vector");
        PixelUnknowns {
            n: Vector3::new(x[0], x[1], x[2]),
            r: x[3],
            a: x[4],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.n.x, self.n.y, self.n.z, self.r, self.a])
    }

    /// Shininess implied by the log parametrisation; always > 1.
    pub fn shininess(&self) -> f64 {
        1.0 + self.a.exp()
    }

    /// Diffuse albedo carried as the length of the scaled normal.
    pub fn albedo(&self) -> f64 {
        self.n.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.n.iter().all(|v| v.is_finite()) && self.r.is_finite() && self.a.is_finite()
    }
}

/// Per-pixel termination state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PixelStatus {
    Converged,
    ScherzerBreak,
    MaxIters,
    Stalled,
    Skipped,
}

impl PixelStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            PixelStatus::Converged => "converged",
            PixelStatus::ScherzerBreak => "scherzer_break",
            PixelStatus::MaxIters => "max_iters",
            PixelStatus::Stalled => "stalled",
            PixelStatus::Skipped => "skipped",
        }
    }
}

/// Dense per-pixel output maps. Status is `Some` exactly on the object
/// domain; out-of-mask entries keep their zero initialisation.
#[derive(Debug, Clone)]
pub struct NormalMapResult {
    width: usize,
    height: usize,
    pub normals: Vec<Vector3<f64>>,
    pub albedo: Vec<f64>,
    pub r_map: Option<Vec<f64>>,
    pub alpha_map: Option<Vec<f64>>,
    pub status: Vec<Option<PixelStatus>>,
    pub residual: Vec<f64>,
}

impl NormalMapResult {
    pub fn empty(width: usize, height: usize, with_material: bool) -> Self {
        let n = width * height;
        NormalMapResult {
            width,
            height,
            normals: vec![Vector3::zeros(); n],
            albedo: vec![0.0; n],
            r_map: with_material.then(|| vec![0.0; n]),
            alpha_map: with_material.then(|| vec![0.0; n]),
            status: vec![None; n],
            residual: vec![0.0; n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn status_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for status in self.status.iter().flatten() {
            *counts.entry(status.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Mask of pixels that hold a solve status.
    pub fn solved_mask(&self) -> Mask {
        let data = self.status.iter().map(|s| s.is_some()).collect();
        Mask::from_vec(self.width, self.height, data).expect("status buffer matches dims")
    }
}

/// Per-pixel parameter field used to seed a solve, `Some` on its mask.
#[derive(Debug, Clone)]
pub struct ParamMap {
    width: usize,
    height: usize,
    pub data: Vec<Option<PixelUnknowns>>,
}

impl ParamMap {
    pub fn empty(width: usize, height: usize) -> Self {
        ParamMap {
            width,
            height,
            data: vec![None; width * height],
        }
    }

    /// Parameter field from a result's maps. Missing material maps fall back
    /// to the given defaults; the scaled normal is rebuilt as albedo times
    /// the unit normal.
    pub fn from_result(result: &NormalMapResult, default_r: f64, default_alpha: f64) -> Self {
        let n = result.normals.len();
        let mut data = vec![None; n];
        for i in 0..n {
            if result.status[i].is_some() {
                let r = result.r_map.as_ref().map_or(default_r, |m| m[i]);
                let alpha = result.alpha_map.as_ref().map_or(default_alpha, |m| m[i]);
                let a = (alpha - 1.0).max(f64::MIN_POSITIVE).ln();
                data[i] = Some(PixelUnknowns::new(
                    result.normals[i] * result.albedo[i],
                    r,
                    a,
                ));
            }
        }
        ParamMap {
            width: result.width(),
            height: result.height(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<PixelUnknowns> {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: PixelUnknowns) {
        self.data[row * self.width + col] = Some(value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_lights() -> Vec<Vector3<f64>> {
        vec![Vector3::x(), Vector3::y(), Vector3::z()]
    }

    #[test]
    fn lighting_normalises_directions() {
        let lighting = LightingConfig::uniform(
            vec![Vector3::new(0.0, 0.0, 2.0), Vector3::x(), Vector3::y()],
            1.0,
        )
        .unwrap();
        assert_eq!(lighting.directions()[0], Vector3::new(0.0, 0.0, 1.0));
        for dir in lighting.directions() {
            assert!((dir.norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lighting_rejects_fewer_than_three() {
        let err = LightingConfig::uniform(vec![Vector3::x(), Vector3::y()], 1.0).unwrap_err();
        assert!(err.to_string().contains("m >= 3 required"), "{err}");
    }

    #[test]
    fn lighting_rejects_negative_intensity() {
        let err =
            LightingConfig::new(axis_lights(), vec![1.0, -0.5, 1.0], vec![1.0; 3]).unwrap_err();
        assert!(err.to_string().contains(">= 0"), "{err}");
    }

    #[test]
    fn pixel_coordinates_center_and_axes() {
        let proj = ProjectionModel::orthographic(5, 5);
        // principal point at (2, 2)
        assert_eq!(pixel_coordinates(2, 2, &proj), (0.0, 0.0));
        assert_eq!(pixel_coordinates(2, 3, &proj), (1.0, 0.0));
        // one row above the center has a larger y
        assert_eq!(pixel_coordinates(1, 2, &proj), (0.0, 1.0));
    }

    #[test]
    fn perspective_requires_positive_focal() {
        assert!(ProjectionModel::perspective(0.0, 4, 4).is_err());
        assert!(ProjectionModel::perspective(100.0, 4, 4).is_ok());
    }

    #[test]
    fn dataset_rejects_dimension_mismatch() {
        let images = vec![
            GrayImage::zeros(4, 4),
            GrayImage::zeros(4, 4),
            GrayImage::zeros(4, 5),
        ];
        let err = Dataset::new(
            images,
            Mask::filled(4, 4, true),
            LightingConfig::uniform(axis_lights(), 1.0).unwrap(),
            ProjectionModel::orthographic(4, 4),
        )
        .unwrap_err();
        assert!(err.to_string().contains("expected 4x4"), "{err}");
    }

    #[test]
    fn dataset_rejects_empty_mask() {
        let images = vec![GrayImage::zeros(4, 4); 3];
        let err = Dataset::new(
            images,
            Mask::filled(4, 4, false),
            LightingConfig::uniform(axis_lights(), 1.0).unwrap(),
            ProjectionModel::orthographic(4, 4),
        )
        .unwrap_err();
        assert!(matches!(err, PsError::EmptyMask));
    }

    #[test]
    fn pixel_unknowns_round_trip_and_shininess() {
        let x = PixelUnknowns::new(Vector3::new(0.1, -0.2, 0.9), 0.3, 0.0);
        let v = x.to_vector();
        assert_eq!(PixelUnknowns::from_vector(&v), x);
        assert!((x.shininess() - 2.0).abs() < 1e-15);
        assert!(x.shininess() > 1.0);
    }

    #[test]
    fn status_counts_only_cover_mask() {
        let mut result = NormalMapResult::empty(2, 2, false);
        result.status[0] = Some(PixelStatus::Converged);
        result.status[3] = Some(PixelStatus::Skipped);
        let counts = result.status_counts();
        assert_eq!(counts.get("converged"), Some(&1));
        assert_eq!(counts.get("skipped"), Some(&1));
        assert_eq!(counts.values().sum::<usize>(), 2);
        assert_eq!(result.solved_mask().count_set(), 2);
    }
}
