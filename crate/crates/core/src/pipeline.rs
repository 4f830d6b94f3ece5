//! Per-pixel solve orchestration: classical initialisation, damped
//! Gauss-Newton refinement per pixel (optionally coarse-to-fine), highlight
//! masking and result assembly.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;

use crate::blinn_phong::{halfway_vectors, view_direction, BpPixelProblem, HalfwaySet};
use crate::error::{PsError, Result};
use crate::lambertian::{build_light_matrix, solve_classical_ps, LightMatrix, DARK_PIXEL_NORM};
use crate::noise::{invert_noise_level, NoiseSpec};
use crate::pyramid::{build_pyramid, upsample_init};
use crate::rlm::{rlm_solve, RlmConfig, RlmStatus};
use crate::types::{
    pixel_coordinates, Dataset, Mask, NormalMapResult, ParamMap, PixelStatus, PixelUnknowns,
    ProjectionMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverModel {
    Lambertian,
    BlinnPhong,
}

impl SolverModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverModel::Lambertian => "lambertian",
            SolverModel::BlinnPhong => "blinn_phong",
        }
    }
}

/// Full run configuration. The per-level discrepancy level is derived from
/// `noise`, so `rlm.delta` acts only as a default for direct solver calls.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: SolverModel,
    pub rlm: RlmConfig,
    pub noise: NoiseSpec,
    pub ctf_levels: usize,
    /// Specular seed; a small nonzero value keeps the shininess column of
    /// the Jacobian alive at the start.
    pub init_r: f64,
    /// Shininess seed, must exceed 1 so its log parametrisation is defined.
    /// A broad starting lobe keeps the specular columns of the Jacobian well
    /// conditioned; seeds far above 2 make the local Scherzer estimate blow
    /// up on the first step at mildly specular pixels.
    pub init_alpha: f64,
    pub parallel: bool,
    /// Worker cap for parallel runs; 0 picks the default pool size.
    pub threads: usize,
    /// Observations below this intensity are dropped from the classical
    /// fit; 0 keeps all of them.
    pub min_intensity: f64,
    /// Use the unnormalised perspective view vector in the halfway
    /// construction.
    pub raw_view: bool,
}

impl RunConfig {
    pub fn new(model: SolverModel, noise: NoiseSpec) -> Self {
        RunConfig {
            model,
            rlm: RlmConfig::default(),
            noise,
            ctf_levels: 1,
            init_r: 0.01,
            init_alpha: 2.0,
            parallel: true,
            threads: 0,
            min_intensity: 0.0,
            raw_view: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rlm.validate()?;
        if !(self.init_alpha > 1.0) {
            return Err(PsError::Validation(format!(
                "init_alpha must be > 1, got {}",
                self.init_alpha
            )));
        }
        if self.ctf_levels == 0 {
            return Err(PsError::Validation("ctf_levels must be >= 1".into()));
        }
        if !(self.min_intensity >= 0.0) {
            return Err(PsError::Validation(format!(
                "min_intensity must be >= 0, got {}",
                self.min_intensity
            )));
        }
        if !(self.noise.sigma > 0.0) {
            return Err(PsError::Validation(format!(
                "sigma must be > 0, got {}",
                self.noise.sigma
            )));
        }
        if !(self.noise.gamma > 0.0 && self.noise.gamma < 1.0) {
            return Err(PsError::Validation(format!(
                "confidence must lie in (0,1), got {}",
                self.noise.gamma
            )));
        }
        Ok(())
    }

    fn initial_log_shininess(&self) -> f64 {
        (self.init_alpha - 1.0).ln()
    }
}

/// Runs per-pixel work sequentially or on a rayon pool, preserving pixel
/// order in the output either way.
fn map_pixels<T, F>(pixels: &[(usize, usize)], cfg: &RunConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync,
{
    if cfg.parallel {
        if cfg.threads > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| PsError::Validation(format!("thread pool: {e}")))?;
            Ok(pool.install(|| pixels.par_iter().map(|&(r, c)| f(r, c)).collect()))
        } else {
            Ok(pixels.par_iter().map(|&(r, c)| f(r, c)).collect())
        }
    } else {
        Ok(pixels.iter().map(|&(r, c)| f(r, c)).collect())
    }
}

struct PsOutcome {
    albedo: f64,
    unit_normal: Vector3<f64>,
    status: PixelStatus,
    residual: f64,
}

/// Classical photometric stereo over the object domain.
pub fn run_ps(ds: &Dataset, cfg: &RunConfig) -> Result<NormalMapResult> {
    let lmat = build_light_matrix(&ds.lighting)?;
    let pixels: Vec<(usize, usize)> = ds.mask.iter_set().collect();
    let outcomes = map_pixels(&pixels, cfg, |row, col| {
        let obs = ds.intensities_at(row, col);
        classical_pixel(&lmat, &obs, cfg.min_intensity)
    })?;

    let mut result = NormalMapResult::empty(ds.width(), ds.height(), false);
    for (&(row, col), outcome) in pixels.iter().zip(outcomes) {
        let i = result.idx(row, col);
        result.normals[i] = outcome.unit_normal;
        result.albedo[i] = outcome.albedo;
        result.status[i] = Some(outcome.status);
        result.residual[i] = outcome.residual;
    }
    Ok(result)
}

fn classical_pixel(lmat: &LightMatrix, obs: &DVector<f64>, min_intensity: f64) -> PsOutcome {
    let skipped = |residual: f64| PsOutcome {
        albedo: 0.0,
        unit_normal: Vector3::new(0.0, 0.0, 1.0),
        status: PixelStatus::Skipped,
        residual,
    };
    if min_intensity > 0.0 {
        let rows: Vec<usize> = (0..obs.len())
            .filter(|&k| obs[k] >= min_intensity)
            .collect();
        if rows.len() < 3 {
            return skipped(obs.norm());
        }
        let sub_mat = nalgebra::DMatrix::from_fn(rows.len(), 3, |i, j| lmat.matrix()[(rows[i], j)]);
        let sub_obs = DVector::from_fn(rows.len(), |i, _| obs[rows[i]]);
        match LightMatrix::from_matrix(sub_mat) {
            Ok(sub) => classical_fit_outcome(&sub, &sub_obs),
            Err(_) => skipped(obs.norm()),
        }
    } else {
        classical_fit_outcome(lmat, obs)
    }
}

fn classical_fit_outcome(lmat: &LightMatrix, obs: &DVector<f64>) -> PsOutcome {
    let fit = solve_classical_ps(lmat, obs).expect("dimensions checked by caller");
    let residual = (lmat.matrix() * fit.scaled_normal - obs).norm();
    PsOutcome {
        albedo: if fit.dark { 0.0 } else { fit.albedo },
        unit_normal: fit.unit_normal,
        status: if fit.dark {
            PixelStatus::Skipped
        } else {
            PixelStatus::Converged
        },
        residual,
    }
}

impl From<RlmStatus> for PixelStatus {
    fn from(status: RlmStatus) -> Self {
        match status {
            RlmStatus::DiscrepancyStop => PixelStatus::Converged,
            RlmStatus::ScherzerBreak => PixelStatus::ScherzerBreak,
            RlmStatus::MaxIters => PixelStatus::MaxIters,
            RlmStatus::Stalled => PixelStatus::Stalled,
        }
    }
}

type LevelOutcomes = Vec<(usize, usize, BpOutcome)>;

#[derive(Clone)]
struct BpOutcome {
    params: Option<PixelUnknowns>,
    status: PixelStatus,
    residual: f64,
}

/// Specular solve: classical initialisation at the coarsest level, then the
/// damped per-pixel refinement propagated coarse-to-fine.
pub fn run_bp(ds: &Dataset, cfg: &RunConfig) -> Result<NormalMapResult> {
    cfg.validate()?;
    if cfg.noise.m != ds.num_images() {
        return Err(PsError::Validation(format!(
            "noise model assumes m = {}, dataset has {} images",
            cfg.noise.m,
            ds.num_images()
        )));
    }
    let pyramid = build_pyramid(ds, cfg.ctf_levels)?;
    let mut carried: Option<ParamMap> = None;
    let mut outcomes: LevelOutcomes = Vec::new();

    for level in (0..pyramid.num_levels()).rev() {
        let level_ds = &pyramid.levels()[level];
        let sigma = pyramid.level_sigma(cfg.noise.sigma, level);
        let delta = invert_noise_level(cfg.noise.gamma, sigma, ds.num_images())?;
        let init = match carried.take() {
            None => {
                let ps = run_ps(level_ds, cfg)?;
                ParamMap::from_result(&ps, cfg.init_r, cfg.init_alpha)
            }
            Some(prev) => upsample_init(&prev, &level_ds.mask)?,
        };
        let (params, level_outcomes) = solve_level(level_ds, &init, delta, cfg)?;
        carried = Some(params);
        outcomes = level_outcomes;
    }

    let mut result = NormalMapResult::empty(ds.width(), ds.height(), true);
    let r_map = result.r_map.as_mut().expect("material maps allocated");
    let alpha_map = result.alpha_map.as_mut().expect("material maps allocated");
    for (row, col, outcome) in outcomes {
        let i = row * ds.width() + col;
        result.status[i] = Some(outcome.status);
        result.residual[i] = outcome.residual;
        if let Some(p) = outcome.params {
            let albedo = p.albedo();
            result.albedo[i] = albedo;
            result.normals[i] = if albedo > DARK_PIXEL_NORM {
                p.n / albedo
            } else {
                Vector3::new(0.0, 0.0, 1.0)
            };
            r_map[i] = p.r;
            alpha_map[i] = p.shininess();
        } else {
            result.normals[i] = Vector3::new(0.0, 0.0, 1.0);
        }
    }
    Ok(result)
}

fn solve_level(
    ds: &Dataset,
    init: &ParamMap,
    delta: f64,
    cfg: &RunConfig,
) -> Result<(ParamMap, LevelOutcomes)> {
    let rlm_cfg = RlmConfig { delta, ..cfg.rlm };
    let shared_halfways = match ds.projection.mode {
        ProjectionMode::Orthographic => {
            Some(halfway_vectors(&ds.lighting, &Vector3::new(0.0, 0.0, 1.0))?)
        }
        ProjectionMode::Perspective => None,
    };
    let fallback_init =
        PixelUnknowns::new(Vector3::zeros(), cfg.init_r, cfg.initial_log_shininess());

    let pixels: Vec<(usize, usize)> = ds.mask.iter_set().collect();
    let outcomes = map_pixels(&pixels, cfg, |row, col| {
        let x0 = init.get(row, col).unwrap_or(fallback_init);
        let halfways = match &shared_halfways {
            Some(h) => h.clone(),
            None => {
                let xy = pixel_coordinates(row, col, &ds.projection);
                let view = view_direction(&ds.projection, xy, cfg.raw_view);
                match halfway_vectors(&ds.lighting, &view) {
                    Ok(h) => h,
                    Err(_) => {
                        return BpOutcome {
                            params: Some(x0),
                            status: PixelStatus::Skipped,
                            residual: f64::NAN,
                        }
                    }
                }
            }
        };
        solve_pixel(ds, row, col, x0, halfways, &rlm_cfg)
    })?;

    let mut params = ParamMap::empty(ds.width(), ds.height());
    let mut tagged = Vec::with_capacity(pixels.len());
    for (&(row, col), outcome) in pixels.iter().zip(outcomes) {
        if let Some(p) = outcome.params {
            params.set(row, col, p);
        }
        tagged.push((row, col, outcome));
    }
    Ok((params, tagged))
}

fn solve_pixel(
    ds: &Dataset,
    row: usize,
    col: usize,
    x0: PixelUnknowns,
    halfways: HalfwaySet,
    rlm_cfg: &RlmConfig,
) -> BpOutcome {
    let obs = ds.intensities_at(row, col);
    let problem = match BpPixelProblem::new(&ds.lighting, halfways, obs) {
        Ok(p) => p,
        Err(_) => {
            return BpOutcome {
                params: Some(x0),
                status: PixelStatus::Skipped,
                residual: f64::NAN,
            }
        }
    };
    match rlm_solve(&problem, x0.to_vector(), rlm_cfg) {
        Ok(result) => BpOutcome {
            params: Some(PixelUnknowns::from_vector(&result.x)),
            status: result.status.into(),
            residual: result.final_residual,
        },
        // per-pixel numerical failures become status entries, never aborts
        Err(_) => BpOutcome {
            params: Some(x0),
            status: PixelStatus::Stalled,
            residual: f64::NAN,
        },
    }
}

/// Pixels whose classical normal nearly coincides with some halfway vector:
/// max_k 𝓗_kᵀ𝒩 ≥ 0.99.
pub fn highlight_mask(result: &NormalMapResult, ds: &Dataset, raw_view: bool) -> Result<Mask> {
    let shared = match ds.projection.mode {
        ProjectionMode::Orthographic => {
            Some(halfway_vectors(&ds.lighting, &Vector3::new(0.0, 0.0, 1.0))?)
        }
        ProjectionMode::Perspective => None,
    };
    let mut mask = Mask::filled(ds.width(), ds.height(), false);
    for (row, col) in ds.mask.iter_set() {
        let halfways = match &shared {
            Some(h) => h.clone(),
            None => {
                let xy = pixel_coordinates(row, col, &ds.projection);
                let view = view_direction(&ds.projection, xy, raw_view);
                match halfway_vectors(&ds.lighting, &view) {
                    Ok(h) => h,
                    Err(_) => continue,
                }
            }
        };
        let n = result.normals[row * ds.width() + col];
        let best = halfways
            .vectors()
            .iter()
            .map(|h| h.dot(&n))
            .fold(f64::NEG_INFINITY, f64::max);
        if best >= 0.99 {
            mask.set(row, col, true);
        }
    }
    Ok(mask)
}

/// Pixels where the solve ended in a Scherzer break.
pub fn scherzer_map(result: &NormalMapResult) -> Mask {
    let data = result
        .status
        .iter()
        .map(|s| *s == Some(PixelStatus::ScherzerBreak))
        .collect();
    Mask::from_vec(result.width(), result.height(), data).expect("status matches dims")
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::lambertian::build_light_matrix;
    use crate::synth::{aae, render_sphere, SphereScene};
    use crate::types::{GrayImage, LightingConfig, ProjectionModel};

    fn test_noise(m: usize) -> NoiseSpec {
        NoiseSpec::derive(0.005, m, 0.95).unwrap()
    }

    fn lambertian_cfg(m: usize) -> RunConfig {
        RunConfig::new(SolverModel::Lambertian, test_noise(m))
    }

    fn axis_dataset(images: Vec<GrayImage>, mask: Mask) -> Dataset {
        let (w, h) = (images[0].width(), images[0].height());
        Dataset::new(
            images,
            mask,
            LightingConfig::uniform(vec![Vector3::x(), Vector3::y(), Vector3::z()], 1.0).unwrap(),
            ProjectionModel::orthographic(w, h),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_lambertian_sphere_is_recovered() {
        let mut scene = SphereScene::standard();
        scene.image_size = 48;
        scene.rho_s = 0.0;
        scene.sigma = 0.0;
        let (ds, truth) = render_sphere(&scene).unwrap();
        let result = run_ps(&ds, &lambertian_cfg(5)).unwrap();
        let err = aae(&result.normals, &truth.normals, &truth.mask).unwrap();
        assert!(err <= 1e-6, "AAE {err} degrees");
        for (row, col) in truth.mask.iter_set() {
            let i = row * 48 + col;
            assert!((result.normals[i].norm() - 1.0).abs() < 1e-10);
            assert!((result.albedo[i] - scene.rho_d).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_stack_is_skipped() {
        let ds = axis_dataset(vec![GrayImage::zeros(4, 4); 3], Mask::filled(4, 4, true));
        let result = run_ps(&ds, &lambertian_cfg(3)).unwrap();
        let counts = result.status_counts();
        assert_eq!(counts.get("skipped"), Some(&16));
        assert_eq!(counts.get("converged"), None);
    }

    #[test]
    fn single_bright_pixel_solves_exactly_one() {
        let mut images = vec![GrayImage::zeros(4, 4); 3];
        for img in &mut images {
            img.set(2, 1, 0.5);
        }
        let ds = axis_dataset(images, Mask::filled(4, 4, true));
        let result = run_ps(&ds, &lambertian_cfg(3)).unwrap();
        let counts = result.status_counts();
        assert_eq!(counts.get("converged"), Some(&1));
        assert_eq!(
            result.status[result.idx(2, 1)],
            Some(PixelStatus::Converged)
        );
    }

    #[test]
    fn out_of_mask_pixels_untouched() {
        let mut mask = Mask::filled(4, 4, false);
        mask.set(0, 0, true);
        mask.set(3, 2, true);
        let mut images = vec![GrayImage::zeros(4, 4); 3];
        for img in &mut images {
            for row in 0..4 {
                for col in 0..4 {
                    img.set(row, col, 0.4);
                }
            }
        }
        let ds = axis_dataset(images, mask);
        let result = run_ps(&ds, &lambertian_cfg(3)).unwrap();
        assert_eq!(result.status_counts().values().sum::<usize>(), 2);
        assert_eq!(result.normals[result.idx(1, 1)], Vector3::zeros());
        assert_eq!(result.status[result.idx(1, 1)], None);
    }

    #[test]
    fn bp_matches_ps_on_diffuse_data() {
        let mut scene = SphereScene::standard();
        scene.image_size = 32;
        scene.rho_s = 0.0;
        scene.seed = 5;
        let (ds, _) = render_sphere(&scene).unwrap();
        let cfg = RunConfig::new(SolverModel::BlinnPhong, test_noise(5));
        let ps = run_ps(&ds, &cfg).unwrap();
        let bp = run_bp(&ds, &cfg).unwrap();
        let err = aae(&bp.normals, &ps.normals, &ds.mask).unwrap();
        assert!(err <= 0.1, "AAE between BP and PS {err} degrees");
    }

    #[test]
    fn backfacing_pixel_keeps_diffuse_fit_without_break() {
        // intensities synthesised from a downward normal: every halfway
        // cosine is negative, so r and a are unidentifiable
        let lighting = LightingConfig::uniform(
            vec![
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(0.3, 0.0, 1.0),
                Vector3::new(0.0, 0.3, 1.0),
            ],
            1.0,
        )
        .unwrap();
        let lmat = build_light_matrix(&lighting).unwrap();
        let n_down = Vector3::new(0.0, 0.0, -0.5);
        let obs = lmat.matrix() * n_down;
        let mut images = Vec::new();
        for k in 0..3 {
            images.push(GrayImage::from_vec(1, 1, vec![obs[k]]).unwrap());
        }
        let ds = Dataset::new(
            images,
            Mask::filled(1, 1, true),
            lighting,
            ProjectionModel::orthographic(1, 1),
        )
        .unwrap();
        let cfg = RunConfig::new(SolverModel::BlinnPhong, test_noise(3));
        let result = run_bp(&ds, &cfg).unwrap();
        let status = result.status[0].unwrap();
        assert_ne!(status, PixelStatus::ScherzerBreak);
        // the diffuse fit is reported
        assert!((result.normals[0] - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        assert!((result.albedo[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn highlight_mask_threshold_cases() {
        let lighting = LightingConfig::uniform(
            vec![
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(1.0, 0.0, 0.2),
                Vector3::new(0.0, 1.0, 0.2),
            ],
            1.0,
        )
        .unwrap();
        let images = vec![GrayImage::from_vec(3, 1, vec![0.5, 0.5, 0.5]).unwrap(); 3];
        let ds = Dataset::new(
            images,
            Mask::filled(3, 1, true),
            lighting,
            ProjectionModel::orthographic(3, 1),
        )
        .unwrap();
        let mut result = NormalMapResult::empty(3, 1, false);
        for i in 0..3 {
            result.status[i] = Some(PixelStatus::Converged);
        }
        // pixel 0: aligned with the first halfway vector (cos = 1)
        result.normals[0] = Vector3::new(0.0, 0.0, 1.0);
        // pixel 1: 10 degrees away from every halfway vector
        let ten = 10.0f64.to_radians();
        result.normals[1] = Vector3::new(ten.sin(), 0.0, ten.cos());
        // pixel 2: exactly at the threshold against halfway (0,0,1)
        let c: f64 = 0.99;
        result.normals[2] = Vector3::new((1.0 - c * c).sqrt(), 0.0, c);
        let mask = highlight_mask(&result, &ds, false).unwrap();
        assert!(mask.get(0, 0));
        assert!(!mask.get(0, 1), "cos ≈ 0.985 stays below the threshold");
        assert!(mask.get(0, 2), "threshold is inclusive");
    }

    #[test]
    fn scherzer_map_selects_breaks() {
        let mut result = NormalMapResult::empty(2, 2, true);
        result.status[0] = Some(PixelStatus::Converged);
        result.status[1] = Some(PixelStatus::ScherzerBreak);
        result.status[2] = Some(PixelStatus::MaxIters);
        let map = scherzer_map(&result);
        assert_eq!(map.count_set(), 1);
        assert!(map.get(0, 1));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut scene = SphereScene::standard();
        scene.image_size = 24;
        scene.seed = 11;
        let (ds, _) = render_sphere(&scene).unwrap();
        let mut cfg = RunConfig::new(SolverModel::BlinnPhong, test_noise(5));
        cfg.parallel = false;
        let sequential = run_bp(&ds, &cfg).unwrap();
        cfg.parallel = true;
        let parallel = run_bp(&ds, &cfg).unwrap();
        assert_eq!(sequential.normals, parallel.normals);
        assert_eq!(sequential.status, parallel.status);
        assert_eq!(sequential.residual, parallel.residual);
    }
}
