//! Dataset directory loading and result output.
//!
//! Input layout:
//! - `<root>/image_XX.png` or `image_XX.pfm` — one per illumination
//! - `<root>/light_directions.txt` — one `Lx Ly Lz` row per image
//! - `<root>/light_intensities.txt` — optional; one column means the same
//!   diffuse and specular intensity, two columns are (diffuse, specular)
//! - `<root>/mask.png` — optional; nonzero marks the object domain
//!
//! Output: `normals.pfm` (3-channel float), `normals_rgb.png`, `status.png`
//! and `report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{PsError, Result};
use crate::pfm::{read_pfm, write_pfm_gray, write_pfm_rgb, PfmImage};
use crate::synth::colorize_normals;
use crate::types::{
    Dataset, GrayImage, LightingConfig, Mask, NormalMapResult, PixelStatus, ProjectionModel,
};

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub perspective: bool,
    /// Focal length in pixels, required in perspective mode.
    pub focal_length_px: f64,
    /// Defaults to the image center.
    pub principal_point: Option<[f64; 2]>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            perspective: false,
            focal_length_px: 0.0,
            principal_point: None,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PsError {
    PsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> PsError {
    PsError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads a dataset directory. Integer images are divided by their maximum
/// representable value; float images are taken verbatim and clamped to
/// \[0,1\] with a warning. Color images collapse to the channel mean.
pub fn load_dataset(root: &Path, options: &LoadOptions) -> Result<Dataset> {
    let image_paths = list_image_files(root)?;
    if image_paths.len() < 3 {
        return Err(PsError::Validation(format!(
            "m >= 3 required: found {} image files in {}",
            image_paths.len(),
            root.display()
        )));
    }

    let directions = read_light_directions(&root.join("light_directions.txt"))?;
    if directions.len() != image_paths.len() {
        return Err(PsError::Validation(format!(
            "{} light directions for {} images",
            directions.len(),
            image_paths.len()
        )));
    }
    let (diffuse, specular) =
        read_light_intensities(&root.join("light_intensities.txt"), image_paths.len())?;
    let lighting = LightingConfig::new(directions, diffuse, specular)?;

    let mut images = Vec::with_capacity(image_paths.len());
    for path in &image_paths {
        images.push(load_gray_image(path)?);
    }

    let mask_path = root.join("mask.png");
    let mask = if mask_path.exists() {
        load_mask(&mask_path)?
    } else {
        Mask::filled(images[0].width(), images[0].height(), true)
    };

    let (w, h) = (images[0].width(), images[0].height());
    let projection = if options.perspective {
        let mut projection = ProjectionModel::perspective(options.focal_length_px, w, h)?;
        if let Some(pp) = options.principal_point {
            projection.principal_point = pp;
        }
        projection
    } else {
        let mut projection = ProjectionModel::orthographic(w, h);
        if let Some(pp) = options.principal_point {
            projection.principal_point = pp;
        }
        projection
    };

    Dataset::new(images, mask, lighting, projection)
}

fn list_image_files(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| io_err(root, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let ext = p.extension().and_then(|x| x.to_str()).unwrap_or("");
            name.starts_with("image_") && (ext == "png" || ext == "pfm")
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn read_light_directions(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, format!("line {}: expected 3 floats", lineno + 1)))?;
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                format!(
                    "line {}: expected 3 floats, got {}",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        rows.push(Vector3::new(fields[0], fields[1], fields[2]));
    }
    Ok(rows)
}

/// Missing file defaults every intensity to 1; a single column sets the
/// specular intensity equal to the diffuse one.
fn read_light_intensities(path: &Path, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !path.exists() {
        return Ok((vec![1.0; m], vec![1.0; m]));
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut diffuse = Vec::new();
    let mut specular = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, format!("line {}: expected floats", lineno + 1)))?;
        match fields.as_slice() {
            [l] => {
                diffuse.push(*l);
                specular.push(*l);
            }
            [l, h] => {
                diffuse.push(*l);
                specular.push(*h);
            }
            other => {
                return Err(parse_err(
                    path,
                    format!(
                        "line {}: expected 1 or 2 columns, got {}",
                        lineno + 1,
                        other.len()
                    ),
                ))
            }
        }
    }
    if diffuse.len() != m {
        return Err(PsError::Validation(format!(
            "{} intensity rows for {} images",
            diffuse.len(),
            m
        )));
    }
    Ok((diffuse, specular))
}

fn load_gray_image(path: &Path) -> Result<GrayImage> {
    let ext = path.extension().and_then(|x| x.to_str()).unwrap_or("");
    if ext == "pfm" {
        let (width, height, data) = match read_pfm(path)? {
            PfmImage::Gray {
                width,
                height,
                data,
            } => (width, height, data.iter().map(|&v| v as f64).collect()),
            PfmImage::Rgb {
                width,
                height,
                data,
            } => (
                width,
                height,
                data.iter()
                    .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0)
                    .collect::<Vec<f64>>(),
            ),
        };
        let mut data: Vec<f64> = data;
        let mut clamped = 0usize;
        for v in &mut data {
            if !v.is_finite() {
                return Err(parse_err(path, "non-finite float sample"));
            }
            if *v < 0.0 || *v > 1.0 {
                *v = v.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!(
                "{}: clamped {clamped} float samples into [0,1]",
                path.display()
            );
        }
        GrayImage::from_vec(width, height, data)
    } else {
        let img = image::open(path).map_err(|e| parse_err(path, e.to_string()))?;
        dynamic_to_gray(path, img)
    }
}

fn dynamic_to_gray(path: &Path, img: image::DynamicImage) -> Result<GrayImage> {
    use image::DynamicImage::*;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        ImageLuma8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        ImageRgb8(buf) => buf
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0 / 255.0)
            .collect(),
        ImageRgba8(buf) => buf
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0 / 255.0)
            .collect(),
        ImageLuma16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        ImageLumaA16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        ImageRgb16(buf) => buf
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0 / 65535.0)
            .collect(),
        ImageRgba16(buf) => buf
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0 / 65535.0)
            .collect(),
        _ => return Err(parse_err(path, "unsupported image color type")),
    };
    GrayImage::from_vec(width, height, data)
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| parse_err(path, e.to_string()))?;
    let gray = dynamic_to_gray(path, img)?;
    let data = gray.as_slice().iter().map(|&v| v > 0.0).collect();
    Mask::from_vec(gray.width(), gray.height(), data)
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub width: usize,
    pub height: usize,
    pub num_images: usize,
    pub mask_pixels: usize,
}

impl DatasetSummary {
    pub fn of(ds: &Dataset) -> Self {
        DatasetSummary {
            width: ds.width(),
            height: ds.height(),
            num_images: ds.num_images(),
            mask_pixels: ds.mask.count_set(),
        }
    }
}

/// Run record written next to the result maps; echoes the fully resolved
/// configuration for reproducibility.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub model: String,
    pub config: serde_json::Value,
    pub dataset: DatasetSummary,
    pub status_counts: BTreeMap<String, usize>,
    pub negative_r_pixels: usize,
    pub aae_degrees: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng: Option<String>,
}

fn status_color(status: Option<PixelStatus>) -> [u8; 3] {
    match status {
        None => [0, 0, 0],
        Some(PixelStatus::Converged) => [40, 160, 40],
        Some(PixelStatus::ScherzerBreak) => [255, 255, 255],
        Some(PixelStatus::MaxIters) => [255, 160, 0],
        Some(PixelStatus::Stalled) => [70, 130, 180],
        Some(PixelStatus::Skipped) => [128, 0, 32],
    }
}

/// Writes `normals.pfm`, `normals_rgb.png`, `status.png` and `report.json`.
pub fn save_result(out_dir: &Path, result: &NormalMapResult, report: &RunReport) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let (w, h) = (result.width(), result.height());

    save_normals_pfm(&out_dir.join("normals.pfm"), &result.normals, w, h)?;

    let mask = result.solved_mask();
    let rgb = colorize_normals(&result.normals, &mask);
    let png_path = out_dir.join("normals_rgb.png");
    rgb.save(&png_path)
        .map_err(|e| parse_err(&png_path, e.to_string()))?;

    let mut status_img = image::RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let color = status_color(result.status[row * w + col]);
            status_img.put_pixel(col as u32, row as u32, image::Rgb(color));
        }
    }
    let status_path = out_dir.join("status.png");
    status_img
        .save(&status_path)
        .map_err(|e| parse_err(&status_path, e.to_string()))?;

    let report_path = out_dir.join("report.json");
    let file = fs::File::create(&report_path).map_err(|e| io_err(&report_path, e))?;
    serde_json::to_writer_pretty(file, report)
        .map_err(|e| parse_err(&report_path, e.to_string()))?;
    Ok(())
}

pub fn save_normals_pfm(
    path: &Path,
    normals: &[Vector3<f64>],
    width: usize,
    height: usize,
) -> Result<()> {
    let data: Vec<[f32; 3]> = normals
        .iter()
        .map(|n| [n.x as f32, n.y as f32, n.z as f32])
        .collect();
    write_pfm_rgb(path, width, height, &data)
}

/// Reads a 3-channel PFM as a normal field.
pub fn load_normals_pfm(path: &Path) -> Result<(Vec<Vector3<f64>>, usize, usize)> {
    match read_pfm(path)? {
        PfmImage::Rgb {
            width,
            height,
            data,
        } => {
            let normals = data
                .iter()
                .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect();
            Ok((normals, width, height))
        }
        PfmImage::Gray { .. } => Err(parse_err(path, "expected a 3-channel PFM normal map")),
    }
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let mut img = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            let v = if mask.get(row, col) { 255 } else { 0 };
            img.put_pixel(col as u32, row as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| parse_err(path, e.to_string()))
}

/// Writes a dataset directory that `load_dataset` can read back: PFM images
/// (clamped below at zero for file validity), light files and the mask.
pub fn save_dataset(out_dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    for (k, img) in ds.images.iter().enumerate() {
        let data: Vec<f32> = img.as_slice().iter().map(|&v| v.max(0.0) as f32).collect();
        write_pfm_gray(
            &out_dir.join(format!("image_{:02}.pfm", k + 1)),
            img.width(),
            img.height(),
            &data,
        )?;
    }
    let dir_path = out_dir.join("light_directions.txt");
    let mut text = String::new();
    for l in ds.lighting.directions() {
        text.push_str(&format!("{} {} {}\n", l.x, l.y, l.z));
    }
    fs::write(&dir_path, text).map_err(|e| io_err(&dir_path, e))?;

    let int_path = out_dir.join("light_intensities.txt");
    let mut text = String::new();
    for k in 0..ds.lighting.len() {
        text.push_str(&format!(
            "{} {}\n",
            ds.lighting.diffuse()[k],
            ds.lighting.specular()[k]
        ));
    }
    fs::write(&int_path, text).map_err(|e| io_err(&int_path, e))?;

    save_mask_png(&out_dir.join("mask.png"), &ds.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProjectionMode;

    fn write_basic_dataset(dir: &Path, m: usize, width: usize, height: usize) {
        for k in 0..m {
            let data = vec![0.25f32; width * height];
            write_pfm_gray(
                &dir.join(format!("image_{:02}.pfm", k + 1)),
                width,
                height,
                &data,
            )
            .unwrap();
        }
        let mut lights = String::new();
        let tilts = [
            (0.0, 0.0),
            (0.3, 0.0),
            (-0.2, 0.2),
            (0.1, -0.3),
            (-0.1, -0.1),
            (0.25, 0.2),
        ];
        for k in 0..m {
            let (x, y) = tilts[k % tilts.len()];
            lights.push_str(&format!("{x} {y} 1.0\n"));
        }
        fs::write(dir.join("light_directions.txt"), lights).unwrap();
    }

    #[test]
    fn loads_minimal_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 5, 16, 12);
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.num_images(), 5);
        assert_eq!((ds.width(), ds.height()), (16, 12));
        assert_eq!(ds.mask.count_set(), 16 * 12, "mask defaults to all-true");
        assert_eq!(ds.projection.mode, ProjectionMode::Orthographic);
        for l in ds.lighting.directions() {
            assert!((l.norm() - 1.0).abs() < 1e-12);
        }
        // intensities default to 1
        assert!(ds.lighting.diffuse().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 2, 8, 8);
        let err = load_dataset(dir.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("m >= 3 required"), "{err}");
    }

    #[test]
    fn unnormalised_light_row_is_normalised() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 3, 4, 4);
        fs::write(
            dir.path().join("light_directions.txt"),
            "0 0 2\n1 0 0\n0 1 0\n",
        )
        .unwrap();
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.lighting.directions()[0], Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn garbled_lights_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 3, 4, 4);
        fs::write(dir.path().join("light_directions.txt"), "0 0 zebra\n").unwrap();
        let err = load_dataset(dir.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("light_directions.txt"), "{err}");
    }

    #[test]
    fn intensity_columns() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 3, 4, 4);
        fs::write(dir.path().join("light_intensities.txt"), "0.5\n0.7\n0.9\n").unwrap();
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.lighting.diffuse(), &[0.5, 0.7, 0.9]);
        assert_eq!(ds.lighting.specular(), &[0.5, 0.7, 0.9]);

        fs::write(
            dir.path().join("light_intensities.txt"),
            "0.5 0.1\n0.7 0.2\n0.9 0.3\n",
        )
        .unwrap();
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.lighting.specular(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 3, 4, 4);
        let mut mask = Mask::filled(4, 4, false);
        mask.set(1, 2, true);
        mask.set(3, 3, true);
        save_mask_png(&dir.path().join("mask.png"), &mask).unwrap();
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.mask, mask);
    }

    #[test]
    fn out_of_range_floats_clamped() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 3, 2, 2);
        write_pfm_gray(
            &dir.path().join("image_01.pfm"),
            2,
            2,
            &[-0.5, 0.5, 1.5, 1.0],
        )
        .unwrap();
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.images[0].as_slice(), &[0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_png_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(2, 1);
        img.put_pixel(0, 0, image::Luma([0u16]));
        img.put_pixel(1, 0, image::Luma([65535u16]));
        let path = dir.path().join("image_01.png");
        img.save(&path).unwrap();
        let loaded = load_gray_image(&path).unwrap();
        assert_eq!(loaded.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_basic_dataset(dir.path(), 4, 6, 5);
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_dataset(out.path(), &ds).unwrap();
        let back = load_dataset(out.path(), &LoadOptions::default()).unwrap();
        assert_eq!(back.num_images(), ds.num_images());
        for (a, b) in back.images.iter().zip(ds.images.iter()) {
            assert_eq!(a.as_slice(), b.as_slice(), "float PFM values bit-exact");
        }
        assert_eq!(back.mask, ds.mask);
    }
}
