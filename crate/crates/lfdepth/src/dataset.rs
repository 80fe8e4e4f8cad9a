//! Benchmark-layout dataset directories: `U*V` view images named by a
//! configurable pattern in u-major row order, a `parameters.cfg` with the
//! camera grid and disparity range, and an optional ground-truth PFM.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::ImageEncoder;

use crate::error::{LfError, Result};
use crate::lightfield::{DisparityMap, Image, LightField4D};
use crate::pfm;

/// File-name conventions of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutConfig {
    /// View file pattern; `{index}` or `{index:0N}` expands to `v * U + u`.
    pub view_pattern: String,
    pub params_file: String,
    pub gt_file: String,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            view_pattern: "input_Cam{index:03}.png".to_string(),
            params_file: "parameters.cfg".to_string(),
            gt_file: "gt_disp.pfm".to_string(),
        }
    }
}

/// Expand the `{index}` placeholder, honoring an optional zero-pad width.
pub fn view_file_name(pattern: &str, index: usize) -> Result<String> {
    if let Some(start) = pattern.find("{index") {
        let end = pattern[start..]
            .find('}')
            .map(|e| start + e)
            .ok_or_else(|| LfError::Config(format!("unclosed placeholder in `{pattern}`")))?;
        let spec = &pattern[start + 6..end];
        let formatted = if spec.is_empty() {
            index.to_string()
        } else if let Some(width) = spec.strip_prefix(":0").and_then(|w| w.parse::<usize>().ok()) {
            format!("{index:0width$}")
        } else {
            return Err(LfError::Config(format!("bad placeholder spec `{spec}` in `{pattern}`")));
        };
        Ok(format!("{}{}{}", &pattern[..start], formatted, &pattern[end + 1..]))
    } else {
        Err(LfError::Config(format!("pattern `{pattern}` lacks an {{index}} placeholder")))
    }
}

/// Camera-grid metadata stored in the parameters file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub views_u: usize,
    pub views_v: usize,
    pub width: usize,
    pub height: usize,
    pub focal_length_mm: f64,
    pub baseline_mm: f64,
    pub disp_min: f32,
    pub disp_max: f32,
}

impl DatasetParams {
    pub fn to_text(&self) -> String {
        format!(
            "[intrinsics]\n\
             image_resolution_x_px = {}\n\
             image_resolution_y_px = {}\n\
             focal_length_mm = {}\n\
             baseline_mm = {}\n\
             [extrinsics]\n\
             num_cams_x = {}\n\
             num_cams_y = {}\n\
             [meta]\n\
             disp_min = {}\n\
             disp_max = {}\n",
            self.width,
            self.height,
            self.focal_length_mm,
            self.baseline_mm,
            self.views_u,
            self.views_v,
            self.disp_min,
            self.disp_max
        )
    }

    /// Parse the `key = value` entries, ignoring `[section]` headers.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |key: &str| -> Result<&String> {
            map.get(key)
                .ok_or_else(|| LfError::Dataset(format!("parameters file is missing `{key}`")))
        };
        let parse_f = |key: &str, v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| LfError::Dataset(format!("parameters file: bad value for `{key}`: `{v}`")))
        };
        let parse_u = |key: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| LfError::Dataset(format!("parameters file: bad value for `{key}`: `{v}`")))
        };
        let disp_min = parse_f("disp_min", get("disp_min")?)? as f32;
        let disp_max = parse_f("disp_max", get("disp_max")?)? as f32;
        if !disp_min.is_finite() || !disp_max.is_finite() {
            return Err(LfError::Dataset("disparity range must be finite".into()));
        }
        Ok(DatasetParams {
            views_u: parse_u("num_cams_x", get("num_cams_x")?)?,
            views_v: parse_u("num_cams_y", get("num_cams_y")?)?,
            width: parse_u("image_resolution_x_px", get("image_resolution_x_px")?)?,
            height: parse_u("image_resolution_y_px", get("image_resolution_y_px")?)?,
            focal_length_mm: map
                .get("focal_length_mm")
                .map(|v| parse_f("focal_length_mm", v))
                .transpose()?
                .unwrap_or(1.0),
            baseline_mm: map
                .get("baseline_mm")
                .map(|v| parse_f("baseline_mm", v))
                .transpose()?
                .unwrap_or(1.0),
            disp_min,
            disp_max,
        })
    }
}

/// A dataset directory pulled into memory.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub name: String,
    pub lightfield: LightField4D,
    pub gt: Option<DisparityMap>,
    pub params: DatasetParams,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LfError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| LfError::io(path, e))?;
    tmp.persist(path).map_err(|e| LfError::io(path, e.error))?;
    Ok(())
}

/// Encode one view as an 8-bit PNG.
pub fn write_view_png(img: &Image, path: &Path) -> Result<()> {
    let quantize = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => return Err(LfError::Argument(format!("cannot encode {other}-channel PNG"))),
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&bytes, img.width as u32, img.height as u32, color)
        .map_err(|e| LfError::Dataset(format!("{}: png encode failed: {e}", path.display())))?;
    atomic_write(path, &out)
}

/// Decode an 8-bit PNG into normalized intensities.
pub fn read_view_png(path: &Path, channels: usize) -> Result<Image> {
    let dynamic = image::open(path)
        .map_err(|e| LfError::Dataset(format!("{}: cannot read view: {e}", path.display())))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let data: Vec<f32> = match channels {
        1 => dynamic.to_luma8().into_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        3 => dynamic.to_rgb8().into_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        other => return Err(LfError::Argument(format!("cannot decode {other}-channel PNG"))),
    };
    Ok(Image { height: h, width: w, channels, data })
}

/// Write a light field plus optional ground truth as a dataset directory.
///
/// View files quantize to 8 bits; pass a light field that is already on the
/// 8-bit grid (see `LightField4D::quantized_u8`) for a bitwise round trip.
pub fn save_dataset(
    dir: &Path,
    lf: &LightField4D,
    gt: Option<&DisparityMap>,
    params: &DatasetParams,
    layout: &LayoutConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LfError::io(dir, e))?;
    if params.views_u != lf.views_u()
        || params.views_v != lf.views_v()
        || params.width != lf.width()
        || params.height != lf.height()
    {
        return Err(LfError::Argument("parameters disagree with the light field dimensions".into()));
    }
    for v in 0..lf.views_v() {
        for u in 0..lf.views_u() {
            let index = v * lf.views_u() + u;
            let name = view_file_name(&layout.view_pattern, index)?;
            let img = lf.subaperture(u, v)?;
            write_view_png(&img, &dir.join(name))?;
        }
    }
    atomic_write(&dir.join(&layout.params_file), params.to_text().as_bytes())?;
    if let Some(map) = gt {
        pfm::write_pfm(&pfm::PfmImage::from_disparity(map), &dir.join(&layout.gt_file))?;
    }
    Ok(())
}

/// Load a dataset directory: views assembled in `(v, u)` order, ground truth
/// attached when present, disparity-range metadata retained.
pub fn load_dataset(dir: &Path, layout: &LayoutConfig) -> Result<LoadedScene> {
    let params_path = dir.join(&layout.params_file);
    let params_text = std::fs::read_to_string(&params_path).map_err(|e| LfError::io(&params_path, e))?;
    let params = DatasetParams::from_text(&params_text)?;
    // channel count follows the first view file
    let first = dir.join(view_file_name(&layout.view_pattern, 0)?);
    let channels = {
        let dynamic = image::open(&first)
            .map_err(|e| LfError::Dataset(format!("missing view 0 at {}: {e}", first.display())))?;
        match dynamic.color().channel_count() {
            1 | 2 => 1,
            _ => 3,
        }
    };
    let mut views = Vec::with_capacity(params.views_u * params.views_v);
    for index in 0..params.views_u * params.views_v {
        let path = dir.join(view_file_name(&layout.view_pattern, index)?);
        if !path.exists() {
            return Err(LfError::Dataset(format!(
                "missing view {index} ({})",
                path.display()
            )));
        }
        let img = read_view_png(&path, channels)?;
        if img.width != params.width || img.height != params.height {
            return Err(LfError::Dataset(format!(
                "view {index} is {}x{}, parameters say {}x{}",
                img.width, img.height, params.width, params.height
            )));
        }
        views.push(img);
    }
    let lightfield = LightField4D::from_views(&views, params.views_u, params.views_v)?;
    let gt_path = dir.join(&layout.gt_file);
    let gt = if gt_path.exists() {
        let img = pfm::read_pfm(&gt_path)?;
        if img.width != params.width || img.height != params.height {
            return Err(LfError::Dataset(format!(
                "ground truth is {}x{}, parameters say {}x{}",
                img.width, img.height, params.width, params.height
            )));
        }
        Some(img.into_disparity()?)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_string());
    Ok(LoadedScene { name, lightfield, gt, params })
}

/// Standard parameters block for a synthetic scene.
pub fn synthetic_params(lf: &LightField4D, disp_min: f32, disp_max: f32) -> DatasetParams {
    DatasetParams {
        views_u: lf.views_u(),
        views_v: lf.views_v(),
        width: lf.width(),
        height: lf.height(),
        focal_length_mm: 100.0,
        baseline_mm: 1.0,
        disp_min,
        disp_max,
    }
}

/// Where artifact metadata sidecars live: `<artifact>.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

/// Write the `key: value` metadata sidecar that ties an artifact to the
/// config fingerprint that produced it.
pub fn write_meta(path: &Path, fingerprint: u64, extra: &[(&str, String)]) -> Result<()> {
    let mut text = format!("config_fingerprint: {fingerprint:016x}\n");
    for (k, v) in extra {
        text.push_str(&format!("{k}: {v}\n"));
    }
    atomic_write(&meta_path(path), text.as_bytes())
}
