//! Persistence: the float grid format (little-endian f32 raster + JSON
//! sidecar), 8-bit PNG import/export, the CSV schemas that tie the pipeline
//! stages together, and atomic file writes with reproducibility headers.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    minmax_grid, ArCategory, FixationMap, Grid, MixingLevel, NormalizationState, SaliencyDensity,
    ViewportImage,
};

/// Reproducibility header attached to every artifact sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSidecar {
    width: usize,
    height: usize,
    normalization_state: NormalizationState,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<RunHeader>,
}

fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a density as `<path>` (little-endian f32, row-major) plus a
/// `<path>.json` sidecar.
pub fn write_density(path: &Path, density: &SaliencyDensity, provenance: Option<&RunHeader>) -> Result<()> {
    let mut bytes = Vec::with_capacity(density.grid.len() * 4);
    for &v in density.grid.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let sidecar = GridSidecar {
        width: density.width(),
        height: density.height(),
        normalization_state: density.state,
        provenance: provenance.cloned(),
    };
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)
}

/// Reads a density written by [`write_density`].
pub fn read_density(path: &Path) -> Result<SaliencyDensity> {
    let sidecar: GridSidecar =
        serde_json::from_slice(&fs::read(sidecar_path(path)).map_err(|e| Error::io(sidecar_path(path), e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = sidecar.width * sidecar.height * 4;
    if bytes.len() != expected {
        return Err(Error::dims(format!("{expected} bytes"), format!("{} bytes", bytes.len())));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(SaliencyDensity {
        grid: Grid::from_vec(sidecar.width, sidecar.height, data)?,
        state: sidecar.normalization_state,
    })
}

/// 8-bit grayscale export: min-max then `round(v*255)`.
pub fn write_density_png(path: &Path, density: &SaliencyDensity) -> Result<()> {
    let g = minmax_grid(&density.grid);
    let mut img = image::GrayImage::new(g.width() as u32, g.height() as u32);
    for y in 0..g.height() {
        for x in 0..g.width() {
            img.put_pixel(x as u32, y as u32, image::Luma([(g.get(x, y) * 255.0).round() as u8]));
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    img.save(path)?;
    Ok(())
}

/// Loads a PNG into linear [0,1] planes; an alpha channel becomes the
/// transparency matrix, otherwise the image is fully opaque.
pub fn read_image(path: &Path) -> Result<ViewportImage> {
    let img = image::open(path)?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = [Grid::zeros(w, h), Grid::zeros(w, h), Grid::zeros(w, h)];
    let mut alpha = Grid::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                planes[c].set(x, y, p.0[c] as f64 / 255.0);
            }
            alpha.set(x, y, p.0[3] as f64 / 255.0);
        }
    }
    ViewportImage::new(planes, alpha)
}

/// Saves an image as RGBA PNG via `round(v*255)`.
pub fn write_image(path: &Path, img: &ViewportImage) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut out = image::RgbaImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.channel(0).get(x, y) * 255.0).round() as u8,
                (img.channel(1).get(x, y) * 255.0).round() as u8,
                (img.channel(2).get(x, y) * 255.0).round() as u8,
                (img.alpha().get(x, y) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgba(px));
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.save(path)?;
    Ok(())
}

/// One row of the scenario manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub scenario_id: String,
    pub ar_path: String,
    pub bg_path: String,
    pub category: ArCategory,
    pub alpha: MixingLevel,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    write_csv(path, rows)
}

/// One row of the raw gaze log CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeLogRow {
    pub subject_id: String,
    pub scenario_id: String,
    pub timestamp_ms: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
}

pub fn read_gaze_log(path: &Path) -> Result<Vec<GazeLogRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn write_gaze_log(path: &Path, rows: &[GazeLogRow]) -> Result<()> {
    write_csv(path, rows)
}

/// One row of the fixation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationRow {
    pub subject_id: String,
    pub scenario_id: String,
    pub lat_deg: f64,
    pub long_deg: f64,
    pub onset_ms: f64,
    pub duration_ms: f64,
}

pub fn read_fixations(path: &Path) -> Result<Vec<FixationRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn write_fixations(path: &Path, rows: &[FixationRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Serializes any serde row set as CSV, atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in rows {
        wtr.serialize(row)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Writes the reproducibility sidecar next to an arbitrary artifact.
pub fn write_meta(artifact: &Path, header: &RunHeader) -> Result<()> {
    let mut os = artifact.as_os_str().to_owned();
    os.push(".meta.json");
    write_atomic(&PathBuf::from(os), &serde_json::to_vec_pretty(header)?)
}

/// Bins fixation rows into a per-scenario viewport fixation map.
pub fn fixation_rows_to_map(
    rows: &[FixationRow],
    spec: &crate::grid::ViewportSpec,
) -> Result<FixationMap> {
    let proj = crate::projection::ViewportProjection::new(spec)?;
    let mut fm = FixationMap::new(spec.width_px, spec.height_px);
    for r in rows {
        if let Some((x, y)) = proj.latlong_to_px(r.lat_deg, r.long_deg) {
            fm.push(x, y)?;
        }
    }
    Ok(fm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NormalizeMode;

    #[test]
    fn density_file_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.f32");
        let d = crate::fixtures::random_density(9, 7, 42);
        let d = crate::grid::normalize(&d, NormalizeMode::SumToOne).unwrap();
        write_density(&path, &d, None).unwrap();

        let loaded = read_density(&path).unwrap();
        assert_eq!(loaded.state, d.state);

        // file -> grid -> file reproduces the bytes exactly
        let original_bytes = fs::read(&path).unwrap();
        let path2 = dir.path().join("d2.f32");
        write_density(&path2, &loaded, None).unwrap();
        assert_eq!(original_bytes, fs::read(&path2).unwrap());
    }

    #[test]
    fn density_read_rejects_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        let d = crate::fixtures::random_density(4, 4, 1);
        write_density(&path, &d, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_density(&path).is_err());
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = crate::fixtures::blob_image(12, 10, 3);
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        for c in 0..3 {
            for (a, b) in img.channel(c).as_slice().iter().zip(back.channel(c).as_slice()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let rows = vec![ManifestRow {
            scenario_id: "p000_m1".into(),
            ar_path: "ar/p000.png".into(),
            bg_path: "bg/p000.png".into(),
            category: ArCategory::Graphic,
            alpha: MixingLevel::new(0.25).unwrap(),
        }];
        write_manifest(&path, &rows).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn provenance_lands_in_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.f32");
        let d = crate::fixtures::random_density(3, 3, 0);
        let header = RunHeader {
            config_hash: "abc".into(),
            seed: 7,
            version: "0.1.0".into(),
        };
        write_density(&path, &d, Some(&header)).unwrap();
        let text = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(text.contains("config_hash") && text.contains("abc"));
    }
}
