use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::{GenericImage, ImageFormat, RgbaImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::FrameRef;
use crate::error::{Error, Result};
use crate::sample::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// One payload per (view, timestep).
    #[default]
    Separated,
    /// A single composed image: views as rows, start/end as columns.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePart {
    pub label: String,
    pub media_type: String,
    pub data_base64: String,
}

impl ImagePart {
    pub fn from_bytes(label: impl Into<String>, media_type: impl Into<String>, bytes: &[u8]) -> Self {
        ImagePart {
            label: label.into(),
            media_type: media_type.into(),
            data_base64: BASE64.encode(bytes),
        }
    }

    pub fn decode_bytes(&self) -> Result<Vec<u8>> {
        BASE64
            .decode(self.data_base64.as_bytes())
            .map_err(|e| Error::Shape(format!("{}: invalid base64 payload: {e}", self.label)))
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub view_id: String,
    pub timestep: u32,
    pub image: RgbaImage,
}

/// Lays out `views × timesteps` equally sized images: row `k` is the k-th
/// view in sorted view_id order, column `m` the m-th timestep in ascending
/// order. Output is `(timesteps·W) × (views·H)`.
pub fn compose_grid(cells: &[GridCell], views: usize, timesteps: usize) -> Result<RgbaImage> {
    if views == 0 || timesteps == 0 {
        return Err(Error::Shape("grid needs at least one view and one timestep".into()));
    }
    if cells.len() != views * timesteps {
        return Err(Error::Shape(format!(
            "expected {} images for {views} views x {timesteps} timesteps, got {}",
            views * timesteps,
            cells.len()
        )));
    }
    let view_ids: Vec<&str> = cells
        .iter()
        .map(|c| c.view_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let steps: Vec<u32> = cells
        .iter()
        .map(|c| c.timestep)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if view_ids.len() != views || steps.len() != timesteps {
        return Err(Error::Shape(format!(
            "found {} distinct views and {} distinct timesteps",
            view_ids.len(),
            steps.len()
        )));
    }
    let (w, h) = cells[0].image.dimensions();
    if let Some(bad) = cells.iter().find(|c| c.image.dimensions() != (w, h)) {
        return Err(Error::Shape(format!(
            "view {} timestep {} is {:?}, expected {:?}",
            bad.view_id,
            bad.timestep,
            bad.image.dimensions(),
            (w, h)
        )));
    }

    let mut out = RgbaImage::new(w * timesteps as u32, h * views as u32);
    let mut filled = vec![false; views * timesteps];
    for cell in cells {
        let row = view_ids.binary_search(&cell.view_id.as_str()).expect("known view");
        let col = steps.binary_search(&cell.timestep).expect("known step");
        if std::mem::replace(&mut filled[row * timesteps + col], true) {
            return Err(Error::Shape(format!(
                "duplicate cell for view {} timestep {}",
                cell.view_id, cell.timestep
            )));
        }
        out.copy_from(&cell.image, col as u32 * w, row as u32 * h)
            .expect("cell fits");
    }
    Ok(out)
}

pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbaImage> {
    Ok(image::load_from_memory(bytes)?.to_rgba8())
}

fn media_type_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else {
        "image/png"
    }
}

fn read_frame(root: &Path, frame: &FrameRef) -> Result<Vec<u8>> {
    let path = root.join(&frame.path);
    std::fs::read(&path).map_err(|e| Error::io(path, e))
}

/// Grid from inline start/end payloads (one per view, same view order).
pub fn compose_payload_grid(start: &[ImagePart], end: &[ImagePart]) -> Result<ImagePart> {
    if start.len() != end.len() || start.is_empty() {
        return Err(Error::Shape(format!(
            "grid needs equal non-zero start/end view counts, got {}/{}",
            start.len(),
            end.len()
        )));
    }
    let mut cells = Vec::with_capacity(start.len() * 2);
    for (t, parts) in [start, end].into_iter().enumerate() {
        for (v, part) in parts.iter().enumerate() {
            cells.push(GridCell {
                // Zero-padded so lexical order equals input order.
                view_id: format!("{v:04}"),
                timestep: t as u32,
                image: decode_image(&part.decode_bytes()?)?,
            });
        }
    }
    let grid = compose_grid(&cells, start.len(), 2)?;
    Ok(ImagePart::from_bytes("grid", "image/png", &encode_png(&grid)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImages {
    pub parts: Vec<ImagePart>,
    /// Camera ids used, sorted.
    pub views: Vec<String>,
}

/// Picks at most `view_limit` cameras (0 = all) with a seeded shuffle.
pub fn select_views(available: &[String], view_limit: usize, seed: u64) -> Result<Vec<String>> {
    if !matches!(view_limit, 0 | 1 | 4) {
        return Err(Error::Config(format!("view_limit must be 0, 1 or 4, got {view_limit}")));
    }
    let mut views: Vec<String> = available.to_vec();
    views.sort();
    views.dedup();
    if view_limit == 0 || views.len() <= view_limit {
        return Ok(views);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    views.shuffle(&mut rng);
    views.truncate(view_limit);
    views.sort();
    Ok(views)
}

/// Image payloads for a sample. Planning samples always yield the single
/// initial front-view image.
pub fn prepare_image_parts(
    sample: &Sample,
    mode: ImageMode,
    view_limit: usize,
    image_root: &Path,
    seed: u64,
) -> Result<PreparedImages> {
    match sample {
        Sample::Planning(s) => {
            select_views(&[], view_limit, seed)?;
            let bytes = read_frame(image_root, &s.initial_image)?;
            Ok(PreparedImages {
                parts: vec![ImagePart::from_bytes(
                    "initial front view",
                    media_type_for(&s.initial_image.path),
                    &bytes,
                )],
                views: vec![s.initial_image.camera_id.clone()],
            })
        }
        Sample::Execution(s) => {
            let available: Vec<String> = s.start_images.iter().map(|f| f.camera_id.clone()).collect();
            let views = select_views(&available, view_limit, seed)?;
            let frame_for = |frames: &[FrameRef], cam: &str| -> Result<FrameRef> {
                frames
                    .iter()
                    .find(|f| f.camera_id == cam)
                    .cloned()
                    .ok_or_else(|| Error::Shape(format!("no frame for camera {cam}")))
            };
            let start: Vec<FrameRef> = views
                .iter()
                .map(|v| frame_for(&s.start_images, v))
                .collect::<Result<_>>()?;
            let end: Vec<FrameRef> = views
                .iter()
                .map(|v| frame_for(&s.end_images, v))
                .collect::<Result<_>>()?;

            let parts = match mode {
                ImageMode::Separated => {
                    let mut parts = Vec::with_capacity(views.len() * 2);
                    for (phase, frames) in [("start", &start), ("end", &end)] {
                        for (i, frame) in frames.iter().enumerate() {
                            let bytes = read_frame(image_root, frame)?;
                            parts.push(ImagePart::from_bytes(
                                format!("{phase} view {}", i + 1),
                                media_type_for(&frame.path),
                                &bytes,
                            ));
                        }
                    }
                    parts
                }
                ImageMode::Grid => {
                    let mut cells = Vec::with_capacity(views.len() * 2);
                    for (t, frames) in [&start, &end].into_iter().enumerate() {
                        for frame in frames {
                            cells.push(GridCell {
                                view_id: frame.camera_id.clone(),
                                timestep: t as u32,
                                image: decode_image(&read_frame(image_root, frame)?)?,
                            });
                        }
                    }
                    let grid = compose_grid(&cells, views.len(), 2)?;
                    vec![ImagePart::from_bytes("grid", "image/png", &encode_png(&grid)?)]
                }
            };
            Ok(PreparedImages { parts, views })
        }
    }
}
