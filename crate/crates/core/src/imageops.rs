//! Geometry and resampling for producing the resolution-`r` view of an image.

use std::collections::{HashMap, VecDeque};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::codecs::jpeg::JpegEncoder;
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_JPEG_QUALITY: u8 = 90;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("cannot read image {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid dimensions {0}x{1}")]
    InvalidDims(u32, u32),
}

/// Pixel dimensions, both at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidDims(width, height));
        }
        Ok(ImageDims { width, height })
    }

    pub fn longest_side(self) -> u32 {
        self.width.max(self.height)
    }

    pub fn of(image: &DynamicImage) -> Self {
        ImageDims { width: image.width().max(1), height: image.height().max(1) }
    }
}

impl std::fmt::Display for ImageDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Dimensions of `native` with its longest side brought down to `r`.
///
/// Never upscales. The short side is rounded half away from zero with a floor
/// of one pixel.
pub fn target_dims(native: ImageDims, r: u32) -> ImageDims {
    let long = native.longest_side();
    if long <= r {
        return native;
    }
    let r = r.max(1);
    let scale = |side: u32| -> u32 {
        // round(side * r / long) in integers: floor((2*side*r + long) / (2*long))
        let num = 2 * side as u64 * r as u64 + long as u64;
        ((num / (2 * long as u64)) as u32).max(1)
    };
    if native.width >= native.height {
        ImageDims { width: r, height: scale(native.height) }
    } else {
        ImageDims { width: scale(native.width), height: r }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResizeFilter {
    Bilinear,
    #[default]
    Bicubic,
    Lanczos,
}

impl ResizeFilter {
    fn filter_type(self) -> FilterType {
        match self {
            ResizeFilter::Bilinear => FilterType::Triangle,
            ResizeFilter::Bicubic => FilterType::CatmullRom,
            ResizeFilter::Lanczos => FilterType::Lanczos3,
        }
    }
}

impl std::str::FromStr for ResizeFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bilinear" => Ok(ResizeFilter::Bilinear),
            "bicubic" => Ok(ResizeFilter::Bicubic),
            "lanczos" => Ok(ResizeFilter::Lanczos),
            other => Err(format!("unknown resize filter `{other}`")),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<DynamicImage, ImageError> {
    ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ImageError::Decode(e.to_string()))?
        .decode()
        .map_err(|e| ImageError::Decode(e.to_string()))
}

/// Reads only the header to get the dimensions of encoded image bytes.
pub fn probe_dims(bytes: &[u8]) -> Result<ImageDims, ImageError> {
    let size = imagesize::blob_size(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
    let (w, h) = (u32::try_from(size.width), u32::try_from(size.height));
    match (w, h) {
        (Ok(w), Ok(h)) => ImageDims::new(w, h).map_err(|_| ImageError::Decode(format!("degenerate image {w}x{h}"))),
        _ => Err(ImageError::Decode(format!("image size {}x{} out of range", size.width, size.height))),
    }
}

pub fn load(path: &Path) -> Result<DynamicImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io { path: path.to_owned(), source })?;
    decode(&bytes)
}

/// Resamples to exactly `dims`. Same-size requests return an untouched copy.
pub fn resize(image: &DynamicImage, dims: ImageDims, filter: ResizeFilter) -> DynamicImage {
    if ImageDims::of(image) == dims {
        return image.clone();
    }
    image.resize_exact(dims.width, dims.height, filter.filter_type())
}

pub fn encode_jpeg(image: &DynamicImage, quality: u8) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    let rgb = image.to_rgb8();
    JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100))
        .encode_image(&rgb)
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn encode_png(image: &DynamicImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Cursor::new(Vec::new());
    image.write_to(&mut out, ImageFormat::Png).map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Resize-and-encode settings shared by every producer of model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeSettings {
    #[serde(default)]
    pub filter: ResizeFilter,
    #[serde(default = "default_quality")]
    pub jpeg_quality: u8,
}

fn default_quality() -> u8 {
    DEFAULT_JPEG_QUALITY
}

impl Default for EncodeSettings {
    fn default() -> Self {
        EncodeSettings { filter: ResizeFilter::Bicubic, jpeg_quality: DEFAULT_JPEG_QUALITY }
    }
}

/// The view of `image` at resolution `r`, JPEG-encoded.
pub fn render_at(image: &DynamicImage, r: u32, settings: EncodeSettings) -> Result<(ImageDims, Vec<u8>), ImageError> {
    let dims = target_dims(ImageDims::of(image), r);
    let view = resize(image, dims, settings.filter);
    Ok((dims, encode_jpeg(&view, settings.jpeg_quality)?))
}

/// Memoizes decoded sources and rendered views for datasets where many
/// queries share one image file. Bounded FIFO eviction.
pub struct RenderCache {
    settings: EncodeSettings,
    capacity: usize,
    inner: Mutex<CacheState>,
}

#[derive(Default)]
struct CacheState {
    sources: HashMap<String, Arc<DynamicImage>>,
    source_order: VecDeque<String>,
    views: HashMap<(String, ImageDims), Arc<Vec<u8>>>,
    view_order: VecDeque<(String, ImageDims)>,
}

impl RenderCache {
    pub fn new(settings: EncodeSettings, capacity: usize) -> Self {
        RenderCache { settings, capacity: capacity.max(1), inner: Mutex::new(CacheState::default()) }
    }

    pub fn settings(&self) -> EncodeSettings {
        self.settings
    }

    pub fn source(&self, image_ref: &str) -> Result<Arc<DynamicImage>, ImageError> {
        if let Some(img) = self.inner.lock().unwrap().sources.get(image_ref) {
            return Ok(img.clone());
        }
        let img = Arc::new(load(Path::new(image_ref))?);
        let mut st = self.inner.lock().unwrap();
        if !st.sources.contains_key(image_ref) {
            st.sources.insert(image_ref.to_owned(), img.clone());
            st.source_order.push_back(image_ref.to_owned());
            while st.source_order.len() > self.capacity {
                if let Some(old) = st.source_order.pop_front() {
                    st.sources.remove(&old);
                }
            }
        }
        Ok(img)
    }

    /// The rendered view if both source and view are already cached.
    pub fn cached(&self, image_ref: &str, r: u32) -> Option<(ImageDims, Arc<Vec<u8>>)> {
        let st = self.inner.lock().unwrap();
        let dims = target_dims(ImageDims::of(st.sources.get(image_ref)?), r);
        let bytes = st.views.get(&(image_ref.to_owned(), dims))?.clone();
        Some((dims, bytes))
    }

    /// JPEG bytes of `image_ref` at resolution `r`, plus the dims actually produced.
    pub fn render(&self, image_ref: &str, r: u32) -> Result<(ImageDims, Arc<Vec<u8>>), ImageError> {
        let src = self.source(image_ref)?;
        let dims = target_dims(ImageDims::of(&src), r);
        let key = (image_ref.to_owned(), dims);
        if let Some(bytes) = self.inner.lock().unwrap().views.get(&key) {
            return Ok((dims, bytes.clone()));
        }
        let view = resize(&src, dims, self.settings.filter);
        let bytes = Arc::new(encode_jpeg(&view, self.settings.jpeg_quality)?);
        let mut st = self.inner.lock().unwrap();
        if !st.views.contains_key(&key) {
            st.views.insert(key.clone(), bytes.clone());
            st.view_order.push_back(key);
            while st.view_order.len() > self.capacity * 4 {
                if let Some(old) = st.view_order.pop_front() {
                    st.views.remove(&old);
                }
            }
        }
        Ok((dims, bytes))
    }
}
