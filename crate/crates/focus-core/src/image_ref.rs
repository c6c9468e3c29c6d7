//! Cheap, immutable handles to encoded images.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine as _;
use image::{ImageFormat, ImageReader, RgbaImage};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
}

/// An encoded image plus its media type. Cloning shares the bytes.
#[derive(Debug, Clone)]
pub struct ImageRef {
    bytes: Arc<[u8]>,
    media_type: String,
    source: Option<PathBuf>,
}

impl ImageRef {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut img = Self::from_bytes(bytes);
        img.source = Some(path.to_path_buf());
        Ok(img)
    }

    /// Wrap already-encoded bytes, sniffing the media type from the content.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let media_type = match image::guess_format(&bytes) {
            Ok(ImageFormat::Png) => "image/png",
            Ok(ImageFormat::Jpeg) => "image/jpeg",
            Ok(ImageFormat::Gif) => "image/gif",
            Ok(ImageFormat::WebP) => "image/webp",
            Ok(ImageFormat::Bmp) => "image/bmp",
            _ => "application/octet-stream",
        };
        Self {
            bytes: bytes.into(),
            media_type: media_type.to_string(),
            source: None,
        }
    }

    /// A solid-color PNG, used by tests and fixtures.
    pub fn solid(width: u32, height: u32, rgba: [u8; 4]) -> Self {
        let img = RgbaImage::from_pixel(width, height, image::Rgba(rgba));
        Self::from_bytes(encode_png(&img).expect("in-memory png encode"))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn media_type(&self) -> &str {
        &self.media_type
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// `data:` URL carrying the image as base64, for chat image parts.
    pub fn data_url(&self) -> String {
        let b64 = base64::engine::general_purpose::STANDARD.encode(&*self.bytes);
        format!("data:{};base64,{}", self.media_type, b64)
    }

    pub fn decode(&self) -> Result<RgbaImage, ImageError> {
        let img = image::load_from_memory(&self.bytes)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(img.to_rgba8())
    }

    /// (width, height) from the header, without decoding pixel data.
    pub fn dimensions(&self) -> Result<(u32, u32), ImageError> {
        ImageReader::new(Cursor::new(&*self.bytes))
            .with_guessed_format()
            .map_err(|e| ImageError::Decode(e.to_string()))?
            .into_dimensions()
            .map_err(|e| ImageError::Decode(e.to_string()))
    }
}

/// Encode pixels as PNG. Lossless, so byte-identity checks on rendered
/// output are meaningful.
pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}
