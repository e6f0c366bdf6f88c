//! Uniform access to conventional codecs (the "target" codec).
//!
//! Rates always count the whole container file, headers included, divided by
//! the pixel count of the original image.

mod color;
mod external;
mod jpeg;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::image::Image;
use crate::{Error, Result};

pub use color::{rgb_to_ycbcr, ycbcr_to_rgb};
pub use external::{AdapterSpec, ExternalCodec, TIMEOUT_ENV, TMPDIR_ENV};
pub use jpeg::JpegCodec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Ycbcr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeResult {
    pub bpp: f64,
    pub decoded: Image,
    pub compressed_size: usize,
}

impl EncodeResult {
    pub fn new(original: &Image, compressed_size: usize, decoded: Image) -> Self {
        EncodeResult { bpp: bits_per_pixel(compressed_size, original), decoded, compressed_size }
    }
}

pub fn bits_per_pixel(bytes: usize, original: &Image) -> f64 {
    8.0 * bytes as f64 / original.pixels() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRange {
    pub min: i32,
    pub max: i32,
    /// Whether larger quality values mean higher fidelity.
    pub higher_is_better: bool,
}

impl QualityRange {
    pub fn contains(&self, q: i32) -> bool {
        (self.min..=self.max).contains(&q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!("quality range {}..={} is empty", self.min, self.max)));
        }
        Ok(())
    }
}

/// A fixed conventional codec. `encode_decode` must be deterministic for a
/// given `(image, quality)` and safe to call concurrently.
pub trait Codec: Send + Sync {
    fn name(&self) -> &str;
    fn quality_range(&self) -> QualityRange;
    fn colorspace(&self) -> ColorSpace;
    fn encode(&self, image: &Image, quality: i32) -> Result<Vec<u8>>;
    fn decode(&self, bytes: &[u8]) -> Result<Image>;

    fn encode_decode(&self, image: &Image, quality: i32) -> Result<EncodeResult> {
        self.check_quality(quality)?;
        image.validate()?;
        let bytes = self.encode(image, quality)?;
        let decoded = self.decode(&bytes)?;
        if (decoded.height(), decoded.width()) != (image.height(), image.width()) {
            return Err(Error::Adapter {
                adapter: self.name().to_string(),
                message: format!(
                    "decoded {}x{} for a {}x{} input",
                    decoded.height(),
                    decoded.width(),
                    image.height(),
                    image.width()
                ),
            });
        }
        Ok(EncodeResult::new(image, bytes.len(), decoded))
    }

    fn check_quality(&self, quality: i32) -> Result<()> {
        let r = self.quality_range();
        if !r.contains(quality) {
            return Err(Error::InvalidInput(format!(
                "quality {quality} outside {}..={} for codec `{}`",
                r.min,
                r.max,
                self.name()
            )));
        }
        Ok(())
    }
}

/// Test double: returns its input untouched and charges raw 24-bit RGB.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }

    fn quality_range(&self) -> QualityRange {
        QualityRange { min: 0, max: 100, higher_is_better: true }
    }

    fn colorspace(&self) -> ColorSpace {
        ColorSpace::Rgb
    }

    fn encode(&self, image: &Image, _quality: i32) -> Result<Vec<u8>> {
        Ok(image.data().iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn decode(&self, _bytes: &[u8]) -> Result<Image> {
        unreachable!("identity codec overrides encode_decode")
    }

    fn encode_decode(&self, image: &Image, quality: i32) -> Result<EncodeResult> {
        self.check_quality(quality)?;
        Ok(EncodeResult::new(image, 3 * image.pixels(), image.clone()))
    }
}

/// Codec output substituted into the forward pass of every batch item, with
/// the codec treated as identity in the backward pass.
pub fn straight_through_decode<'g>(filtered: Var<'g>, codec: &dyn Codec, quality: i32) -> Result<(Var<'g>, Vec<EncodeResult>)> {
    let value = filtered.value();
    let images = Image::unbatch(&value.map(|v| v.clamp(0.0, 1.0)))?;
    let results = images.iter().map(|im| codec.encode_decode(im, quality)).collect::<Result<Vec<_>>>()?;
    let decoded: Vec<Image> = results.iter().map(|r| r.decoded.clone()).collect();
    let forward = Image::batch(&decoded)?;
    Ok((filtered.straight_through(forward), results))
}

/// Named codecs available to a run: built-ins plus adapter files.
pub struct CodecRegistry {
    codecs: BTreeMap<String, Box<dyn Codec>>,
    skipped: Vec<(String, String)>,
}

impl Default for CodecRegistry {
    fn default() -> Self {
        let mut codecs: BTreeMap<String, Box<dyn Codec>> = BTreeMap::new();
        codecs.insert("jpeg".into(), Box::new(JpegCodec));
        codecs.insert("identity".into(), Box::new(IdentityCodec));
        CodecRegistry { codecs, skipped: Vec::new() }
    }
}

impl CodecRegistry {
    pub fn with_builtins() -> Self {
        Self::default()
    }

    /// Registers every `*.toml` adapter in `dir`. Adapters whose binaries are
    /// missing are recorded in [`CodecRegistry::skipped`] rather than failing.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for path in paths {
            let spec = AdapterSpec::load(&path)?;
            let codec = ExternalCodec::new(spec)?;
            if codec.is_available() {
                self.codecs.insert(codec.name().to_string(), Box::new(codec));
            } else {
                log::warn!("skipping adapter `{}`: binary not found", codec.name());
                self.skipped.push((codec.name().to_string(), path.display().to_string()));
            }
        }
        Ok(())
    }

    pub fn register(&mut self, codec: Box<dyn Codec>) {
        self.codecs.insert(codec.name().to_string(), codec);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Codec> {
        if let Some(c) = self.codecs.get(name) {
            return Ok(c.as_ref());
        }
        if self.skipped.iter().any(|(n, _)| n == name) {
            return Err(Error::AdapterUnavailable(name.to_string()));
        }
        Err(Error::Config(format!("unknown codec `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.codecs.keys().map(String::as_str)
    }

    pub fn skipped(&self) -> &[(String, String)] {
        &self.skipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn bpp_counts_whole_file() {
        let img = Image::filled(100, 100, [0.5; 3]);
        assert_eq!(bits_per_pixel(1000, &img), 0.8);
    }

    #[test]
    fn identity_codec_is_exact() {
        let img = Image::from_fn(8, 6, |c, y, x| (c + y + x) as f64 / 20.0);
        let r = IdentityCodec.encode_decode(&img, 50).unwrap();
        assert_eq!(r.decoded, img);
        assert_eq!(r.bpp, 24.0);
    }

    #[test]
    fn quality_outside_range_is_rejected() {
        let img = Image::filled(8, 8, [0.5; 3]);
        assert!(JpegCodec.encode_decode(&img, 0).is_err());
        assert!(JpegCodec.encode_decode(&img, 101).is_err());
    }

    #[test]
    fn straight_through_uses_codec_forward_and_identity_backward() {
        let img = Image::from_fn(16, 16, |c, y, x| ((c * 5 + y * 3 + x * 11) % 17) as f64 / 16.0);
        let g = Graph::new();
        let x = g.leaf(img.to_tensor());
        let (y, results) = straight_through_decode(x, &JpegCodec, 30).unwrap();
        assert_eq!(Image::from_tensor(&y.value()).unwrap(), results[0].decoded);
        let probe = g.constant(img.to_tensor().map(|v| v - 0.3));
        let grads = g.backward(y.mul(probe).sum());
        assert_eq!(grads.get(x).unwrap(), &img.to_tensor().map(|v| v - 0.3));
    }

    #[test]
    fn registry_reports_unknown_codecs() {
        let reg = CodecRegistry::with_builtins();
        assert!(reg.get("jpeg").is_ok());
        assert!(matches!(reg.get("nope"), Err(Error::Config(_))));
    }
}
