use std::io::Cursor;

use image::codecs::jpeg::{JpegDecoder, JpegEncoder};
use image::{DynamicImage, ImageDecoder};

use super::{Codec, ColorSpace, QualityRange};
use crate::image::Image;
use crate::{Error, Result};

/// Built-in baseline JPEG (quality 1..=100), encoded in YCbCr.
#[derive(Clone, Copy, Debug, Default)]
pub struct JpegCodec;

impl Codec for JpegCodec {
    fn name(&self) -> &str {
        "jpeg"
    }

    fn quality_range(&self) -> QualityRange {
        QualityRange { min: 1, max: 100, higher_is_better: true }
    }

    fn colorspace(&self) -> ColorSpace {
        ColorSpace::Ycbcr
    }

    fn encode(&self, image: &Image, quality: i32) -> Result<Vec<u8>> {
        self.check_quality(quality)?;
        let mut out = Vec::new();
        JpegEncoder::new_with_quality(&mut out, quality as u8)
            .encode_image(&image.to_dynamic())
            .map_err(|e| Error::Adapter { adapter: "jpeg".into(), message: e.to_string() })?;
        Ok(out)
    }

    fn decode(&self, bytes: &[u8]) -> Result<Image> {
        let decoder = JpegDecoder::new(Cursor::new(bytes))
            .map_err(|e| Error::Adapter { adapter: "jpeg".into(), message: e.to_string() })?;
        let (w, h) = decoder.dimensions();
        let img = DynamicImage::from_decoder(decoder)
            .map_err(|e| Error::Adapter { adapter: "jpeg".into(), message: e.to_string() })?;
        debug_assert_eq!((img.width(), img.height()), (w, h));
        Ok(Image::from_dynamic(&img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn round_trip_is_deterministic() {
        let img = synth::corpus(1, 48, 64, 3).remove(0);
        let a = JpegCodec.encode(&img, 40).unwrap();
        let b = JpegCodec.encode(&img, 40).unwrap();
        assert_eq!(a, b);
        let r = JpegCodec.encode_decode(&img, 40).unwrap();
        assert_eq!(r.compressed_size, a.len());
        assert_eq!((r.decoded.height(), r.decoded.width()), (48, 64));
    }

    #[test]
    fn rate_grows_with_quality() {
        let img = synth::corpus(1, 96, 96, 5).remove(0);
        let rates: Vec<f64> = [10, 30, 50, 70, 90].iter().map(|&q| JpegCodec.encode_decode(&img, q).unwrap().bpp).collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    }
}
