//! Full-range BT.601 YCbCr with chroma offset 0.5 (JFIF convention).

use crate::image::Image;

const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

pub fn rgb_to_ycbcr(image: &Image) -> Image {
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let n = image.pixels();
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let y = KR * r[i] + KG * g[i] + KB * b[i];
        data[i] = y;
        data[n + i] = 0.5 + (b[i] - y) / (2.0 * (1.0 - KB));
        data[2 * n + i] = 0.5 + (r[i] - y) / (2.0 * (1.0 - KR));
    }
    Image::new(image.height(), image.width(), data).expect("same dimensions")
}

pub fn ycbcr_to_rgb(image: &Image) -> Image {
    let (yp, cb, cr) = (image.plane(0), image.plane(1), image.plane(2));
    let n = image.pixels();
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let r = yp[i] + 2.0 * (1.0 - KR) * (cr[i] - 0.5);
        let b = yp[i] + 2.0 * (1.0 - KB) * (cb[i] - 0.5);
        data[i] = r;
        data[n + i] = (yp[i] - KR * r - KB * b) / KG;
        data[2 * n + i] = b;
    }
    Image::new(image.height(), image.width(), data).expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_and_black_points() {
        let w = rgb_to_ycbcr(&Image::filled(1, 1, [1.0; 3]));
        assert!((w.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!((w.get(1, 0, 0) - 0.5).abs() < 1e-12 && (w.get(2, 0, 0) - 0.5).abs() < 1e-12);
        let k = rgb_to_ycbcr(&Image::filled(1, 1, [0.0; 3]));
        assert_eq!((k.get(0, 0, 0), k.get(1, 0, 0), k.get(2, 0, 0)), (0.0, 0.5, 0.5));
    }

    proptest! {
        #[test]
        fn round_trip_within_1e6(seed in any::<u64>()) {
            let mut s = seed;
            let img = Image::from_fn(7, 5, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            });
            let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img));
            prop_assert!(img.max_abs_diff(&back) < 1e-6);
        }
    }
}
