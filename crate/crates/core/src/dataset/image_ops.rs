use crate::sim::ImageFrame;
use crate::{Error, Result};

/// Source position of output coordinate `o` along one axis in units of
/// `1 / (2 * out_len)`: `(2o + 1) * in_len - out_len`.
///
/// Returns the left sample index and the fractional weight numerator, clamped
/// to the edges.
#[inline]
fn sample_axis(o: usize, in_len: usize, out_len: usize) -> (usize, usize, u64) {
    let denom = 2 * out_len as i64;
    let num = (2 * o as i64 + 1) * in_len as i64 - out_len as i64;
    if num <= 0 {
        return (0, 0, 0);
    }
    let max = (in_len as i64 - 1) * denom;
    if num >= max {
        let last = in_len - 1;
        return (last, last, 0);
    }
    let i0 = (num / denom) as usize;
    let frac = (num % denom) as u64;
    (i0, (i0 + 1).min(in_len - 1), frac)
}

/// Bilinear resize with half-pixel-centered sampling.
///
/// Output pixel `(x, y)` samples the source at `((x + 0.5) * in_w / out_w - 0.5,
/// (y + 0.5) * in_h / out_h - 0.5)`, clamped to the image. Interpolation runs in
/// exact integer arithmetic and rounds half up, so results are bit-reproducible
/// and mirror-symmetric.
pub fn resize_image(frame: &ImageFrame, out_w: u32, out_h: u32) -> Result<ImageFrame> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Domain(format!(
            "resize target {out_w}x{out_h} has a zero dimension"
        )));
    }
    if frame.width_px == 0 || frame.height_px == 0 {
        return Err(Error::Domain("cannot resize an empty frame".into()));
    }
    if frame.width_px == out_w && frame.height_px == out_h {
        return Ok(frame.clone());
    }
    let (in_w, in_h) = (frame.width_px as usize, frame.height_px as usize);
    let (ow, oh) = (out_w as usize, out_h as usize);
    let dx = 2 * ow as u64;
    let dy = 2 * oh as u64;
    let total = dx * dy;

    let cols: Vec<_> = (0..ow).map(|x| sample_axis(x, in_w, ow)).collect();
    let mut pixels = Vec::with_capacity(ow * oh * 3);
    for y in 0..oh {
        let (y0, y1, fy) = sample_axis(y, in_h, oh);
        let row0 = &frame.pixels[y0 * in_w * 3..(y0 + 1) * in_w * 3];
        let row1 = &frame.pixels[y1 * in_w * 3..(y1 + 1) * in_w * 3];
        for &(x0, x1, fx) in &cols {
            let w00 = (dx - fx) * (dy - fy);
            let w01 = fx * (dy - fy);
            let w10 = (dx - fx) * fy;
            let w11 = fx * fy;
            for c in 0..3 {
                let acc = row0[x0 * 3 + c] as u64 * w00
                    + row0[x1 * 3 + c] as u64 * w01
                    + row1[x0 * 3 + c] as u64 * w10
                    + row1[x1 * 3 + c] as u64 * w11;
                pixels.push(((2 * acc + total) / (2 * total)) as u8);
            }
        }
    }
    ImageFrame::from_pixels(out_w, out_h, pixels)
}

/// Horizontal-flip augmentation: mirrored frame with negated steering.
pub fn flip_record(frame: &ImageFrame, steering_norm: f64) -> (ImageFrame, f64) {
    (frame.flip_horizontal(), -steering_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_size_is_identity() {
        let frame = ImageFrame::from_pixels(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        assert_eq!(resize_image(&frame, 3, 2).unwrap(), frame);
    }

    #[test]
    fn checkerboard_upsample_matches_hand_evaluation() {
        let mut frame = ImageFrame::filled(2, 2, [0, 0, 0]);
        frame.set_pixel(1, 0, [255, 255, 255]);
        frame.set_pixel(0, 1, [255, 255, 255]);
        let out = resize_image(&frame, 4, 4).unwrap();
        // Source coordinates for 2 -> 4 are -0.25, 0.25, 0.75, 1.25, i.e. weights on
        // the second sample of 0, 0.25, 0.75, 1 after clamping.
        let w: [f64; 4] = [0.0, 0.25, 0.75, 1.0];
        let src: [[f64; 2]; 2] = [[0.0, 255.0], [255.0, 0.0]];
        for y in 0..4 {
            for x in 0..4 {
                let (wy, wx) = (w[y], w[x]);
                let v = (1.0 - wy) * (1.0 - wx) * src[0][0]
                    + (1.0 - wy) * wx * src[0][1]
                    + wy * (1.0 - wx) * src[1][0]
                    + wy * wx * src[1][1];
                let expect = (v + 0.5).floor() as u8;
                assert_eq!(out.pixel(x as u32, y as u32), [expect; 3], "({x},{y}) {v}");
            }
        }
        assert_eq!(out.pixel(1, 1)[0], 96);
        assert_eq!(out.pixel(2, 1)[0], 159);
    }

    #[test]
    fn constant_stays_constant() {
        let frame = ImageFrame::filled(7, 5, [12, 200, 77]);
        for (w, h) in [(1, 1), (3, 9), (160, 120), (13, 2)] {
            let out = resize_image(&frame, w, h).unwrap();
            assert!(out.pixels.chunks_exact(3).all(|p| p == [12, 200, 77]));
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let frame = ImageFrame::filled(4, 4, [0, 0, 0]);
        assert!(resize_image(&frame, 0, 4).is_err());
        assert!(resize_image(&frame, 4, 0).is_err());
    }

    #[test]
    fn flip_negates_steering() {
        let frame = ImageFrame::from_pixels(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let (flipped, s) = flip_record(&frame, 0.4);
        assert_eq!(flipped.pixels, vec![4, 5, 6, 1, 2, 3]);
        assert_eq!(s, -0.4);
    }

    fn arb_frame() -> impl Strategy<Value = ImageFrame> {
        (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), (w * h * 3) as usize)
                .prop_map(move |px| ImageFrame::from_pixels(w, h, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn resize_commutes_with_flip(frame in arb_frame(), w in 1u32..20, h in 1u32..20) {
            let a = resize_image(&frame.flip_horizontal(), w, h).unwrap();
            let b = resize_image(&frame, w, h).unwrap().flip_horizontal();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn resize_is_idempotent_at_same_size(frame in arb_frame(), w in 1u32..20, h in 1u32..20) {
            let once = resize_image(&frame, w, h).unwrap();
            prop_assert_eq!(resize_image(&once, w, h).unwrap(), once);
        }
    }
}
