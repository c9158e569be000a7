use super::Sample;
use crate::numerics::Rng;

/// Zero padding added on every side before a random crop.
pub const CROP_PADDING: usize = 4;

/// Horizontal flip (optional), then a crop of the zero-padded image at
/// offset `(dx, dy)` in `[0, 2·CROP_PADDING]`. `(CROP_PADDING, CROP_PADDING)`
/// without a flip is the identity.
pub fn crop_flip(sample: &Sample, flip: bool, dx: usize, dy: usize) -> Sample {
    let s = sample.side;
    let mut image = vec![0.0; sample.image.len()];
    for c in 0..sample.channels {
        for row in 0..s {
            let src_row = (row + dy).wrapping_sub(CROP_PADDING);
            if src_row >= s {
                continue;
            }
            for col in 0..s {
                let src_col = (col + dx).wrapping_sub(CROP_PADDING);
                if src_col >= s {
                    continue;
                }
                let src_col = if flip { s - 1 - src_col } else { src_col };
                image[(c * s + row) * s + col] = sample.pixel(c, src_row, src_col);
            }
        }
    }
    Sample {
        image,
        ..sample.clone()
    }
}

/// Random horizontal flip (p = 0.5) and random padded crop.
pub fn augment(sample: &Sample, rng: &mut Rng) -> Sample {
    let flip = rng.bernoulli(0.5);
    let dx = rng.below(2 * CROP_PADDING + 1);
    let dy = rng.below(2 * CROP_PADDING + 1);
    crop_flip(sample, flip, dx, dy)
}
