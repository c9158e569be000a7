//! Synthetic local-texture classification.
//!
//! Each single-channel image holds a few short anti-aliased bars over a noisy
//! background. Every bar of an image of class `c` is oriented near
//! `θ_c = c·π/C`, so the label is readable from local texture alone while bar
//! positions carry no information.

use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub side: usize,
    pub classes: usize,
    pub bars: usize,
    pub bar_length: f64,
    pub bar_width: f64,
    /// Std of per-bar orientation jitter, radians.
    pub orientation_noise: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            side: 32,
            classes: 4,
            bars: 6,
            bar_length: 9.0,
            bar_width: 1.5,
            orientation_noise: 0.08,
            pixel_noise: 0.08,
            seed: 0,
        }
    }
}

const BACKGROUND: f64 = 0.15;
const BAR_INTENSITY: f64 = 0.85;

impl SynthSpec {
    pub fn orientation(&self, class: usize) -> f64 {
        class as f64 * std::f64::consts::PI / self.classes as f64
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 || self.classes == 0 || self.classes > 255 {
            return Err(Error::InvalidArgument(
                "synthetic data needs side >= 1 and 1..=255 classes".into(),
            ));
        }
        if !(self.bar_length > 0.0 && self.bar_width > 0.0) {
            return Err(Error::InvalidArgument("bar length and width must be positive".into()));
        }
        if !(self.orientation_noise >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(Error::InvalidArgument("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

fn draw_bar(img: &mut [f64], side: usize, cx: f64, cy: f64, theta: f64, spec: &SynthSpec) {
    let (sin, cos) = theta.sin_cos();
    let half_len = spec.bar_length / 2.0;
    let half_w = spec.bar_width / 2.0;
    let reach = half_len + half_w + 1.0;
    let r0 = (cy - reach).floor().max(0.0) as usize;
    let r1 = ((cy + reach).ceil() as usize).min(side.saturating_sub(1));
    let c0 = (cx - reach).floor().max(0.0) as usize;
    let c1 = ((cx + reach).ceil() as usize).min(side.saturating_sub(1));
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (dx, dy) = (col as f64 - cx, row as f64 - cy);
            let along = dx * cos + dy * sin;
            let across = -dx * sin + dy * cos;
            // one-pixel linear falloff at both the sides and the ends
            let side_cov = (half_w + 0.5 - across.abs()).clamp(0.0, 1.0);
            let end_cov = (half_len + 0.5 - along.abs()).clamp(0.0, 1.0);
            let v = BAR_INTENSITY * side_cov * end_cov;
            let p = &mut img[row * side + col];
            *p = p.max(BACKGROUND + v);
        }
    }
}

/// `n` samples from sub-stream `stream` of `spec.seed`. Labels are drawn
/// uniformly, so class counts follow a multinomial.
pub fn synth_generate_stream(spec: &SynthSpec, n: usize, stream: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, stream);
    let side = spec.side;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.below(spec.classes);
        let mut img = vec![BACKGROUND; side * side];
        for _ in 0..spec.bars {
            let cx = rng.uniform_range(0.0, side as f64);
            let cy = rng.uniform_range(0.0, side as f64);
            let theta = spec.orientation(label) + rng.normal(0.0, spec.orientation_noise);
            draw_bar(&mut img, side, cx, cy, theta, spec);
        }
        for p in img.iter_mut() {
            *p = (*p + rng.normal(0.0, spec.pixel_noise)).clamp(0.0, 1.0);
        }
        out.push(Sample {
            image: img,
            label,
            channels: 1,
            side,
        });
    }
    Ok(out)
}

/// `n` samples from stream 0.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Result<Vec<Sample>> {
    synth_generate_stream(spec, n, 0)
}

const SYNTH_MAGIC: &[u8; 6] = b"SYNDS1";
const SYNTH_VERSION: u16 = 1;

/// Binary export: a 16-byte header (`"SYNDS1"`, version u16, sample count
/// u32, channels u8, classes u8, side u16; little-endian) followed by one
/// record per sample: label u8 then `channels·side²` f64 pixels.
pub fn write_synth_dataset(path: impl AsRef<Path>, samples: &[Sample], classes: usize) -> Result<()> {
    let (channels, side) = samples.first().map_or((1, 0), |s| (s.channels, s.side));
    if samples.iter().any(|s| s.channels != channels || s.side != side || s.label >= classes)
        || channels > 255
        || classes > 255
        || side > u16::MAX as usize
        || samples.len() > u32::MAX as usize
    {
        return Err(Error::InvalidArgument("samples do not fit the synthetic export format".into()));
    }
    let mut buf = Vec::with_capacity(16 + samples.len() * (1 + 8 * channels * side * side));
    buf.extend_from_slice(SYNTH_MAGIC);
    buf.extend_from_slice(&SYNTH_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.push(channels as u8);
    buf.push(classes as u8);
    buf.extend_from_slice(&(side as u16).to_le_bytes());
    for s in samples {
        buf.push(s.label as u8);
        for p in &s.image {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Returns the samples and the class count from the header.
pub fn read_synth_dataset(path: impl AsRef<Path>) -> Result<(Vec<Sample>, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..6] != SYNTH_MAGIC {
        return Err(bad("not a synthetic dataset file"));
    }
    if u16::from_le_bytes([bytes[6], bytes[7]]) != SYNTH_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let channels = bytes[12] as usize;
    let classes = bytes[13] as usize;
    let side = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let pixels = channels * side * side;
    let rec = 1 + 8 * pixels;
    if bytes.len() != 16 + n * rec {
        return Err(bad("length does not match header"));
    }
    let mut out = Vec::with_capacity(n);
    for r in bytes[16..].chunks_exact(rec) {
        let label = r[0] as usize;
        if label >= classes {
            return Err(bad("label out of range"));
        }
        let image = r[1..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(Sample {
            image,
            label,
            channels,
            side,
        });
    }
    Ok((out, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        let spec = SynthSpec::default();
        assert!(synth_generate(&spec, 0).unwrap().is_empty());
        let a = synth_generate(&spec, 5).unwrap();
        let b = synth_generate(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_generate_stream(&spec, 5, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_in_unit_range() {
        let s = synth_generate(&SynthSpec::default(), 20).unwrap();
        assert!(s.iter().all(|s| s.image.iter().all(|p| (0.0..=1.0).contains(p))));
        assert!(s.iter().all(|s| s.label < 4 && s.image.len() == 32 * 32));
    }

    #[test]
    fn class_counts_are_balanced() {
        let s = synth_generate(&SynthSpec::default(), 1000).unwrap();
        let mut counts = [0usize; 4];
        for x in &s {
            counts[x.label] += 1;
        }
        for c in counts {
            assert!((190..=310).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn export_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let s = synth_generate(&SynthSpec { side: 8, ..SynthSpec::default() }, 7).unwrap();
        write_synth_dataset(&p, &s, 4).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"SYNDS1");
        assert_eq!(bytes.len(), 16 + 7 * (1 + 8 * 64));
        let (back, classes) = read_synth_dataset(&p).unwrap();
        assert_eq!((back, classes), (s, 4));
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_synth_dataset(&p), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SynthSpec {
            classes: 0,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&bad, 1).is_err());
        let bad = SynthSpec {
            bar_width: 0.0,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&bad, 1).is_err());
    }
}
