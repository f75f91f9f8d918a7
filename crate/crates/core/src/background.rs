//! Fire-free background extraction and dynamic-region masks.

use thiserror::Error;

use crate::raster::{luminance, Image, Mask, Raster};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackgroundError {
    #[error("video has no frames")]
    EmptyInput,
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("frame rate must be positive, got {0}")]
    BadFrameRate(f64),
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone)]
pub struct VideoSequence {
    frames: Vec<Image>,
    frame_rate: f64,
}

impl VideoSequence {
    pub fn new(frames: Vec<Image>, frame_rate: f64) -> Result<Self, BackgroundError> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(BackgroundError::BadFrameRate(frame_rate));
        }
        if let Some(first) = frames.first() {
            let expected = first.shape();
            for (index, f) in frames.iter().enumerate() {
                if f.shape() != expected {
                    return Err(BackgroundError::ShapeMismatch {
                        index,
                        got: f.shape(),
                        expected,
                    });
                }
            }
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame_time(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-pixel, per-channel minimum over time.
pub fn min_intensity_projection(video: &VideoSequence) -> Result<Image, BackgroundError> {
    let (first, rest) = video
        .frames
        .split_first()
        .ok_or(BackgroundError::EmptyInput)?;
    let mut out = first.clone();
    for frame in rest {
        for (o, f) in out.as_mut_slice().iter_mut().zip(frame.as_slice()) {
            for c in 0..3 {
                o[c] = o[c].min(f[c]);
            }
        }
    }
    Ok(out)
}

/// Pixels whose luminance deviates from `background` by more than
/// `threshold` in at least one frame.
pub fn dynamic_mask(
    video: &VideoSequence,
    background: &Image,
    threshold: f64,
) -> Result<Mask, BackgroundError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(BackgroundError::BadThreshold(threshold));
    }
    let deviation = max_luminance_deviation(video, background)?;
    Ok(deviation.map(|&d| d > threshold))
}

/// Max over frames of `|L(frame) - L(background)|` per pixel.
pub fn max_luminance_deviation(
    video: &VideoSequence,
    background: &Image,
) -> Result<Raster<f64>, BackgroundError> {
    let (w, h) = background.shape();
    let mut dev = Raster::filled(w, h, 0.0f64);
    for (index, frame) in video.frames.iter().enumerate() {
        if frame.shape() != background.shape() {
            return Err(BackgroundError::ShapeMismatch {
                index,
                got: frame.shape(),
                expected: background.shape(),
            });
        }
        for ((d, f), b) in dev
            .as_mut_slice()
            .iter_mut()
            .zip(frame.as_slice())
            .zip(background.as_slice())
        {
            *d = d.max((luminance(f) - luminance(b)).abs());
        }
    }
    Ok(dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn textured(w: usize, h: usize) -> Image {
        Raster::from_fn(w, h, |x, y| {
            let v = 0.2 + 0.1 * ((x * 7 + y * 3) % 5) as f64 / 5.0;
            [v, v * 0.9, v * 1.1]
        })
    }

    #[test]
    fn constant_video_returns_frame() {
        let f = textured(9, 7);
        let v = VideoSequence::new(vec![f.clone(); 5], 400.0).unwrap();
        assert_eq!(min_intensity_projection(&v).unwrap(), f);
    }

    #[test]
    fn bright_blob_is_removed() {
        let bg = Raster::filled(8, 8, [0.2; 3]);
        let mut blob = bg.clone();
        for y in 2..5 {
            for x in 3..6 {
                blob.set(x, y, [1.0; 3]);
            }
        }
        let v = VideoSequence::new(vec![bg.clone(), blob, bg.clone()], 30.0).unwrap();
        assert_eq!(min_intensity_projection(&v).unwrap(), bg);
    }

    #[test]
    fn synthetic_flame_over_texture_is_removed_exactly() {
        // A flame that is brighter than the background wherever it appears and
        // leaves every pixel uncovered in at least one frame.
        let bg = textured(24, 24);
        let frames: Vec<Image> = (0..100)
            .map(|t| {
                let mut f = bg.clone();
                let cx = 4 + (t % 16);
                for y in 6..18 {
                    for x in cx..(cx + 4).min(24) {
                        let b = *bg.get(x, y);
                        f.set(x, y, [b[0] + 0.5, b[1] + 0.3, b[2] + 0.05]);
                    }
                }
                f
            })
            .collect();
        let v = VideoSequence::new(frames, 400.0).unwrap();
        assert_eq!(min_intensity_projection(&v).unwrap(), bg);
    }

    #[test]
    fn empty_video_errors() {
        let v = VideoSequence::new(vec![], 10.0).unwrap();
        assert_eq!(
            min_intensity_projection(&v),
            Err(BackgroundError::EmptyInput)
        );
        assert!(VideoSequence::new(vec![], 0.0).is_err());
    }

    #[test]
    fn mask_examples() {
        let bg = Raster::filled(5, 5, [0.0; 3]);
        let v = VideoSequence::new(vec![bg.clone(); 3], 10.0).unwrap();
        let m = dynamic_mask(&v, &bg, 0.1).unwrap();
        assert!(m.as_slice().iter().all(|&b| !b));

        let mut flip = bg.clone();
        flip.set(2, 3, [1.0; 3]);
        let v = VideoSequence::new(vec![bg.clone(), flip, bg.clone()], 10.0).unwrap();
        let m = dynamic_mask(&v, &bg, 0.5).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(*m.get(x, y), (x, y) == (2, 3));
            }
        }
        assert!(dynamic_mask(&v, &bg, 1.0).is_err());
        let small = Raster::filled(4, 5, [0.0; 3]);
        assert!(dynamic_mask(&v, &small, 0.5).is_err());
    }

    fn arb_video() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4 * 3 * 3), 1..6)
    }

    fn to_frames(raw: &[Vec<f64>]) -> Vec<Image> {
        raw.iter()
            .map(|v| Raster::from_fn(4, 3, |x, y| {
                let i = (y * 4 + x) * 3;
                [v[i], v[i + 1], v[i + 2]]
            }))
            .collect()
    }

    proptest! {
        #[test]
        fn projection_is_lower_bound_and_order_free(raw in arb_video(), rot in 0usize..6) {
            let frames = to_frames(&raw);
            let v = VideoSequence::new(frames.clone(), 10.0).unwrap();
            let m = min_intensity_projection(&v).unwrap();
            for f in &frames {
                for (a, b) in m.as_slice().iter().zip(f.as_slice()) {
                    for c in 0..3 { prop_assert!(a[c] <= b[c]); }
                }
            }
            let mut shuffled = frames.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let v2 = VideoSequence::new(shuffled, 10.0).unwrap();
            prop_assert_eq!(min_intensity_projection(&v2).unwrap(), m);
        }

        #[test]
        fn mask_monotone_in_threshold(raw in arb_video(), t1 in 0.01f64..0.98, dt in 0.0f64..0.5) {
            let frames = to_frames(&raw);
            let v = VideoSequence::new(frames, 10.0).unwrap();
            let bg = min_intensity_projection(&v).unwrap();
            let t2 = (t1 + dt).min(0.99);
            let m1 = dynamic_mask(&v, &bg, t1).unwrap();
            let m2 = dynamic_mask(&v, &bg, t2).unwrap();
            for (a, b) in m1.as_slice().iter().zip(m2.as_slice()) {
                prop_assert!(!*b || *a);
            }
        }
    }
}
