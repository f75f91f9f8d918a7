//! LED synchronization pattern: a 15-bit Gray-code frame counter, a parity
//! LED and five sequentially toggling strips for sub-frame timing.
//!
//! Timing model (controller clock): the counter shows
//! `floor(t / frame_period) mod 2^15` and the parity LED is on iff that value
//! is odd. Strip `k` flips state at `k * P + j * 5P` for every integer `j`,
//! where `P` is `strip_toggle_period`, so the strip pattern repeats every
//! `5P`. A camera row captured at time `t` sees the LEDs as they are at `t`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::ReadoutSchedule;
use crate::raster::{luminance, Image};

pub const COUNTER_BITS: usize = 15;
pub const COUNTER_MAX: u32 = (1 << COUNTER_BITS) - 1;
pub const STRIP_COUNT: usize = 5;
/// Luminance band around the threshold that counts as indeterminate.
pub const INDETERMINATE_BAND: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("frame index {0} does not fit in 15 bits")]
    OutOfRange(u32),
    #[error("invalid LED layout: {0}")]
    InvalidLayout(String),
    #[error("ambiguous LED reading in regions {regions:?}")]
    Ambiguous { regions: Vec<String> },
    #[error("counter decodes to {decoded} but the parity LED disagrees")]
    ParityMismatch { decoded: u32 },
    #[error("no brightness transition in any strip")]
    NoEdge,
    #[error("sub-frame timing needs a rolling shutter (line_time > 0)")]
    GlobalShutter,
}

pub fn gray_encode(n: u32) -> Result<u16, SyncError> {
    if n > COUNTER_MAX {
        return Err(SyncError::OutOfRange(n));
    }
    Ok((n ^ (n >> 1)) as u16)
}

pub fn gray_decode(bits: u16) -> u32 {
    let mut g = (bits as u32) & COUNTER_MAX;
    let mut n = 0;
    while g != 0 {
        n ^= g;
        g >>= 1;
    }
    n
}

/// Gray code bits, most significant first.
pub fn gray_bits(n: u32) -> Result<[bool; COUNTER_BITS], SyncError> {
    let g = gray_encode(n)?;
    Ok(std::array::from_fn(|i| (g >> (COUNTER_BITS - 1 - i)) & 1 == 1))
}

fn bits_to_word(bits: &[bool; COUNTER_BITS]) -> u16 {
    bits.iter().fold(0u16, |acc, &b| (acc << 1) | b as u16)
}

/// Axis-aligned pixel rectangle `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.width
            && o.x < self.x + self.width
            && self.y < o.y + o.height
            && o.y < self.y + self.height
    }

    fn fits(&self, w: usize, h: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= w && self.y + self.height <= h
    }

    fn mean_luminance(&self, image: &Image) -> f64 {
        let mut s = 0.0;
        for y in self.y..self.y + self.height {
            for x in self.x..self.x + self.width {
                s += luminance(image.get(x, y));
            }
        }
        s / (self.width * self.height) as f64
    }
}

fn default_threshold() -> f64 {
    0.5
}

fn default_min_step() -> f64 {
    0.1
}

fn default_delta_b() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedLayout {
    /// Gray-code bit regions, most significant bit first.
    pub counter_led_regions: Vec<Rect>,
    pub ambiguity_led_region: Rect,
    /// Strip columns in toggle order.
    pub strip_regions: Vec<Rect>,
    /// Seconds between consecutive strip toggles.
    pub strip_toggle_period: f64,
    #[serde(default = "default_threshold")]
    pub on_threshold: f64,
    /// Smallest luminance step accepted as a strip edge.
    #[serde(default = "default_min_step")]
    pub edge_min_step: f64,
    /// Edge localization uncertainty in rows.
    #[serde(default = "default_delta_b")]
    pub delta_b: f64,
}

impl LedLayout {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), SyncError> {
        let bad = |m: String| Err(SyncError::InvalidLayout(m));
        if self.counter_led_regions.len() != COUNTER_BITS {
            return bad(format!(
                "expected {COUNTER_BITS} counter regions, got {}",
                self.counter_led_regions.len()
            ));
        }
        if self.strip_regions.is_empty() || self.strip_regions.len() > STRIP_COUNT {
            return bad(format!("expected 1..={STRIP_COUNT} strips, got {}", self.strip_regions.len()));
        }
        if !(self.strip_toggle_period > 0.0 && self.strip_toggle_period.is_finite()) {
            return bad("strip_toggle_period must be positive".into());
        }
        if !(self.delta_b > 0.0) || !(self.edge_min_step > 0.0) {
            return bad("delta_b and edge_min_step must be positive".into());
        }
        let all: Vec<&Rect> = self
            .counter_led_regions
            .iter()
            .chain(std::iter::once(&self.ambiguity_led_region))
            .chain(&self.strip_regions)
            .collect();
        for (i, r) in all.iter().enumerate() {
            if !r.fits(width, height) {
                return bad(format!("region {i} {r:?} is empty or outside {width}x{height}"));
            }
            for (j, o) in all.iter().enumerate().skip(i + 1) {
                if r.overlaps(o) {
                    return bad(format!("regions {i} and {j} overlap"));
                }
            }
        }
        Ok(())
    }

    /// Strip cycle length `5 P`: the period of the whole strip pattern.
    pub fn strip_cycle(&self) -> f64 {
        STRIP_COUNT as f64 * self.strip_toggle_period
    }
}

/// Compact default layout for images at least 64 px wide and 24 px tall:
/// a top band of 16 LED cells and five full-height strips below it.
pub fn default_layout(width: usize, height: usize, frame_period: f64) -> Result<LedLayout, SyncError> {
    if width < 64 || height < 24 {
        return Err(SyncError::InvalidLayout(format!(
            "default layout needs at least 64x24, got {width}x{height}"
        )));
    }
    let cell = width / 16;
    let led = |i: usize| Rect::new(i * cell, 1, cell - 1, 3);
    let strip_w = (width / STRIP_COUNT).min(8);
    let gap = (width - STRIP_COUNT * strip_w) / (STRIP_COUNT + 1);
    Ok(LedLayout {
        counter_led_regions: (0..COUNTER_BITS).map(led).collect(),
        ambiguity_led_region: led(COUNTER_BITS),
        strip_regions: (0..STRIP_COUNT)
            .map(|k| Rect::new(gap + k * (strip_w + gap), 6, strip_w, height - 6))
            .collect(),
        strip_toggle_period: frame_period / STRIP_COUNT as f64,
        on_threshold: default_threshold(),
        edge_min_step: default_min_step(),
        delta_b: default_delta_b(),
    })
}

/// LED controller state as a function of time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedClock {
    pub frame_period: f64,
    pub strip_toggle_period: f64,
}

impl LedClock {
    pub fn counter(&self, t: f64) -> u32 {
        ((t / self.frame_period).floor() as i64).rem_euclid(1 << COUNTER_BITS) as u32
    }

    pub fn strip_on(&self, k: usize, t: f64) -> bool {
        let p = self.strip_toggle_period;
        let phase = ((t - k as f64 * p) / (STRIP_COUNT as f64 * p)).floor() as i64;
        phase.rem_euclid(2) == 1
    }
}

/// Paints the LED board as seen by a rolling-shutter camera whose frame
/// starts at `t_start`; each row shows the LEDs at its own capture time.
pub fn paint_leds(
    image: &mut Image,
    layout: &LedLayout,
    clock: &LedClock,
    readout: &ReadoutSchedule,
    t_start: f64,
    on: [f64; 3],
    off: [f64; 3],
) {
    let h = image.height();
    let row_time = |y: usize| t_start + readout.row_delay(y as f64, h);
    let mut fill = |r: &Rect, state: &dyn Fn(f64) -> bool| {
        for y in r.y..r.y + r.height {
            let c = if state(row_time(y)) { on } else { off };
            for x in r.x..r.x + r.width {
                image.set(x, y, c);
            }
        }
    };
    for (i, r) in layout.counter_led_regions.iter().enumerate() {
        let bit = COUNTER_BITS - 1 - i;
        fill(r, &|t| {
            let n = clock.counter(t);
            ((n ^ (n >> 1)) >> bit) & 1 == 1
        });
    }
    fill(&layout.ambiguity_led_region, &|t| clock.counter(t) % 2 == 1);
    for (k, r) in layout.strip_regions.iter().enumerate() {
        fill(r, &|t| clock.strip_on(k, t));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterReading {
    pub frame_index: u32,
    /// The capture straddled a counter increment.
    pub transition: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Led {
    On,
    Off,
    Unsure,
}

fn classify(l: f64, threshold: f64) -> Led {
    if l > threshold + INDETERMINATE_BAND {
        Led::On
    } else if l < threshold - INDETERMINATE_BAND {
        Led::Off
    } else {
        Led::Unsure
    }
}

/// Decodes the frame counter.
///
/// A single indeterminate counter bit is a capture straddling an increment;
/// the two candidates then have opposite parity and the parity LED picks one.
pub fn read_counter(image: &Image, layout: &LedLayout, on_threshold: f64) -> Result<CounterReading, SyncError> {
    layout.validate(image.width(), image.height())?;
    let states: Vec<Led> = layout
        .counter_led_regions
        .iter()
        .map(|r| classify(r.mean_luminance(image), on_threshold))
        .collect();
    let parity = classify(layout.ambiguity_led_region.mean_luminance(image), on_threshold);
    let unsure: Vec<usize> = (0..COUNTER_BITS).filter(|&i| states[i] == Led::Unsure).collect();
    let bits: [bool; COUNTER_BITS] = std::array::from_fn(|i| states[i] == Led::On);

    match (unsure.as_slice(), parity) {
        ([], Led::Unsure) => Ok(CounterReading {
            frame_index: gray_decode(bits_to_word(&bits)),
            transition: true,
        }),
        ([], p) => {
            let n = gray_decode(bits_to_word(&bits));
            if (n % 2 == 1) != (p == Led::On) {
                return Err(SyncError::ParityMismatch { decoded: n });
            }
            Ok(CounterReading {
                frame_index: n,
                transition: false,
            })
        }
        (&[i], p) if p != Led::Unsure => {
            let mut lo = bits;
            lo[i] = false;
            let mut hi = bits;
            hi[i] = true;
            let a = gray_decode(bits_to_word(&lo));
            let b = gray_decode(bits_to_word(&hi));
            let want_odd = p == Led::On;
            let n = if (a % 2 == 1) == want_odd { a } else { b };
            Ok(CounterReading {
                frame_index: n,
                transition: true,
            })
        }
        _ => {
            let mut regions: Vec<String> = unsure.iter().map(|i| format!("bit {i}")).collect();
            if parity == Led::Unsure {
                regions.push("parity".into());
            }
            Err(SyncError::Ambiguous { regions })
        }
    }
}

/// Sub-pixel row of the steepest luminance step in a strip, with its
/// magnitude. The row profile is box-smoothed over 3 rows first.
fn strip_edge(image: &Image, r: &Rect) -> Option<(f64, f64)> {
    let profile: Vec<f64> = (r.y..r.y + r.height)
        .map(|y| {
            let mut s = 0.0;
            for x in r.x..r.x + r.width {
                s += luminance(image.get(x, y));
            }
            s / r.width as f64
        })
        .collect();
    let n = profile.len();
    if n < 4 {
        return None;
    }
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let a = i.saturating_sub(1);
            let b = (i + 1).min(n - 1);
            (profile[a] + profile[i] + profile[b]) / 3.0
        })
        .collect();
    let diffs: Vec<f64> = smooth.windows(2).map(|w| w[1] - w[0]).collect();
    let (peak, _) = diffs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
    let sign = diffs[peak].signum();
    // a clean step spreads over 3 equal diffs after smoothing, so the window
    // must cover all of them whichever one won the max
    let lo = peak.saturating_sub(2);
    let hi = (peak + 2).min(diffs.len() - 1);
    let mut wsum = 0.0;
    let mut pos = 0.0;
    for (i, d) in diffs.iter().enumerate().take(hi + 1).skip(lo) {
        // only same-signed neighbors belong to this edge
        let w = (d * sign).max(0.0);
        wsum += w;
        pos += w * (i as f64 + 0.5);
    }
    if wsum <= 0.0 {
        return None;
    }
    Some((r.y as f64 + pos / wsum, wsum))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubframeOffset {
    /// Frame start relative to the strip cycle, in `[0, 5P)`.
    pub offset: f64,
    pub precision: f64,
    pub strips_used: usize,
}

/// Frame-start offset within the strip cycle from strip edges.
///
/// Each strip with a visible edge at row `b` gives
/// `o_k = (k P - delay(b)) mod 5P`; estimates are fused by circular mean and
/// the precision is `line_time * delta_b / sqrt(n)`.
pub fn subframe_offset(
    image: &Image,
    layout: &LedLayout,
    schedule: &ReadoutSchedule,
) -> Result<SubframeOffset, SyncError> {
    layout.validate(image.width(), image.height())?;
    if schedule.is_global() {
        return Err(SyncError::GlobalShutter);
    }
    let cycle = layout.strip_cycle();
    let h = image.height();
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0usize;
    for (k, r) in layout.strip_regions.iter().enumerate() {
        let Some((row, step)) = strip_edge(image, r) else { continue };
        if step < layout.edge_min_step {
            continue;
        }
        let d = schedule.pixel_delay(&Vector2::new(0.0, row), h);
        let o = (k as f64 * layout.strip_toggle_period - d).rem_euclid(cycle);
        let a = o / cycle * std::f64::consts::TAU;
        sx += a.cos();
        sy += a.sin();
        n += 1;
    }
    if n == 0 {
        return Err(SyncError::NoEdge);
    }
    let offset = (sy.atan2(sx) / std::f64::consts::TAU * cycle).rem_euclid(cycle);
    Ok(SubframeOffset {
        offset,
        precision: schedule.line_time * layout.delta_b / (n as f64).sqrt(),
        strips_used: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncReading {
    pub frame_index: u32,
    pub transition: bool,
    /// `None` when no strip shows an edge.
    pub subframe_offset: Option<f64>,
    pub offset_precision: Option<f64>,
}

/// Counter plus sub-frame offset; a frame without visible strip edges still
/// yields its counter.
pub fn decode_frame(
    image: &Image,
    layout: &LedLayout,
    schedule: &ReadoutSchedule,
) -> Result<SyncReading, SyncError> {
    let c = read_counter(image, layout, layout.on_threshold)?;
    let (subframe_offset, offset_precision) = match subframe_offset(image, layout, schedule) {
        Ok(s) => (Some(s.offset), Some(s.precision)),
        Err(SyncError::NoEdge | SyncError::GlobalShutter) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(SyncReading {
        frame_index: c.frame_index,
        transition: c.transition,
        subframe_offset,
        offset_precision,
    })
}
