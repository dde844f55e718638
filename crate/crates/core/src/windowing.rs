//! Two-window intensity scaling. Each window maps its HU interval affinely
//! onto [0, 1] without clamping, so voxels outside the window keep their
//! relative ordering (values fall below 0 or above 1).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::grid::Volume3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("invalid window [{lo}, {hi}]: lower bound must be below upper bound")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("at least one window is required")]
    NoWindows,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    lo: f64,
    hi: f64,
}

impl WindowSpec {
    /// Vessel-branch window.
    pub const LUNG: WindowSpec = WindowSpec { lo: -900.0, hi: 0.0 };
    /// Main-trunk (contrast-enhanced blood) window.
    pub const TRUNK: WindowSpec = WindowSpec { lo: 0.0, hi: 300.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self, WindowError> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Self { lo, hi })
        } else {
            Err(WindowError::InvalidWindow { lo, hi })
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        (hu - self.lo) / (self.hi - self.lo)
    }
}

pub fn default_windows() -> Vec<WindowSpec> {
    vec![WindowSpec::LUNG, WindowSpec::TRUNK]
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl FromStr for WindowSpec {
    type Err = String;

    /// Parses `lo:hi`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s.split_once(':').ok_or_else(|| format!("window '{s}' must look like lo:hi"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("window bound '{v}': {e}"));
        WindowSpec::new(parse(lo)?, parse(hi)?).map_err(|e| e.to_string())
    }
}

/// Stacked windowed channels of one volume, all sharing its shape and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    channels: Vec<Volume3>,
    windows: Vec<WindowSpec>,
}

impl MultiChannelVolume {
    pub fn channels(&self) -> &[Volume3] {
        &self.channels
    }

    pub fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.channels[0].shape()
    }
}

pub fn make_channels(vol: &Volume3, windows: &[WindowSpec]) -> Result<MultiChannelVolume, WindowError> {
    if windows.is_empty() {
        return Err(WindowError::NoWindows);
    }
    let channels = windows.iter().map(|w| vol.map(|v| w.apply(v as f64) as f32)).collect();
    Ok(MultiChannelVolume { channels, windows: windows.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use proptest::prelude::*;

    fn single(hu: f32) -> Volume3 {
        Grid3::filled([1, 1, 1], [1.0; 3], hu).unwrap()
    }

    #[test]
    fn window_endpoints() {
        let mc = make_channels(&single(-900.0), &default_windows()).unwrap();
        assert_eq!(mc.channels()[0].data()[0], 0.0);
        let mc = make_channels(&single(0.0), &default_windows()).unwrap();
        assert_eq!(mc.channels()[0].data()[0], 1.0);
        assert_eq!(mc.channels()[1].data()[0], 0.0);
    }

    #[test]
    fn midpoint_and_no_truncation() {
        let w = [WindowSpec::TRUNK];
        assert_eq!(make_channels(&single(150.0), &w).unwrap().channels()[0].data()[0], 0.5);
        assert_eq!(make_channels(&single(600.0), &w).unwrap().channels()[0].data()[0], 2.0);
        assert_eq!(make_channels(&single(-300.0), &w).unwrap().channels()[0].data()[0], -1.0);
    }

    #[test]
    fn invalid_windows() {
        assert!(WindowSpec::new(0.0, 0.0).is_err());
        assert!(WindowSpec::new(10.0, -10.0).is_err());
        assert_eq!(make_channels(&single(0.0), &[]), Err(WindowError::NoWindows));
        assert_eq!("-900:0".parse::<WindowSpec>().unwrap(), WindowSpec::LUNG);
        assert!("5".parse::<WindowSpec>().is_err());
    }

    #[test]
    fn default_order() {
        let w = default_windows();
        assert_eq!((w[0].lo(), w[0].hi()), (-900.0, 0.0));
        assert_eq!((w[1].lo(), w[1].hi()), (0.0, 300.0));
    }

    proptest! {
        /// channel(a*v + b) = a * channel(v) + (b + (a - 1) * lo) / width
        #[test]
        fn channels_are_affine(v in -3000.0f64..3000.0, a in -4.0f64..4.0, b in -500.0f64..500.0) {
            for w in default_windows() {
                let width = w.hi() - w.lo();
                let lhs = w.apply(a * v + b);
                let rhs = a * w.apply(v) + (b + (a - 1.0) * w.lo()) / width;
                prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
            }
        }
    }
}
