use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reconstruction kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconFilter {
    /// Ramp apodised by a Hann window reaching zero at `cutoff` × Nyquist.
    Hann { cutoff: f64 },
}

impl ReconFilter {
    pub fn cutoff(&self) -> f64 {
        match *self {
            ReconFilter::Hann { cutoff } => cutoff,
        }
    }
}

impl fmt::Display for ReconFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReconFilter::Hann { cutoff } => write!(f, "hann:{cutoff}"),
        }
    }
}

impl FromStr for ReconFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, value) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidParameter(format!("filter {s:?}: expected hann:<cutoff>")))?;
        if !name.eq_ignore_ascii_case("hann") {
            return Err(Error::InvalidParameter(format!("unknown filter {name:?}")));
        }
        let cutoff: f64 = value
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad cutoff {value:?}")))?;
        if !(cutoff > 0.0 && cutoff.is_finite()) {
            return Err(Error::InvalidParameter(format!("cutoff must be > 0, got {cutoff}")));
        }
        Ok(ReconFilter::Hann { cutoff })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScannerModel {
    W12,
    W20,
}

impl fmt::Display for ScannerModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScannerModel::W12 => "W12",
            ScannerModel::W20 => "W20",
        })
    }
}

impl FromStr for ScannerModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "W12" => Ok(ScannerModel::W12),
            "W20" => Ok(ScannerModel::W20),
            _ => Err(Error::InvalidParameter(format!("unknown scanner {s:?}"))),
        }
    }
}

/// Fan-beam acquisition geometry and exposure.
///
/// `n_channels` × `channel_width` describe the detector rows (z); in-plane
/// sampling uses `n_detector_cols` columns at the same pitch on a flat
/// detector. The anode angle is recorded but has no physical effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannerConfig {
    pub name: String,
    /// Beam z-extent at isocentre, mm.
    pub collimation: f64,
    /// Source to isocentre, mm.
    pub siso_d: f64,
    /// Source to detector, mm.
    pub sid: f64,
    pub n_channels: usize,
    /// Detector element pitch at the detector, mm.
    pub channel_width: f64,
    pub anode_angle: f64,
    pub n_views: usize,
    pub n_detector_cols: usize,
    /// Unattenuated photons per detector element.
    pub i0: f64,
    pub recon_filter: ReconFilter,
}

pub const DEFAULT_I0: f64 = 2e5;
pub const DEFAULT_CUTOFF: f64 = 0.6;

impl ScannerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("scanner {}: {m}", self.name)));
        if !(self.siso_d > 0.0 && self.sid > self.siso_d) {
            return bad(format!("need sid > siso_d > 0 (siso_d {}, sid {})", self.siso_d, self.sid));
        }
        if self.n_views < 4 {
            return bad(format!("n_views must be >= 4, got {}", self.n_views));
        }
        if self.n_detector_cols < 2 {
            return bad(format!("n_detector_cols must be >= 2, got {}", self.n_detector_cols));
        }
        if !(self.channel_width > 0.0) {
            return bad("channel_width must be > 0".into());
        }
        if !(self.i0 > 0.0) {
            return bad(format!("i0 must be > 0, got {}", self.i0));
        }
        if !(self.recon_filter.cutoff() > 0.0) {
            return bad("filter cutoff must be > 0".into());
        }
        Ok(())
    }

    /// Detector column pitch referred to the isocentre, mm.
    pub fn pitch_at_iso(&self) -> f64 {
        self.channel_width * self.siso_d / self.sid
    }

    /// Full fan angle in radians.
    pub fn fan_angle(&self) -> f64 {
        let half = 0.5 * self.n_detector_cols as f64 * self.channel_width;
        2.0 * (half / self.sid).atan()
    }

    /// Diameter of the circle at isocentre seen by every view, mm.
    pub fn field_of_view(&self) -> f64 {
        2.0 * self.siso_d * (0.5 * self.fan_angle()).sin()
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.recon_filter = ReconFilter::Hann { cutoff };
        self
    }
}

/// Built-in scanner geometries.
pub fn builtin_scanner(model: ScannerModel) -> ScannerConfig {
    let (collimation, siso_d, sid, width, anode, cols) = match model {
        ScannerModel::W12 => (12.0, 570.0, 1040.0, 1.5, 7.0, 608),
        ScannerModel::W20 => (20.0, 541.0, 949.0, 2.19, 8.0, 400),
    };
    ScannerConfig {
        name: model.to_string(),
        collimation,
        siso_d,
        sid,
        n_channels: 16,
        channel_width: width,
        anode_angle: anode,
        n_views: 1000,
        n_detector_cols: cols,
        i0: DEFAULT_I0,
        recon_filter: ReconFilter::Hann {
            cutoff: DEFAULT_CUTOFF,
        },
    }
}
