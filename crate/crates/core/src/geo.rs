//! Coordinates, great-circle distance and threshold metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Street / city / region / country / continent.
pub const DEFAULT_THRESHOLDS_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];

/// A point on the globe in degrees.
///
/// Longitude is wrapped into `[-180, 180)` and both poles carry longitude 0, so two values
/// compare equal exactly when they denote the same point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoordinate {
    lat: f64,
    lon: f64,
}

impl GeoCoordinate {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::usage(format!("non-finite coordinate ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::usage(format!("latitude {lat} outside [-90, 90]")));
        }
        let mut lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if lon >= 180.0 {
            lon -= 360.0;
        }
        if lat.abs() == 90.0 {
            lon = 0.0;
        }
        // -0.0 and 0.0 must compare and hash alike
        Ok(Self {
            lat: lat + 0.0,
            lon: lon + 0.0,
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Point on the unit sphere (x toward (0, 0), z toward the north pole).
    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (phi, lambda) = (self.lat.to_radians(), self.lon.to_radians());
        [phi.cos() * lambda.cos(), phi.cos() * lambda.sin(), phi.sin()]
    }

    /// Bit-level key, stable for de-duplication.
    pub(crate) fn key(&self) -> (u64, u64) {
        (self.lat.to_bits(), self.lon.to_bits())
    }
}

impl fmt::Display for GeoCoordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
///
/// Evaluated in the atan2 form, which stays accurate for coincident and antipodal points alike.
pub fn haversine_km(a: GeoCoordinate, b: GeoCoordinate) -> f64 {
    // fixed argument order makes the result bitwise symmetric
    let (a, b) = if a.lat.total_cmp(&b.lat).then(a.lon.total_cmp(&b.lon)).is_le() {
        (a, b)
    } else {
        (b, a)
    };
    let (s1, c1) = a.lat.to_radians().sin_cos();
    let (s2, c2) = b.lat.to_radians().sin_cos();
    let (sdl, cdl) = (b.lon - a.lon).to_radians().sin_cos();
    let y = (c2 * sdl).hypot(c1 * s2 - s1 * c2 * cdl);
    let x = s1 * s2 + c1 * c2 * cdl;
    EARTH_RADIUS_KM * y.atan2(x)
}

/// Strictly ascending positive distance thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSpec {
    thresholds_km: Vec<f64>,
}

impl ThresholdSpec {
    pub fn new(thresholds_km: Vec<f64>) -> Result<Self> {
        if thresholds_km.is_empty() {
            return Err(Error::usage("threshold list is empty"));
        }
        if thresholds_km.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::usage(format!("thresholds must be positive: {thresholds_km:?}")));
        }
        if thresholds_km.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::usage(format!(
                "thresholds must be strictly ascending: {thresholds_km:?}"
            )));
        }
        Ok(Self { thresholds_km })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds_km
    }

    /// Parses a comma separated list such as `1,25,200,750,2500`.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::usage(format!("bad threshold {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self {
            thresholds_km: DEFAULT_THRESHOLDS_KM.to_vec(),
        }
    }
}

impl TryFrom<Vec<f64>> for ThresholdSpec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ThresholdSpec> for Vec<f64> {
    fn from(s: ThresholdSpec) -> Self {
        s.thresholds_km
    }
}

/// Fraction of errors `≤ t` for each threshold `t`.
pub fn threshold_accuracy(errors_km: &[f64], spec: &ThresholdSpec) -> Result<Vec<f64>> {
    if errors_km.is_empty() {
        return Err(Error::usage("threshold accuracy of an empty error list"));
    }
    if let Some(e) = errors_km.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::usage(format!("negative or NaN distance error {e}")));
    }
    let n = errors_km.len() as f64;
    Ok(spec
        .thresholds()
        .iter()
        .map(|&t| errors_km.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect())
}

/// Distance-error interval used by the concept influence table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorBin {
    Under25,
    From25To200,
    From200To750,
    Over750,
}

impl ErrorBin {
    pub const ALL: [ErrorBin; 4] = [
        ErrorBin::Under25,
        ErrorBin::From25To200,
        ErrorBin::From200To750,
        ErrorBin::Over750,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ErrorBin::Under25 => "[0-25)",
            ErrorBin::From25To200 => "[25-200)",
            ErrorBin::From200To750 => "[200-750)",
            ErrorBin::Over750 => "[750-inf)",
        }
    }
}

impl fmt::Display for ErrorBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Half-open bins `[0,25) [25,200) [200,750) [750,∞)`.
pub fn error_bin(error_km: f64) -> Result<ErrorBin> {
    if !(error_km >= 0.0) {
        return Err(Error::usage(format!(
            "distance error must be non-negative, got {error_km}"
        )));
    }
    Ok(if error_km < 25.0 {
        ErrorBin::Under25
    } else if error_km < 200.0 {
        ErrorBin::From25To200
    } else if error_km < 750.0 {
        ErrorBin::From200To750
    } else {
        ErrorBin::Over750
    })
}

/// Regular lat/lon lattice, latitude-major and ascending, with each pole emitted once.
pub fn sphere_grid(resolution_deg: f64) -> Result<Vec<GeoCoordinate>> {
    if !(resolution_deg > 0.0 && resolution_deg <= 90.0) {
        return Err(Error::usage(format!(
            "grid resolution must lie in (0, 90], got {resolution_deg}"
        )));
    }
    let n_lat = (180.0 / resolution_deg + 1e-9).floor() as usize + 1;
    let n_lon = (360.0 / resolution_deg - 1e-9).ceil() as usize;
    let mut out = Vec::new();
    for i in 0..n_lat {
        let lat = (-90.0 + i as f64 * resolution_deg).min(90.0);
        if lat.abs() == 90.0 {
            out.push(GeoCoordinate::new(lat, 0.0)?);
            continue;
        }
        for j in 0..n_lon {
            out.push(GeoCoordinate::new(lat, -180.0 + j as f64 * resolution_deg)?);
        }
    }
    Ok(out)
}
