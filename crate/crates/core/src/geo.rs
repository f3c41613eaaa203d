//! Geographic primitives: points, bounding boxes, spherical measures and
//! coordinate extraction from free text.
//!
//! All measures use a spherical earth of radius [`EARTH_RADIUS_KM`]. Boxes
//! never wrap the antimeridian: `lon_min <= lon_max` is part of validity.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// IUGG mean earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Absolute tolerance used for coordinate comparisons, in degrees.
pub const COORD_EPS_DEG: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoordError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeRange(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("min longitude {min} greater than max longitude {max}")]
    LongitudeOrder { min: f64, max: f64 },
    #[error("min latitude {min} greater than max latitude {max}")]
    LatitudeOrder { min: f64, max: f64 },
}

impl CoordError {
    /// Range violations are tallied separately from ordering violations.
    pub fn is_range(&self) -> bool {
        matches!(
            self,
            CoordError::LatitudeRange(_) | CoordError::LongitudeRange(_) | CoordError::NonFinite
        )
    }
}

fn check_lat(lat: f64) -> Result<(), CoordError> {
    if !lat.is_finite() {
        return Err(CoordError::NonFinite);
    }
    if !(-90.0..=90.0).contains(&lat) {
        return Err(CoordError::LatitudeRange(lat));
    }
    Ok(())
}

fn check_lon(lon: f64) -> Result<(), CoordError> {
    if !lon.is_finite() {
        return Err(CoordError::NonFinite);
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(CoordError::LongitudeRange(lon));
    }
    Ok(())
}

/// A latitude/longitude pair in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = CoordError;
    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, CoordError> {
        check_lat(lat)?;
        check_lon(lon)?;
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn approx_eq(&self, other: &GeoPoint) -> bool {
        (self.lat - other.lat).abs() <= COORD_EPS_DEG && (self.lon - other.lon).abs() <= COORD_EPS_DEG
    }
}

/// Renders as `(lat, lon)`.
impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", format_coord(self.lat), format_coord(self.lon))
    }
}

/// A rectangle `{lon_min, lat_min, lon_max, lat_max}` in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    lon_min: f64,
    lat_min: f64,
    lon_max: f64,
    lat_max: f64,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = CoordError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl BoundingBox {
    pub fn new(lon_min: f64, lat_min: f64, lon_max: f64, lat_max: f64) -> Result<Self, CoordError> {
        check_lon(lon_min)?;
        check_lat(lat_min)?;
        check_lon(lon_max)?;
        check_lat(lat_max)?;
        if lon_min > lon_max {
            return Err(CoordError::LongitudeOrder { min: lon_min, max: lon_max });
        }
        if lat_min > lat_max {
            return Err(CoordError::LatitudeOrder { min: lat_min, max: lat_max });
        }
        Ok(Self { lon_min, lat_min, lon_max, lat_max })
    }

    pub fn lon_min(&self) -> f64 {
        self.lon_min
    }
    pub fn lat_min(&self) -> f64 {
        self.lat_min
    }
    pub fn lon_max(&self) -> f64 {
        self.lon_max
    }
    pub fn lat_max(&self) -> f64 {
        self.lat_max
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.lon_min, self.lat_min, self.lon_max, self.lat_max]
    }

    /// Arithmetic midpoint in degrees.
    pub fn centroid(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.lat_min + self.lat_max) / 2.0,
            lon: (self.lon_min + self.lon_max) / 2.0,
        }
    }

    pub fn area_km2(&self) -> f64 {
        bbox_area_km2(self)
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        bbox_intersection(self, other)
    }

    /// Closed containment test.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lon >= self.lon_min && p.lon <= self.lon_max && p.lat >= self.lat_min && p.lat <= self.lat_max
    }

    pub fn approx_eq(&self, other: &BoundingBox) -> bool {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .all(|(a, b)| (a - b).abs() <= COORD_EPS_DEG)
    }
}

/// Renders as `(lon_min, lat_min, lon_max, lat_max)`.
impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            format_coord(self.lon_min),
            format_coord(self.lat_min),
            format_coord(self.lon_max),
            format_coord(self.lat_max)
        )
    }
}

/// Shortest round-trip decimal rendering, padded to at least three decimals.
///
/// `5.27` renders as `5.270`, `63.002662154702726` is kept in full.
pub fn format_coord(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    let s = format!("{v}");
    match s.find('.') {
        None => format!("{s}.000"),
        Some(dot) => {
            let decimals = s.len() - dot - 1;
            if decimals >= 3 {
                s
            } else {
                format!("{s}{}", "0".repeat(3 - decimals))
            }
        }
    }
}

/// A named place with its geographic information, as returned by a recaller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoInfo {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    pub center: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

impl GeoInfo {
    pub fn from_center(name: impl Into<String>, center: GeoPoint) -> Self {
        Self { name: name.into(), country: None, center, bbox: None, source_id: None }
    }
}

/// Great-circle distance on the reference sphere.
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn bbox_centroid(b: &BoundingBox) -> GeoPoint {
    b.centroid()
}

/// Area of the spherical lat/lon rectangle: `R^2 * dlon * (sin lat_max - sin lat_min)`.
pub fn bbox_area_km2(b: &BoundingBox) -> f64 {
    let dlon = (b.lon_max - b.lon_min).to_radians();
    let dsin = b.lat_max.to_radians().sin() - b.lat_min.to_radians().sin();
    (EARTH_RADIUS_KM * EARTH_RADIUS_KM * dlon * dsin).max(0.0)
}

/// Overlap box, or `None` unless the boxes overlap with positive extent on both axes.
pub fn bbox_intersection(a: &BoundingBox, b: &BoundingBox) -> Option<BoundingBox> {
    let lon_min = a.lon_min.max(b.lon_min);
    let lat_min = a.lat_min.max(b.lat_min);
    let lon_max = a.lon_max.min(b.lon_max);
    let lat_max = a.lat_max.min(b.lat_max);
    if lon_max > lon_min && lat_max > lat_min {
        Some(BoundingBox { lon_min, lat_min, lon_max, lat_max })
    } else {
        None
    }
}

/// Result of pulling a coordinate tuple out of text.
#[derive(Debug, Clone, PartialEq)]
pub enum Parsed<T> {
    Valid(T),
    /// A tuple was found but failed validation. Raw values kept for error analysis.
    Invalid { values: Vec<f64>, error: CoordError },
    Missing,
}

impl<T> Parsed<T> {
    pub fn valid(self) -> Option<T> {
        match self {
            Parsed::Valid(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Parsed::Missing)
    }
}

pub(crate) const NUM: &str = r"[+-]?(?:\d+(?:\.\d+)?|\.\d+)";

static POINT_TUPLE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"\(\s*({NUM})\s*,\s*({NUM})\s*\)")).unwrap());

static BOX_TUPLE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\(\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*\)"
    ))
    .unwrap()
});

fn last_tuple<const N: usize>(re: &Regex, text: &str) -> Option<[f64; N]> {
    let caps = re.captures_iter(text).last()?;
    let mut out = [0.0; N];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = caps[i + 1].parse().ok()?;
    }
    Some(out)
}

/// Extracts the last `(lat, lon)` tuple in `text`.
pub fn parse_point(text: &str) -> Parsed<GeoPoint> {
    match last_tuple::<2>(&POINT_TUPLE, text) {
        None => Parsed::Missing,
        Some([lat, lon]) => match GeoPoint::new(lat, lon) {
            Ok(p) => Parsed::Valid(p),
            Err(error) => Parsed::Invalid { values: vec![lat, lon], error },
        },
    }
}

/// Extracts the last `(lon_min, lat_min, lon_max, lat_max)` tuple in `text`.
///
/// The last tuple is taken as the answer even when reasoning text before it
/// contains other tuples; if that final tuple is malformed the result is
/// [`Parsed::Invalid`] rather than an earlier candidate.
pub fn parse_bbox(text: &str) -> Parsed<BoundingBox> {
    match last_tuple::<4>(&BOX_TUPLE, text) {
        None => Parsed::Missing,
        Some(v) => match BoundingBox::try_from(v) {
            Ok(b) => Parsed::Valid(b),
            Err(error) => Parsed::Invalid { values: v.to_vec(), error },
        },
    }
}
