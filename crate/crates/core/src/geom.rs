//! Sites, planar projection and distances.
//!
//! All spatial work happens on a local plane measured in kilometres. Raw
//! longitude/latitude pairs are mapped with an equirectangular projection
//! about a reference point, which is accurate to well under 1% across a
//! few hundred kilometres.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kilometres per degree of longitude at the equator.
pub const KM_PER_DEG_LON: f64 = 111.32;
/// Kilometres per degree of latitude.
pub const KM_PER_DEG_LAT: f64 = 110.57;

/// A monitoring site on the local plane (km east, km north).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite coordinate ({x}, {y})"
            )));
        }
        Ok(Self { id: id.into(), x, y })
    }

    /// Unchecked constructor for coordinates already known to be finite.
    pub fn at(id: impl Into<String>, x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite());
        Self { id: id.into(), x, y }
    }

    #[inline]
    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Equirectangular projection about a reference longitude/latitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub ref_lon: f64,
    pub ref_lat: f64,
}

impl Projection {
    pub fn new(ref_lon: f64, ref_lat: f64) -> Result<Self> {
        if !ref_lon.is_finite() || !ref_lat.is_finite() || ref_lat.abs() >= 90.0 {
            return Err(Error::InvalidInput(format!(
                "bad projection reference ({ref_lon}, {ref_lat})"
            )));
        }
        Ok(Self { ref_lon, ref_lat })
    }

    /// Reference point at the arithmetic centroid of the given (lon, lat) pairs.
    pub fn centroid<I: IntoIterator<Item = (f64, f64)>>(points: I) -> Result<Self> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (lon, lat) in points {
            sx += lon;
            sy += lat;
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidInput("centroid of an empty point set".into()));
        }
        Self::new(sx / n as f64, sy / n as f64)
    }

    /// Planar (x, y) in km for a longitude/latitude pair.
    pub fn project_xy(&self, lon: f64, lat: f64) -> Result<(f64, f64)> {
        if !lon.is_finite() || !lat.is_finite() || lat.abs() >= 90.0 {
            return Err(Error::InvalidInput(format!(
                "cannot project ({lon}, {lat})"
            )));
        }
        let x = KM_PER_DEG_LON * self.ref_lat.to_radians().cos() * (lon - self.ref_lon);
        let y = KM_PER_DEG_LAT * (lat - self.ref_lat);
        Ok((x, y))
    }

    pub fn project(&self, id: impl Into<String>, lon: f64, lat: f64) -> Result<Location> {
        let (x, y) = self.project_xy(lon, lat)?;
        Ok(Location::at(id, x, y))
    }
}

/// Pairwise Euclidean distances (km) between two site sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(pub DMatrix<f64>);

impl DistanceMatrix {
    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub fn pairwise_distances(a: &[Location], b: &[Location]) -> DistanceMatrix {
    DistanceMatrix(DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].distance(&b[j])))
}

/// Shared, immutable site registry.
pub type Sites = Arc<[Location]>;

/// One hour of observations from both networks. `None` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct HourlyPanel {
    pub hour: i64,
    pub airbox_sites: Sites,
    pub epa_sites: Sites,
    pub airbox: Vec<Option<f64>>,
    pub epa: Vec<Option<f64>>,
}

impl HourlyPanel {
    pub fn new(
        hour: i64,
        airbox_sites: Sites,
        epa_sites: Sites,
        airbox: Vec<Option<f64>>,
        epa: Vec<Option<f64>>,
    ) -> Result<Self> {
        if airbox.len() != airbox_sites.len() || epa.len() != epa_sites.len() {
            return Err(Error::InvalidInput(format!(
                "hour {hour}: value vectors ({}, {}) do not match registries ({}, {})",
                airbox.len(),
                epa.len(),
                airbox_sites.len(),
                epa_sites.len()
            )));
        }
        Ok(Self {
            hour,
            airbox_sites,
            epa_sites,
            airbox,
            epa,
        })
    }

    pub fn airbox_present_count(&self) -> usize {
        self.airbox.iter().filter(|v| v.is_some()).count()
    }

    pub fn epa_present_count(&self) -> usize {
        self.epa.iter().filter(|v| v.is_some()).count()
    }

    /// Indices, sites and values of the present sensor observations.
    pub fn present_airbox(&self) -> Observed {
        Observed::collect(&self.airbox_sites, &self.airbox)
    }

    pub fn present_epa(&self) -> Observed {
        Observed::collect(&self.epa_sites, &self.epa)
    }
}

/// The non-missing rows of one network at one hour.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observed {
    pub index: Vec<usize>,
    pub sites: Vec<Location>,
    pub values: Vec<f64>,
}

impl Observed {
    fn collect(sites: &[Location], values: &[Option<f64>]) -> Self {
        let mut out = Observed::default();
        for (i, (s, v)) in sites.iter().zip(values).enumerate() {
            if let Some(v) = v {
                out.index.push(i);
                out.sites.push(s.clone());
                out.values.push(*v);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
