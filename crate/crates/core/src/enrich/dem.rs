use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::sampler::Sample;

/// Elevation grid. Row 0 is the northernmost row, as in ESRI ASCII grids;
/// `origin` is the centre of cell (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DemRaster {
    pub origin: GeoPoint,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub elevations: Vec<f64>,
    pub nodata: f64,
}

const DEFAULT_NODATA: f64 = -9999.0;

impl DemRaster {
    pub fn new(
        origin: GeoPoint,
        cell_size: f64,
        rows: usize,
        cols: usize,
        elevations: Vec<f64>,
        nodata: f64,
    ) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::InvalidInput(format!("cell size must be positive, got {cell_size}")));
        }
        if rows == 0 || cols == 0 || rows * cols != elevations.len() {
            return Err(Error::InvalidInput(format!(
                "raster of {rows}x{cols} cells cannot hold {} values",
                elevations.len()
            )));
        }
        Ok(DemRaster {
            origin,
            cell_size,
            rows,
            cols,
            elevations,
            nodata,
        })
    }

    /// Builds a raster from the lower-left corner of its extent.
    pub fn from_lower_left(
        lower_left: GeoPoint,
        cell_size: f64,
        rows: usize,
        cols: usize,
        elevations: Vec<f64>,
        nodata: f64,
    ) -> Result<Self> {
        let origin = GeoPoint::new(
            lower_left.lat + (rows as f64 - 0.5) * cell_size,
            lower_left.lon + 0.5 * cell_size,
        );
        DemRaster::new(origin, cell_size, rows, cols, elevations, nodata)
    }

    pub fn lower_left(&self) -> GeoPoint {
        GeoPoint::new(
            self.origin.lat - (self.rows as f64 - 0.5) * self.cell_size,
            self.origin.lon - 0.5 * self.cell_size,
        )
    }

    fn value(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.elevations[row * self.cols + col];
        (v != self.nodata && v.is_finite()).then_some(v)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        let ll = self.lower_left();
        p.lat >= ll.lat
            && p.lat <= ll.lat + self.rows as f64 * self.cell_size
            && p.lon >= ll.lon
            && p.lon <= ll.lon + self.cols as f64 * self.cell_size
    }

    /// Bilinear interpolation between the four surrounding cell centres.
    /// Points in the outer half-cell clamp to the edge centres. If a corner
    /// holds no data, the nearest valid cell is used instead.
    pub fn elevation_at(&self, p: GeoPoint) -> Result<f64> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds { lat: p.lat, lon: p.lon });
        }
        let fc = ((p.lon - self.origin.lon) / self.cell_size).clamp(0.0, (self.cols - 1) as f64);
        let fr = ((self.origin.lat - p.lat) / self.cell_size).clamp(0.0, (self.rows - 1) as f64);
        let c0 = (fc.floor() as usize).min(self.cols.saturating_sub(2));
        let r0 = (fr.floor() as usize).min(self.rows.saturating_sub(2));
        let c1 = (c0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let tx = fc - c0 as f64;
        let ty = fr - r0 as f64;
        let corners = [(r0, c0), (r0, c1), (r1, c0), (r1, c1)];
        let values: Vec<Option<f64>> = corners.iter().map(|&(r, c)| self.value(r, c)).collect();
        if let [Some(v00), Some(v01), Some(v10), Some(v11)] = values[..] {
            let top = v00 + (v01 - v00) * tx;
            let bottom = v10 + (v11 - v10) * tx;
            return Ok(top + (bottom - top) * ty);
        }
        self.nearest_valid(fr, fc)
            .ok_or_else(|| Error::InvalidInput("raster holds no valid elevation".into()))
    }

    fn nearest_valid(&self, fr: f64, fc: f64) -> Option<f64> {
        let mut best: Option<(f64, usize, usize)> = None;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.value(r, c).is_none() {
                    continue;
                }
                let d = (r as f64 - fr).powi(2) + (c as f64 - fc).powi(2);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, r, c));
                }
            }
        }
        best.and_then(|(_, r, c)| self.value(r, c))
    }
}

/// Parses an ESRI ASCII grid.
pub fn parse_ascii_grid(text: &str) -> Result<DemRaster> {
    let mut tokens = text.split_whitespace().peekable();
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut centre = false;
    let mut cellsize = None;
    let mut nodata = DEFAULT_NODATA;
    while let Some(tok) = tokens.peek() {
        if tok.parse::<f64>().is_ok() {
            break;
        }
        let key = tokens.next().unwrap_or_default().to_ascii_lowercase();
        let val = tokens
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("DEM header `{key}` has no value")))?;
        let num: f64 = val
            .parse()
            .map_err(|_| Error::InvalidInput(format!("DEM header `{key}`: bad value `{val}`")))?;
        match key.as_str() {
            "ncols" => ncols = Some(num as usize),
            "nrows" => nrows = Some(num as usize),
            "xllcorner" => xll = Some(num),
            "yllcorner" => yll = Some(num),
            "xllcenter" => {
                xll = Some(num);
                centre = true;
            }
            "yllcenter" => {
                yll = Some(num);
                centre = true;
            }
            "cellsize" => cellsize = Some(num),
            "nodata_value" => nodata = num,
            other => return Err(Error::InvalidInput(format!("unknown DEM header `{other}`"))),
        }
    }
    let missing = |k: &str| Error::InvalidInput(format!("DEM header missing `{k}`"));
    let cols = ncols.ok_or_else(|| missing("ncols"))?;
    let rows = nrows.ok_or_else(|| missing("nrows"))?;
    let cs = cellsize.ok_or_else(|| missing("cellsize"))?;
    let (mut x, mut y) = (xll.ok_or_else(|| missing("xllcorner"))?, yll.ok_or_else(|| missing("yllcorner"))?);
    if centre {
        x -= cs / 2.0;
        y -= cs / 2.0;
    }
    let elevations = tokens
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("DEM value `{t}` is not a number")))
        })
        .collect::<Result<Vec<f64>>>()?;
    DemRaster::from_lower_left(GeoPoint::new(y, x), cs, rows, cols, elevations, nodata)
}

pub fn load_dem(path: &Path) -> Result<DemRaster> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ascii_grid(&text)
}

pub fn to_ascii_grid(dem: &DemRaster) -> String {
    let ll = dem.lower_left();
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", dem.cols);
    let _ = writeln!(out, "nrows {}", dem.rows);
    let _ = writeln!(out, "xllcorner {}", ll.lon);
    let _ = writeln!(out, "yllcorner {}", ll.lat);
    let _ = writeln!(out, "cellsize {}", dem.cell_size);
    let _ = writeln!(out, "NODATA_value {}", dem.nodata);
    for row in dem.elevations.chunks(dem.cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElevationDelta {
    pub delta: f64,
    /// Set when an endpoint fell outside the raster and 0 was imputed.
    pub flagged: bool,
}

/// Elevation at the sample's end minus elevation at its start.
pub fn elevation_delta(sample: &Sample, dem: &DemRaster) -> ElevationDelta {
    match (dem.elevation_at(sample.start_point), dem.elevation_at(sample.end_point)) {
        (Ok(a), Ok(b)) => ElevationDelta {
            delta: b - a,
            flagged: false,
        },
        _ => {
            tracing::warn!(sample = %sample.key(), "sample endpoint outside DEM; elevation change set to 0");
            ElevationDelta {
                delta: 0.0,
                flagged: true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<f64>, rows: usize, cols: usize) -> DemRaster {
        DemRaster::from_lower_left(GeoPoint::new(35.0, -85.0), 0.001, rows, cols, values, -9999.0).unwrap()
    }

    #[test]
    fn cell_centre_returns_cell_value() {
        let dem = grid(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let p = GeoPoint::new(dem.origin.lat - 0.001, dem.origin.lon + 0.002);
        assert!((dem.elevation_at(p).unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn midpoint_of_four_cells() {
        let dem = grid(vec![0.0, 0.0, 10.0, 10.0], 2, 2);
        let p = GeoPoint::new(dem.origin.lat - 0.0005, dem.origin.lon + 0.0005);
        assert!((dem.elevation_at(p).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn nodata_corner_uses_nearest_valid() {
        let dem = grid(vec![-9999.0, 4.0, 8.0, 12.0], 2, 2);
        let p = GeoPoint::new(dem.origin.lat - 0.0001, dem.origin.lon + 0.0001);
        // Nearest to (0.1, 0.1) among valid cells is (0, 1) or (1, 0); (0, 1) first.
        assert_eq!(dem.elevation_at(p).unwrap(), 4.0);
    }

    #[test]
    fn outside_is_error() {
        let dem = grid(vec![0.0; 4], 2, 2);
        assert!(matches!(
            dem.elevation_at(GeoPoint::new(34.0, -85.0)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn ascii_round_trip() {
        let dem = grid(vec![1.5, 2.0, -9999.0, 4.0, 5.0, 6.25], 3, 2);
        let again = parse_ascii_grid(&to_ascii_grid(&dem)).unwrap();
        assert_eq!(again.rows, 3);
        assert_eq!(again.cols, 2);
        assert_eq!(again.elevations, dem.elevations);
        assert!((again.origin.lat - dem.origin.lat).abs() < 1e-12);
    }

    #[test]
    fn parses_centre_registration() {
        let text = "ncols 2\nnrows 1\nxllcenter -85.0\nyllcenter 35.0\ncellsize 0.5\n1 2\n";
        let dem = parse_ascii_grid(text).unwrap();
        assert_eq!(dem.origin, GeoPoint::new(35.0, -85.0));
    }
}
