use std::collections::HashMap;

use crate::geo::{point_to_polyline_distance, GeoPoint, LocalProjection};

use super::OsmFeature;

const CELL_SIZE_M: f64 = 100.0;

/// A feature found by a radius query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearby {
    /// Position of the feature in the map's feature list.
    pub feature: usize,
    pub distance: f64,
}

/// Uniform grid over projected feature geometry. Cells only prune
/// candidates; membership is decided by the exact point-to-polyline
/// distance.
#[derive(Debug, Clone)]
pub struct FeatureIndex {
    proj: LocalProjection,
    cells: HashMap<(i64, i64), Vec<usize>>,
    polylines: Vec<Vec<GeoPoint>>,
    ids: Vec<String>,
}

fn cell_of(v: f64) -> i64 {
    (v / CELL_SIZE_M).floor() as i64
}

impl FeatureIndex {
    pub fn build(features: &[OsmFeature]) -> FeatureIndex {
        let origin = features
            .first()
            .and_then(|f| f.polyline.first().copied())
            .unwrap_or(GeoPoint::new(0.0, 0.0));
        let proj = LocalProjection::new(origin);
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (fi, f) in features.iter().enumerate() {
            let xy: Vec<(f64, f64)> = f.polyline.iter().map(|p| proj.to_xy(*p)).collect();
            let mut touched = Vec::new();
            let spans: Vec<&[(f64, f64)]> = if xy.len() < 2 {
                vec![&xy[..]]
            } else {
                xy.windows(2).collect()
            };
            for w in spans.into_iter().filter(|w| !w.is_empty()) {
                let (x0, x1) = w.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
                let (y0, y1) = w.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
                for cx in cell_of(x0)..=cell_of(x1) {
                    for cy in cell_of(y0)..=cell_of(y1) {
                        touched.push((cx, cy));
                    }
                }
            }
            touched.sort_unstable();
            touched.dedup();
            for c in touched {
                cells.entry(c).or_default().push(fi);
            }
        }
        FeatureIndex {
            proj,
            cells,
            polylines: features.iter().map(|f| f.polyline.clone()).collect(),
            ids: features.iter().map(|f| f.feature_id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.polylines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    pub fn feature_id(&self, feature: usize) -> &str {
        &self.ids[feature]
    }

    pub fn polyline(&self, feature: usize) -> &[GeoPoint] {
        &self.polylines[feature]
    }

    /// Features whose polyline lies within `radius` meters of `p`, ordered
    /// by (distance, feature id).
    pub fn query(&self, p: GeoPoint, radius: f64) -> Vec<Nearby> {
        let (x, y) = self.proj.to_xy(p);
        // The grid projection is centred elsewhere than `p`; pad the window
        // so its small scale distortion cannot exclude a true hit.
        let reach = radius * 1.05 + 1.0;
        let mut candidates = Vec::new();
        for cx in cell_of(x - reach)..=cell_of(x + reach) {
            for cy in cell_of(y - reach)..=cell_of(y + reach) {
                if let Some(fs) = self.cells.get(&(cx, cy)) {
                    candidates.extend_from_slice(fs);
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        let mut hits: Vec<Nearby> = candidates
            .into_iter()
            .filter_map(|feature| {
                let distance = point_to_polyline_distance(p, &self.polylines[feature]);
                (distance <= radius).then_some(Nearby { feature, distance })
            })
            .collect();
        hits.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| self.ids[a.feature].cmp(&self.ids[b.feature]))
        });
        hits
    }
}

/// Radius query; see [`FeatureIndex::query`].
pub fn nearby_features(index: &FeatureIndex, p: GeoPoint, radius: f64) -> Vec<Nearby> {
    index.query(p, radius)
}
