//! Street-map features, proximity queries and the routing graph.

mod graph;
mod index;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use graph::{k_nearest_nodes, shortest_path, Edge, Path as RoutePath, RoutingGraph};
pub use index::{nearby_features, FeatureIndex, Nearby};

use crate::error::{Error, Result};
use crate::geo::{polyline_length, GeoPoint};

/// Road classification. The fourteen named classes occupy slots `0..14` of
/// the one-hot encoding; `Unknown` takes slot 14 when enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadType {
    Motorway,
    MotorwayLink,
    Trunk,
    TrunkLink,
    Primary,
    PrimaryLink,
    Secondary,
    SecondaryLink,
    Tertiary,
    TertiaryLink,
    Unclassified,
    Residential,
    Service,
    LivingStreet,
    Unknown,
}

impl RoadType {
    pub const NAMED: [RoadType; 14] = [
        RoadType::Motorway,
        RoadType::MotorwayLink,
        RoadType::Trunk,
        RoadType::TrunkLink,
        RoadType::Primary,
        RoadType::PrimaryLink,
        RoadType::Secondary,
        RoadType::SecondaryLink,
        RoadType::Tertiary,
        RoadType::TertiaryLink,
        RoadType::Unclassified,
        RoadType::Residential,
        RoadType::Service,
        RoadType::LivingStreet,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoadType::Motorway => "motorway",
            RoadType::MotorwayLink => "motorway_link",
            RoadType::Trunk => "trunk",
            RoadType::TrunkLink => "trunk_link",
            RoadType::Primary => "primary",
            RoadType::PrimaryLink => "primary_link",
            RoadType::Secondary => "secondary",
            RoadType::SecondaryLink => "secondary_link",
            RoadType::Tertiary => "tertiary",
            RoadType::TertiaryLink => "tertiary_link",
            RoadType::Unclassified => "unclassified",
            RoadType::Residential => "residential",
            RoadType::Service => "service",
            RoadType::LivingStreet => "living_street",
            RoadType::Unknown => "unknown",
        }
    }

    /// Maps any unrecognised tag to `Unknown`.
    pub fn from_tag(tag: &str) -> RoadType {
        tag.parse().unwrap_or(RoadType::Unknown)
    }
}

impl FromStr for RoadType {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let s = s.trim().to_ascii_lowercase();
        RoadType::NAMED
            .iter()
            .chain(std::iter::once(&RoadType::Unknown))
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or(())
    }
}

impl fmt::Display for RoadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmFeature {
    pub feature_id: String,
    pub polyline: Vec<GeoPoint>,
    pub road_type: RoadType,
    pub oneway: bool,
    pub tunnel: bool,
}

impl OsmFeature {
    pub fn length(&self) -> f64 {
        polyline_length(&self.polyline)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReject {
    /// Position of the feature in the source collection.
    pub position: usize,
    pub reason: String,
}

/// A loaded street map: features, their spatial index and an id lookup.
#[derive(Debug, Clone)]
pub struct RoadMap {
    pub features: Vec<OsmFeature>,
    pub index: FeatureIndex,
    pub rejected: Vec<FeatureReject>,
    by_id: HashMap<String, usize>,
}

impl RoadMap {
    /// Builds a map from already-validated features. Features with fewer
    /// than two points or duplicate ids are rejected.
    pub fn from_features(candidates: Vec<OsmFeature>) -> RoadMap {
        let mut features = Vec::with_capacity(candidates.len());
        let mut rejected = Vec::new();
        let mut by_id = HashMap::new();
        for (position, f) in candidates.into_iter().enumerate() {
            let reason = if f.polyline.len() < 2 {
                Some(format!("feature {} has {} point(s); need at least 2", f.feature_id, f.polyline.len()))
            } else if let Some(p) = f.polyline.iter().find(|p| !p.is_valid()) {
                Some(format!("feature {} has invalid coordinate {p:?}", f.feature_id))
            } else if by_id.contains_key(&f.feature_id) {
                Some(format!("duplicate feature id {}", f.feature_id))
            } else {
                None
            };
            match reason {
                Some(reason) => {
                    tracing::warn!(position, %reason, "rejected map feature");
                    rejected.push(FeatureReject { position, reason });
                }
                None => {
                    by_id.insert(f.feature_id.clone(), features.len());
                    features.push(f);
                }
            }
        }
        let index = FeatureIndex::build(&features);
        RoadMap {
            features,
            index,
            rejected,
            by_id,
        }
    }

    pub fn position(&self, feature_id: &str) -> Option<usize> {
        self.by_id.get(feature_id).copied()
    }

    pub fn feature(&self, feature_id: &str) -> Option<&OsmFeature> {
        self.position(feature_id).map(|i| &self.features[i])
    }
}

fn feature_id_of(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_feature(v: &Value) -> std::result::Result<OsmFeature, String> {
    let props = v
        .get("properties")
        .and_then(Value::as_object)
        .ok_or("missing properties")?;
    let feature_id = feature_id_of(props.get("feature_id")).ok_or("missing feature_id")?;
    let road_type = props
        .get("road_type")
        .and_then(Value::as_str)
        .map(RoadType::from_tag)
        .unwrap_or(RoadType::Unknown);
    let flag = |k: &str| props.get(k).and_then(Value::as_bool).unwrap_or(false);
    let geometry = v.get("geometry").ok_or("missing geometry")?;
    if geometry.get("type").and_then(Value::as_str) != Some("LineString") {
        return Err(format!("feature {feature_id}: geometry is not a LineString"));
    }
    let coords = geometry
        .get("coordinates")
        .and_then(Value::as_array)
        .ok_or_else(|| format!("feature {feature_id}: missing coordinates"))?;
    let polyline = coords
        .iter()
        .map(|c| {
            let pair = c.as_array().filter(|a| a.len() >= 2);
            match pair.map(|a| (a[0].as_f64(), a[1].as_f64())) {
                Some((Some(lon), Some(lat))) => Ok(GeoPoint::new(lat, lon)),
                _ => Err(format!("feature {feature_id}: malformed coordinate {c}")),
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(OsmFeature {
        feature_id,
        polyline,
        road_type,
        oneway: flag("oneway"),
        tunnel: flag("tunnel"),
    })
}

/// Parses a GeoJSON FeatureCollection of LineString road features.
pub fn parse_map(text: &str) -> Result<RoadMap> {
    let root: Value = serde_json::from_str(text)?;
    let items = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidInput("map is not a FeatureCollection".into()))?;
    let mut candidates = Vec::with_capacity(items.len());
    let mut early_rejects = Vec::new();
    for (position, item) in items.iter().enumerate() {
        match parse_feature(item) {
            Ok(f) => candidates.push((position, f)),
            Err(reason) => early_rejects.push(FeatureReject { position, reason }),
        }
    }
    let positions: Vec<usize> = candidates.iter().map(|(p, _)| *p).collect();
    let mut map = RoadMap::from_features(candidates.into_iter().map(|(_, f)| f).collect());
    for r in &mut map.rejected {
        r.position = positions[r.position];
    }
    map.rejected.extend(early_rejects);
    map.rejected.sort_by_key(|r| r.position);
    Ok(map)
}

pub fn load_map(path: &Path) -> Result<RoadMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map = parse_map(&text)?;
    tracing::info!(
        file = %path.display(),
        features = map.features.len(),
        rejected = map.rejected.len(),
        "loaded map"
    );
    Ok(map)
}

/// Serializes features back to the GeoJSON map schema.
pub fn map_to_geojson(features: &[OsmFeature]) -> Value {
    let feats: Vec<Value> = features
        .iter()
        .map(|f| {
            json!({
                "type": "Feature",
                "properties": {
                    "feature_id": f.feature_id,
                    "road_type": f.road_type.as_str(),
                    "oneway": f.oneway,
                    "tunnel": f.tunnel,
                },
                "geometry": {
                    "type": "LineString",
                    "coordinates": f.polyline.iter().map(|p| vec![p.lon, p.lat]).collect::<Vec<_>>(),
                },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": feats })
}
