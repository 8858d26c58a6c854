//! Scene files: the native JSON document and Argoverse-style CSV logs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{AgentTrack, Point, Polyline, Scene, Se2Transform, DEFAULT_LANE_HALF_WIDTH};

pub const ARGOVERSE_OBS_STEPS: usize = 20;
pub const ARGOVERSE_DT: f64 = 0.1;
const CSV_HEADER: [&str; 6] = ["TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y", "CITY_NAME"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneFormat {
    NativeJson,
    ArgoverseCsv,
}

impl SceneFormat {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "json" => Some(SceneFormat::NativeJson),
            "csv" => Some(SceneFormat::ArgoverseCsv),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    scene_id: String,
    dt: f64,
    n_obs: usize,
    n_pred: usize,
    anchor_id: String,
    agents: Vec<AgentDoc>,
    polylines: Vec<PolylineDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentDoc {
    id: String,
    timestamps: Vec<f64>,
    xy: Vec<Point>,
    valid: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolylineDoc {
    points: Vec<Point>,
    #[serde(default = "default_width")]
    width: f64,
}

fn default_width() -> f64 {
    DEFAULT_LANE_HALF_WIDTH
}

pub fn load_scene(path: &Path, format: SceneFormat) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    match format {
        SceneFormat::NativeJson => scene_from_json(&text, &ctx),
        SceneFormat::ArgoverseCsv => scene_from_csv(&text, &ctx),
    }
}

/// Every `.json`/`.csv` scene directly inside `dir`, in file-name order.
/// `manifest.json` is skipped.
pub fn load_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
        .filter(|p| SceneFormat::from_path(p).is_some())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| load_scene(p, SceneFormat::from_path(p).expect("filtered")))
        .collect()
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, scene_to_json(scene)?).map_err(|e| Error::io(path, e))
}

pub fn scene_from_json(text: &str, context: &str) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_str(text).map_err(|e| Error::parse(context, e.to_string()))?;
    let agents = doc
        .agents
        .into_iter()
        .map(|a| AgentTrack {
            id: a.id,
            positions: a.xy,
            valid: a.valid,
            timestamps: a.timestamps,
            velocities: Vec::new(),
            accelerations: Vec::new(),
        })
        .collect();
    let polylines = doc
        .polylines
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            Polyline::new(p.points, p.width)
                .map_err(|e| Error::parse(context, format!("polyline {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        scene_id: doc.scene_id,
        dt: doc.dt,
        n_obs: doc.n_obs,
        n_pred: doc.n_pred,
        anchor_id: doc.anchor_id,
        agents,
        polylines,
        frame: Se2Transform::identity(),
    };
    scene
        .validate()
        .map_err(|e| Error::parse(context, e.to_string()))?;
    Ok(scene)
}

/// Canonical pretty-printed JSON. Loading and re-saving a file written by
/// this function reproduces it byte for byte.
pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let doc = SceneDoc {
        scene_id: scene.scene_id.clone(),
        dt: scene.dt,
        n_obs: scene.n_obs,
        n_pred: scene.n_pred,
        anchor_id: scene.anchor_id.clone(),
        agents: scene
            .agents
            .iter()
            .map(|a| AgentDoc {
                id: a.id.clone(),
                timestamps: a.timestamps.clone(),
                xy: a.positions.clone(),
                valid: a.valid.clone(),
            })
            .collect(),
        polylines: scene
            .polylines
            .iter()
            .map(|p| PolylineDoc {
                points: p.points.clone(),
                width: p.width,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::parse("scene", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

struct CsvRow {
    line: usize,
    t: f64,
    track: String,
    kind: String,
    xy: Point,
}

/// Parse an Argoverse forecasting log. Rows are grouped by track and
/// ordered by timestamp; the anchor's timestamps form the time base and
/// other tracks are aligned to it, with missing steps marked invalid.
pub fn scene_from_csv(text: &str, context: &str) -> Result<Scene> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(context, e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if let Some(bad) = cols.iter().find(|c| !CSV_HEADER.contains(c)) {
        return Err(Error::parse(context, format!("unknown column {bad}")));
    }
    let idx = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::parse(context, format!("missing column {name}")))
    };
    let (it, itr, iot, ix, iy) = (idx("TIMESTAMP")?, idx("TRACK_ID")?, idx("OBJECT_TYPE")?, idx("X")?, idx("Y")?);

    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::parse(context, format!("row {line}: {e}")))?;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let num = |i: usize, name: &str| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(context, format!("row {line}: bad {name} {:?}", field(i))))
        };
        rows.push(CsvRow {
            line,
            t: num(it, "TIMESTAMP")?,
            track: field(itr).to_string(),
            kind: field(iot).to_string(),
            xy: [num(ix, "X")?, num(iy, "Y")?],
        });
    }
    rows.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.line.cmp(&b.line)));

    let anchor_id = match rows.iter().find(|r| r.kind == "AGENT") {
        Some(r) => r.track.clone(),
        None => return Err(Error::parse(context, "no row with OBJECT_TYPE AGENT")),
    };
    if let Some(r) = rows.iter().find(|r| r.kind == "AGENT" && r.track != anchor_id) {
        return Err(Error::parse(
            context,
            format!("row {}: second AGENT track {}", r.line, r.track),
        ));
    }

    let mut tracks: BTreeMap<&str, Vec<&CsvRow>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in &rows {
        let e = tracks.entry(&r.track).or_default();
        if e.is_empty() {
            order.push(&r.track);
        }
        e.push(r);
    }
    let base: Vec<f64> = tracks[anchor_id.as_str()].iter().map(|r| r.t).collect();
    if let Some(w) = base.windows(2).position(|w| w[1] <= w[0]) {
        let r = tracks[anchor_id.as_str()][w + 1];
        return Err(Error::parse(context, format!("row {}: duplicate anchor timestamp", r.line)));
    }
    if base.len() < ARGOVERSE_OBS_STEPS {
        let last = tracks[anchor_id.as_str()].last().map_or(0, |r| r.line);
        return Err(Error::parse(
            context,
            format!(
                "row {last}: anchor has {} steps, fewer than the {ARGOVERSE_OBS_STEPS} observed steps",
                base.len()
            ),
        ));
    }
    let t0 = base[0];
    let timestamps: Vec<f64> = base.iter().map(|t| t - t0).collect();
    let dt = if base.len() > 1 {
        let mut d: Vec<f64> = base.windows(2).map(|w| w[1] - w[0]).collect();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    } else {
        ARGOVERSE_DT
    };

    // anchor first, then other tracks by first appearance
    order.sort_by_key(|id| *id != anchor_id.as_str());
    let mut agents = Vec::new();
    for id in order {
        let mut positions = vec![[0.0, 0.0]; base.len()];
        let mut valid = vec![false; base.len()];
        for r in &tracks[id] {
            let slot = base.iter().position(|t| (t - r.t).abs() < 1e-6);
            match slot {
                Some(k) if !valid[k] => {
                    positions[k] = r.xy;
                    valid[k] = true;
                }
                Some(_) => {
                    return Err(Error::parse(
                        context,
                        format!("row {}: duplicate timestamp for track {id}", r.line),
                    ))
                }
                None => {}
            }
        }
        // tracks never seen during the observation window carry no signal
        if id != anchor_id && !valid[..ARGOVERSE_OBS_STEPS].iter().any(|v| *v) {
            continue;
        }
        agents.push(AgentTrack {
            id: id.to_string(),
            positions,
            valid,
            timestamps: timestamps.clone(),
            velocities: Vec::new(),
            accelerations: Vec::new(),
        });
    }

    let scene = Scene {
        scene_id: context.to_string(),
        dt,
        n_obs: ARGOVERSE_OBS_STEPS,
        n_pred: base.len() - ARGOVERSE_OBS_STEPS,
        anchor_id,
        agents,
        polylines: Vec::new(),
        frame: Se2Transform::identity(),
    };
    scene.validate().map_err(|e| Error::parse(context, e.to_string()))?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "scene_id": "m",
  "dt": 0.1,
  "n_obs": 2,
  "n_pred": 0,
  "anchor_id": "a",
  "agents": [{"id": "a", "timestamps": [0.0, 0.1], "xy": [[0.0, 0.0], [1.0, 0.0]], "valid": [true, true]}],
  "polylines": [{"points": [[0.0, 0.0], [5.0, 0.0]], "width": 2.0}]
}"#;

    #[test]
    fn minimal_json() {
        let s = scene_from_json(MINIMAL, "t").unwrap();
        assert_eq!(s.agents.len(), 1);
        assert_eq!(s.polylines.len(), 1);
        assert_eq!(s.polylines[0].directions, vec![[1.0, 0.0]; 2]);
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let s = scene_from_json(MINIMAL, "t").unwrap();
        let a = scene_to_json(&s).unwrap();
        let b = scene_to_json(&scene_from_json(&a, "t").unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_unknown_field_rejected() {
        let bad = MINIMAL.replace("\"dt\"", "\"bogus\": 1, \"dt\"");
        assert!(scene_from_json(&bad, "t").is_err());
    }

    fn csv_text(shuffle: bool) -> String {
        let mut rows = Vec::new();
        for i in 0..25 {
            let t = 100.0 + i as f64 * 0.1;
            rows.push(format!("{t:.1},A1,AGENT,{},{},PIT", i as f64, 0.5));
            if i % 2 == 0 {
                rows.push(format!("{t:.1},O7,OTHERS,{},{},PIT", 3.0, i as f64));
            }
        }
        if shuffle {
            rows.reverse();
            rows.swap(3, 17);
        }
        format!("TIMESTAMP,TRACK_ID,OBJECT_TYPE,X,Y,CITY_NAME\n{}\n", rows.join("\n"))
    }

    #[test]
    fn csv_groups_and_aligns_tracks() {
        let s = scene_from_csv(&csv_text(false), "c").unwrap();
        assert_eq!(s.anchor_id, "A1");
        assert_eq!(s.n_obs, 20);
        assert_eq!(s.n_pred, 5);
        assert_eq!(s.agents[0].id, "A1");
        let o = &s.agents[1];
        assert!(o.valid[0] && !o.valid[1] && o.valid[2]);
        assert!((s.dt - 0.1).abs() < 1e-9);
    }

    #[test]
    fn csv_out_of_order_matches_sorted() {
        let a = scene_from_csv(&csv_text(false), "c").unwrap();
        let b = scene_from_csv(&csv_text(true), "c").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_without_agent_fails() {
        let text = csv_text(false).replace("AGENT", "AV");
        let err = scene_from_csv(&text, "c").unwrap_err().to_string();
        assert!(err.contains("AGENT"), "{err}");
    }

    #[test]
    fn csv_unknown_column_fails() {
        let text = csv_text(false).replace("CITY_NAME", "SPEED");
        assert!(scene_from_csv(&text, "c").is_err());
    }

    #[test]
    fn csv_bad_number_names_row() {
        let text = csv_text(false).replacen(",0.5,", ",oops,", 1);
        let err = scene_from_csv(&text, "c").unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn csv_short_anchor_fails() {
        let text: String = csv_text(false).lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(scene_from_csv(&text, "c").is_err());
    }
}
