//! Newline-delimited JSON track files, one object per agent per frame.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Result};
use hst_core::pose::{Keypoints2D, NUM_JOINTS};
use hst_core::scene::{Keypoints, RejectedTrack, TrackDataset, TrackRecord};
use serde_json::{json, Map, Value};

use crate::fsio;

const KNOWN_FIELDS: [&str; 7] = ["scene_id", "t", "agent_id", "p", "kp", "head", "kp2"];

/// One parsed line. `keypoints_2d` holds the optional `kp2` field.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub record: TrackRecord,
    pub keypoints_2d: Option<Keypoints2D>,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedTracks {
    pub records: Vec<RawRecord>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct LoadedTracks {
    pub dataset: TrackDataset,
    pub rejected: Vec<RejectedTrack>,
    pub warnings: Vec<String>,
}

fn number(v: &Value, what: &str) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| anyhow!("{what} must be a number"))?;
    if !x.is_finite() {
        bail!("{what} is not finite");
    }
    Ok(x)
}

fn triples(v: &Value, what: &str) -> Result<Vec<[f64; 3]>> {
    let rows = v.as_array().ok_or_else(|| anyhow!("{what} must be an array of {NUM_JOINTS} triples"))?;
    if rows.len() != NUM_JOINTS {
        bail!("{what} has {} joints, expected {NUM_JOINTS}", rows.len());
    }
    rows.iter()
        .enumerate()
        .map(|(j, r)| {
            let a = r.as_array().filter(|a| a.len() == 3).ok_or_else(|| anyhow!("{what}[{j}] must have 3 numbers"))?;
            Ok([number(&a[0], what)?, number(&a[1], what)?, number(&a[2], what)?])
        })
        .collect()
}

fn parse_object(obj: &Map<String, Value>) -> Result<RawRecord> {
    let field = |k: &str| obj.get(k).ok_or_else(|| anyhow!("missing field '{k}'"));
    let text = |k: &str| -> Result<String> {
        match field(k)? {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => bail!("'{k}' must be a string"),
        }
    };
    let p = field("p")?.as_array().filter(|a| a.len() == 2).ok_or_else(|| anyhow!("'p' must be [x, y]"))?;
    let keypoints = match obj.get("kp") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let mut k: Keypoints = [0.0; 3 * NUM_JOINTS];
            for (j, t) in triples(v, "kp")?.into_iter().enumerate() {
                k[3 * j..3 * j + 3].copy_from_slice(&t);
            }
            Some(k)
        }
    };
    let head = match obj.get("head") {
        None | Some(Value::Null) => None,
        Some(v) => Some(number(v, "head")?),
    };
    let keypoints_2d = match obj.get("kp2") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let t = triples(v, "kp2")?;
            let uv = std::array::from_fn(|j| [t[j][0], t[j][1]]);
            let conf = std::array::from_fn(|j| t[j][2]);
            Some(Keypoints2D::new(uv, conf)?)
        }
    };
    Ok(RawRecord {
        record: TrackRecord {
            scene_id: text("scene_id")?,
            time: number(field("t")?, "t")?,
            agent_id: text("agent_id")?,
            position: [number(&p[0], "p")?, number(&p[1], "p")?],
            keypoints,
            head,
        },
        keypoints_2d,
    })
}

/// Parses track lines. Blank lines are skipped; errors carry the 1-based
/// line number. Unknown fields produce one warning per field name.
pub fn parse_tracks(text: &str) -> Result<ParsedTracks> {
    let mut out = ParsedTracks::default();
    let mut unknown: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| anyhow!("line {line_no}: {e}"))?;
        let Value::Object(obj) = value else {
            bail!("line {line_no}: expected a JSON object");
        };
        for k in obj.keys() {
            if !KNOWN_FIELDS.contains(&k.as_str()) {
                unknown.entry(k.clone()).or_insert(line_no);
            }
        }
        out.records.push(parse_object(&obj).map_err(|e| anyhow!("line {line_no}: {e}"))?);
    }
    out.warnings = unknown
        .into_iter()
        .map(|(k, line)| format!("ignoring unknown field '{k}' (first seen on line {line})"))
        .collect();
    Ok(out)
}

pub fn read_tracks(path: &Path) -> Result<ParsedTracks> {
    parse_tracks(&fsio::read_to_string(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))
}

/// Reads a track file into a dataset. Tracks with non-increasing
/// timestamps are rejected and returned alongside it.
pub fn load_tracks(path: &Path, rate_hz: Option<f64>) -> Result<LoadedTracks> {
    let parsed = read_tracks(path)?;
    let records: Vec<TrackRecord> = parsed.records.into_iter().map(|r| r.record).collect();
    let (dataset, rejected) = TrackDataset::from_records(&records, rate_hz)?;
    Ok(LoadedTracks {
        dataset,
        rejected,
        warnings: parsed.warnings,
    })
}

fn record_json(r: &TrackRecord, kp2: Option<&Keypoints2D>) -> Value {
    let kp = r.keypoints.map(|k| k.chunks(3).map(|c| json!([c[0], c[1], c[2]])).collect::<Vec<_>>());
    let mut v = json!({
        "scene_id": r.scene_id,
        "t": r.time,
        "agent_id": r.agent_id,
        "p": r.position,
        "kp": kp,
        "head": r.head,
    });
    if let Some(k2) = kp2 {
        let rows: Vec<Value> = (0..NUM_JOINTS).map(|j| json!([k2.uv[j][0], k2.uv[j][1], k2.confidence[j]])).collect();
        v["kp2"] = Value::Array(rows);
    }
    v
}

pub fn format_records(records: &[RawRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_json(&r.record, r.keypoints_2d.as_ref()).to_string());
        out.push('\n');
    }
    out
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    fsio::write_atomic_str(path, &format_records(records))
}

pub fn write_dataset(path: &Path, ds: &TrackDataset) -> Result<()> {
    let records: Vec<RawRecord> = ds
        .to_records()
        .into_iter()
        .map(|record| RawRecord { record, keypoints_2d: None })
        .collect();
    write_records(path, &records)
}
