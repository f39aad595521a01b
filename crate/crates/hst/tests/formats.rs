use std::path::Path;

use hst::camera::{format_camera, parse_camera};
use hst::checkpoint::{decode_model, encode_model, load_model, save_model};
use hst::config::{model_config_from_toml, model_config_to_toml, RunConfig};
use hst::occupancy::{format_occupancy, parse_occupancy};
use hst::tracks::{format_records, parse_tracks, RawRecord};
use hst_core::model::{HumanSceneTransformer, ModelConfig, Protocol};
use hst_core::pose::{Camera, Keypoints2D, NUM_JOINTS};
use hst_core::scene::{OccupancyGrid, TrackDataset, TrackRecord};
use proptest::prelude::*;

fn line(scene: &str, agent: &str, t: f64, x: f64, y: f64) -> String {
    format!(r#"{{"scene_id": "{scene}", "t": {t}, "agent_id": "{agent}", "p": [{x}, {y}], "kp": null, "head": null}}"#)
}

#[test]
fn two_agents_thirty_steps_give_two_tracks() {
    let mut text = String::new();
    for a in ["a", "b"] {
        for k in 0..30 {
            text += &line("s", a, k as f64 / 3.0, k as f64, 0.0);
            text.push('\n');
        }
    }
    let parsed = parse_tracks(&text).unwrap();
    let records: Vec<TrackRecord> = parsed.records.into_iter().map(|r| r.record).collect();
    let (ds, rejected) = TrackDataset::from_records(&records, None).unwrap();
    assert_eq!(ds.num_tracks(), 2);
    assert!(rejected.is_empty());
    assert!((ds.rate_hz - 3.0).abs() < 1e-12);
    assert!(ds.scenes[0].tracks.iter().all(|t| t.frames.len() == 30));
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let parsed = parse_tracks("").unwrap();
    assert!(parsed.records.is_empty());
    let (ds, rejected) = TrackDataset::from_records(&[], Some(3.0)).unwrap();
    assert_eq!(ds.num_tracks(), 0);
    assert!(rejected.is_empty());
}

#[test]
fn out_of_order_track_is_rejected_and_counted() {
    let text = [
        line("s", "a", 0.0, 0.0, 0.0),
        line("s", "a", 0.6666, 1.0, 0.0),
        line("s", "a", 0.3333, 2.0, 0.0),
        line("s", "b", 0.0, 0.0, 1.0),
        line("s", "b", 0.3333, 0.0, 2.0),
    ]
    .join("\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    std::fs::write(&path, text).unwrap();
    let loaded = hst::tracks::load_tracks(&path, Some(3.0)).unwrap();
    assert_eq!(loaded.rejected.len(), 1);
    assert_eq!(loaded.rejected[0].agent_id, "a");
    assert_eq!(loaded.dataset.num_tracks(), 1);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let good = line("s", "a", 0.0, 0.0, 0.0);
    let cases = [
        format!("{good}\n{{not json\n"),
        format!("{good}\n\n{{\"scene_id\": \"s\", \"t\": 1, \"agent_id\": \"a\"}}\n"),
        format!("{good}\n{}\n", good.replace("[0, 0]", "[0]")),
        format!("{good}\n{}\n", good.replace("\"kp\": null", "\"kp\": [[1, 2, 3]]")),
    ];
    let expected = ["line 2", "line 3", "line 2", "line 2"];
    for (c, want) in cases.iter().zip(expected) {
        let err = parse_tracks(c).unwrap_err().to_string();
        assert!(err.contains(want), "{err}");
    }
}

#[test]
fn unknown_fields_warn_once() {
    let l = line("s", "a", 0.0, 0.0, 0.0).replace("\"head\": null", "\"head\": null, \"conf\": 0.9");
    let text = format!("{l}\n{}\n", l.replace("0.0", "0.5"));
    let parsed = parse_tracks(&text).unwrap();
    assert_eq!(parsed.records.len(), 2);
    assert_eq!(parsed.warnings.len(), 1);
    assert!(parsed.warnings[0].contains("conf") && parsed.warnings[0].contains("line 1"));
}

fn arb_record() -> impl Strategy<Value = RawRecord> {
    (
        "[a-z]{1,4}",
        0.0..100.0f64,
        "[a-z0-9]{1,4}",
        prop::array::uniform2(-50.0..50.0f64),
        prop::option::of(prop::collection::vec(-5.0..5.0f64, 3 * NUM_JOINTS)),
        prop::option::of(-3.0..3.0f64),
        prop::option::of(prop::collection::vec(0.0..1.0f64, 3 * NUM_JOINTS)),
    )
        .prop_map(|(scene_id, time, agent_id, position, kp, head, kp2)| RawRecord {
            record: TrackRecord {
                scene_id,
                time,
                agent_id,
                position,
                keypoints: kp.map(|v| v.try_into().unwrap()),
                head,
            },
            keypoints_2d: kp2.map(|v| {
                Keypoints2D::new(std::array::from_fn(|j| [v[3 * j] * 640.0, v[3 * j + 1] * 480.0]), std::array::from_fn(|j| v[3 * j + 2]))
                    .unwrap()
            }),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn track_lines_round_trip(records in prop::collection::vec(arb_record(), 0..6)) {
        let text = format_records(&records);
        let parsed = parse_tracks(&text).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(parsed.records, records);
    }

    #[test]
    fn occupancy_round_trips(w in 1usize..20, h in 1usize..20, cell in 0.05..2.0f64, ox in -10.0..10.0f64, oy in -10.0..10.0f64, seed in any::<u64>()) {
        let cells = (0..w * h).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let grid = OccupancyGrid::new(w, h, cell, [ox, oy], cells).unwrap();
        prop_assert_eq!(parse_occupancy(&format_occupancy(&grid)).unwrap(), grid);
    }
}

#[test]
fn occupancy_text_layout() {
    let g = parse_occupancy("# map\n4 2 0.5 -1 -0.5\n0110\n0 0 0 1\n").unwrap();
    assert_eq!((g.width, g.height, g.cell_size, g.origin), (4, 2, 0.5, [-1.0, -0.5]));
    assert!(g.get(0, 1) && g.get(0, 2) && g.get(1, 3) && !g.get(1, 0));
    for bad in ["", "4 2 0.5 0\n0000\n0000\n", "4 2 0.5 0 0\n0000\n", "4 2 0.5 0 0\n0000\n00x0\n", "2 1 0 0 0\n00\n"] {
        assert!(parse_occupancy(bad).is_err(), "{bad:?}");
    }
}

#[test]
fn camera_round_trip_and_validation() {
    let cam = Camera::looking_at([0.0, -6.0, 1.5], [0.0, 0.0, 1.0], 500.0, 510.0, 320.0, 240.0).unwrap();
    let back = parse_camera(&format_camera(&cam)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((back.rotation[i][j] - cam.rotation[i][j]).abs() < 1e-15);
        }
    }
    assert_eq!((back.fx, back.fy, back.cx, back.cy, back.translation), (cam.fx, cam.fy, cam.cx, cam.cy, cam.translation));
    let skewed = r#"{"fx": 1, "fy": 1, "cx": 0, "cy": 0, "rotation": [1,0,0, 0,2,0, 0,0,1], "translation": [0,0,0]}"#;
    assert!(parse_camera(skewed).is_err());
    let extra = r#"{"fx": 1, "fy": 1, "cx": 0, "cy": 0, "rotation": [1,0,0, 0,1,0, 0,0,1], "translation": [0,0,0], "k1": 0}"#;
    assert!(parse_camera(extra).is_err());
}

#[test]
fn run_config_defaults_and_overrides() {
    let cfg: RunConfig = toml::from_str("").unwrap();
    assert_eq!(cfg.model_config().unwrap(), ModelConfig::jrdb());
    let text = "[model]\nprotocol = \"eth\"\nwidth = 32\n[train]\nsteps = 7\n[data]\nstride = 3\n";
    let cfg: RunConfig = toml::from_str(text).unwrap();
    let m = cfg.model_config().unwrap();
    assert_eq!((m.protocol, m.modes, m.history, m.width), (Protocol::Eth, 20, 7, 32));
    assert_eq!((cfg.train.steps, cfg.data.stride), (7, 3));
    let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert!(toml::from_str::<RunConfig>("[model]\nwidht = 3\n").is_err());
}

#[test]
fn run_config_rejects_broken_protocols() {
    for text in [
        "[model]\nprotocol = \"jrdb\"\nfuture = 8\n",
        "[model]\nprotocol = \"jrdb\"\nmax_agents = 20\n",
        "[model]\nprotocol = \"eth\"\nmodes = 6\n",
        "[model]\nprotocol = \"eth\"\nperiod = 0.5\n",
        "[model]\nwidth = 30\nheads = 4\n",
        "[model]\nprotocol = \"nuscenes\"\n",
    ] {
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate().is_err(), "{text}");
    }
}

#[test]
fn relative_config_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    std::fs::write(&p, "out = \"o\"\n[data]\ntracks = \"t.jsonl\"\n").unwrap();
    let cfg = RunConfig::load(&p).unwrap();
    assert_eq!(cfg.tracks_path().unwrap(), dir.path().join("t.jsonl"));
    assert_eq!(cfg.checkpoint_path(), dir.path().join("o").join("model.ckpt"));
}

#[test]
fn model_config_text_round_trip() {
    for c in [ModelConfig::jrdb(), ModelConfig::eth(), ModelConfig { interaction: false, dropout: 0.0, ..ModelConfig::jrdb() }] {
        assert_eq!(model_config_from_toml(&model_config_to_toml(&c)).unwrap(), c);
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        protocol: Protocol::Custom,
        width: 16,
        heads: 2,
        ff_width: 32,
        modes: 3,
        ..ModelConfig::jrdb()
    }
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let m = HumanSceneTransformer::new(small(), 3).unwrap();
    let bytes = encode_model(&m, 17);
    assert_eq!(&bytes[..8], b"HSTCKPT1");
    let (back, step) = decode_model(&bytes).unwrap();
    assert_eq!(step, 17);
    assert_eq!(back.config, m.config);
    let a: Vec<_> = m.params.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
    let b: Vec<_> = back.params.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
    assert_eq!(a, b);
}

#[test]
fn corrupt_checkpoints_are_errors() {
    let m = HumanSceneTransformer::new(small(), 3).unwrap();
    let bytes = encode_model(&m, 0);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(decode_model(&bad_magic).is_err());
    assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(load_model(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn atomic_save_leaves_no_temporary_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = HumanSceneTransformer::new(small(), 0).unwrap();
    let p = dir.path().join("sub").join("m.ckpt");
    save_model(&p, &m, 0).unwrap();
    save_model(&p, &m, 1).unwrap();
    let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("m.ckpt")]);
    assert_eq!(load_model(Path::new(&p)).unwrap().1, 1);
}
