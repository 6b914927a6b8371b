//! Solver inputs: frames, keypoint matches and object observations, plus the
//! `objreg-problem/1` JSON file format.
//!
//! Depth points are stored camera-local and already back-projected. NOC
//! points live in the canonical object cube `[-0.5, 0.5]³` and are paired
//! one-to-one with depth points.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{to_canonical_string, write_atomic};
use crate::geometry::{Intrinsics, RigidPose};

pub const PROBLEM_SCHEMA: &str = "objreg-problem/1";

/// Half-width of the canonical object cube.
pub const NOC_HALF_EXTENT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed problem JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema {found:?}, expected {PROBLEM_SCHEMA:?}")]
    Schema { found: Option<String> },
    #[error("{record}: {message}")]
    Invalid { record: String, message: String },
}

fn invalid(record: impl Into<String>, message: impl Into<String>) -> ObservationError {
    ObservationError::Invalid { record: record.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Round,
    Square,
    Rectangle,
    NonSymmetric,
}

impl Symmetry {
    pub fn is_symmetric(self) -> bool {
        self != Symmetry::NonSymmetric
    }
}

/// A matched pair of camera-local depth points in two frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointMatch {
    pub frame_i: usize,
    pub frame_j: usize,
    pub point_i: Vector3<f64>,
    pub point_j: Vector3<f64>,
}

/// One detected object instance in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectObservation {
    pub frame: usize,
    pub detection_id: u32,
    pub class_label: u32,
    pub noc_points: Vec<Vector3<f64>>,
    pub depth_points: Vec<Vector3<f64>>,
    pub scale_estimate: Vector3<f64>,
    pub embedding: Vec<f64>,
    pub symmetry: Symmetry,
}

impl ObjectObservation {
    /// NOC points scaled into metric object space (`p ⊙ s`).
    pub fn scaled_noc(&self) -> Vec<Vector3<f64>> {
        self.noc_points.iter().map(|p| p.component_mul(&self.scale_estimate)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    /// Camera-local depth cloud of the whole frame, used for ICP refinement
    /// and overlap measurement. May be empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cloud: Vec<Vector3<f64>>,
}

impl FrameRecord {
    pub fn new(index: usize) -> Self {
        Self { index, intrinsics: None, timestamp: None, cloud: Vec::new() }
    }
}

/// Everything the solver consumes for one problem.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameSet {
    pub frames: Vec<FrameRecord>,
    #[serde(default)]
    pub keypoint_matches: Vec<KeypointMatch>,
    #[serde(default)]
    pub observations: Vec<ObjectObservation>,
    /// Camera-to-world poses, evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<RigidPose<f64>>>,
}

/// A point and its match in another frame.
pub type PointPair = (Vector3<f64>, Vector3<f64>);

/// Keypoint matches between one unordered frame pair, oriented so that
/// `lo < hi`; each entry is `(point in lo, point in hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointGroup {
    pub lo: usize,
    pub hi: usize,
    pub pairs: Vec<PointPair>,
}

fn finite(v: &Vector3<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl FrameSet {
    /// `n` bare frames and nothing else.
    pub fn with_frames(n: usize) -> Self {
        Self { frames: (0..n).map(FrameRecord::new).collect(), ..Default::default() }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn observations_in(&self, frame: usize) -> Vec<&ObjectObservation> {
        self.observations.iter().filter(|o| o.frame == frame).collect()
    }

    pub fn observation(&self, frame: usize, detection_id: u32) -> Option<&ObjectObservation> {
        self.observations.iter().find(|o| o.frame == frame && o.detection_id == detection_id)
    }

    /// Matches grouped by unordered frame pair, in ascending pair order.
    pub fn keypoint_groups(&self) -> Vec<KeypointGroup> {
        let mut groups: BTreeMap<(usize, usize), Vec<PointPair>> = BTreeMap::new();
        for m in &self.keypoint_matches {
            let (key, pair) = if m.frame_i < m.frame_j {
                ((m.frame_i, m.frame_j), (m.point_i, m.point_j))
            } else {
                ((m.frame_j, m.frame_i), (m.point_j, m.point_i))
            };
            groups.entry(key).or_default().push(pair);
        }
        groups.into_iter().map(|((lo, hi), pairs)| KeypointGroup { lo, hi, pairs }).collect()
    }

    /// Full depth cloud of a frame; falls back to every depth point referenced
    /// by observations and matches when no cloud was stored.
    pub fn frame_cloud(&self, frame: usize) -> Vec<Vector3<f64>> {
        if let Some(rec) = self.frames.get(frame) {
            if !rec.cloud.is_empty() {
                return rec.cloud.clone();
            }
        }
        let mut pts: Vec<Vector3<f64>> =
            self.observations_in(frame).into_iter().flat_map(|o| o.depth_points.iter().copied()).collect();
        for m in &self.keypoint_matches {
            if m.frame_i == frame {
                pts.push(m.point_i);
            } else if m.frame_j == frame {
                pts.push(m.point_j);
            }
        }
        pts
    }

    /// Two-frame sub-problem with frames `i` and `j` re-indexed to 0 and 1.
    /// Ground truth, when present, becomes `[I, T_i⁻¹·T_j]`.
    pub fn pair_view(&self, i: usize, j: usize) -> FrameSet {
        let remap = |f: usize| {
            if f == i {
                Some(0)
            } else if f == j {
                Some(1)
            } else {
                None
            }
        };
        let frames = [i, j]
            .iter()
            .enumerate()
            .map(|(new, &old)| FrameRecord { index: new, ..self.frames[old].clone() })
            .collect();
        let keypoint_matches = self
            .keypoint_matches
            .iter()
            .filter_map(|m| {
                let (a, b) = (remap(m.frame_i)?, remap(m.frame_j)?);
                Some(KeypointMatch { frame_i: a, frame_j: b, ..m.clone() })
            })
            .collect();
        let observations = self
            .observations
            .iter()
            .filter_map(|o| Some(ObjectObservation { frame: remap(o.frame)?, ..o.clone() }))
            .collect();
        let ground_truth =
            self.ground_truth.as_ref().map(|gt| vec![RigidPose::identity(), gt[i].inverse().compose(&gt[j])]);
        FrameSet { frames, keypoint_matches, observations, ground_truth }
    }

    /// Checks every type invariant, naming the first offending record.
    pub fn validate(&self) -> Result<(), ObservationError> {
        let k = self.frames.len();
        for (pos, f) in self.frames.iter().enumerate() {
            let rec = format!("frames[{pos}]");
            if f.index != pos {
                return Err(invalid(rec, format!("index {} breaks dense 0..{k} numbering", f.index)));
            }
            if let Some(intr) = &f.intrinsics {
                intr.validate().map_err(|e| invalid(rec.clone(), e.to_string()))?;
            }
            if let Some(ts) = f.timestamp {
                if !ts.is_finite() {
                    return Err(invalid(rec, "timestamp is not finite"));
                }
            }
            if let Some(c) = f.cloud.iter().position(|p| !finite(p)) {
                return Err(invalid(rec, format!("cloud point {c} is not finite")));
            }
        }

        for (pos, m) in self.keypoint_matches.iter().enumerate() {
            let rec = format!("keypoint_matches[{pos}]");
            if m.frame_i == m.frame_j {
                return Err(invalid(rec, format!("matches frame {} with itself", m.frame_i)));
            }
            for f in [m.frame_i, m.frame_j] {
                if f >= k {
                    return Err(invalid(rec, format!("references missing frame {f}")));
                }
            }
            if !finite(&m.point_i) || !finite(&m.point_j) {
                return Err(invalid(rec, "point is not finite"));
            }
        }

        let mut seen = HashSet::new();
        let mut embed_len = None;
        for (pos, o) in self.observations.iter().enumerate() {
            let rec = format!("observations[{pos}] (frame {}, detection {})", o.frame, o.detection_id);
            if o.frame >= k {
                return Err(invalid(rec, format!("references missing frame {}", o.frame)));
            }
            if !seen.insert((o.frame, o.detection_id)) {
                return Err(invalid(rec, "duplicate detection id within frame"));
            }
            if o.noc_points.len() != o.depth_points.len() {
                return Err(invalid(
                    rec,
                    format!("{} noc points but {} depth points", o.noc_points.len(), o.depth_points.len()),
                ));
            }
            for (i, p) in o.noc_points.iter().enumerate() {
                if !finite(p) || p.iter().any(|c| c.abs() > NOC_HALF_EXTENT) {
                    return Err(invalid(
                        rec,
                        format!("noc point {i} = [{}, {}, {}] outside [-0.5, 0.5]^3", p.x, p.y, p.z),
                    ));
                }
            }
            if let Some(i) = o.depth_points.iter().position(|p| !finite(p)) {
                return Err(invalid(rec, format!("depth point {i} is not finite")));
            }
            if o.scale_estimate.iter().any(|s| !s.is_finite() || *s <= 0.0) {
                return Err(invalid(rec, "scale_estimate must be finite and positive"));
            }
            if o.embedding.iter().any(|e| !e.is_finite()) {
                return Err(invalid(rec, "embedding is not finite"));
            }
            match embed_len {
                None => embed_len = Some(o.embedding.len()),
                Some(n) if n != o.embedding.len() => {
                    return Err(invalid(rec, format!("embedding length {} differs from {n}", o.embedding.len())));
                }
                _ => {}
            }
        }

        if let Some(gt) = &self.ground_truth {
            if gt.len() != k {
                return Err(invalid("ground_truth", format!("{} poses for {k} frames", gt.len())));
            }
            if let Some(i) = gt.iter().position(|p| !p.is_finite()) {
                return Err(invalid(format!("ground_truth[{i}]"), "pose is not finite"));
            }
        }
        Ok(())
    }

    /// Canonical JSON document, including the schema tag.
    pub fn to_canonical_string(&self) -> String {
        let mut v = serde_json::to_value(self).expect("FrameSet serializes");
        if let Value::Object(map) = &mut v {
            map.insert("schema".into(), Value::String(PROBLEM_SCHEMA.into()));
        }
        to_canonical_string(&v)
    }

    /// Parses and validates a problem document.
    pub fn from_json_str(text: &str) -> Result<Self, ObservationError> {
        let mut v: Value = serde_json::from_str(text)?;
        let schema = v.get("schema").and_then(Value::as_str).map(str::to_owned);
        if schema.as_deref() != Some(PROBLEM_SCHEMA) {
            return Err(ObservationError::Schema { found: schema });
        }
        if let Value::Object(map) = &mut v {
            map.remove("schema");
        }
        let fs: FrameSet = serde_json::from_value(v)?;
        fs.validate()?;
        Ok(fs)
    }

    /// The value this set takes after one save/load cycle (floats rounded to
    /// 9 significant digits).
    pub fn normalized(&self) -> Result<Self, ObservationError> {
        Self::from_json_str(&self.to_canonical_string())
    }
}

pub fn load_problem(path: &Path) -> Result<FrameSet, ObservationError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ObservationError::Io { path: path.display().to_string(), source })?;
    FrameSet::from_json_str(&text)
}

pub fn save_problem(fs: &FrameSet, path: &Path) -> Result<(), ObservationError> {
    fs.validate()?;
    write_atomic(path, fs.to_canonical_string().as_bytes())
        .map_err(|source| ObservationError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(frame: usize, det: u32) -> ObjectObservation {
        ObjectObservation {
            frame,
            detection_id: det,
            class_label: 3,
            noc_points: vec![Vector3::new(0.1, -0.2, 0.5), Vector3::new(-0.5, 0.0, 0.25)],
            depth_points: vec![Vector3::new(1.0, 0.5, 2.0), Vector3::new(0.7, 0.4, 2.2)],
            scale_estimate: Vector3::new(0.5, 0.8, 1.0),
            embedding: vec![0.1, 0.2, 0.3],
            symmetry: Symmetry::NonSymmetric,
        }
    }

    fn sample() -> FrameSet {
        let mut fs = FrameSet::with_frames(2);
        fs.frames[0].timestamp = Some(0.0);
        fs.frames[1].intrinsics =
            Some(Intrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 });
        fs.keypoint_matches.push(KeypointMatch {
            frame_i: 0,
            frame_j: 1,
            point_i: Vector3::new(0.123456789, 1.0, 2.0),
            point_j: Vector3::new(0.1, 1.1, 2.1),
        });
        fs.observations.push(obs(0, 0));
        fs.observations.push(obs(1, 0));
        fs.ground_truth = Some(vec![RigidPose::identity(), RigidPose::identity()]);
        fs
    }

    fn expect_invalid(fs: &FrameSet, needle: &str) {
        match fs.validate() {
            Err(ObservationError::Invalid { record, message }) => {
                let text = format!("{record}: {message}");
                assert!(text.contains(needle), "{text:?} lacks {needle:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_two_frames() {
        let fs = FrameSet::from_json_str(r#"{"schema": "objreg-problem/1", "frames": [{"index": 0}, {"index": 1}]}"#)
            .unwrap();
        assert_eq!(fs.num_frames(), 2);
        assert!(fs.observations.is_empty() && fs.keypoint_matches.is_empty());
    }

    #[test]
    fn empty_set_document() {
        let text = FrameSet::default().to_canonical_string();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema"], PROBLEM_SCHEMA);
        assert_eq!(v["frames"], serde_json::json!([]));
        assert_eq!(v["observations"], serde_json::json!([]));
        assert_eq!(v["keypoint_matches"], serde_json::json!([]));
        assert_eq!(FrameSet::from_json_str(&text).unwrap(), FrameSet::default());
    }

    #[test]
    fn schema_and_parse_errors() {
        assert!(matches!(FrameSet::from_json_str(r#"{"frames": []}"#), Err(ObservationError::Schema { found: None })));
        assert!(matches!(FrameSet::from_json_str("{not json"), Err(ObservationError::Parse(_))));
    }

    #[test]
    fn noc_out_of_range_names_observation() {
        let mut fs = sample();
        fs.observations[1].noc_points[0].y = 0.7;
        expect_invalid(&fs, "observations[1] (frame 1, detection 0)");
        let text = fs.to_canonical_string();
        assert!(matches!(FrameSet::from_json_str(&text), Err(ObservationError::Invalid { .. })));
    }

    #[test]
    fn every_invariant_is_rejected() {
        let mut fs = sample();
        fs.frames[1].index = 5;
        expect_invalid(&fs, "frames[1]");

        let mut fs = sample();
        fs.keypoint_matches[0].frame_j = 0;
        expect_invalid(&fs, "with itself");

        let mut fs = sample();
        fs.keypoint_matches[0].frame_j = 9;
        expect_invalid(&fs, "missing frame 9");

        let mut fs = sample();
        fs.keypoint_matches[0].point_i.x = f64::NAN;
        expect_invalid(&fs, "keypoint_matches[0]");

        let mut fs = sample();
        fs.observations[0].frame = 2;
        expect_invalid(&fs, "missing frame 2");

        let mut fs = sample();
        fs.observations[0].depth_points.pop();
        expect_invalid(&fs, "2 noc points but 1 depth points");

        let mut fs = sample();
        fs.observations[0].depth_points[0].z = f64::INFINITY;
        expect_invalid(&fs, "depth point 0");

        let mut fs = sample();
        fs.observations[0].scale_estimate.z = 0.0;
        expect_invalid(&fs, "scale_estimate");

        let mut fs = sample();
        fs.observations[1].embedding.push(1.0);
        expect_invalid(&fs, "embedding length 4 differs from 3");

        let mut fs = sample();
        fs.observations[1].embedding[0] = f64::NAN;
        expect_invalid(&fs, "embedding is not finite");

        let mut fs = sample();
        fs.observations[1].frame = 0;
        expect_invalid(&fs, "duplicate detection");

        let mut fs = sample();
        fs.ground_truth.as_mut().unwrap().pop();
        expect_invalid(&fs, "1 poses for 2 frames");

        let mut fs = sample();
        fs.frames[1].intrinsics.as_mut().unwrap().cx = 700.0;
        expect_invalid(&fs, "cx=700");

        let mut fs = sample();
        fs.frames[0].timestamp = Some(f64::NAN);
        expect_invalid(&fs, "timestamp");

        let mut fs = sample();
        fs.frames[0].cloud.push(Vector3::new(f64::NAN, 0.0, 0.0));
        expect_invalid(&fs, "cloud point 0");
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("problem.json");
        let mut fs = sample();
        fs.observations[0].depth_points[0].x = 1.0 / 3.0;
        save_problem(&fs, &p).unwrap();
        let first = std::fs::read_to_string(&p).unwrap();
        let loaded = load_problem(&p).unwrap();
        assert_eq!(loaded.keypoint_matches[0].point_i.x, 0.123456789);
        save_problem(&loaded, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), first);
        assert_eq!(loaded, fs.normalized().unwrap());
    }

    #[test]
    fn pair_view_reindexes() {
        let mut fs = FrameSet::with_frames(3);
        fs.observations.push(obs(2, 4));
        fs.keypoint_matches.push(KeypointMatch {
            frame_i: 2,
            frame_j: 0,
            point_i: Vector3::zeros(),
            point_j: Vector3::new(1.0, 0.0, 0.0),
        });
        let t = RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        fs.ground_truth = Some(vec![t, RigidPose::identity(), t.compose(&t)]);
        let pv = fs.pair_view(0, 2);
        pv.validate().unwrap();
        assert_eq!(pv.observations[0].frame, 1);
        assert_eq!(pv.keypoint_matches[0].frame_i, 1);
        let groups = pv.keypoint_groups();
        assert_eq!(groups.len(), 1);
        assert_eq!((groups[0].lo, groups[0].hi), (0, 1));
        assert_eq!(groups[0].pairs[0].0, Vector3::new(1.0, 0.0, 0.0));
        let rel = pv.ground_truth.unwrap()[1];
        assert!((rel.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    fn sig9() -> impl Strategy<Value = f64> {
        (-1.0e3f64..1.0e3).prop_map(crate::canonical::round_sig9)
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (sig9(), sig9(), sig9()).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn noc3() -> impl Strategy<Value = Vector3<f64>> {
        (-0.5f64..=0.5, -0.5f64..=0.5, -0.5f64..=0.5)
            .prop_map(|(a, b, c)| Vector3::new(a, b, c).map(crate::canonical::round_sig9))
    }

    prop_compose! {
        fn observation(k: usize, dim: usize)(
            frame in 0..k,
            class_label in 0u32..5,
            pairs in proptest::collection::vec((noc3(), vec3()), 0..6),
            scale in (0.01f64..3.0, 0.01f64..3.0, 0.01f64..3.0),
            embedding in proptest::collection::vec(sig9(), dim),
            sym in 0usize..4,
        ) -> ObjectObservation {
            let (noc_points, depth_points) = pairs.into_iter().unzip();
            ObjectObservation {
                frame,
                detection_id: 0,
                class_label,
                noc_points,
                depth_points,
                scale_estimate: Vector3::new(scale.0, scale.1, scale.2).map(crate::canonical::round_sig9),
                embedding,
                symmetry: [Symmetry::Round, Symmetry::Square, Symmetry::Rectangle, Symmetry::NonSymmetric][sym],
            }
        }
    }

    prop_compose! {
        fn frame_set()(k in 2usize..5, dim in 1usize..5)(
            k in Just(k),
            obs in proptest::collection::vec(observation(k, dim), 0..5),
            matches in proptest::collection::vec((0..k, 1..k, vec3(), vec3()), 0..5),
            stamps in proptest::collection::vec(proptest::option::of(0.0f64..100.0), k),
            gt in proptest::option::of(proptest::collection::vec((vec3(), vec3()), k)),
        ) -> FrameSet {
            let mut fs = FrameSet::with_frames(k);
            for (f, s) in fs.frames.iter_mut().zip(stamps) {
                f.timestamp = s.map(crate::canonical::round_sig9);
            }
            for (n, mut o) in obs.into_iter().enumerate() {
                o.detection_id = n as u32;
                fs.observations.push(o);
            }
            for (i, off, a, b) in matches {
                fs.keypoint_matches.push(KeypointMatch { frame_i: i, frame_j: (i + off) % k, point_i: a, point_j: b });
            }
            fs.ground_truth = gt.map(|v| v.into_iter().map(|(a, t)| RigidPose::new(a, t)).collect());
            fs
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn load_save_identity(fs in frame_set()) {
            fs.validate().unwrap();
            let text = fs.to_canonical_string();
            let back = FrameSet::from_json_str(&text).unwrap();
            prop_assert_eq!(&back, &fs);
            prop_assert_eq!(back.to_canonical_string(), text);
        }
    }
}
