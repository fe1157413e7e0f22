//! Browser bindings: synthesize and track a scene, compare pruning modes,
//! and explore box overlap. Every function returns a JSON string.

use hypotrack::engine::{track, EngineConfig, IouHeuristicScorer, PruningMode, TrackletScorer};
use hypotrack::geometry::{iou, shift_box, BoundingBox};
use hypotrack::metrics::report;
use hypotrack::sequence::SequenceBundle;
use hypotrack::synth::{synth_scene, Pattern, SynthSpec};
use hypotrack::tracklet::Trajectory;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn fail(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn scene(persons: usize, frames: usize, crossing: bool, miss_rate: f64, seed: u64) -> Result<SequenceBundle, JsError> {
    synth_scene(&SynthSpec {
        persons,
        frames,
        pattern: if crossing { Pattern::Crossing } else { Pattern::Linear },
        miss_rate,
        seed,
        ..Default::default()
    })
    .map_err(fail)
}

fn boxes(trajectories: &[Trajectory]) -> Value {
    trajectories
        .iter()
        .map(|t| {
            let cols: Vec<Value> = t.columns.iter().map(|b| if b.is_absent() { Value::Null } else { json!(b.to_array()) }).collect();
            json!({ "id": t.id, "boxes": cols })
        })
        .collect()
}

/// Synthesizes a scene, tracks it with the IoU heuristic scorer and scores the result.
#[wasm_bindgen]
pub fn synth_and_track(persons: usize, frames: usize, crossing: bool, miss_rate: f64, seed: u64, c_score: f64) -> Result<String, JsError> {
    let seq = scene(persons, frames, crossing, miss_rate, seed)?;
    let cfg = EngineConfig {
        c_score,
        batch_frames: 12,
        ..Default::default()
    };
    let scorer: &dyn TrackletScorer = &IouHeuristicScorer;
    let out = track(&seq, scorer, &cfg).map_err(fail)?;
    let gt = seq.ground_truth.as_deref().unwrap_or_default();
    let r = report(&out.trajectories, gt, seq.frame_count()).map_err(fail)?;
    let detections: Vec<Vec<[f64; 4]>> = seq.frames.iter().map(|f| f.iter().map(|d| d.bbox.to_array()).collect()).collect();
    Ok(json!({
        "width": seq.image_width,
        "height": seq.image_height,
        "frames": seq.frame_count(),
        "detections": detections,
        "tracks": boxes(&out.trajectories),
        "ground_truth": boxes(gt),
        "metrics": {
            "idf1": r.idf1, "idp": r.idp, "idr": r.idr, "mota": r.mota, "motp": r.motp,
            "id_switches": r.id_switches, "fp": r.fp, "fn": r.fn_, "frag": r.frag,
        },
    })
    .to_string())
}

/// Hypothesis pool size after each growth step of the first batch, per pruning mode.
#[wasm_bindgen]
pub fn growth_curves(persons: usize, frames: usize, seed: u64, keep: usize, cutoff: f64) -> Result<String, JsError> {
    let seq = scene(persons, frames, true, 0.1, seed)?;
    let modes = [
        ("per_source", PruningMode::PerSource),
        ("score", PruningMode::ByScore { cutoff }),
        ("count", PruningMode::ByCount { keep }),
    ];
    let mut curves = serde_json::Map::new();
    for (name, pruning) in modes {
        let cfg = EngineConfig {
            pruning,
            batch_frames: frames.max(2),
            ..Default::default()
        };
        let out = track(&seq, &IouHeuristicScorer, &cfg).map_err(fail)?;
        let growth = out.batches.first().map(|b| b.growth.clone()).unwrap_or_default();
        curves.insert(name.into(), json!({ "candidates": growth.candidates, "pool_sizes": growth.pool_sizes }));
    }
    Ok(json!({ "detections": seq.detection_count(), "curves": curves }).to_string())
}

/// IoU of two `(left, top, width, height)` boxes, before and after shifting the first by `shift`.
#[wasm_bindgen]
pub fn overlap(a: &[f64], b: &[f64], shift: &[f64]) -> Result<String, JsError> {
    let arr = |v: &[f64], name: &str| -> Result<[f64; 4], JsError> { v.try_into().map_err(|_| JsError::new(&format!("{name} needs 4 numbers"))) };
    let (a, b) = (BoundingBox::from_array(arr(a, "a")?), BoundingBox::from_array(arr(b, "b")?));
    let shifted = shift_box(&a, arr(shift, "shift")?).map_err(fail)?;
    Ok(json!({
        "iou": iou(&a, &b),
        "intersection": a.intersection_area(&b),
        "shifted": shifted.to_array(),
        "shifted_iou": iou(&shifted, &b),
    })
    .to_string())
}
