#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn posemap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posemap"))
}

pub fn run(args: &[&str]) -> Output {
    posemap().args(args).env_remove("POSEMAP_KAPPA_TABLE").output().expect("binary runs")
}

pub fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A standing person: 17 points laid out in a `w × h` box at `(x, y)`.
pub fn skeleton(x: f64, y: f64, w: f64, h: f64) -> Vec<(f64, f64)> {
    let rel = [
        (0.50, 0.06),
        (0.45, 0.04),
        (0.55, 0.04),
        (0.38, 0.06),
        (0.62, 0.06),
        (0.25, 0.22),
        (0.75, 0.22),
        (0.15, 0.40),
        (0.85, 0.40),
        (0.10, 0.55),
        (0.90, 0.55),
        (0.33, 0.55),
        (0.67, 0.55),
        (0.33, 0.76),
        (0.67, 0.76),
        (0.33, 0.96),
        (0.67, 0.96),
    ];
    rel.iter().map(|(u, v)| (x + u * w, y + v * h)).collect()
}

pub fn gt_annotation(id: u64, image_id: u64, bbox: [f64; 4], area: f64, pts: &[(f64, f64)]) -> Value {
    let kps: Vec<f64> = pts.iter().flat_map(|(x, y)| [*x, *y, 2.0]).collect();
    json!({
        "id": id,
        "image_id": image_id,
        "category_id": 1,
        "bbox": bbox,
        "area": area,
        "keypoints": kps,
        "num_keypoints": pts.len(),
        "iscrowd": 0
    })
}

pub fn prediction(image_id: u64, score: f64, pts: &[(f64, f64)]) -> Value {
    let kps: Vec<f64> = pts.iter().flat_map(|(x, y)| [*x, *y, 1.0]).collect();
    json!({ "image_id": image_id, "category_id": 1, "score": score, "keypoints": kps })
}

pub fn gt_document(images: &[(u64, u32, u32)], annotations: Vec<Value>) -> Value {
    let images: Vec<Value> = images.iter().map(|(id, w, h)| json!({ "id": id, "width": w, "height": h })).collect();
    json!({ "images": images, "annotations": annotations, "categories": [{ "id": 1, "name": "person" }] })
}

/// Predictions equal to the ground truth, every score 1.
pub fn perfect_predictions(gt: &Value) -> Value {
    let preds: Vec<Value> = gt["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            let kps: Vec<f64> = a["keypoints"]
                .as_array()
                .unwrap()
                .chunks(3)
                .flat_map(|t| [t[0].as_f64().unwrap(), t[1].as_f64().unwrap(), 1.0])
                .collect();
            json!({ "image_id": a["image_id"], "category_id": 1, "score": 1.0, "keypoints": kps })
        })
        .collect();
    Value::Array(preds)
}

/// Several images with one to three people each, some partly outside the frame.
pub fn crowd_document(images: u64) -> Value {
    let mut anns = Vec::new();
    let mut next = 1;
    for img in 1..=images {
        let people = 1 + img % 3;
        for p in 0..people {
            let (w, h) = (90.0 + 10.0 * p as f64, 220.0 + 7.0 * img as f64 % 40.0);
            let x = 40.0 + 170.0 * p as f64 + 13.0 * (img % 5) as f64;
            let y = 60.0 + 11.0 * (img % 7) as f64;
            let pts = skeleton(x, y, w, h);
            anns.push(gt_annotation(next, img, [x, y, w, h], 0.53 * w * h, &pts));
            next += 1;
        }
    }
    let dims: Vec<(u64, u32, u32)> = (1..=images).map(|i| (i, 640, 480)).collect();
    gt_document(&dims, anns)
}

pub fn write_json(dir: &Path, name: &str, value: &Value) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec(value).unwrap()).unwrap();
    p
}
