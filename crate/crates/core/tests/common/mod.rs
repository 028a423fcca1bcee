#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde_json::{json, Value};

/// Record counts of the standard fixture.
pub const CT_RECORDS: usize = 3;
pub const CT_CONDITIONS: usize = 7;
pub const MR_RECORDS: usize = 2;
pub const MR_CONDITIONS: usize = 3;
pub const CTRATE_RECORDS: usize = 10;
pub const CTRATE_CONDITIONS: usize = 18;

pub fn write_png(path: &Path, shade: u8) {
    RgbImage::from_pixel(4, 4, Rgb([shade, 255 - shade, 128]))
        .save(path)
        .expect("write png");
}

pub fn lab_entry(name: &str, result: &str, unit: &str) -> Value {
    json!({"name": name, "result": result, "unit": unit})
}

fn labels(conditions: &[String], rec: usize) -> Value {
    let map: serde_json::Map<String, Value> = conditions
        .iter()
        .enumerate()
        .map(|(c, name)| (name.clone(), Value::Bool((rec + c) % 3 == 0)))
        .collect();
    Value::Object(map)
}

/// Writes a manifest covering every task kind plus its images into `dir`
/// and returns the manifest path.
pub fn full_manifest(dir: &Path) -> PathBuf {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    for i in 0..4 {
        write_png(&dir.join(format!("img/{i}.png")), 40 * i as u8);
    }
    let mut lines: Vec<Value> = Vec::new();

    let ct_conditions: Vec<String> = (0..CT_CONDITIONS).map(|c| format!("ct finding {c}")).collect();
    for r in 0..CT_RECORDS {
        lines.push(json!({
            "example_id": format!("ct-{r:02}"),
            "task_kind": "ct_cls",
            "inputs": {"images": ["img/0.png", "img/1.png", "img/2.png"], "slice_indices": [0, 2, 4], "history": "abdominal pain"},
            "gold": {"labels": labels(&ct_conditions, r)},
            "conditions": ct_conditions,
        }));
    }
    let mr_conditions: Vec<String> = (0..MR_CONDITIONS).map(|c| format!("mr finding {c}")).collect();
    for r in 0..MR_RECORDS {
        lines.push(json!({
            "example_id": format!("mr-{r:02}"),
            "task_kind": "mr_cls",
            "inputs": {"images": ["img/1.png", "img/2.png"], "history": "headache"},
            "gold": {"labels": labels(&mr_conditions, r)},
            "conditions": mr_conditions,
        }));
    }
    let rate_conditions: Vec<String> = (0..CTRATE_CONDITIONS).map(|c| format!("chest finding {c}")).collect();
    for r in 0..CTRATE_RECORDS {
        lines.push(json!({
            "example_id": format!("rate-{r:02}"),
            "task_kind": "ctrate_cls",
            "inputs": {"images": ["img/0.png", "img/3.png"]},
            "gold": {"labels": labels(&rate_conditions, r)},
            "conditions": rate_conditions,
        }));
    }
    for (r, reference) in ["Colon biopsy: tubular adenoma with low grade dysplasia.", "Skin excision, benign nevus; margins clear."]
        .iter()
        .enumerate()
    {
        lines.push(json!({
            "example_id": format!("wsi-{r:02}"),
            "task_kind": "wsi_report",
            "inputs": {"images": ["img/0.png", "img/1.png"], "type_procedure": "colon, biopsy"},
            "gold": {"reference": reference},
        }));
    }
    for (r, (pathology, class)) in [
        ("pleural effusion", "improved"),
        ("pleural effusion", "worsened"),
        ("edema", "stable"),
        ("edema", "improved"),
    ]
    .iter()
    .enumerate()
    {
        lines.push(json!({
            "example_id": format!("temporal-{r:02}"),
            "task_kind": "temporal",
            "inputs": {"images": ["img/2.png", "img/3.png"], "pathology": pathology},
            "gold": {"temporal": class},
        }));
    }
    for (r, (object, bbox)) in [
        ("left lung", [0.1, 0.5, 0.8, 0.9]),
        ("right lung", [0.1, 0.1, 0.8, 0.5]),
        ("cardiac silhouette", [0.45, 0.35, 0.8, 0.7]),
    ]
    .iter()
    .enumerate()
    {
        lines.push(json!({
            "example_id": format!("bbox-{r:02}"),
            "task_kind": "bbox_loc",
            "inputs": {"images": ["img/3.png"], "object": object},
            "gold": {"bbox": bbox},
        }));
    }
    let lab_sets = [
        vec![
            lab_entry("Hemoglobin", "13.5", "g/dL"),
            lab_entry("Platelet Count", "250", "10^3/uL"),
            lab_entry("Glucose", "98", "mg/dL"),
        ],
        vec![lab_entry("Sodium", "140", "mmol/L"), lab_entry("Potassium", "4.1", "mmol/L")],
    ];
    for (r, entries) in lab_sets.iter().enumerate() {
        lines.push(json!({
            "example_id": format!("lab-{r:02}"),
            "task_kind": "lab_extract",
            "inputs": {"images": ["img/1.png"]},
            "gold": {"entries": entries},
        }));
    }
    for (r, choice) in ['A', 'C', 'E'].iter().enumerate() {
        lines.push(json!({
            "example_id": format!("mcq-{r:02}"),
            "task_kind": "text_mcq",
            "inputs": {"question": format!("Question {r}? (A) one (B) two (C) three (D) four (E) five")},
            "gold": {"choice": choice},
        }));
    }
    for (r, choice) in ['B', 'D'].iter().enumerate() {
        lines.push(json!({
            "example_id": format!("ehr-{r:02}"),
            "task_kind": "ehrnote_mcq",
            "inputs": {
                "discharge_note": "DISCHARGE 1: admitted with chest pain.",
                "question": "Why was the patient admitted?",
                "choices": ["fever", "chest pain", "fall", "rash", "cough"],
            },
            "gold": {"choice": choice},
        }));
    }

    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

/// Expected number of endpoint calls for [`full_manifest`].
pub fn full_manifest_calls() -> usize {
    CT_RECORDS * CT_CONDITIONS + MR_RECORDS * MR_CONDITIONS + CTRATE_RECORDS * CTRATE_CONDITIONS + 2 + 4 + 3 + 2 + 3 + 2
}
