//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain Rust twin that returns `String` errors,
//! so the logic is testable off the browser.

use serde_json::json;
use wasm_bindgen::prelude::*;

use ulsnn_core::cluster::{build_bunyip, cost_of, plan, reduce_speedup_curve, CostModel, PlanKind, SpeedupCfg};
use ulsnn_core::datagen::{build_dataset, generate_prototypes, DatasetCfg, MAX_NOISE};

/// Stage costs of one plan as JSON:
/// `{"plan", "total_seconds", "stages": [{"stage", "transfers", "seconds", "bottleneck"}]}`.
pub fn reduce_stages_json(plan_name: &str, bytes: f64, nic_mbps: f64) -> Result<String, String> {
    let kind: PlanKind = plan_name.parse().map_err(|e: ulsnn_core::Error| e.to_string())?;
    if !(bytes >= 1.0 && bytes.is_finite()) {
        return Err("bytes must be at least 1".into());
    }
    let model = CostModel {
        nic_bandwidth: nic_mbps,
        ..CostModel::default()
    };
    let topo = build_bunyip();
    let p = plan(kind, &topo).map_err(|e| e.to_string())?;
    let report = cost_of(&p, &topo, bytes as u64, &model).map_err(|e| e.to_string())?;
    Ok(json!({
        "plan": kind.to_string(),
        "total_seconds": report.total_seconds,
        "stages": report.stages,
    })
    .to_string())
}

/// Speedup of the optimised reduce over the library reduce at `points`
/// log-spaced training-set sizes from `min_patterns` to `max_patterns`.
pub fn speedup_curve_json(min_patterns: f64, max_patterns: f64, points: u32) -> Result<String, String> {
    if !(min_patterns >= 1.0 && max_patterns > min_patterns && points >= 2) {
        return Err("need 1 <= min < max and at least 2 points".into());
    }
    let ratio = (max_patterns / min_patterns).ln() / (points - 1) as f64;
    let sizes: Vec<usize> = (0..points)
        .map(|i| (min_patterns * (ratio * i as f64).exp()).round() as usize)
        .collect();
    let curve =
        reduce_speedup_curve(&sizes, &SpeedupCfg::default(), &CostModel::default()).map_err(|e| e.to_string())?;
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

const DEMO_CLASSES: usize = 50;

/// 400 grey levels of a glyph: the class prototype when `variant` is 0,
/// otherwise distorted copy number `variant` with the given noise amplitude.
pub fn glyph_pixels(class: u32, variant: u32, seed: u32, noise: f32) -> Result<Vec<f32>, String> {
    let class = class as usize;
    if class >= DEMO_CLASSES {
        return Err(format!("class must be below {DEMO_CLASSES}"));
    }
    let mut cfg = DatasetCfg {
        n_classes: DEMO_CLASSES,
        per_class: 1,
        seed: seed as u64,
        ..DatasetCfg::default()
    };
    if variant == 0 {
        let protos = generate_prototypes(cfg.n_classes, cfg.seed, cfg.margin).map_err(|e| e.to_string())?;
        return Ok(protos[class].pixels.to_vec());
    }
    cfg.mix.noise_amplitude = noise.clamp(0.0, MAX_NOISE);
    cfg.first_index = (variant as u64 - 1) * DEMO_CLASSES as u64;
    let data = build_dataset(&cfg).map_err(|e| e.to_string())?;
    Ok(data.images[class].pixels.to_vec())
}

#[wasm_bindgen]
pub fn reduce_stages(plan_name: &str, bytes: f64, nic_mbps: f64) -> Result<String, JsError> {
    reduce_stages_json(plan_name, bytes, nic_mbps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn speedup_curve(min_patterns: f64, max_patterns: f64, points: u32) -> Result<String, JsError> {
    speedup_curve_json(min_patterns, max_patterns, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn glyph(class: u32, variant: u32, seed: u32, noise: f32) -> Result<Vec<f32>, JsError> {
    glyph_pixels(class, variant, seed, noise).map_err(|e| JsError::new(&e))
}
