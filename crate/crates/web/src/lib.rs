//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string; the `*_json` functions hold the logic so
//! they can be tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use trigmark::keying::{self, generate_key, Level};
use trigmark::stats;
use trigmark::Image;
use wasm_bindgen::prelude::*;

const MAX_S: u64 = 4096;

#[derive(Serialize)]
struct CurvePoint {
    m: u64,
    bits: f64,
    /// Absent where the bound does not apply (m/s at or below 1/c).
    hoeffding: Option<f64>,
}

#[derive(Serialize)]
struct Curve {
    s: u64,
    c: u64,
    r_min: f64,
    threshold: Option<u64>,
    points: Vec<CurvePoint>,
}

pub fn rarity_curve_json(s: u64, c: u64, r_min: f64) -> Result<String, String> {
    if s == 0 || s > MAX_S {
        return Err(format!("s must be in 1..={MAX_S}"));
    }
    let mut points = Vec::with_capacity(s as usize + 1);
    for m in 0..=s {
        let bits = stats::rarity(s, m, c).map_err(|e| e.to_string())?.rarity_bits;
        let hoeffding = if m as f64 / s as f64 > 1.0 / c as f64 {
            stats::rarity_hoeffding(s, m, c).ok()
        } else {
            None
        };
        points.push(CurvePoint { m, bits, hoeffding });
    }
    let threshold = stats::match_threshold(s, c, r_min).ok();
    serde_json::to_string(&Curve {
        s,
        c,
        r_min,
        threshold,
        points,
    })
    .map_err(|e| e.to_string())
}

fn level_of(n: u8) -> Result<Level, String> {
    match n {
        0 => Ok(Level::Zero),
        1 => Ok(Level::One),
        2 => Ok(Level::Two),
        _ => Err(format!("no level {n}")),
    }
}

pub fn work_json(level: u8, s: u64, t: u64, c: u64, bits: f64, ratio: f64) -> Result<String, String> {
    let w = stats::work_model(level_of(level)?, s, t, c, bits, ratio).map_err(|e| e.to_string())?;
    serde_json::to_string(&serde_json::json!({
        "formula": w.formula(),
        "expected_cost": w.expected_cost,
        "log2_cost": w.expected_cost.log2(),
        "cost_inferences": w.cost_inferences,
        "cost_hashes": w.cost_hashes,
    }))
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Avalanche {
    key_id: String,
    trigger: usize,
    pixel: usize,
    level1_before: Vec<u32>,
    level1_after: Vec<u32>,
    level2_before: Vec<u32>,
    level2_after: Vec<u32>,
    level1_changed: usize,
    level2_changed: usize,
}

/// Flip one pixel LSB in one of `s` random 8×8 triggers and relabel at
/// levels 1 and 2. Level 1 can only move the edited trigger's label; level 2
/// redraws them all.
pub fn avalanche_json(key_seed: u64, s: usize, c: u32, trigger: usize, pixel: usize) -> Result<String, String> {
    if s == 0 || s > MAX_S as usize {
        return Err(format!("s must be in 1..={MAX_S}"));
    }
    let key = generate_key(Some(key_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(key_seed);
    let mut triggers: Vec<Image> = (0..s)
        .map(|_| Image::new(8, 8, 1, (0..64).map(|_| rng.gen()).collect()).expect("8x8 gray"))
        .collect();
    let trigger = trigger % s;
    let pixel = pixel % 64;
    let l1 = |t: &[Image]| keying::labels_level1(t, &key, c).map(|a| a.labels);
    let l2 = |t: &[Image]| keying::labels_level2(t, &key, c).map(|a| a.labels);
    let (b1, b2) = (l1(&triggers), l2(&triggers));
    triggers[trigger].flip_lsb(pixel);
    let (a1, a2) = (l1(&triggers), l2(&triggers));
    let err = |e: keying::KeyingError| e.to_string();
    let (b1, b2, a1, a2) = (b1.map_err(err)?, b2.map_err(err)?, a1.map_err(err)?, a2.map_err(err)?);
    let diff = |x: &[u32], y: &[u32]| x.iter().zip(y).filter(|(a, b)| a != b).count();
    serde_json::to_string(&Avalanche {
        key_id: key.key_id(),
        trigger,
        pixel,
        level1_changed: diff(&b1, &a1),
        level2_changed: diff(&b2, &a2),
        level1_before: b1,
        level1_after: a1,
        level2_before: b2,
        level2_after: a2,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn rarity_curve(s: u32, c: u32, r_min: f64) -> Result<String, JsError> {
    rarity_curve_json(s.into(), c.into(), r_min).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn work(level: u8, s: u32, t: u32, c: u32, bits: f64, ratio: f64) -> Result<String, JsError> {
    work_json(level, s.into(), t.into(), c.into(), bits, ratio).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn avalanche(key_seed: u32, s: u32, c: u32, trigger: u32, pixel: u32) -> Result<String, JsError> {
    avalanche_json(key_seed.into(), s as usize, c, trigger as usize, pixel as usize).map_err(|e| JsError::new(&e))
}
