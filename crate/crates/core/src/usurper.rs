//! A simulated usurper forging a pseudo-key after the fact, with every model
//! and hash call tallied.

use std::cell::Cell;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::keying::{self, Level, SecretKey};
use crate::nn::{argmax, Model, NnError};
use crate::stats::{self, StatsError, WorkEstimate};

/// Largest level-2 target rarity attempted.
pub const MAX_FORGE_BITS: f64 = 24.0;
/// Level-1 give-up point, in multiples of `c`.
pub const LEVEL1_CAP_FACTOR: u64 = 100;
/// Level-2 give-up point, in multiples of `2^R`.
pub const LEVEL2_CAP_FACTOR: f64 = 64.0;

#[derive(Debug, Error)]
pub enum UsurpError {
    #[error("target rarity {bits:.2} bits exceeds the {cap} bit cap; desk-infeasible")]
    Infeasible { bits: f64, cap: f64 },
    #[error("need {need} source images, got {got}")]
    TooFewSources { need: usize, got: usize },
    #[error("invalid forgery parameter: {0}")]
    BadParam(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Keying(#[from] keying::KeyingError),
}

/// Cost tally: gradient passes weigh two inferences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounter {
    pub inferences: u64,
    pub gradient_passes: u64,
    pub hashes: u64,
}

impl WorkCounter {
    pub fn inference_units(&self) -> u64 {
        self.inferences + 2 * self.gradient_passes
    }
}

/// What the usurper needs from the stolen model.
pub trait ForgeTarget {
    fn classes(&self) -> usize;
    fn predict(&self, image: &Image) -> Result<usize, NnError>;
    /// Gradient of the cross-entropy towards `target` with respect to the
    /// normalised CHW input, and the logits of the same pass.
    fn gradient(&self, input: &[f32], target: usize) -> (Vec<f32>, Vec<f32>);
}

impl ForgeTarget for Model {
    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn predict(&self, image: &Image) -> Result<usize, NnError> {
        Model::predict(self, image)
    }

    fn gradient(&self, input: &[f32], target: usize) -> (Vec<f32>, Vec<f32>) {
        let (_, g, logits) = self.input_gradient(input, target);
        (g, logits)
    }
}

/// Routes every model and hash call through one counter.
pub struct Meter<'a, T: ?Sized> {
    target: &'a T,
    work: Cell<WorkCounter>,
}

impl<'a, T: ForgeTarget + ?Sized> Meter<'a, T> {
    pub fn new(target: &'a T) -> Self {
        Self {
            target,
            work: Cell::new(WorkCounter::default()),
        }
    }

    pub fn work(&self) -> WorkCounter {
        self.work.get()
    }

    fn bump(&self, f: impl FnOnce(&mut WorkCounter)) {
        let mut w = self.work.get();
        f(&mut w);
        self.work.set(w);
    }

    pub fn predict(&self, image: &Image) -> Result<usize, NnError> {
        self.bump(|w| w.inferences += 1);
        self.target.predict(image)
    }

    pub fn gradient(&self, input: &[f32], target: usize) -> (Vec<f32>, Vec<f32>) {
        self.bump(|w| w.gradient_passes += 1);
        self.target.gradient(input, target)
    }

    pub fn label_level1(&self, image: &Image, key: &SecretKey, c: u32) -> u32 {
        self.bump(|w| w.hashes += 1);
        keying::label_level1(image, key, c)
    }

    /// Joint digest plus `s` label derivations, tallied as `s + 1` hashes.
    pub fn labels_level2(&self, images: &[Image], key: &SecretKey, c: u32) -> Vec<u32> {
        self.bump(|w| w.hashes += images.len() as u64 + 1);
        let joint = keying::joint_digest(images, key);
        keying::labels_from_joint(&joint, key, images.len(), c)
    }

    pub fn labels_level0(&self, key: &SecretKey, s: usize, c: u32) -> Result<Vec<u32>, UsurpError> {
        self.bump(|w| w.hashes += s as u64);
        Ok(keying::labels_level0(key, s, c)?.labels)
    }
}

/// Result of one targeted crafting run.
#[derive(Debug, Clone, PartialEq)]
pub struct Crafted {
    pub image: Image,
    pub prediction: usize,
    pub success: bool,
    pub steps: usize,
}

/// Targeted projected sign-gradient descent on the 8-bit grid: step
/// `max(1, eps/10)` pixel levels, projection onto the `L∞` ball of radius
/// `eps` and onto `[0, 255]` after every step, stop as soon as the target is
/// predicted.
pub fn craft_adversarial<T: ForgeTarget + ?Sized>(
    meter: &Meter<'_, T>,
    image: &Image,
    target: usize,
    eps: u8,
    t: usize,
) -> Result<Crafted, UsurpError> {
    if eps == 0 {
        return Err(UsurpError::BadParam("eps must be positive"));
    }
    let start = meter.predict(image)?;
    if start == target {
        return Ok(Crafted {
            image: image.clone(),
            prediction: start,
            success: true,
            steps: 0,
        });
    }
    let step = (eps / 10).max(1) as i16;
    let (h, w, c) = (
        image.height() as usize,
        image.width() as usize,
        image.channels() as usize,
    );
    let plane = h * w;
    let orig = image.pixels();
    let mut x = image.clone();
    let mut steps = 0;
    for _ in 0..t {
        let (grad, logits) = meter.gradient(&x.to_chw_unit(), target);
        if argmax(&logits) == target {
            return Ok(Crafted {
                image: x,
                prediction: target,
                success: true,
                steps,
            });
        }
        steps += 1;
        let px = x.pixels_mut();
        for (i, p) in px.iter_mut().enumerate() {
            let g = grad[(i % c) * plane + i / c];
            let dir = if g > 0.0 {
                -step
            } else if g < 0.0 {
                step
            } else {
                0
            };
            let lo = (orig[i] as i16 - eps as i16).max(0);
            let hi = (orig[i] as i16 + eps as i16).min(255);
            *p = (*p as i16 + dir).clamp(lo, hi) as u8;
        }
    }
    let prediction = meter.predict(&x)?;
    Ok(Crafted {
        image: x,
        prediction,
        success: prediction == target,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeParams {
    /// Gradient steps per adversarial example.
    pub t: usize,
    /// `L∞` budget in 8-bit levels.
    pub eps: u8,
    pub seed: u64,
    /// Matches required; all `s` when absent.
    pub target_m: Option<usize>,
    /// Level 2: re-infer every trigger on a candidate instead of only flipped ones.
    pub full_reverify: bool,
}

impl Default for ForgeParams {
    fn default() -> Self {
        Self {
            t: 100,
            eps: 41,
            seed: 0,
            target_m: None,
            full_reverify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeryAttempt {
    pub level: Level,
    pub forged_triggers: Vec<Image>,
    pub forged_key: SecretKey,
    /// Labels the forged key assigns to the forged triggers.
    pub labels: Vec<u32>,
    /// Model predictions on the forged triggers as last verified.
    pub predictions: Vec<usize>,
    pub achieved_m: usize,
    pub target_m: usize,
    pub classes: u32,
    pub work: WorkCounter,
    pub success: bool,
    /// Level 1: hashes per trigger. Level 2: one entry, the joint-hash attempts.
    pub hash_attempts: Vec<u64>,
    /// Triggers whose hash loop found a match (level 1).
    pub matched: Vec<bool>,
}

impl ForgeryAttempt {
    pub fn s(&self) -> usize {
        self.forged_triggers.len()
    }

    pub fn rarity_bits(&self) -> f64 {
        stats::rarity(self.s() as u64, self.achieved_m as u64, self.classes as u64)
            .map(|r| r.rarity_bits)
            .unwrap_or(0.0)
    }
}

fn count_matches(labels: &[u32], preds: &[usize]) -> usize {
    labels.iter().zip(preds).filter(|(l, p)| **l as usize == **p).count()
}

fn setup<'a, T: ForgeTarget + ?Sized>(
    target: &'a T,
    sources: &[Image],
    s: usize,
) -> Result<(Meter<'a, T>, u32), UsurpError> {
    if s == 0 {
        return Err(UsurpError::BadParam("s must be positive"));
    }
    if sources.len() < s {
        return Err(UsurpError::TooFewSources {
            need: s,
            got: sources.len(),
        });
    }
    Ok((Meter::new(target), target.classes() as u32))
}

/// Level 0: the forged key fixes the labels; craft one example per label.
pub fn forge_level0<T: ForgeTarget + ?Sized>(
    target: &T,
    sources: &[Image],
    s: usize,
    key: &SecretKey,
    p: &ForgeParams,
) -> Result<ForgeryAttempt, UsurpError> {
    let (meter, c) = setup(target, sources, s)?;
    let labels = meter.labels_level0(key, s, c)?;
    let mut triggers = Vec::with_capacity(s);
    let mut preds = Vec::with_capacity(s);
    for (x, &y) in sources.iter().zip(&labels) {
        let out = craft_adversarial(&meter, x, y as usize, p.eps, p.t)?;
        preds.push(out.prediction);
        triggers.push(out.image);
    }
    let m = count_matches(&labels, &preds);
    let target_m = p.target_m.unwrap_or(s);
    Ok(ForgeryAttempt {
        level: Level::Zero,
        forged_triggers: triggers,
        forged_key: key.clone(),
        labels,
        predictions: preds,
        achieved_m: m,
        target_m,
        classes: c,
        work: meter.work(),
        success: m >= target_m,
        hash_attempts: Vec::new(),
        matched: Vec::new(),
    })
}

fn flip_random_lsb(img: &mut Image, rng: &mut ChaCha8Rng) -> usize {
    let j = rng.gen_range(0..img.len());
    img.flip_lsb(j);
    j
}

/// Level 1: craft towards a random class, then flip LSBs until the forged
/// key's per-image hash lands on the model's prediction.
pub fn forge_level1<T: ForgeTarget + ?Sized>(
    target: &T,
    sources: &[Image],
    s: usize,
    key: &SecretKey,
    p: &ForgeParams,
) -> Result<ForgeryAttempt, UsurpError> {
    let (meter, c) = setup(target, sources, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let cap = LEVEL1_CAP_FACTOR * c as u64;
    let mut triggers = Vec::with_capacity(s);
    let mut preds = Vec::with_capacity(s);
    let mut labels = Vec::with_capacity(s);
    let mut per = Vec::with_capacity(s);
    let mut matched = Vec::with_capacity(s);
    for x in &sources[..s] {
        let goal = rng.gen_range(0..c as usize);
        let crafted = craft_adversarial(&meter, x, goal, p.eps, p.t)?;
        let mut img = crafted.image;
        let y = crafted.prediction;
        let mut label = meter.label_level1(&img, key, c);
        let mut tries = 1u64;
        let mut ok = label as usize == y;
        while !ok && tries < cap {
            let before = label;
            let j = flip_random_lsb(&mut img, &mut rng);
            label = meter.label_level1(&img, key, c);
            tries += 1;
            if label as usize == y {
                if meter.predict(&img)? == y {
                    ok = true;
                } else {
                    img.flip_lsb(j);
                    label = before;
                }
            }
        }
        per.push(tries);
        matched.push(ok);
        labels.push(label);
        preds.push(y);
        triggers.push(img);
    }
    let m = count_matches(&labels, &preds);
    let target_m = p.target_m.unwrap_or(s);
    Ok(ForgeryAttempt {
        level: Level::One,
        forged_triggers: triggers,
        forged_key: key.clone(),
        labels,
        predictions: preds,
        achieved_m: m,
        target_m,
        classes: c,
        work: meter.work(),
        success: m >= target_m,
        hash_attempts: per,
        matched,
    })
}

/// Level 2: craft once, then flip one LSB in one trigger per attempt and
/// recompute every label from the joint hash until `target_m` match.
pub fn forge_level2<T: ForgeTarget + ?Sized>(
    target: &T,
    sources: &[Image],
    s: usize,
    key: &SecretKey,
    p: &ForgeParams,
) -> Result<ForgeryAttempt, UsurpError> {
    let c = target.classes() as u32;
    let target_m = p.target_m.unwrap_or(s);
    if target_m > s {
        return Err(UsurpError::BadParam("target matches exceed s"));
    }
    let bits = stats::rarity(s.max(1) as u64, target_m as u64, c as u64)?.rarity_bits;
    if bits > MAX_FORGE_BITS {
        return Err(UsurpError::Infeasible {
            bits,
            cap: MAX_FORGE_BITS,
        });
    }
    let (meter, c) = setup(target, sources, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let cap = (LEVEL2_CAP_FACTOR * bits.exp2()).ceil().max(1.0) as u64;
    let mut triggers = Vec::with_capacity(s);
    let mut preds = Vec::with_capacity(s);
    for x in &sources[..s] {
        let goal = rng.gen_range(0..c as usize);
        let out = craft_adversarial(&meter, x, goal, p.eps, p.t)?;
        preds.push(out.prediction);
        triggers.push(out.image);
    }
    let mut dirty = vec![false; s];
    let mut attempts = 0u64;
    let mut labels;
    let mut m;
    loop {
        labels = meter.labels_level2(&triggers, key, c);
        attempts += 1;
        m = count_matches(&labels, &preds);
        if m >= target_m {
            let recheck: Vec<usize> = if p.full_reverify {
                (0..s).collect()
            } else {
                (0..s).filter(|&i| dirty[i]).collect()
            };
            for i in recheck {
                preds[i] = meter.predict(&triggers[i])?;
                dirty[i] = false;
            }
            m = count_matches(&labels, &preds);
            if m >= target_m || attempts >= cap {
                break;
            }
        } else if attempts >= cap {
            break;
        }
        let i = rng.gen_range(0..s);
        flip_random_lsb(&mut triggers[i], &mut rng);
        dirty[i] = true;
    }
    Ok(ForgeryAttempt {
        level: Level::Two,
        forged_triggers: triggers,
        forged_key: key.clone(),
        labels,
        predictions: preds,
        achieved_m: m,
        target_m,
        classes: c,
        work: meter.work(),
        success: m >= target_m,
        hash_attempts: vec![attempts],
        matched: Vec::new(),
    })
}

/// Dispatch on level with a source pool shuffled by the seed.
pub fn forge<T: ForgeTarget + ?Sized>(
    level: Level,
    target: &T,
    pool: &[Image],
    s: usize,
    key: &SecretKey,
    p: &ForgeParams,
) -> Result<ForgeryAttempt, UsurpError> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(p.seed ^ 0x9e37_79b9_7f4a_7c15));
    let sources: Vec<Image> = order.iter().take(s).map(|&i| pool[i].clone()).collect();
    match level {
        Level::Zero => forge_level0(target, &sources, s, key, p),
        Level::One => forge_level1(target, &sources, s, key, p),
        Level::Two => forge_level2(target, &sources, s, key, p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: Level,
    pub runs: usize,
    /// Fraction of runs whose achieved rarity reaches `R_min`.
    pub success_rate: f64,
    pub mean_inference_units: f64,
    pub mean_hashes: f64,
    /// Level 1: hashes per matched trigger. Level 2: joint-hash attempts per run.
    pub mean_hash_attempts: f64,
    pub mean_rarity: f64,
    /// `(bits, estimate)` at 20, 50 and 86 bits.
    pub extrapolated: Vec<(f64, WorkEstimate)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeryReport {
    pub r_min: f64,
    pub levels: Vec<LevelSummary>,
}

pub const EXTRAPOLATION_BITS: [f64; 3] = [20.0, 50.0, 86.0];

/// Per-level summary with work-model extrapolations.
pub fn forgery_report(attempts: &[ForgeryAttempt], r_min: f64, t: usize) -> Result<ForgeryReport, UsurpError> {
    let mut levels = Vec::new();
    for level in Level::ALL {
        let runs: Vec<&ForgeryAttempt> = attempts.iter().filter(|a| a.level == level).collect();
        if runs.is_empty() {
            continue;
        }
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&ForgeryAttempt) -> f64| runs.iter().map(|a| f(a)).sum::<f64>() / n;
        let mean_hash_attempts = match level {
            Level::One => {
                let (sum, cnt) = runs.iter().fold((0u64, 0u64), |(s, k), a| {
                    let (hs, ks) = a
                        .hash_attempts
                        .iter()
                        .zip(&a.matched)
                        .filter(|(_, &ok)| ok)
                        .fold((0, 0), |(x, y), (h, _)| (x + h, y + 1));
                    (s + hs, k + ks)
                });
                if cnt == 0 {
                    f64::NAN
                } else {
                    sum as f64 / cnt as f64
                }
            }
            Level::Two => mean(&|a| a.hash_attempts.first().copied().unwrap_or(0) as f64),
            Level::Zero => 0.0,
        };
        let first = runs[0];
        let extrapolated = EXTRAPOLATION_BITS
            .iter()
            .map(|&bits| {
                Ok((
                    bits,
                    stats::work_model(
                        level,
                        first.s() as u64,
                        t.max(1) as u64,
                        first.classes as u64,
                        bits,
                        1.0,
                    )?,
                ))
            })
            .collect::<Result<Vec<_>, UsurpError>>()?;
        levels.push(LevelSummary {
            level,
            runs: runs.len(),
            success_rate: runs.iter().filter(|a| a.rarity_bits() >= r_min).count() as f64 / n,
            mean_inference_units: mean(&|a| a.work.inference_units() as f64),
            mean_hashes: mean(&|a| a.work.hashes as f64),
            mean_hash_attempts,
            mean_rarity: mean(&|a| a.rarity_bits()),
            extrapolated,
        });
    }
    Ok(ForgeryReport { r_min, levels })
}

impl ForgeryReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,runs,success_rate,mean_inference_units,mean_hashes,mean_hash_attempts,mean_rarity,cost_r20,cost_r50,cost_r86\n");
        for l in &self.levels {
            out.push_str(&format!(
                "{},{},{:.4},{:.2},{:.2},{:.4},{:.3}",
                l.level,
                l.runs,
                l.success_rate,
                l.mean_inference_units,
                l.mean_hashes,
                l.mean_hash_attempts,
                l.mean_rarity
            ));
            for (_, e) in &l.extrapolated {
                out.push_str(&format!(",{:e}", e.expected_cost));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("R_min = {} bits\n", self.r_min);
        for l in &self.levels {
            out.push_str(&format!(
                "level {}: runs {}, success {:.1}%, mean work {:.1} inference units + {:.1} hashes, mean hash attempts {:.2}, mean rarity {:.2} bits\n",
                l.level,
                l.runs,
                100.0 * l.success_rate,
                l.mean_inference_units,
                l.mean_hashes,
                l.mean_hash_attempts,
                l.mean_rarity
            ));
            for (bits, e) in &l.extrapolated {
                out.push_str(&format!("  at {bits} bits: {} = {:e}\n", e.formula(), e.expected_cost));
            }
        }
        out
    }
}
