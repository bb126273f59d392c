//! Robustness attacks on a watermarked model and the sweep that scores them.

mod jpeg;

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::nn::{self, Hyper, LabeledDataset, Model, NnError, Optimizer, ParamKind};
use crate::oracle::{self, Classifier, OracleError};
use crate::stats::{self, StatsError};
use crate::watermark::{self, TriggerSet, WatermarkError};

pub use jpeg::{chroma_table, jpeg_preprocess, luma_table, scaled_table, JpegOracle};

/// Pruning rates of the extreme-pruning sweep.
pub fn pruning_grid() -> Vec<f64> {
    let mut k: Vec<f64> = (0..20).map(|i| 0.05 * i as f64).collect();
    k.extend([0.97, 0.99]);
    k
}

/// JPEG quality factors 55, 60, ..., 100.
pub fn jpeg_grid() -> Vec<u8> {
    (55..=100).step_by(5).collect()
}

pub const DEFAULT_REPEATS: usize = 50;
pub const CALIBRATION_SAMPLES: usize = 256;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("pruning rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("JPEG quality {0} outside [1, 100]")]
    BadQuality(u8),
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("calibration set is empty")]
    NoCalibration,
    #[error("fine-tuning needs a non-empty fine-tune split")]
    NoFinetuneData,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    Global,
    FcOnly,
}

/// Zero a seeded `floor(k * n)` subset of each in-scope weight tensor.
pub fn prune(model: &Model, k: f64, scope: PruneScope, seed: u64) -> Result<Model, AttackError> {
    if !(0.0..=1.0).contains(&k) {
        return Err(AttackError::BadRate(k));
    }
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let info = model.param_info().to_vec();
    for (p, i) in info.iter().enumerate() {
        if scope == PruneScope::FcOnly && i.kind != ParamKind::Dense {
            continue;
        }
        let w = &mut out.params_mut()[p].w;
        let n = w.len();
        let count = ((k * n as f64).floor() as usize).min(n);
        for j in sample(&mut rng, n, count) {
            w[j] = 0.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    Dynamic,
    Fullint,
    Float16,
}

fn quantize_int8(w: &mut [f32]) {
    let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    let scale = max / 127.0;
    for v in w {
        *v = (*v / scale).round().clamp(-127.0, 127.0) * scale;
    }
}

/// Quantise weights (and, for `Fullint`, activations calibrated on `calibration`).
pub fn quantize(model: &Model, mode: QuantMode, calibration: &[Image]) -> Result<Model, AttackError> {
    let mut out = model.clone();
    match mode {
        QuantMode::Float16 => {
            for p in out.params_mut() {
                for v in p.w.iter_mut() {
                    *v = half::f16::from_f32(*v).to_f32();
                }
            }
        }
        QuantMode::Dynamic | QuantMode::Fullint => {
            if mode == QuantMode::Fullint && calibration.is_empty() {
                return Err(AttackError::NoCalibration);
            }
            for p in out.params_mut() {
                quantize_int8(&mut p.w);
            }
            if mode == QuantMode::Fullint {
                let n = calibration.len().min(CALIBRATION_SAMPLES);
                let ranges = out.activation_extents(&calibration[..n])?;
                out.set_activation_ranges(Some(ranges))?;
            }
        }
    }
    Ok(out)
}

/// Fine-tuning defaults: Adam at 1e-5, 30 epochs, batch 64.
pub fn finetune_defaults() -> Hyper {
    Hyper {
        optimizer: Optimizer::adam(1e-5),
        epochs: 30,
        batch: 64,
        frozen_layers: 0,
        seed: None,
    }
}

/// Continue training on `data` (all of it), keeping the head.
pub fn finetune_attack(model: &Model, data: &LabeledDataset, hyper: &Hyper) -> Result<Model, AttackError> {
    if data.is_empty() {
        return Err(AttackError::NoFinetuneData);
    }
    let all: Vec<usize> = (0..data.len()).collect();
    Ok(nn::train(model, &data.select(&all), hyper)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackKind {
    PruneGlobal { k: f64 },
    PruneFc { k: f64 },
    QuantDynamic,
    QuantFullint,
    QuantFloat16,
    Jpeg { quality: u8 },
    Finetune { lr: f32, epochs: usize, batch: usize },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::PruneGlobal { .. } => "prune-global",
            AttackKind::PruneFc { .. } => "prune-fc",
            AttackKind::QuantDynamic => "quant-dynamic",
            AttackKind::QuantFullint => "quant-fullint",
            AttackKind::QuantFloat16 => "quant-float16",
            AttackKind::Jpeg { .. } => "jpeg",
            AttackKind::Finetune { .. } => "finetune",
        }
    }

    pub fn params(&self) -> String {
        match self {
            AttackKind::PruneGlobal { k } | AttackKind::PruneFc { k } => format!("k={k:.2}"),
            AttackKind::Jpeg { quality } => format!("qf={quality}"),
            AttackKind::Finetune { lr, epochs, batch } => format!("lr={lr:e};epochs={epochs};batch={batch}"),
            _ => String::new(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            AttackKind::PruneGlobal { .. } | AttackKind::PruneFc { .. } | AttackKind::Finetune { .. }
        )
    }

    pub fn default_finetune() -> Self {
        let h = finetune_defaults();
        AttackKind::Finetune {
            lr: 1e-5,
            epochs: h.epochs,
            batch: h.batch,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.params();
        if p.is_empty() {
            f.write_str(self.name())
        } else {
            write!(f, "{}({p})", self.name())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    pub repeats: usize,
    pub rng_seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, repeats: usize, rng_seed: u64) -> Self {
        Self {
            kind,
            repeats,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.repeats == 0 {
            return Err(AttackError::NoRepeats);
        }
        match self.kind {
            AttackKind::PruneGlobal { k } | AttackKind::PruneFc { k } if !(0.0..=1.0).contains(&k) => {
                Err(AttackError::BadRate(k))
            }
            AttackKind::Jpeg { quality } if !(1..=100).contains(&quality) => Err(AttackError::BadQuality(quality)),
            _ => Ok(()),
        }
    }

    /// Rounds actually run: deterministic kinds run once.
    pub fn rounds(&self) -> usize {
        if self.kind.is_stochastic() {
            self.repeats
        } else {
            1
        }
    }
}

/// Seed of round `round` derived from the spec seed.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update((round as u64).to_be_bytes());
    u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Pruning sweeps over `rates`, one spec per rate.
pub fn prune_sweep(scope: PruneScope, rates: &[f64], repeats: usize, seed: u64) -> Vec<AttackSpec> {
    rates
        .iter()
        .map(|&k| {
            let kind = match scope {
                PruneScope::Global => AttackKind::PruneGlobal { k },
                PruneScope::FcOnly => AttackKind::PruneFc { k },
            };
            AttackSpec::new(kind, repeats, seed)
        })
        .collect()
}

/// Thirty attacks: pruning at 10..80% over all layers and over dense layers
/// only, the three quantisations, JPEG at every grid quality, and fine-tuning.
pub fn default_suite(repeats: usize, seed: u64) -> Vec<AttackSpec> {
    let rates: Vec<f64> = (1..=8).map(|i| 0.1 * i as f64).collect();
    let mut out = prune_sweep(PruneScope::Global, &rates, repeats, seed);
    out.extend(prune_sweep(PruneScope::FcOnly, &rates, repeats, seed));
    for kind in [
        AttackKind::QuantDynamic,
        AttackKind::QuantFullint,
        AttackKind::QuantFloat16,
    ] {
        out.push(AttackSpec::new(kind, 1, seed));
    }
    for quality in jpeg_grid() {
        out.push(AttackSpec::new(AttackKind::Jpeg { quality }, 1, seed));
    }
    out.push(AttackSpec::new(AttackKind::default_finetune(), 1, seed));
    out
}

/// Data an attack sweep evaluates against.
pub struct SweepData<'a> {
    pub test: &'a LabeledDataset,
    pub finetune: Option<&'a LabeledDataset>,
    pub calibration: &'a [Image],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub kind: String,
    pub params: String,
    pub rounds: usize,
    pub acc_mean: f64,
    pub acc_sd: f64,
    pub rec_mean: f64,
    pub rec_sd: f64,
    pub m_mean: f64,
    pub rarity_min: f64,
    pub rarity_max: f64,
    pub m_values: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    kind: &'a str,
    params: &'a str,
    acc_mean: f64,
    acc_sd: f64,
    rec_mean: f64,
    rec_sd: f64,
    m_mean: f64,
    rarity_min: f64,
    rarity_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub s: usize,
    pub classes: u32,
    pub baseline: AttackRow,
    pub rows: Vec<AttackRow>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn summarize(kind: &str, params: String, rounds: &[(f64, usize)], s: usize, c: u32) -> Result<AttackRow, AttackError> {
    let accs: Vec<f64> = rounds.iter().map(|r| r.0).collect();
    let recs: Vec<f64> = rounds.iter().map(|r| 100.0 * r.1 as f64 / s as f64).collect();
    let ms: Vec<f64> = rounds.iter().map(|r| r.1 as f64).collect();
    let mut rmin = f64::INFINITY;
    let mut rmax = f64::NEG_INFINITY;
    for r in rounds {
        let bits = stats::rarity(s as u64, r.1 as u64, c as u64)?.rarity_bits;
        rmin = rmin.min(bits);
        rmax = rmax.max(bits);
    }
    let (acc_mean, acc_sd) = mean_sd(&accs);
    let (rec_mean, rec_sd) = mean_sd(&recs);
    Ok(AttackRow {
        kind: kind.to_string(),
        params,
        rounds: rounds.len(),
        acc_mean,
        acc_sd,
        rec_mean,
        rec_sd,
        m_mean: mean_sd(&ms).0,
        rarity_min: rmin,
        rarity_max: rmax,
        m_values: rounds.iter().map(|r| r.1).collect(),
        error: None,
    })
}

fn score<C: Classifier>(oracle: &C, triggers: &TriggerSet, test: &LabeledDataset) -> Result<(f64, usize), AttackError> {
    let acc = oracle::evaluate(oracle, test)?.unwrap_or(f64::NAN);
    Ok((acc, watermark::recovery_rate(oracle, triggers)?.m))
}

/// Apply one round of an attack and score it.
pub fn attack_round(
    model: &Model,
    triggers: &TriggerSet,
    data: &SweepData<'_>,
    kind: &AttackKind,
    seed: u64,
) -> Result<(f64, usize), AttackError> {
    match *kind {
        AttackKind::PruneGlobal { k } => score(&prune(model, k, PruneScope::Global, seed)?, triggers, data.test),
        AttackKind::PruneFc { k } => score(&prune(model, k, PruneScope::FcOnly, seed)?, triggers, data.test),
        AttackKind::QuantDynamic => score(
            &quantize(model, QuantMode::Dynamic, data.calibration)?,
            triggers,
            data.test,
        ),
        AttackKind::QuantFullint => score(
            &quantize(model, QuantMode::Fullint, data.calibration)?,
            triggers,
            data.test,
        ),
        AttackKind::QuantFloat16 => score(
            &quantize(model, QuantMode::Float16, data.calibration)?,
            triggers,
            data.test,
        ),
        AttackKind::Jpeg { quality } => score(&JpegOracle { inner: model, quality }, triggers, data.test),
        AttackKind::Finetune { lr, epochs, batch } => {
            let ft = data.finetune.ok_or(AttackError::NoFinetuneData)?;
            let hyper = Hyper {
                optimizer: Optimizer::adam(lr),
                epochs,
                batch,
                frozen_layers: 0,
                seed: Some(seed),
            };
            score(&finetune_attack(model, ft, &hyper)?, triggers, data.test)
        }
    }
}

/// Run every spec, recording failures per row without stopping.
pub fn run_sweep(
    model: &Model,
    triggers: &TriggerSet,
    data: &SweepData<'_>,
    specs: &[AttackSpec],
) -> Result<AttackReport, AttackError> {
    let s = triggers.s();
    let c = triggers.assignment()?.classes;
    let base = score(model, triggers, data.test)?;
    let baseline = summarize("baseline", String::new(), &[base], s, c)?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let outcome = spec.validate().and_then(|_| {
            let rounds = (0..spec.rounds())
                .map(|r| attack_round(model, triggers, data, &spec.kind, round_seed(spec.rng_seed, r)))
                .collect::<Result<Vec<_>, _>>()?;
            summarize(spec.kind.name(), spec.kind.params(), &rounds, s, c)
        });
        rows.push(outcome.unwrap_or_else(|e| AttackRow {
            kind: spec.kind.name().to_string(),
            params: spec.kind.params(),
            rounds: 0,
            acc_mean: f64::NAN,
            acc_sd: f64::NAN,
            rec_mean: f64::NAN,
            rec_sd: f64::NAN,
            m_mean: f64::NAN,
            rarity_min: f64::NAN,
            rarity_max: f64::NAN,
            m_values: Vec::new(),
            error: Some(e.to_string()),
        }));
    }
    Ok(AttackReport {
        s,
        classes: c,
        baseline,
        rows,
    })
}

impl AttackReport {
    /// Baseline first, then one line per attack.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in std::iter::once(&self.baseline).chain(&self.rows) {
            w.serialize(CsvRow {
                kind: &r.kind,
                params: &r.params,
                acc_mean: r.acc_mean,
                acc_sd: r.acc_sd,
                rec_mean: r.rec_mean,
                rec_sd: r.rec_sd,
                m_mean: r.m_mean,
                rarity_min: r.rarity_min,
                rarity_max: r.rarity_max,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Aligned table for terminals.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "s = {}, classes = {}\n{:<14} {:<10} {:>6} {:>8} {:>8} {:>7} {:>17}\n",
            self.s, self.classes, "kind", "params", "rounds", "acc %", "rec %", "m", "rarity bits"
        );
        for r in std::iter::once(&self.baseline).chain(&self.rows) {
            match &r.error {
                Some(e) => out.push_str(&format!("{:<14} {:<10} failed: {e}\n", r.kind, r.params)),
                None => out.push_str(&format!(
                    "{:<14} {:<10} {:>6} {:>8.2} {:>8.1} {:>7.2} {:>8.2}..{:<7.2}\n",
                    r.kind, r.params, r.rounds, r.acc_mean, r.rec_mean, r.m_mean, r.rarity_min, r.rarity_max
                )),
            }
        }
        out
    }

    /// `kind,k,acc,rec` for the pruning rows.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("kind,k,acc,rec\n");
        for r in &self.rows {
            if let Some(k) = r.params.strip_prefix("k=") {
                out.push_str(&format!("{},{k},{:.4},{:.4}\n", r.kind, r.acc_mean, r.rec_mean));
            }
        }
        out
    }

    /// Row with the lowest mean recovery among those that ran.
    pub fn worst_rec(&self) -> Option<&AttackRow> {
        self.rows
            .iter()
            .filter(|r| r.error.is_none())
            .min_by(|a, b| a.rec_mean.total_cmp(&b.rec_mean))
    }

    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::{generate_key, Level};
    use crate::nn::{ArchitectureSpec, LayerSpec};
    use crate::watermark::select_triggers;
    use rand::Rng;

    fn net() -> Model {
        let spec = ArchitectureSpec {
            name: "t".into(),
            input_shape: [6, 6, 1],
            classes: 4,
            layers: vec![LayerSpec::conv(3, 3), LayerSpec::dense(40), LayerSpec::head(4)],
        };
        let mut m = Model::build(&spec, 2).unwrap();
        for p in m.params_mut() {
            p.b.iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * i as f32);
        }
        m
    }

    fn data(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = (0..n)
            .map(|_| Image::new(6, 6, 1, (0..36).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        LabeledDataset::new(imgs, (0..n).map(|i| i as u32 % 4).collect(), 4).unwrap()
    }

    #[test]
    fn prune_counts_and_identity() {
        let m = net();
        assert_eq!(prune(&m, 0.0, PruneScope::Global, 1).unwrap(), m);
        let p = prune(&m, 0.5, PruneScope::Global, 1).unwrap();
        for (a, b) in p.params().iter().zip(m.params()) {
            let zeros = a.w.iter().zip(&b.w).filter(|(x, y)| **x == 0.0 && **y != 0.0).count();
            assert_eq!(zeros, b.w.len() / 2);
            assert_eq!(a.b, b.b);
        }
        let fc = prune(&m, 0.5, PruneScope::FcOnly, 1).unwrap();
        assert_eq!(fc.params()[0], m.params()[0]);
        assert_ne!(fc.params()[1], m.params()[1]);
        assert_eq!(
            prune(&m, 0.3, PruneScope::Global, 9).unwrap(),
            prune(&m, 0.3, PruneScope::Global, 9).unwrap()
        );
        assert!(matches!(
            prune(&m, 1.5, PruneScope::Global, 1),
            Err(AttackError::BadRate(_))
        ));
    }

    #[test]
    fn full_pruning_collapses_predictions() {
        let p = prune(&net(), 1.0, PruneScope::Global, 3).unwrap();
        assert!(p.params().iter().all(|l| l.w.iter().all(|&v| v == 0.0)));
        let d = data(20, 1);
        let first = p.predict(d.image(0)).unwrap();
        assert!(d.images().iter().all(|x| p.predict(x).unwrap() == first));
    }

    #[test]
    fn thousand_weight_layer() {
        let m = Model::build(&ArchitectureSpec::mlp([1, 1, 1], &[1000], 2), 1).unwrap();
        let p = prune(&m, 0.5, PruneScope::Global, 4).unwrap();
        assert_eq!(p.params()[0].w.iter().filter(|&&v| v == 0.0).count(), 500);
    }

    #[test]
    fn quantization_modes() {
        let m = net();
        let d = data(8, 2);
        for mode in [QuantMode::Dynamic, QuantMode::Fullint, QuantMode::Float16] {
            let q = quantize(&m, mode, d.images()).unwrap();
            for (a, b) in q.params().iter().zip(m.params()) {
                let max = b.w.iter().fold(0.0f32, |x, v| x.max(v.abs()));
                for (x, y) in a.w.iter().zip(&b.w) {
                    assert!((x - y).abs() <= max / 127.0 / 2.0 + 1e-6);
                }
            }
        }
        let dynq = quantize(&m, QuantMode::Dynamic, &[]).unwrap();
        for l in dynq.params() {
            let scale = l.w.iter().fold(0.0f32, |x, v| x.max(v.abs())) / 127.0;
            assert!(l.w.iter().all(|v| ((v / scale) - (v / scale).round()).abs() < 1e-3));
        }
        assert!(matches!(
            quantize(&m, QuantMode::Fullint, &[]),
            Err(AttackError::NoCalibration)
        ));
        assert!(quantize(&m, QuantMode::Fullint, d.images())
            .unwrap()
            .activation_ranges()
            .is_some());
    }

    #[test]
    fn quantization_fixed_points() {
        let mut m = net();
        m.params_mut()[1].w.fill(0.0);
        for mode in [QuantMode::Dynamic, QuantMode::Float16] {
            assert_eq!(quantize(&m, mode, &[]).unwrap().params()[1], m.params()[1]);
        }
        for p in m.params_mut() {
            p.w.iter_mut().for_each(|v| *v = half::f16::from_f32(*v).to_f32());
        }
        assert_eq!(quantize(&m, QuantMode::Float16, &[]).unwrap(), m);
    }

    #[test]
    fn finetune_identities() {
        let m = net();
        let d = data(32, 3);
        let zero = Hyper {
            epochs: 0,
            ..finetune_defaults()
        };
        assert_eq!(finetune_attack(&m, &d, &zero).unwrap(), m);
        let still = Hyper {
            optimizer: Optimizer::adam(0.0),
            epochs: 1,
            ..finetune_defaults()
        };
        assert_eq!(finetune_attack(&m, &d, &still).unwrap().params(), m.params());
        assert!(finetune_attack(&m, &data(0, 1), &still).is_err());
    }

    fn marked() -> (Model, TriggerSet, LabeledDataset) {
        let d = data(200, 4);
        let mut t = select_triggers(&d, 8, 1).unwrap();
        t.assign_labels(&generate_key(Some(1)), Level::Two, 4).unwrap();
        (net(), t, d)
    }

    #[test]
    fn empty_sweep_is_baseline_only() {
        let (m, t, d) = marked();
        let sd = SweepData {
            test: &d,
            finetune: None,
            calibration: d.images(),
        };
        let r = run_sweep(&m, &t, &sd, &[]).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.to_csv().lines().count(), 2);
    }

    #[test]
    fn default_suite_rows_are_self_consistent() {
        let (m, t, d) = marked();
        let ft = data(16, 5);
        let sd = SweepData {
            test: &d,
            finetune: Some(&ft),
            calibration: d.images(),
        };
        let mut suite = default_suite(2, 7);
        assert!(suite.len() >= 30);
        if let Some(last) = suite.last_mut() {
            last.kind = AttackKind::Finetune {
                lr: 1e-5,
                epochs: 1,
                batch: 8,
            };
        }
        suite.push(AttackSpec::new(AttackKind::Jpeg { quality: 0 }, 1, 0));
        let r = run_sweep(&m, &t, &sd, &suite).unwrap();
        assert_eq!(r.rows.len(), suite.len());
        assert_eq!(r.failed_rows(), 1);
        for row in r.rows.iter().filter(|r| r.error.is_none()) {
            for &mv in &row.m_values {
                let bits = stats::rarity(8, mv as u64, 4).unwrap().rarity_bits;
                assert!(bits >= row.rarity_min - 1e-12 && bits <= row.rarity_max + 1e-12);
            }
            let expect = if row.kind.starts_with("prune") { 2 } else { 1 };
            assert_eq!(row.rounds, expect);
        }
        assert_eq!(r.to_csv().lines().count(), suite.len() + 2);
        assert!(r
            .to_csv()
            .starts_with("kind,params,acc_mean,acc_sd,rec_mean,rec_sd,m_mean,rarity_min,rarity_max"));
        assert_eq!(r.plot_data().lines().count(), 17);
        assert!(r.worst_rec().is_some());
    }

    #[test]
    fn round_seeds_differ() {
        assert_ne!(round_seed(1, 0), round_seed(1, 1));
        assert_eq!(round_seed(5, 3), round_seed(5, 3));
        assert_eq!(pruning_grid().len(), 22);
        assert_eq!(jpeg_grid(), vec![55, 60, 65, 70, 75, 80, 85, 90, 95, 100]);
    }
}
