//! Rarity of a trigger match count and the forgery work model.
//!
//! Under a random key every trigger label matches the model output with
//! probability `1/c`, so the match count `M` is `Binomial(s, 1/c)`. The rarity
//! of an observed count `m` is `-log2 P(M >= m)`: the number of bits of
//! evidence carried by the match. Everything here is computed in the log
//! domain so tails far below `f64::MIN_POSITIVE` remain representable.

use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, LOG2_E};
use thiserror::Error;

use crate::keying::Level;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("match count {m} exceeds trigger count {s}")]
    MatchCountTooLarge { s: u64, m: u64 },
    #[error("probability {0} is outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("class count must be at least 2, got {0}")]
    TooFewClasses(u64),
    #[error("trigger count must be at least 1")]
    NoTriggers,
    #[error("recovery rate {rate} does not exceed chance level 1/{classes}")]
    BelowChance { rate: f64, classes: u64 },
    #[error("rarity target must be positive and finite, got {0}")]
    BadRarity(f64),
    #[error(
        "unreachable rarity: {s} triggers over {classes} classes give at most {max_bits:.2} bits, {wanted} requested"
    )]
    UnreachableRarity {
        s: u64,
        classes: u64,
        max_bits: f64,
        wanted: f64,
    },
    #[error("invalid work-model parameter: {0}")]
    BadWorkParam(&'static str),
}

/// Match statistics of one verification, with the rarity in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RarityResult {
    pub s: u64,
    pub m: u64,
    pub c: u64,
    pub log2_pvalue: f64,
    pub rarity_bits: f64,
}

impl RarityResult {
    /// Integer-bit value used in printed reports.
    pub fn floor_bits(&self) -> u64 {
        self.rarity_bits.floor() as u64
    }
}

/// Expected usurper cost, in units of one network inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkEstimate {
    pub level: Level,
    pub expected_cost: f64,
    pub cost_inferences: f64,
    pub cost_hashes: f64,
    pub params: WorkParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkParams {
    pub s: u64,
    pub t: u64,
    pub c: u64,
    pub rarity_bits: f64,
    pub hash_cost_ratio: f64,
}

impl WorkEstimate {
    /// Closed form with the exponent left symbolic, e.g. `40·(2·100 + 2^86) ω_F`.
    pub fn formula(&self) -> String {
        let p = &self.params;
        let hash = |n: String| {
            if p.hash_cost_ratio == 1.0 {
                n
            } else {
                format!("{}·{}", p.hash_cost_ratio, n)
            }
        };
        match self.level {
            Level::Zero => format!("2·{}·{} ω_F", p.s, p.t),
            Level::One => format!("{}·(2·{} + {}) ω_F", p.s, p.t, hash(p.c.to_string())),
            Level::Two => format!(
                "{}·(2·{} + {}) ω_F",
                p.s,
                p.t,
                hash(format!("2^{}", trim_float(p.rarity_bits)))
            ),
        }
    }
}

fn trim_float(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:.3}")
    }
}

/// `ln C(n, k)`; exact integer arithmetic up to n = 60, Lanczos log-gamma above.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    let k = k.min(n - k);
    if n <= 60 {
        // C(60, 30) < 2^60, and every intermediate C(n-k+i, i) fits in u64
        let mut acc: u64 = 1;
        for i in 1..=k {
            acc = acc * (n - k + i) / i;
        }
        return (acc as f64).ln();
    }
    ln_gamma((n + 1) as f64) - ln_gamma((k + 1) as f64) - ln_gamma((n - k + 1) as f64)
}

// g = 7, n = 9 Lanczos coefficients
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &coef) in LANCZOS.iter().enumerate().skip(1) {
        a += coef / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `log2 P(M >= m)` for `M ~ Binomial(s, p)`.
pub fn log2_binomial_tail(s: u64, m: u64, p: f64) -> Result<f64, StatsError> {
    if m > s {
        return Err(StatsError::MatchCountTooLarge { s, m });
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::ProbabilityOutOfRange(p));
    }
    if m == 0 {
        return Ok(0.0);
    }
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let term = |k: u64| ln_binomial(s, k) + k as f64 * ln_p + (s - k) as f64 * ln_q;
    let upper = log_sum_exp(&(m..=s).map(term).collect::<Vec<_>>());
    if upper < -std::f64::consts::LN_2 {
        // the tail never exceeds 1; clamp summation noise
        return Ok((upper * LOG2_E).min(0.0));
    }
    // Near 1 the complement keeps relative precision in the logarithm.
    let lower = log_sum_exp(&(0..m).map(term).collect::<Vec<_>>());
    Ok(((-lower.exp()).ln_1p() * LOG2_E).min(0.0))
}

fn check_counts(s: u64, c: u64) -> Result<(), StatsError> {
    if s == 0 {
        return Err(StatsError::NoTriggers);
    }
    if c < 2 {
        return Err(StatsError::TooFewClasses(c));
    }
    Ok(())
}

/// Rarity of `m` matches among `s` triggers with `c` classes.
pub fn rarity(s: u64, m: u64, c: u64) -> Result<RarityResult, StatsError> {
    check_counts(s, c)?;
    let log2_pvalue = if m == s {
        // closed form keeps the endpoint identity exact
        -(s as f64) * (c as f64).log2()
    } else {
        log2_binomial_tail(s, m, 1.0 / c as f64)?
    };
    Ok(RarityResult {
        s,
        m,
        c,
        log2_pvalue,
        rarity_bits: -log2_pvalue,
    })
}

/// Hoeffding lower bound on the rarity, `2 s (r - 1/c)^2 log2(e)`.
pub fn rarity_hoeffding(s: u64, m: u64, c: u64) -> Result<f64, StatsError> {
    check_counts(s, c)?;
    if m > s {
        return Err(StatsError::MatchCountTooLarge { s, m });
    }
    let r = m as f64 / s as f64;
    let chance = 1.0 / c as f64;
    if r <= chance {
        return Err(StatsError::BelowChance { rate: r, classes: c });
    }
    Ok(2.0 * s as f64 * (r - chance).powi(2) * LOG2_E)
}

/// Number of triggers needed for `bits` of rarity at recovery rate `rate`,
/// according to the Hoeffding bound.
pub fn required_triggers(bits: f64, rate: f64, c: u64) -> Result<u64, StatsError> {
    if c < 2 {
        return Err(StatsError::TooFewClasses(c));
    }
    if !(bits > 0.0 && bits.is_finite()) {
        return Err(StatsError::BadRarity(bits));
    }
    let chance = 1.0 / c as f64;
    if !(rate > chance && rate <= 1.0) {
        return Err(StatsError::BelowChance { rate, classes: c });
    }
    let bound = bits * LN_2 / (2.0 * (rate - chance).powi(2));
    let mut s = (bound.ceil() as u64).max(1);
    // guard the ceil against floating error so the round trip always holds
    while rarity_hoeffding(s, (rate * s as f64).ceil() as u64, c).unwrap_or(0.0) < bits {
        s += 1;
    }
    Ok(s)
}

/// Smallest match count whose rarity reaches `min_bits`.
pub fn match_threshold(s: u64, c: u64, min_bits: f64) -> Result<u64, StatsError> {
    check_counts(s, c)?;
    if min_bits.is_nan() || min_bits < 0.0 {
        return Err(StatsError::BadRarity(min_bits));
    }
    let max_bits = s as f64 * (c as f64).log2();
    if max_bits < min_bits {
        return Err(StatsError::UnreachableRarity {
            s,
            classes: c,
            max_bits,
            wanted: min_bits,
        });
    }
    // rarity is monotone in m: binary search over [0, s]
    let (mut lo, mut hi) = (0u64, s);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if rarity(s, mid, c)?.rarity_bits >= min_bits {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// Expected forgery cost for each protocol level.
///
/// Level 0 forges `s` adversarial examples. Level 1 adds LSB flipping until
/// each per-image hash lands on the forged class (about `c` hashes each).
/// Level 2 needs the joint hash to give at least `m` matches at once, which
/// takes about `2^R` attempts of `s` hashes each.
pub fn work_model(
    level: Level,
    s: u64,
    t: u64,
    c: u64,
    rarity_bits: f64,
    hash_cost_ratio: f64,
) -> Result<WorkEstimate, StatsError> {
    if s == 0 {
        return Err(StatsError::BadWorkParam("s must be at least 1"));
    }
    if t == 0 {
        return Err(StatsError::BadWorkParam("t must be at least 1"));
    }
    if c < 2 {
        return Err(StatsError::BadWorkParam("c must be at least 2"));
    }
    if !(hash_cost_ratio >= 0.0 && hash_cost_ratio.is_finite()) {
        return Err(StatsError::BadWorkParam(
            "hash cost ratio must be finite and non-negative",
        ));
    }
    if level == Level::Two && !(rarity_bits >= 0.0 && rarity_bits.is_finite()) {
        return Err(StatsError::BadWorkParam("rarity must be finite and non-negative"));
    }
    let sf = s as f64;
    let cost_inferences = 2.0 * sf * t as f64;
    let cost_hashes = match level {
        Level::Zero => 0.0,
        Level::One => sf * c as f64,
        Level::Two => sf * rarity_bits.exp2(),
    };
    Ok(WorkEstimate {
        level,
        expected_cost: cost_inferences + hash_cost_ratio * cost_hashes,
        cost_inferences,
        cost_hashes,
        params: WorkParams {
            s,
            t,
            c,
            rarity_bits,
            hash_cost_ratio,
        },
    })
}
