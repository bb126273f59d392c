//! Exact-rational binomial tail shared by integration tests.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

/// `a / b` as f64 without losing precision to huge operands.
pub fn ratio(a: &BigUint, b: &BigUint) -> f64 {
    if a.is_zero() {
        return 0.0;
    }
    // Scale so the integer quotient carries about 64 significant bits.
    let shift = 64 + b.bits() as i64 - a.bits() as i64;
    let q = if shift >= 0 {
        (a << shift as u64) / b
    } else {
        a / (b << (-shift) as u64)
    };
    q.to_f64().expect("finite") * (-shift as f64).exp2()
}

/// `-log2 P(Bin(s, 1/c) >= m)` by summing `C(s,k)(c-1)^(s-k)` exactly. The
/// complement is used near 1 so the logarithm keeps full relative precision.
pub fn oracle_rarity(s: u64, m: u64, c: u64) -> f64 {
    let mut binom = BigUint::one();
    let mut num = BigUint::zero();
    for k in 0..=s {
        if k >= m {
            num += &binom * BigUint::from(c - 1).pow((s - k) as u32);
        }
        binom = binom * BigUint::from(s - k) / BigUint::from(k + 1);
    }
    let total = BigUint::from(c).pow(s as u32);
    let p = ratio(&num, &total);
    if p > 0.5 {
        -(-ratio(&(&total - &num), &total)).ln_1p() / std::f64::consts::LN_2
    } else {
        -p.log2()
    }
}
