//! Exact rational Sobolev exponent arithmetic.
//!
//! All exponent algebra runs over `BigRational` so chains, step bounds and
//! weight exponents are reproducible identities rather than float
//! approximations. Infinite integrability is an explicit marker, never an
//! IEEE infinity smuggled through arithmetic.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ExponentError {
    #[error("integrability chain exhausted for r = {r}")]
    ChainExhausted { r: String },
    #[error("exponent {which} is infinite where a finite value is required")]
    InfiniteExponent { which: String },
    #[error("invalid exponent parameters: {0}")]
    Invalid(String),
}

/// A Lebesgue exponent that may be the explicit infinity marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtendedExponent {
    Finite(BigRational),
    Infinity,
}

impl ExtendedExponent {
    pub fn finite(p: i64, q: i64) -> Self {
        ExtendedExponent::Finite(rat(p, q))
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, ExtendedExponent::Finite(_))
    }

    pub fn as_ratio(&self) -> Option<&BigRational> {
        match self {
            ExtendedExponent::Finite(r) => Some(r),
            ExtendedExponent::Infinity => None,
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            ExtendedExponent::Finite(r) => r.to_f64().unwrap(),
            ExtendedExponent::Infinity => f64::INFINITY,
        }
    }

    /// Total order with the infinity marker above every finite value.
    pub fn ge(&self, other: &ExtendedExponent) -> bool {
        match (self, other) {
            (ExtendedExponent::Infinity, _) => true,
            (_, ExtendedExponent::Infinity) => false,
            (ExtendedExponent::Finite(a), ExtendedExponent::Finite(b)) => a >= b,
        }
    }
}

impl fmt::Display for ExtendedExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedExponent::Finite(r) => write!(f, "{r}"),
            ExtendedExponent::Infinity => write!(f, "inf"),
        }
    }
}

impl Serialize for ExtendedExponent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ExtendedExponent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        if text == "inf" {
            return Ok(ExtendedExponent::Infinity);
        }
        parse_ratio(&text)
            .map(ExtendedExponent::Finite)
            .map_err(serde::de::Error::custom)
    }
}

/// Serializes exact rationals as "p/q" strings in reports.
mod ratio_serde {
    use super::BigRational;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(r: &BigRational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&r.to_string())
    }
}

pub fn rat(p: i64, q: i64) -> BigRational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

/// Parses "p", "p/q" or a short decimal into an exact rational.
pub fn parse_ratio(text: &str) -> Result<BigRational, ExponentError> {
    let text = text.trim();
    if let Some((p, q)) = text.split_once('/') {
        let p: BigInt = p
            .trim()
            .parse()
            .map_err(|_| ExponentError::Invalid(format!("bad numerator in {text:?}")))?;
        let q: BigInt = q
            .trim()
            .parse()
            .map_err(|_| ExponentError::Invalid(format!("bad denominator in {text:?}")))?;
        if q.is_zero() {
            return Err(ExponentError::Invalid("zero denominator".into()));
        }
        return Ok(BigRational::new(p, q));
    }
    if let Some((int, frac)) = text.split_once('.') {
        let digits = frac.len() as u32;
        let joined = format!("{int}{frac}");
        let p: BigInt = joined
            .parse()
            .map_err(|_| ExponentError::Invalid(format!("bad decimal {text:?}")))?;
        return Ok(BigRational::new(p, BigInt::from(10u32).pow(digits)));
    }
    let p: BigInt = text
        .parse()
        .map_err(|_| ExponentError::Invalid(format!("bad rational {text:?}")))?;
    Ok(BigRational::from_integer(p))
}

/// The Sobolev conjugate: `1/out = 1/r - k/n`, infinite once the right side
/// drops to zero or below.
pub fn sobolev_exponent(r: &BigRational, k: u32, n: u32) -> Result<ExtendedExponent, ExponentError> {
    if r < &BigRational::one() {
        return Err(ExponentError::Invalid(format!("exponent r = {r} below 1")));
    }
    if n == 0 {
        return Err(ExponentError::Invalid("dimension must be positive".into()));
    }
    let inv = r.recip() - rat(k as i64, n as i64);
    if inv.is_positive() {
        Ok(ExtendedExponent::Finite(inv.recip()))
    } else {
        Ok(ExtendedExponent::Infinity)
    }
}

/// The integrability ladder starting at 2 with increments of m derivatives,
/// cut at the first infinite rung, together with the index l locating r.
#[derive(Debug, Clone, Serialize)]
pub struct ExponentChain {
    pub n: u32,
    pub m: u32,
    pub r: ExtendedExponent,
    /// `t_0 = 2, t_1, ..., t_L` where `t_L` is the first infinite rung (or
    /// the last finite one if the ladder never leaves the finite range).
    pub chain: Vec<ExtendedExponent>,
    /// Index with `t_{l-1} <= r < t_l`.
    pub l: usize,
}

impl ExponentChain {
    pub fn t(&self, j: usize) -> &ExtendedExponent {
        &self.chain[j]
    }
}

pub fn exponent_chain(n: u32, m: u32, r: &BigRational) -> Result<ExponentChain, ExponentError> {
    if m == 0 {
        return Err(ExponentError::Invalid("order m must be positive".into()));
    }
    if r < &rat(2, 1) {
        return Err(ExponentError::ChainExhausted { r: r.to_string() });
    }
    let two = rat(2, 1);
    let mut chain = vec![ExtendedExponent::Finite(two.clone())];
    let mut l = None;
    for j in 1..=(n as usize + 2) {
        let t = sobolev_exponent(&two, m * j as u32, n)?;
        let prev_le_r = match &chain[j - 1] {
            ExtendedExponent::Finite(p) => p <= r,
            ExtendedExponent::Infinity => false,
        };
        let r_lt_t = match &t {
            ExtendedExponent::Finite(tv) => r < tv,
            ExtendedExponent::Infinity => true,
        };
        let done = !t.is_finite();
        chain.push(t);
        if l.is_none() && prev_le_r && r_lt_t {
            l = Some(j);
        }
        if done {
            break;
        }
    }
    match l {
        Some(l) => Ok(ExponentChain {
            n,
            m,
            r: ExtendedExponent::Finite(r.clone()),
            chain,
            l,
        }),
        None => Err(ExponentError::ChainExhausted { r: r.to_string() }),
    }
}

/// Admissible step count for raising integrability from s to r when one
/// step moves `1/t` down by τ. The bound `1 + (1/τ)(r-s)/(2s)` caps an
/// integer count, so the usable value is its floor.
pub fn step_bound(r: &BigRational, s: &BigRational, tau: &BigRational) -> Result<u64, ExponentError> {
    if s < &rat(2, 1) || r < s {
        return Err(ExponentError::Invalid(format!("need 2 <= s <= r, got s = {s}, r = {r}")));
    }
    if !tau.is_positive() {
        return Err(ExponentError::Invalid("step size tau must be positive".into()));
    }
    let bound = BigRational::one() + tau.recip() * (r - s) / (rat(2, 1) * s);
    Ok(bound.floor().to_integer().to_u64().unwrap())
}

/// Independent route: walk `1/t_k = 1/s - kτ` and count the steps until
/// `t_k >= r` (an infinite rung counts as reaching any finite r).
pub fn step_count_by_simulation(
    r: &BigRational,
    s: &BigRational,
    tau: &BigRational,
) -> Result<u64, ExponentError> {
    if s < &rat(2, 1) || r < s {
        return Err(ExponentError::Invalid(format!("need 2 <= s <= r, got s = {s}, r = {r}")));
    }
    if !tau.is_positive() {
        return Err(ExponentError::Invalid("step size tau must be positive".into()));
    }
    let target = r.recip();
    let mut inv = s.recip();
    let mut k = 0u64;
    while inv > target {
        inv -= tau;
        k += 1;
    }
    Ok(k)
}

/// Interpolation data at position j of a k-step ladder.
#[derive(Debug, Clone, Serialize)]
pub struct InterpolationExponents {
    #[serde(with = "ratio_serde")]
    pub t_j: BigRational,
    #[serde(with = "ratio_serde")]
    pub t_k: BigRational,
    #[serde(with = "ratio_serde")]
    pub theta: BigRational,
    #[serde(with = "ratio_serde")]
    pub alpha_j: BigRational,
    #[serde(with = "ratio_serde")]
    pub beta_j: BigRational,
}

pub fn interpolation_exponents(
    n: u32,
    m: u32,
    k: u32,
    j: u32,
) -> Result<InterpolationExponents, ExponentError> {
    if k == 0 || j > k {
        return Err(ExponentError::Invalid(format!("need 0 <= j <= k with k >= 1, got j = {j}, k = {k}")));
    }
    let two = rat(2, 1);
    let t_j = match sobolev_exponent(&two, m * j, n)? {
        ExtendedExponent::Finite(t) => t,
        ExtendedExponent::Infinity => {
            return Err(ExponentError::InfiniteExponent { which: format!("t_{j}") })
        }
    };
    let t_k = match sobolev_exponent(&two, m * k, n)? {
        ExtendedExponent::Finite(t) => t,
        ExtendedExponent::Infinity => {
            return Err(ExponentError::InfiniteExponent { which: format!("t_{k}") })
        }
    };
    let theta = rat(j as i64, k as i64);
    let alpha_j = rat(k as i64 + 1, k as i64) * rat((m * j) as i64, 1) * &t_j;
    let beta_j = rat(j as i64 + 1, 1) * rat(m as i64, 1) * &t_j;
    Ok(InterpolationExponents {
        t_j,
        t_k,
        theta,
        alpha_j,
        beta_j,
    })
}

/// Where a weight exponent acts: as a density against `dv` in the named
/// Lebesgue norm, or multiplying the section before the norm is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightBinding {
    MeasureDensity,
    Multiplier,
}

/// Symbolic weight `R(x)^exponent` bound to a specific norm of the global
/// estimates.
#[derive(Debug, Clone, Serialize)]
pub struct WeightSpec {
    pub name: String,
    /// Exact exponent of the admissible radius field.
    #[serde(with = "ratio_serde")]
    pub exponent: BigRational,
    /// Lebesgue exponent of the norm the weight belongs to.
    pub norm: ExtendedExponent,
    pub binding: WeightBinding,
}

impl WeightSpec {
    /// Exponent of `R` in the measure density once a multiplier weight is
    /// pushed inside the integral of the norm.
    pub fn measure_exponent(&self) -> Result<BigRational, ExponentError> {
        match self.binding {
            WeightBinding::MeasureDensity => Ok(self.exponent.clone()),
            WeightBinding::Multiplier => match &self.norm {
                ExtendedExponent::Finite(p) => Ok(&self.exponent * p),
                ExtendedExponent::Infinity => Err(ExponentError::InfiniteExponent {
                    which: format!("norm of weight {}", self.name),
                }),
            },
        }
    }
}

/// The weight family attached to an exponent chain: the source-side weights
/// `w_l` and `w_j`, and both versions of the solution-side weight (the
/// global form with the `(l+2)mr` offset and the per-ball form with
/// `(l+1)m`).
#[derive(Debug, Clone, Serialize)]
pub struct WeightFamily {
    pub w_l: WeightSpec,
    pub w_j: Vec<WeightSpec>,
    pub v_r: WeightSpec,
    pub v_r_prime: WeightSpec,
    pub v_r_ball: WeightSpec,
}

pub fn weight_family(chain: &ExponentChain) -> Result<WeightFamily, ExponentError> {
    let l = chain.l;
    let m = rat(chain.m as i64, 1);
    let r = chain
        .r
        .as_ratio()
        .ok_or(ExponentError::InfiniteExponent { which: "r".into() })?
        .clone();
    let t_prev = chain.chain[l - 1]
        .as_ratio()
        .ok_or(ExponentError::InfiniteExponent { which: format!("t_{}", l - 1) })?
        .clone();
    // 1/t_l with the infinite rung contributing zero.
    let inv_t_l = match &chain.chain[l] {
        ExtendedExponent::Finite(t) => t.recip(),
        ExtendedExponent::Infinity => BigRational::zero(),
    };
    let w_l = WeightSpec {
        name: "w_l".into(),
        exponent: rat(l as i64, 1) * &m * &t_prev,
        norm: ExtendedExponent::Finite(t_prev.clone()),
        binding: WeightBinding::MeasureDensity,
    };
    let w_j = (1..=l)
        .map(|j| {
            let t = chain.chain[l - j]
                .as_ratio()
                .expect("rungs below l are finite")
                .clone();
            Ok(WeightSpec {
                name: format!("w_{j}"),
                exponent: rat((l + 1 - j) as i64, 1) * &m,
                norm: ExtendedExponent::Finite(t),
                binding: WeightBinding::Multiplier,
            })
        })
        .collect::<Result<Vec<_>, ExponentError>>()?;
    let v_r = WeightSpec {
        name: "v_r".into(),
        exponent: (&r * &inv_t_l - BigRational::one()) + rat((l + 2) as i64, 1) * &m * &r,
        norm: ExtendedExponent::Finite(r.clone()),
        binding: WeightBinding::MeasureDensity,
    };
    let v_r_prime = WeightSpec {
        name: "v_r_prime".into(),
        exponent: v_r.exponent.clone(),
        norm: ExtendedExponent::Finite(r.clone()),
        binding: WeightBinding::MeasureDensity,
    };
    let v_r_ball = WeightSpec {
        name: "v_r_ball".into(),
        exponent: (inv_t_l - r.recip()) + rat((l + 1) as i64, 1) * &m,
        norm: ExtendedExponent::Finite(r),
        binding: WeightBinding::Multiplier,
    };
    Ok(WeightFamily {
        w_l,
        w_j,
        v_r,
        v_r_prime,
        v_r_ball,
    })
}

/// Nodewise `R(x)^e` for a radius field given as plain values.
pub fn weight_field(radius_values: &[f64], exponent: &BigRational) -> Vec<f64> {
    let e = exponent.to_f64().unwrap();
    radius_values.iter().map(|&r| r.powf(e)).collect()
}
