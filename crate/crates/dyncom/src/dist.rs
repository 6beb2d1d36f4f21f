//! Seeded samplers for the distribution families used by the model.
//!
//! Gamma draws use the shape–scale convention throughout; conversions from
//! rate parameterizations happen at call sites. Counts are `u64` here and
//! narrowed by callers that store them more compactly.

use rand::Rng;
use rand_distr::{
    Beta as BetaDist, Binomial, Distribution, Gamma as GammaDist, Poisson as PoissonDist,
};

use crate::error::{Error, Result};

/// Draws from Gamma(shape, scale).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter(format!(
            "gamma requires finite shape > 0 and scale > 0, got shape {shape}, scale {scale}"
        )));
    }
    let d = GammaDist::new(shape, scale).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Draws from Dirichlet(concentration) by normalizing independent Gamma
/// draws. Zero concentration entries produce exact zeros in the result;
/// at least one entry must be strictly positive.
///
/// If every Gamma draw underflows to zero, the normalized concentration
/// vector (the distribution's mean) is returned instead.
pub fn sample_dirichlet<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if concentration.is_empty() {
        return Err(Error::Parameter("dirichlet requires a non-empty concentration".into()));
    }
    let mut total_conc = 0.0;
    for &c in concentration {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::Parameter(format!(
                "dirichlet concentrations must be finite and non-negative, got {c}"
            )));
        }
        total_conc += c;
    }
    if total_conc <= 0.0 {
        return Err(Error::Parameter(
            "dirichlet requires at least one positive concentration".into(),
        ));
    }
    let mut out = vec![0.0; concentration.len()];
    let mut sum = 0.0;
    for (x, &c) in out.iter_mut().zip(concentration) {
        if c > 0.0 {
            *x = sample_gamma(c, 1.0, rng)?;
            sum += *x;
        }
    }
    if sum > 0.0 {
        for x in &mut out {
            *x /= sum;
        }
    } else {
        for (x, &c) in out.iter_mut().zip(concentration) {
            *x = c / total_conc;
        }
    }
    Ok(out)
}

/// Draws from Beta(a, b).
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
        return Err(Error::Parameter(format!(
            "beta requires finite a > 0 and b > 0, got a {a}, b {b}"
        )));
    }
    let d = BetaDist::new(a, b).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Draws counts from Multinomial(n, weights). Weights need not be
/// normalized; they must be finite, non-negative, and not all zero
/// (unless n is zero, in which case the weights are unused).
pub fn sample_multinomial<R: Rng + ?Sized>(
    n: u64,
    weights: &[f64],
    rng: &mut R,
) -> Result<Vec<u64>> {
    let mut out = vec![0u64; weights.len()];
    if n == 0 {
        return Ok(out);
    }
    let mut remaining_weight = 0.0;
    for &w in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Parameter(format!(
                "multinomial weights must be finite and non-negative, got {w}"
            )));
        }
        remaining_weight += w;
    }
    if remaining_weight <= 0.0 {
        return Err(Error::Parameter("multinomial weights sum to zero".into()));
    }
    // Sequential conditional binomials: exact and allocation-free beyond the
    // output vector.
    let mut remaining = n;
    for (i, &w) in weights.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == weights.len() {
            out[i] = remaining;
            break;
        }
        if w <= 0.0 {
            remaining_weight -= w;
            continue;
        }
        if w >= remaining_weight {
            // Floating-point slack: everything left belongs here.
            out[i] = remaining;
            break;
        }
        let p = w / remaining_weight;
        let d = Binomial::new(remaining, p).map_err(|e| Error::Parameter(e.to_string()))?;
        let c = d.sample(rng);
        out[i] = c;
        remaining -= c;
        remaining_weight -= w;
    }
    Ok(out)
}

/// Draws the table count of a Chinese restaurant table distribution with
/// `customers` arrivals and concentration `a`, via the exact Bernoulli-sum
/// construction: the j-th arrival opens a new table with probability
/// a / (a + j).
pub fn sample_crt<R: Rng + ?Sized>(customers: u64, a: f64, rng: &mut R) -> Result<u64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::Parameter(format!(
            "crt requires finite concentration > 0, got {a}"
        )));
    }
    let mut tables = 0u64;
    for j in 0..customers {
        let p = a / (a + j as f64);
        if rng.random::<f64>() < p {
            tables += 1;
        }
    }
    Ok(tables)
}

/// Draws from a zero-truncated Poisson with the given rate.
///
/// For rate >= 1 this rejects Poisson draws until one is positive (the
/// acceptance probability is at least 1 - 1/e). For rate < 1 rejection
/// degenerates, so inversion on the truncated pmf is used instead.
pub fn sample_ztp<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<u64> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Parameter(format!(
            "zero-truncated poisson requires finite rate > 0, got {rate}"
        )));
    }
    if rate >= 1.0 {
        loop {
            let x = sample_poisson(rate, rng)?;
            if x > 0 {
                return Ok(x);
            }
        }
    }
    // Inversion over k = 1, 2, ... with unnormalized mass rate^k / k!.
    // The normalizer is e^rate - 1, computed stably for tiny rates.
    let target = rng.random::<f64>() * rate.exp_m1();
    let mut k = 1u64;
    let mut term = rate;
    let mut cum = term;
    while cum < target && k < 1000 {
        k += 1;
        term *= rate / k as f64;
        cum += term;
    }
    Ok(k)
}

/// Draws from Poisson(rate); a zero rate yields zero.
pub fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<u64> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::Parameter(format!(
            "poisson requires finite rate >= 0, got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(0);
    }
    let d = PoissonDist::new(rate).map_err(|e| Error::Parameter(e.to_string()))?;
    let x: f64 = d.sample(rng);
    Ok(x as u64)
}

/// Draws an index proportional to the given unnormalized weights.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Parameter(format!(
                "categorical weights must be finite and non-negative, got {w}"
            )));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::Parameter("categorical weights sum to zero".into()));
    }
    let u = rng.random::<f64>() * total;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last_positive = i;
            if u < cum {
                return Ok(i);
            }
        }
    }
    // Floating-point slack at the upper edge.
    Ok(last_positive)
}
