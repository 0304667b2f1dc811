//! Random streams, the standard normal, and the conformal order-statistic rule.
//!
//! Every stochastic routine in the crate draws from an [`RngStream`]. A stream
//! is keyed by `(seed, stream_id)`; child streams are derived by label so that
//! per-sample generation is identical no matter how work is split across
//! threads.

use std::cmp::Ordering;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CanviError, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic ChaCha8 stream identified by `(seed, stream_id)`.
///
/// Distinct stream ids select disjoint ChaCha streams under the same key, so
/// two streams never share output.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream for `label`. Depends only on this stream's identity, not on
    /// how many values have already been drawn from it.
    pub fn derive(&self, label: u64) -> RngStream {
        let key = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_f42d)));
        RngStream::new(key, label)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// A conformal score: a non-negative real or `+∞`, totally ordered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtendedScore(f64);

impl ExtendedScore {
    pub const INFINITY: ExtendedScore = ExtendedScore(f64::INFINITY);

    /// Panics on NaN or negative input; scores come from densities, so either
    /// indicates a bug upstream.
    pub fn new(value: f64) -> Self {
        assert!(
            value >= 0.0,
            "score must be non-negative or +inf, got {value}"
        );
        ExtendedScore(value)
    }

    /// `1 / exp(log_density)`; a zero density maps to `+∞`.
    pub fn from_log_density(log_density: f64) -> Self {
        if log_density == f64::NEG_INFINITY {
            ExtendedScore::INFINITY
        } else {
            ExtendedScore::new((-log_density).exp())
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0 == f64::INFINITY
    }
}

impl Eq for ExtendedScore {}

impl PartialOrd for ExtendedScore {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExtendedScore {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for ExtendedScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

// JSON has no infinity; `+∞` travels as the string "inf".
impl Serialize for ExtendedScore {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for ExtendedScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) if v >= 0.0 => Ok(ExtendedScore(v)),
            Repr::Str(s) if s == "inf" => Ok(ExtendedScore::INFINITY),
            _ => Err(serde::de::Error::custom("expected non-negative number or \"inf\"")),
        }
    }
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Inverse of [`std_normal_cdf`].
///
/// Acklam's rational approximation followed by one Halley step against the
/// erfc-based CDF, which brings the result to near machine precision.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CanviError::domain(format!(
            "normal quantile needs 0 < p < 1, got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Index (1-based) of the conformal order statistic, `⌈(n+1)(1-alpha)⌉`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    // Products such as 20 * 0.95 land a hair above the integer.
    (target - 1e-9).ceil().max(1.0) as usize
}

/// The `⌈(n+1)(1-alpha)⌉`-th smallest score, or `+∞` when that rank exceeds `n`.
pub fn conformal_quantile(scores: &[ExtendedScore], alpha: f64) -> Result<ExtendedScore> {
    if scores.is_empty() {
        return Err(CanviError::argument("conformal quantile of an empty score set"));
    }
    check_alpha(alpha)?;
    let k = conformal_rank(scores.len(), alpha);
    if k > scores.len() {
        return Ok(ExtendedScore::INFINITY);
    }
    let mut sorted = scores.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable(k - 1);
    Ok(*kth)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CanviError::domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

pub fn sample_std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(CanviError::domain(format!("uniform bounds [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(lo + (hi - lo) * rng.random::<f64>())
}

/// `exp(mu + sigma * z)`; `mu` and `sigma` are the log-space mean and stddev.
pub fn sample_lognormal<R: Rng + ?Sized>(rng: &mut R, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && mu.is_finite() && sigma.is_finite()) {
        return Err(CanviError::domain(format!("lognormal(mu={mu}, sigma={sigma})")));
    }
    Ok((mu + sigma * sample_std_normal(rng)).exp())
}

pub fn sample_bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CanviError::domain(format!("bernoulli p = {p}")));
    }
    Ok(rng.random::<f64>() < p)
}

pub fn sample_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> Result<u64> {
    let dist = Binomial::new(n, p)
        .map_err(|e| CanviError::domain(format!("binomial(n={n}, p={p}): {e}")))?;
    Ok(dist.sample(rng))
}
