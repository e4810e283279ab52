//! Observation-time distributions with exact support, CDF, inverse CDF and
//! truncation. Truncating a truncated normal yields another truncated normal,
//! so piece distributions produced by segmentation stay in closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", try_from = "RawDistribution")]
pub enum TimeDistribution {
    #[serde(rename = "uniform")]
    Uniform { a: f64, b: f64 },
    #[serde(rename = "truncnormal")]
    TruncatedNormal { mean: f64, sd: f64, low: f64, high: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
enum RawDistribution {
    #[serde(rename = "uniform")]
    Uniform { a: f64, b: f64 },
    #[serde(rename = "truncnormal")]
    TruncatedNormal { mean: f64, sd: f64, low: f64, high: f64 },
}

impl TryFrom<RawDistribution> for TimeDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        match raw {
            RawDistribution::Uniform { a, b } => TimeDistribution::uniform(a, b),
            RawDistribution::TruncatedNormal { mean, sd, low, high } => {
                TimeDistribution::truncated_normal(mean, sd, low, high)
            }
        }
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal CDF.
fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal survival function.
fn phi_c(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

fn phi_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation followed by one
/// Halley step against `erfc`, which brings it to full double precision.
pub(crate) fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
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
    const P_LOW: f64 = 0.02425;
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
    let e = phi(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

impl TimeDistribution {
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::Domain(format!("uniform needs finite a < b, got [{a}, {b}]")));
        }
        Ok(TimeDistribution::Uniform { a, b })
    }

    pub fn truncated_normal(mean: f64, sd: f64, low: f64, high: f64) -> Result<Self> {
        if !(mean.is_finite() && sd.is_finite() && low.is_finite() && high.is_finite()) {
            return Err(Error::Domain("truncated normal parameters must be finite".into()));
        }
        if !(sd > 0.0 && low < high) {
            return Err(Error::Domain(format!(
                "truncated normal needs sd > 0 and low < high, got sd={sd}, [{low}, {high}]"
            )));
        }
        let d = TimeDistribution::TruncatedNormal { mean, sd, low, high };
        if !(d.normal_mass() > 0.0) {
            return Err(Error::Domain("truncation interval carries no probability mass".into()));
        }
        Ok(d)
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            TimeDistribution::Uniform { a, b } => (a, b),
            TimeDistribution::TruncatedNormal { low, high, .. } => (low, high),
        }
    }

    pub fn span(&self) -> f64 {
        let (lo, hi) = self.support();
        hi - lo
    }

    /// Upper-tail truncations are evaluated with the survival function.
    fn upper_tail(&self) -> bool {
        match *self {
            TimeDistribution::TruncatedNormal { mean, low, .. } => low >= mean,
            _ => false,
        }
    }

    fn normal_mass(&self) -> f64 {
        match *self {
            TimeDistribution::TruncatedNormal { mean, sd, low, high } => {
                let (alpha, beta) = ((low - mean) / sd, (high - mean) / sd);
                if self.upper_tail() {
                    phi_c(alpha) - phi_c(beta)
                } else {
                    phi(beta) - phi(alpha)
                }
            }
            _ => 1.0,
        }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        let (lo, hi) = self.support();
        if t < lo || t > hi {
            return 0.0;
        }
        match *self {
            TimeDistribution::Uniform { a, b } => 1.0 / (b - a),
            TimeDistribution::TruncatedNormal { mean, sd, .. } => {
                phi_pdf((t - mean) / sd) / (sd * self.normal_mass())
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        let (lo, hi) = self.support();
        if t <= lo {
            return 0.0;
        }
        if t >= hi {
            return 1.0;
        }
        match *self {
            TimeDistribution::Uniform { a, b } => (t - a) / (b - a),
            TimeDistribution::TruncatedNormal { mean, sd, low, .. } => {
                let (alpha, z) = ((low - mean) / sd, (t - mean) / sd);
                let num = if self.upper_tail() {
                    phi_c(alpha) - phi_c(z)
                } else {
                    phi(z) - phi(alpha)
                };
                (num / self.normal_mass()).clamp(0.0, 1.0)
            }
        }
    }

    pub fn inv_cdf(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Domain(format!("probability {u} outside [0, 1]")));
        }
        Ok(self.quantile(u))
    }

    fn quantile(&self, u: f64) -> f64 {
        let (lo, hi) = self.support();
        if u <= 0.0 {
            return lo;
        }
        if u >= 1.0 {
            return hi;
        }
        match *self {
            TimeDistribution::Uniform { a, b } => (a + u * (b - a)).clamp(a, b),
            TimeDistribution::TruncatedNormal { mean, sd, low, high } => {
                let alpha = (low - mean) / sd;
                let z = if self.upper_tail() {
                    let q = phi_c(alpha) - u * self.normal_mass();
                    -normal_quantile(q)
                } else {
                    let p = phi(alpha) + u * self.normal_mass();
                    normal_quantile(p)
                };
                let mut t = (mean + sd * z).clamp(low, high);
                // Newton polish on the truncated CDF itself.
                for _ in 0..2 {
                    let dens = self.pdf(t);
                    if dens > 0.0 {
                        t = (t - (self.cdf(t) - u) / dens).clamp(low, high);
                    }
                }
                t
            }
        }
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.quantile(rng.random::<f64>())).collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng_for(seed, &[rng::stream::DATA_TIMES]);
        self.sample_with(&mut r, n)
    }

    /// The distribution conditioned on `[a, b]`.
    pub fn truncate(&self, a: f64, b: f64) -> Result<Self> {
        let (lo, hi) = self.support();
        let tol = 1e-12 * (hi - lo).max(1.0);
        if !(a < b) || a < lo - tol || b > hi + tol {
            return Err(Error::Domain(format!(
                "cannot truncate support [{lo}, {hi}] to [{a}, {b}]"
            )));
        }
        let (a, b) = (a.max(lo), b.min(hi));
        match *self {
            TimeDistribution::Uniform { .. } => TimeDistribution::uniform(a, b),
            TimeDistribution::TruncatedNormal { mean, sd, .. } => {
                TimeDistribution::truncated_normal(mean, sd, a, b)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;

    fn tn() -> TimeDistribution {
        TimeDistribution::truncated_normal(5.0, 10.0 / 3.0, 0.0, 10.0).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + h * i as f64);
        }
        acc * h / 3.0
    }

    #[test]
    fn quantile_accuracy() {
        for &p in &[1e-10, 1e-4, 0.02, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-9] {
            let z = normal_quantile(p);
            assert!((phi(z) - p).abs() < 1e-15 + 1e-13 * p, "p={p}");
        }
    }

    #[test]
    fn uniform_basics() {
        let u = TimeDistribution::uniform(0.0, 10.0).unwrap();
        assert_eq!(u.cdf(2.5), 0.25);
        assert_eq!(u.inv_cdf(0.0).unwrap(), 0.0);
        assert_eq!(u.inv_cdf(1.0).unwrap(), 10.0);
        assert!(u.inv_cdf(1.5).is_err());
        assert!(u.inv_cdf(-0.1).is_err());
        let s = u.sample(100_000, 3);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 5.0).abs() < 0.05);
    }

    #[test]
    fn truncnormal_basics() {
        let d = tn();
        assert!((d.cdf(5.0) - 0.5).abs() < 1e-14);
        assert_eq!(d.inv_cdf(0.0).unwrap(), 0.0);
        assert_eq!(d.inv_cdf(1.0).unwrap(), 10.0);
        let six = TimeDistribution::truncated_normal(3.0, 2.0, 0.0, 6.0).unwrap();
        assert!(six.sample(20_000, 11).iter().all(|t| (0.0..=6.0).contains(t)));
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = tn();
        assert_eq!(d.sample(1, 42), d.sample(1, 42));
        assert_ne!(d.sample(5, 42), d.sample(5, 43));
    }

    #[test]
    fn truncation() {
        let u = TimeDistribution::uniform(0.0, 10.0).unwrap();
        assert_eq!(u.truncate(2.0, 4.0).unwrap(), TimeDistribution::uniform(2.0, 4.0).unwrap());
        assert_eq!(u.truncate(0.0, 10.0).unwrap(), u);
        assert_eq!(tn().truncate(0.0, 10.0).unwrap(), tn());
        assert!(u.truncate(3.0, 3.0).is_err());
        assert!(u.truncate(-1.0, 3.0).is_err());
    }

    #[test]
    fn double_truncation_integrates_to_one() {
        let once = tn().truncate(1.0, 9.0).unwrap();
        let twice = once.truncate(6.5, 8.75).unwrap();
        let mass = simpson(|t| twice.pdf(t), 6.5, 8.75, 2000);
        assert!((mass - 1.0).abs() < 1e-8, "{mass}");
        // upper-tail branch
        let tail = tn().truncate(8.0, 10.0).unwrap();
        assert!((simpson(|t| tail.pdf(t), 8.0, 10.0, 2000) - 1.0).abs() < 1e-8);
    }

    fn ks_statistic(d: &TimeDistribution, n: usize, seed: u64) -> f64 {
        let mut s = d.sample(n, seed);
        s.sort_by(f64::total_cmp);
        s.iter()
            .enumerate()
            .map(|(i, &t)| {
                let c = d.cdf(t);
                (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn kolmogorov_smirnov_sanity() {
        let dists = [
            TimeDistribution::uniform(0.0, 10.0).unwrap(),
            tn(),
            tn().truncate(7.0, 10.0).unwrap(),
            TimeDistribution::truncated_normal(3.0, 2.0, 0.0, 6.0).unwrap(),
        ];
        for d in &dists {
            assert!(ks_statistic(d, 100_000, 5) < 0.01, "{d:?}");
        }
    }

    #[test]
    fn cdf_is_strictly_monotone() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for d in [tn(), TimeDistribution::uniform(-2.0, 3.0).unwrap()] {
            let (lo, hi) = d.support();
            for _ in 0..1000 {
                let a = r.random_range(lo..hi);
                let b = r.random_range(lo..hi);
                let (t1, t2) = if a < b { (a, b) } else { (b, a) };
                if t2 - t1 > 1e-9 {
                    assert!(d.cdf(t1) < d.cdf(t2));
                }
            }
        }
    }

    #[test]
    fn json_forms() {
        let u: TimeDistribution = serde_json::from_str(r#"{"kind":"uniform","a":0,"b":10}"#).unwrap();
        assert_eq!(u, TimeDistribution::uniform(0.0, 10.0).unwrap());
        let t: TimeDistribution =
            serde_json::from_str(r#"{"kind":"truncnormal","mean":5,"sd":3.333,"low":0,"high":10}"#).unwrap();
        assert_eq!(t, TimeDistribution::truncated_normal(5.0, 3.333, 0.0, 10.0).unwrap());
        let back: TimeDistribution = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<TimeDistribution>(r#"{"kind":"uniform","a":3,"b":1}"#).is_err());
        assert!(serde_json::from_str::<TimeDistribution>(r#"{"kind":"uniform","a":0,"b":1,"c":2}"#).is_err());
    }

    proptest! {
        #[test]
        fn inverse_round_trip(frac in 0.001f64..0.999) {
            for d in [tn(), tn().truncate(6.0, 9.5).unwrap(), TimeDistribution::uniform(1.0, 4.0).unwrap()] {
                let (lo, hi) = d.support();
                let t = lo + frac * (hi - lo);
                prop_assert!((d.inv_cdf(d.cdf(t)).unwrap() - t).abs() < 1e-10);
            }
        }

        #[test]
        fn truncated_cdf_is_renormalised(fa in 0.0f64..0.45, fb in 0.55f64..1.0, ft in 0.0f64..1.0) {
            let d = tn();
            let (a, b) = (10.0 * fa, 10.0 * fb);
            let t = a + ft * (b - a);
            let tr = d.truncate(a, b).unwrap();
            let expect = (d.cdf(t) - d.cdf(a)) / (d.cdf(b) - d.cdf(a));
            prop_assert!((tr.cdf(t) - expect).abs() < 1e-12);
        }
    }
}
