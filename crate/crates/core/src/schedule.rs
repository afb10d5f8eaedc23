//! Heating and cooling temperature schedules.
//!
//! A heating schedule lists the temperatures `T_1..T_K` of the destructive
//! process, starting with `n_flat` steps at temperature 1. The cooling
//! schedule used for generation is its exact reversal, optionally followed by
//! extra temperature-1 steps.
//!
//! Every entry also carries a step index: the 0-based position of the
//! transition counted from the data end. It selects the per-step affine
//! parameters of the operator networks. Extra cooling steps reuse index 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WalkbackError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatingRule {
    /// Temperature doubles every step after the flat prefix.
    Doubling,
    /// `T_t = sqrt(2^t)` after the flat prefix.
    Sqrt2,
    /// Explicit temperature list.
    Custom,
}

impl std::str::FromStr for HeatingRule {
    type Err = WalkbackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doubling" => Ok(HeatingRule::Doubling),
            "sqrt2" => Ok(HeatingRule::Sqrt2),
            other => Err(WalkbackError::Config(format!("unknown heating rule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Heating,
    Cooling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub rule: HeatingRule,
    pub direction: Direction,
    pub tmax: f64,
    pub n_flat: usize,
    temps: Vec<f64>,
    steps: Vec<usize>,
}

/// Smallest `m` with `2^m >= x`, for `x >= 1`.
pub fn ceil_log2(x: f64) -> usize {
    let mut m = x.log2().ceil().max(0.0) as usize;
    while m > 0 && 2f64.powi(m as i32 - 1) >= x {
        m -= 1;
    }
    while 2f64.powi(m as i32) < x {
        m += 1;
    }
    m
}

/// Number of post-prefix heating steps needed to reach `tmax`.
pub fn ramp_len(tmax: f64, rule: HeatingRule) -> usize {
    match rule {
        HeatingRule::Doubling => ceil_log2(tmax),
        // sqrt(2^t) >= tmax  <=>  2^t >= tmax^2
        HeatingRule::Sqrt2 => ceil_log2(tmax * tmax),
        HeatingRule::Custom => 0,
    }
}

/// `T_max = sigma_max^2 / sigma^2`, floored at 1.
pub fn tmax_from_variance(sigma2_max: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2_max.is_finite() || sigma2_max < 0.0 {
        return Err(WalkbackError::Config(format!(
            "cannot derive Tmax from variances {sigma2_max} / {sigma2}"
        )));
    }
    Ok((sigma2_max / sigma2).max(1.0))
}

impl TemperatureSchedule {
    /// Heating schedule: `n_flat` steps at temperature 1, then the ramp until `tmax` is reached.
    pub fn heating(tmax: f64, n_flat: usize, rule: HeatingRule) -> Result<Self> {
        if !(tmax >= 1.0) || !tmax.is_finite() {
            return Err(WalkbackError::Config(format!(
                "Tmax must be finite and >= 1, got {tmax}"
            )));
        }
        if rule == HeatingRule::Custom {
            return Err(WalkbackError::Config("custom schedules are built with `custom`".into()));
        }
        let ramp = ramp_len(tmax, rule);
        let mut temps = vec![1.0; n_flat];
        temps.extend((1..=ramp).map(|t| match rule {
            HeatingRule::Doubling => 2f64.powi(t as i32),
            _ => 2f64.powi(t as i32).sqrt(),
        }));
        let steps = (0..temps.len()).collect();
        Ok(TemperatureSchedule {
            rule,
            direction: Direction::Heating,
            tmax,
            n_flat,
            temps,
            steps,
        })
    }

    /// Heating schedule with explicit, non-decreasing temperatures `>= 1`.
    pub fn custom(temps: Vec<f64>) -> Result<Self> {
        if temps.iter().any(|&t| !(t >= 1.0) || !t.is_finite()) {
            return Err(WalkbackError::Config(
                "custom temperatures must be finite and >= 1".into(),
            ));
        }
        if temps.windows(2).any(|w| w[1] < w[0]) {
            return Err(WalkbackError::Config(
                "heating temperatures must be non-decreasing".into(),
            ));
        }
        let n_flat = temps.iter().take_while(|&&t| t == 1.0).count();
        let tmax = temps.last().copied().unwrap_or(1.0);
        let steps = (0..temps.len()).collect();
        Ok(TemperatureSchedule {
            rule: HeatingRule::Custom,
            direction: Direction::Heating,
            tmax,
            n_flat,
            temps,
            steps,
        })
    }

    /// Exact reversal of a heating schedule followed by `extra_flat` steps at temperature 1.
    pub fn cooling(heating: &TemperatureSchedule, extra_flat: usize) -> Result<Self> {
        if heating.direction != Direction::Heating {
            return Err(WalkbackError::Usage("cooling expects a heating schedule".into()));
        }
        let mut cooled = heating.reversed();
        cooled.temps.extend(std::iter::repeat_n(1.0, extra_flat));
        cooled.steps.extend(std::iter::repeat_n(0, extra_flat));
        Ok(cooled)
    }

    /// Element-wise reversal with the direction flipped.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.temps.reverse();
        out.steps.reverse();
        out.direction = match self.direction {
            Direction::Heating => Direction::Cooling,
            Direction::Cooling => Direction::Heating,
        };
        out
    }

    pub fn temps(&self) -> &[f64] {
        &self.temps
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.steps
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.temps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temps.is_empty()
    }

    pub fn max_temp(&self) -> f64 {
        self.temps.iter().copied().fold(1.0, f64::max)
    }
}

/// Draws `n` uniformly from `0..=n1` and returns `(n, K)` with
/// `K = ramp_len(tmax) + n`.
pub fn draw_k<R: Rng + ?Sized>(n1: usize, tmax: f64, rule: HeatingRule, rng: &mut R) -> (usize, usize) {
    let n = rng.random_range(0..=n1);
    (n, ramp_len(tmax, rule) + n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn doubling_example() {
        let s = TemperatureSchedule::heating(64.0, 3, HeatingRule::Doubling).unwrap();
        assert_eq!(s.temps(), &[1.0, 1.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]);
        assert_eq!(s.len(), 9);
    }

    #[test]
    fn tmax_one_is_all_flat() {
        let s = TemperatureSchedule::heating(1.0, 5, HeatingRule::Doubling).unwrap();
        assert_eq!(s.temps(), &[1.0; 5]);
        let s = TemperatureSchedule::heating(1.0, 2, HeatingRule::Sqrt2).unwrap();
        assert_eq!(s.temps(), &[1.0; 2]);
    }

    #[test]
    fn sqrt2_rule() {
        let s = TemperatureSchedule::heating(4.0, 2, HeatingRule::Sqrt2).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.temps()[2 + 3], 4.0);
        assert!((s.temps()[2] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tmax_below_one_is_rejected() {
        assert!(TemperatureSchedule::heating(0.5, 1, HeatingRule::Doubling).is_err());
        assert!(TemperatureSchedule::heating(f64::NAN, 1, HeatingRule::Doubling).is_err());
    }

    #[test]
    fn cooling_reverses_and_extends() {
        let h = TemperatureSchedule::custom(vec![1.0, 2.0, 4.0]).unwrap();
        let c = TemperatureSchedule::cooling(&h, 0).unwrap();
        assert_eq!(c.temps(), &[4.0, 2.0, 1.0]);
        assert_eq!(c.step_indices(), &[2, 1, 0]);
        assert_eq!(c.reversed(), h);
        let c2 = TemperatureSchedule::cooling(&h, 2).unwrap();
        assert_eq!(c2.temps(), &[4.0, 2.0, 1.0, 1.0, 1.0]);
        assert_eq!(c2.step_indices(), &[2, 1, 0, 0, 0]);
        assert!(TemperatureSchedule::cooling(&c, 0).is_err());
    }

    #[test]
    fn ceil_log2_edges() {
        assert_eq!(ceil_log2(1.0), 0);
        assert_eq!(ceil_log2(2.0), 1);
        assert_eq!(ceil_log2(9.0), 4);
        assert_eq!(ceil_log2(16.0), 4);
        assert_eq!(ceil_log2(16.000001), 5);
        assert_eq!(ceil_log2(1024.0), 10);
    }

    #[test]
    fn draw_k_forced_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(draw_k(0, 16.0, HeatingRule::Doubling, &mut rng), (0, 4));
        }
    }

    #[test]
    fn tmax_from_prior_variance() {
        let tmax = tmax_from_variance(9.0, 1.0).unwrap();
        assert_eq!(tmax, 9.0);
        assert_eq!(ceil_log2(tmax), 4);
        assert!(tmax_from_variance(1.0, 0.0).is_err());
    }

    /// Chi-square critical value at 1% for 10 degrees of freedom.
    const CHI2_10DF_99: f64 = 23.209;

    #[test]
    fn draw_k_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n1 = 10;
        let draws = 100_000;
        let mut counts = vec![0usize; n1 + 1];
        for _ in 0..draws {
            let (n, k) = draw_k(n1, 8.0, HeatingRule::Doubling, &mut rng);
            assert_eq!(k, 3 + n);
            counts[n] += 1;
        }
        let expected = draws as f64 / (n1 + 1) as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CHI2_10DF_99, "chi2 = {chi2}");
    }

    proptest::proptest! {
        #[test]
        fn schedule_laws(tmax in 1.0f64..5000.0, n_flat in 0usize..12, sqrt2 in proptest::bool::ANY) {
            let rule = if sqrt2 { HeatingRule::Sqrt2 } else { HeatingRule::Doubling };
            let h = TemperatureSchedule::heating(tmax, n_flat, rule).unwrap();
            proptest::prop_assert!(h.temps().windows(2).all(|w| w[0] <= w[1]));
            if n_flat > 0 {
                proptest::prop_assert_eq!(h.temps()[0], 1.0);
            }
            let c = TemperatureSchedule::cooling(&h, 0).unwrap();
            let mut rev = c.temps().to_vec();
            rev.reverse();
            proptest::prop_assert_eq!(rev.as_slice(), h.temps());
            proptest::prop_assert_eq!(c.reversed(), h.clone());
            if rule == HeatingRule::Doubling {
                proptest::prop_assert_eq!(h.len(), ceil_log2(tmax) + n_flat);
                proptest::prop_assert!(h.max_temp() >= tmax && h.max_temp() <= 2.0 * tmax);
            } else {
                proptest::prop_assert!(h.max_temp() >= tmax);
            }
            proptest::prop_assert!(h.len() >= n_flat);
        }
    }
}
