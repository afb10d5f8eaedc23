//! Toy 2D datasets and CSV persistence.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, WalkbackError};
use crate::io::temp_path;

/// Per-dimension affine standardization `z = (x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Scaler {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population moments of `points`; constant dimensions keep std 1.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| WalkbackError::Usage("cannot fit a scaler to no points".into()))?;
        let n = points.len() as f64;
        let mut mean = vec![0.0; dim];
        for p in points {
            check_dim(dim, p.len(), "point")?;
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for p in points {
            for i in 0..dim {
                var[i] += (p[i] - mean[i]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }
}

/// Index sets of a train / validation / test partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Standardized points.
    pub points: Vec<Vec<f64>>,
    pub dim: usize,
    pub splits: Splits,
    pub scaler: Scaler,
}

impl Dataset {
    /// Wraps points without changing them. Every point lands in `train`.
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| WalkbackError::Usage("dataset is empty".into()))?;
        if dim == 0 {
            return Err(WalkbackError::Usage("points have zero dimensions".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(WalkbackError::Parse {
                    line: i + 1,
                    message: format!("row {} has {} values, expected {dim}", i + 1, p.len()),
                });
            }
        }
        let splits = Splits {
            train: (0..points.len()).collect(),
            ..Splits::default()
        };
        Ok(Dataset {
            points,
            dim,
            splits,
            scaler: Scaler::identity(dim),
        })
    }

    /// Standardizes raw points and stores the scaler.
    pub fn standardized(raw: Vec<Vec<f64>>) -> Result<Self> {
        let scaler = Scaler::fit(&raw)?;
        let points = raw.iter().map(|p| scaler.transform(p)).collect();
        let mut ds = Dataset::new(points)?;
        ds.scaler = scaler;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Shuffled partition with the given train and validation fractions; the rest is test.
    pub fn split<R: Rng + ?Sized>(&mut self, train_frac: f64, val_frac: f64, rng: &mut R) -> Result<()> {
        if !(train_frac > 0.0) || val_frac < 0.0 || train_frac + val_frac > 1.0 {
            return Err(WalkbackError::Config(format!(
                "invalid split fractions {train_frac} / {val_frac}"
            )));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n);
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        self.splits = Splits {
            test: idx[n_train + n_val..].to_vec(),
            validation: idx[n_train..n_train + n_val].to_vec(),
            train: idx[..n_train].to_vec(),
        };
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.points[i].clone()).collect()
    }

    pub fn train_points(&self) -> Vec<Vec<f64>> {
        self.subset(&self.splits.train)
    }

    pub fn validation_points(&self) -> Vec<Vec<f64>> {
        self.subset(&self.splits.validation)
    }

    pub fn test_points(&self) -> Vec<Vec<f64>> {
        self.subset(&self.splits.test)
    }

    /// Sum of per-dimension variances of the stored points.
    pub fn total_variance(&self) -> f64 {
        let n = self.len() as f64;
        (0..self.dim)
            .map(|d| {
                let mean = self.points.iter().map(|p| p[d]).sum::<f64>() / n;
                self.points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n
            })
            .sum()
    }
}

fn finish<R: Rng + ?Sized>(raw: Vec<Vec<f64>>, rng: &mut R) -> Result<Dataset> {
    let mut ds = Dataset::standardized(raw)?;
    ds.split(0.8, 0.1, rng)?;
    Ok(ds)
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(WalkbackError::Config("need at least one point".into()))
    } else {
        Ok(())
    }
}

/// Raw swiss-roll point for parameter `t`.
pub fn swiss_roll_point(t: f64) -> [f64; 2] {
    [t * t.cos(), t * t.sin()]
}

/// Swiss roll `(t cos t, t sin t)` with `t ~ U[1.5 pi, 4.5 pi]`, jittered and standardized.
pub fn gen_swiss_roll<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Result<Dataset> {
    check_n(n)?;
    let raw = (0..n)
        .map(|_| {
            let t = rng.random_range(1.5 * PI..=4.5 * PI);
            let [x, y] = swiss_roll_point(t);
            let ex: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            vec![x + noise_std * ex, y + noise_std * ey]
        })
        .collect();
    finish(raw, rng)
}

pub fn gen_circle<R: Rng + ?Sized>(n: usize, radius: f64, noise_std: f64, rng: &mut R) -> Result<Dataset> {
    check_n(n)?;
    let raw = (0..n)
        .map(|_| {
            let a = rng.random_range(0.0..2.0 * PI);
            let ex: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            vec![radius * a.cos() + noise_std * ex, radius * a.sin() + noise_std * ey]
        })
        .collect();
    finish(raw, rng)
}

/// Raw draws from a diagonal Gaussian mixture, with the component of each draw.
pub fn sample_gmm<R: Rng + ?Sized>(
    n: usize,
    means: &[Vec<f64>],
    stds: &[Vec<f64>],
    weights: &[f64],
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    check_n(n)?;
    if means.is_empty() || means.len() != stds.len() || means.len() != weights.len() {
        return Err(WalkbackError::Config(
            "mixture needs matching means, stds and weights".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(WalkbackError::Config(format!(
            "mixture weights must be normalized, sum is {sum}"
        )));
    }
    let dim = means[0].len();
    for (m, s) in means.iter().zip(stds) {
        check_dim(dim, m.len(), "mixture mean")?;
        check_dim(dim, s.len(), "mixture std")?;
    }
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = weights.len() - 1;
        for (j, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let p = (0..dim)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                means[k][i] + stds[k][i] * z
            })
            .collect();
        points.push(p);
        labels.push(k);
    }
    Ok((points, labels))
}

pub fn gen_gmm<R: Rng + ?Sized>(
    n: usize,
    means: &[Vec<f64>],
    stds: &[Vec<f64>],
    weights: &[f64],
    rng: &mut R,
) -> Result<Dataset> {
    let (raw, _) = sample_gmm(n, means, stds, weights, rng)?;
    finish(raw, rng)
}

/// Reads one point per row. A first row that does not parse as numbers is
/// treated as a header.
pub fn load_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(p) => {
                if let Some(first) = points.first() {
                    let first: &Vec<f64> = first;
                    if p.len() != first.len() {
                        return Err(WalkbackError::Parse {
                            line,
                            message: format!("row {line} has {} values, expected {}", p.len(), first.len()),
                        });
                    }
                }
                points.push(p);
            }
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(WalkbackError::Parse {
                    line,
                    message: format!("row {line}: {e}"),
                })
            }
        }
    }
    if points.is_empty() {
        return Err(WalkbackError::Usage(format!("{} contains no points", path.display())));
    }
    Ok(points)
}

/// Writes points with shortest round-trip formatting, optionally under a
/// `x0,x1,...` header. The file is replaced atomically.
pub fn save_csv(points: &[Vec<f64>], path: &Path, header: bool) -> Result<()> {
    let tmp = temp_path(path);
    {
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(&tmp)?;
        let dim = points.first().map_or(0, Vec::len);
        if header && dim > 0 {
            w.write_record((0..dim).map(|i| format!("x{i}")))?;
        }
        for p in points {
            w.write_record(p.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` between two samples
/// (V-statistic form).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn mean_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for x in a {
            for y in b {
                total += x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            }
        }
        total / (a.len() * b.len()) as f64
    }
    2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_point_lies_on_the_spiral() {
        let t = 2.0 * PI;
        assert_eq!(swiss_roll_point(t), [t, t * (2.0 * PI).sin()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = gen_swiss_roll(1, 0.0, &mut rng).unwrap();
        assert_eq!(ds.len(), 1);
        // single points standardize to the origin
        assert_eq!(ds.points[0], vec![0.0, 0.0]);
    }

    #[test]
    fn output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = gen_swiss_roll(5000, 0.1, &mut rng).unwrap();
        let s = Scaler::fit(&ds.points).unwrap();
        for d in 0..2 {
            assert!(s.mean[d].abs() < 1e-10);
            assert!((s.std[d] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn radius_matches_the_parametrization() {
        // radius = t, uniform on [1.5 pi, 4.5 pi]
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let ds = gen_swiss_roll(n, 0.0, &mut rng).unwrap();
        let mut r: Vec<f64> = ds
            .points
            .iter()
            .map(|z| {
                let x = ds.scaler.inverse(z);
                x[0].hypot(x[1])
            })
            .collect();
        r.sort_by(f64::total_cmp);
        let cdf = |x: f64| ((x - 1.5 * PI) / (3.0 * PI)).clamp(0.0, 1.0);
        let d = r
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // asymptotic 1% critical value
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn generators_are_reproducible() {
        let a = gen_swiss_roll(100, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gen_swiss_roll(100, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = gen_circle(97, 2.0, 0.1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut all: Vec<usize> = ds
            .splits
            .train
            .iter()
            .chain(&ds.splits.validation)
            .chain(&ds.splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
        assert_eq!(ds.splits.train.len(), 78);
    }

    #[test]
    fn scaler_inverts() {
        let ds = gen_circle(200, 3.0, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        for z in &ds.points {
            let back = ds.scaler.transform(&ds.scaler.inverse(z));
            for (a, b) in back.iter().zip(z) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_circle_has_constant_radius() {
        let ds = gen_circle(50, 2.5, 0.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for z in &ds.points {
            let x = ds.scaler.inverse(z);
            assert!((x[0].hypot(x[1]) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_gmm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let (pts, _) = sample_gmm(n, &[vec![1.0, -2.0]], &[vec![0.5, 2.0]], &[1.0], &mut rng).unwrap();
        let s = Scaler::fit(&pts).unwrap();
        for (d, (m, sd)) in [(1.0, 0.5), (-2.0, 2.0)].into_iter().enumerate() {
            assert!((s.mean[d] - m).abs() < 3.0 * sd / (n as f64).sqrt());
            // se of the sample std is about sd / sqrt(2n)
            assert!((s.std[d] - sd).abs() < 3.0 * sd / (2.0 * n as f64).sqrt());
        }
    }

    #[test]
    fn gmm_occupancy_within_binomial_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let (_, labels) = sample_gmm(
            n,
            &[vec![0.0], vec![5.0]],
            &[vec![1.0], vec![1.0]],
            &[0.3, 0.7],
            &mut rng,
        )
        .unwrap();
        let frac = labels.iter().filter(|&&k| k == 0).count() as f64 / n as f64;
        assert!((frac - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n as f64).sqrt());
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(gen_gmm(
            10,
            &[vec![0.0], vec![1.0]],
            &[vec![1.0], vec![1.0]],
            &[0.5, 0.6],
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        let pts = vec![
            vec![0.1 + 0.2, -1e-300, 123456.789012345678],
            vec![f64::MIN_POSITIVE, 1.0 / 3.0, -0.0],
        ];
        for header in [false, true] {
            save_csv(&pts, &path, header).unwrap();
            let back = load_csv(&path).unwrap();
            for (a, b) in back.iter().flatten().zip(pts.iter().flatten()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "").unwrap();
        assert!(load_csv(&path).is_err());
    }

    #[test]
    fn mixed_width_rows_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1,2\n3,4\n5\n").unwrap();
        match load_csv(&path) {
            Err(WalkbackError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("row 3"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn energy_distance_basics() {
        let a = vec![vec![0.0], vec![1.0]];
        assert_eq!(energy_distance(&a, &a), 0.0);
        // 2 * 1 - 0 - 0 for two point masses at distance 1
        assert_eq!(energy_distance(&[vec![0.0]], &[vec![1.0]]), 2.0);
    }
}
