//! How small must a fixed time-step be to keep agents' events apart?
//!
//! `N` event times are drawn i.i.d. from a distribution; a race occurs when
//! two or more land in the same bin `floor(t / dt)`. For each `N` the study
//! finds the largest `dt` whose race probability stays at or below `delta`
//! and fits `dt = alpha * N^beta` by least squares in log-log space.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream, SimRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventTimeDistribution {
    Exponential { rate: f64 },
    ChiSquared { dof: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl EventTimeDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            EventTimeDistribution::Exponential { rate } => 1.0 / rate,
            EventTimeDistribution::ChiSquared { dof } => dof,
            EventTimeDistribution::Gamma { shape, scale } => shape * scale,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            EventTimeDistribution::Exponential { rate } => format!("exponential(rate={rate})"),
            EventTimeDistribution::ChiSquared { dof } => format!("chi-squared(k={dof})"),
            EventTimeDistribution::Gamma { shape, scale } => format!("gamma(k={shape},theta={scale})"),
        }
    }

    /// The three distributions of the reference study.
    pub fn reference_set() -> [EventTimeDistribution; 3] {
        [
            EventTimeDistribution::Exponential { rate: 1.0 },
            EventTimeDistribution::ChiSquared { dof: 5.0 },
            EventTimeDistribution::Gamma { shape: 5.0, scale: 1.0 },
        ]
    }

    fn sampler(&self) -> Result<Sampler> {
        let bad = |e: &dyn fmt::Display| Error::Domain(format!("{}: {e}", self.name()));
        Ok(match *self {
            EventTimeDistribution::Exponential { rate } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(bad(&"rate must be positive"));
                }
                Sampler::Exponential(rate)
            }
            EventTimeDistribution::ChiSquared { dof } => {
                Sampler::ChiSquared(ChiSquared::new(dof).map_err(|e| bad(&e))?)
            }
            EventTimeDistribution::Gamma { shape, scale } => {
                Sampler::Gamma(Gamma::new(shape, scale).map_err(|e| bad(&e))?)
            }
        })
    }
}

impl fmt::Display for EventTimeDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

enum Sampler {
    Exponential(f64),
    ChiSquared(ChiSquared<f64>),
    Gamma(Gamma<f64>),
}

impl Sampler {
    fn draw(&self, rng: &mut SimRng) -> f64 {
        match self {
            // inverse CDF; 1 - u lies in (0, 1]
            Sampler::Exponential(rate) => -(1.0 - rng.random::<f64>()).ln() / rate,
            Sampler::ChiSquared(d) => d.sample(rng),
            Sampler::Gamma(d) => d.sample(rng),
        }
    }
}

pub fn sample_times(dist: &EventTimeDistribution, n: usize, rng: &mut SimRng) -> Result<Vec<f64>> {
    let s = dist.sampler()?;
    Ok((0..n).map(|_| s.draw(rng)).collect())
}

/// Whether two or more samples share a bin `floor(t / dt)`.
pub fn has_race(samples: &[f64], dt: f64) -> bool {
    let mut bins: Vec<f64> = samples.iter().map(|t| (t / dt).floor()).collect();
    bins.sort_by(f64::total_cmp);
    bins.windows(2).any(|w| w[0] == w[1])
}

/// Fraction of sample sets that contain a race.
pub fn race_fraction(sets: &[Vec<f64>], dt: f64) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().filter(|s| has_race(s, dt)).count() as f64 / sets.len() as f64
}

pub fn race_probability(
    dist: &EventTimeDistribution,
    n: usize,
    dt: f64,
    trials: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Domain("trials must be >= 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let sets = draw_sets(dist, n, trials, rng)?;
    Ok(race_fraction(&sets, dt))
}

fn draw_sets(dist: &EventTimeDistribution, n: usize, trials: usize, rng: &mut SimRng) -> Result<Vec<Vec<f64>>> {
    let s = dist.sampler()?;
    Ok((0..trials).map(|_| (0..n).map(|_| s.draw(rng)).collect()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaceStudyConfig {
    pub trials: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub delta: f64,
    /// Bisection stops once `hi / lo - 1` falls below this.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for RaceStudyConfig {
    fn default() -> Self {
        RaceStudyConfig {
            trials: 10_000,
            n_min: 2,
            n_max: 20,
            delta: 0.1,
            rel_tol: 1e-4,
            max_iter: 200,
        }
    }
}

impl RaceStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Domain("trials must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain("delta must lie in (0, 1)".into()));
        }
        if self.n_min < 2 || self.n_max < self.n_min {
            return Err(Error::Domain("need 2 <= n_min <= n_max".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Domain("rel_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Largest tested `dt` with estimated race probability at most `delta`.
///
/// All probes reuse one set of `trials` draws, so the estimated curve is a
/// deterministic function of `dt`.
pub fn solve_dt(
    dist: &EventTimeDistribution,
    n: usize,
    cfg: &RaceStudyConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::Domain("a race needs at least two samples".into()));
    }
    let sets = draw_sets(dist, n, cfg.trials, rng)?;
    let p = |dt: f64| race_fraction(&sets, dt);
    let mut best = None;
    let note = |dt: f64, ok: bool, best: &mut Option<f64>| {
        if ok && best.is_none_or(|b: f64| dt > b) {
            *best = Some(dt);
        }
    };

    let guess = dist.mean() / (n * n) as f64;
    let (mut lo, mut hi) = (guess, guess);
    let mut iters = 0;
    while p(lo) > cfg.delta {
        lo /= 2.0;
        iters += 1;
        if iters > cfg.max_iter || lo < 1e-300 {
            return Err(Error::Numerical(format!("no dt with p <= {} for n = {n}", cfg.delta)));
        }
    }
    note(lo, true, &mut best);
    while p(hi) <= cfg.delta {
        note(hi, true, &mut best);
        hi *= 2.0;
        iters += 1;
        if iters > cfg.max_iter || !hi.is_finite() {
            return Err(Error::Numerical(format!("race probability never exceeds {} for n = {n}", cfg.delta)));
        }
    }
    lo = best.unwrap_or(lo);
    for _ in 0..cfg.max_iter {
        if hi / lo - 1.0 < cfg.rel_tol {
            break;
        }
        let mid = (lo * hi).sqrt();
        if p(mid) <= cfg.delta {
            note(mid, true, &mut best);
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.ok_or_else(|| Error::Numerical("bisection lost its bracket".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub alpha: f64,
    /// Signed exponent; negative when `dt` shrinks with `n`.
    pub beta: f64,
    pub beta_stderr: f64,
}

/// Least squares on `ln dt = ln alpha + beta ln n`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(n, dt)| !(n > 0.0 && dt > 0.0)) {
        return Err(Error::Fit("power-law fit needs positive data".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx < 1e-12 {
        return Err(Error::Fit("all x values coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let beta = sxy / sxx;
    let intercept = my - beta * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - beta * x).powi(2)).sum();
    let beta_stderr = (ssr / (m - 2.0) / sxx).sqrt();
    Ok(FitResult {
        alpha: intercept.exp(),
        beta,
        beta_stderr,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPoint {
    pub distribution: EventTimeDistribution,
    pub n: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub points: Vec<StudyPoint>,
    pub fits: Vec<(EventTimeDistribution, FitResult)>,
}

/// Runs every `(distribution, n)` cell on its own RNG stream derived from `seed`.
pub fn run_study(dists: &[EventTimeDistribution], cfg: &RaceStudyConfig, seed: u64) -> Result<StudyResult> {
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = (0..dists.len())
        .flat_map(|d| (cfg.n_min..=cfg.n_max).map(move |n| (d, n)))
        .collect();
    let dts: Vec<f64> = cells
        .par_iter()
        .map(|&(d, n)| {
            let mut rng = stream(seed, &[d as u64, n as u64]);
            solve_dt(&dists[d], n, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    let points: Vec<StudyPoint> = cells
        .iter()
        .zip(&dts)
        .map(|(&(d, n), &dt)| StudyPoint {
            distribution: dists[d],
            n,
            dt,
        })
        .collect();
    let fits = dists
        .iter()
        .map(|dist| {
            let xy: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.distribution == *dist)
                .map(|p| (p.n as f64, p.dt))
                .collect();
            Ok((*dist, fit_power_law(&xy)?))
        })
        .collect::<Result<_>>()?;
    Ok(StudyResult { points, fits })
}

/// `distribution,N,dt_solved`
pub fn write_points_csv<W: Write>(points: &[StudyPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["distribution", "N", "dt_solved"])?;
    for p in points {
        w.write_record([p.distribution.name(), p.n.to_string(), p.dt.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `distribution,alpha,beta,beta_stderr,abs_beta`
pub fn write_fits_csv<W: Write>(fits: &[(EventTimeDistribution, FitResult)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["distribution", "alpha", "beta", "beta_stderr", "abs_beta"])?;
    for (d, f) in fits {
        w.write_record([
            d.name(),
            f.alpha.to_string(),
            f.beta.to_string(),
            f.beta_stderr.to_string(),
            f.beta.abs().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A matplotlib script that draws the log-log points and fitted lines from the two CSVs.
pub fn plot_script(points_csv: &str, fits_csv: &str) -> String {
    format!(
        r#"import csv
import matplotlib.pyplot as plt

points = {{}}
with open("{points_csv}") as f:
    for row in csv.DictReader(f):
        points.setdefault(row["distribution"], []).append((int(row["N"]), float(row["dt_solved"])))
fits = {{}}
with open("{fits_csv}") as f:
    for row in csv.DictReader(f):
        fits[row["distribution"]] = (float(row["alpha"]), float(row["beta"]), float(row["beta_stderr"]))

fig, ax = plt.subplots()
for name, pts in points.items():
    ns = [p[0] for p in pts]
    ax.loglog(ns, [p[1] for p in pts], "o", label=name)
    a, b, se = fits[name]
    ax.loglog(ns, [a * n ** b for n in ns], "-", label=f"{{name}} fit: beta={{b:.3f}} ({{se:.3f}})")
ax.set_xlabel("N")
ax.set_ylabel("dt")
ax.legend()
fig.savefig("race_study.png", dpi=150)
"#
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn race_bins() {
        assert!(!has_race(&[1.3], 0.1));
        assert!(has_race(&[2.5, 2.5], 1e-9));
        assert!(!has_race(&[0.4, 1.6], 1.0));
        assert!(has_race(&[0.4, 1.6], 2.0));
    }

    #[test]
    fn noiseless_fit() {
        let pts: Vec<(f64, f64)> = (2..=20).map(|n| (n as f64, 2.0 * (n as f64).powf(-2.2))).collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.beta + 2.2).abs() < 1e-9);
        assert!((f.alpha - 2.0).abs() < 1e-9);
        assert!(f.beta_stderr < 1e-9);
        assert!(fit_power_law(&[(2.0, 1.0), (2.0, 3.0), (2.0, 4.0)]).is_err());
        assert!(fit_power_law(&[(2.0, 1.0), (3.0, 3.0)]).is_err());
    }

    #[test]
    fn moments() {
        let mut rng = SimRng::seed_from_u64(11);
        let n = 1_000_000;
        let exp = sample_times(&EventTimeDistribution::Exponential { rate: 1.0 }, n, &mut rng).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&exp) - 1.0).abs() < 0.01);
        let chi = sample_times(&EventTimeDistribution::ChiSquared { dof: 5.0 }, n, &mut rng).unwrap();
        let m = mean(&chi);
        let var = chi.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - 5.0).abs() < 0.05);
        assert!((var - 10.0).abs() < 0.5);
        let g = sample_times(&EventTimeDistribution::Gamma { shape: 5.0, scale: 1.0 }, n, &mut rng).unwrap();
        assert!((mean(&g) - 5.0).abs() < 0.05);
        assert!(g.iter().chain(&chi).chain(&exp).all(|t| *t >= 0.0));
    }

    #[test]
    fn probability_limits() {
        let d = EventTimeDistribution::Exponential { rate: 1.0 };
        let mut rng = SimRng::seed_from_u64(3);
        assert_eq!(race_probability(&d, 5, 1e-300, 200, &mut rng).unwrap(), 0.0);
        assert_eq!(race_probability(&d, 5, 1e9, 200, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn solved_dt_shrinks_with_n_and_respects_delta() {
        let cfg = RaceStudyConfig {
            trials: 2000,
            ..Default::default()
        };
        let d = EventTimeDistribution::Gamma { shape: 5.0, scale: 1.0 };
        let dt2 = solve_dt(&d, 2, &cfg, &mut SimRng::seed_from_u64(1)).unwrap();
        let dt20 = solve_dt(&d, 20, &cfg, &mut SimRng::seed_from_u64(1)).unwrap();
        assert!(dt20 < dt2);
        let band = 2.0 * (cfg.delta * (1.0 - cfg.delta) / cfg.trials as f64).sqrt();
        let p = race_probability(&d, 20, dt20, cfg.trials, &mut SimRng::seed_from_u64(1)).unwrap();
        assert!(p <= cfg.delta + band, "{p}");
    }
}
