//! Regret-scaling sweeps: many independent runs over a grid of horizons,
//! with a log-log fit of mean regret against the effective horizon.

use nacb_core::chain::{optimal_gain, DEFAULT_ENUMERATION_CAP};
use nacb_core::envs::{build, EnvSpec};
use nacb_core::nacb::{run_seeded, schedule_for_horizon, NacbConfig, Schedule};
use nacb_core::{Features, Mdp, Policy, Result};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Fewest grid points and seeds for which a slope is fitted.
pub const MIN_FIT_POINTS: usize = 4;
pub const MIN_FIT_SEEDS: usize = 5;

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub env: EnvSpec,
    /// Target horizons; each is turned into `(K, H, B)` by the schedule rule.
    pub targets: Vec<usize>,
    pub seeds: usize,
    /// Rates and switches shared by every run; the schedule and seed are
    /// overwritten per cell.
    pub base: NacbConfig,
    /// Optimal gain; computed by enumeration when absent.
    pub j_star: Option<f64>,
}

impl SweepConfig {
    pub fn new(env: EnvSpec, targets: Vec<usize>, seeds: usize) -> Self {
        Self { env, targets, seeds, base: NacbConfig::default(), j_star: None }
    }

    /// `points` targets spaced geometrically from `t_min` to `t_max`.
    pub fn geometric(env: EnvSpec, t_min: usize, t_max: usize, points: usize, seeds: usize) -> Self {
        Self::new(env, geometric_grid(t_min, t_max, points), seeds)
    }
}

pub fn geometric_grid(t_min: usize, t_max: usize, points: usize) -> Vec<usize> {
    match points {
        0 => vec![],
        1 => vec![t_min],
        _ => {
            let (lo, hi) = ((t_min as f64).ln(), (t_max as f64).ln());
            let mut grid: Vec<usize> = (0..points)
                .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp().round() as usize)
                .collect();
            grid.dedup();
            grid
        }
    }
}

/// One `(T, seed)` run.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub target: usize,
    pub effective: usize,
    pub seed: u64,
    pub regret: Option<f64>,
    pub error: Option<String>,
}

/// Aggregate over seeds at one grid point.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub target: usize,
    pub effective: usize,
    pub epochs: usize,
    pub inner: usize,
    pub batch: usize,
    pub runs: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
}

/// Least-squares fit of `log(mean Reg)` on `log T'`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    /// 95% Student-t interval for the slope.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub env: String,
    pub j_star: f64,
    pub seeds: usize,
    pub cells: Vec<SweepCell>,
    pub points: Vec<GridPoint>,
    pub fit: Option<SlopeFit>,
    /// Why no slope was fitted, when it was not.
    pub fit_skipped: Option<String>,
    /// Mean regret never decreases along the grid (a diagnostic only).
    pub regret_nondecreasing: bool,
    /// `mean Reg / T'` strictly decreases along the grid.
    pub per_step_decreasing: bool,
}

impl SweepResult {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    /// Rows of the stable CSV: `env,target,effective,seed,regret,regret_per_step,error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("env,target,effective,seed,regret,regret_per_step,error\n");
        for c in &self.cells {
            let (reg, per) = match c.regret {
                Some(r) => (format!("{r}"), format!("{}", r / c.effective as f64)),
                None => (String::new(), String::new()),
            };
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out.push_str(&format!("{},{},{},{},{},{},{}\n", self.env, c.target, c.effective, c.seed, reg, per, err));
        }
        out
    }
}

/// Caps worker threads at `NACB_THREADS` when set to a positive integer.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("NACB_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().expect("thread pool")
}

/// Runs every `(T, seed)` cell; cells run concurrently, results are
/// assembled in grid order so the output does not depend on scheduling.
pub fn regret_sweep(config: &SweepConfig) -> Result<SweepResult> {
    let mdp: Mdp = build(&config.env)?;
    let j_star = match config.j_star {
        Some(j) => j,
        None => optimal_gain(&mdp, DEFAULT_ENUMERATION_CAP)?.j_star,
    };
    let schedules: Vec<Schedule> = config.targets.iter().map(|&t| schedule_for_horizon(t)).collect::<Result<_>>()?;
    let policy0 = Policy::tabular(mdp.n_states(), mdp.n_actions());
    let features = Features::one_hot(mdp.n_states());

    let jobs: Vec<(usize, u64)> = (0..schedules.len()).flat_map(|i| (0..config.seeds as u64).map(move |s| (i, s))).collect();
    let cells: Vec<SweepCell> = thread_pool().install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| {
                let schedule = schedules[i];
                let run_config = NacbConfig {
                    seed: config.base.seed.wrapping_add(seed),
                    j_star: Some(j_star),
                    ..config.base.clone()
                }
                .with_schedule(schedule);
                let outcome = run_seeded(&mdp, &policy0, &features, &run_config);
                SweepCell {
                    target: schedule.target,
                    effective: schedule.effective,
                    seed: run_config.seed,
                    regret: outcome.as_ref().ok().map(|t| t.regret()),
                    error: outcome.err().map(|e| e.to_string()),
                }
            })
            .collect()
    });

    let points: Vec<GridPoint> = schedules
        .iter()
        .map(|sch| {
            let regrets: Vec<f64> = cells.iter().filter(|c| c.target == sch.target).filter_map(|c| c.regret).collect();
            let (mean, std) = mean_std(&regrets);
            GridPoint {
                target: sch.target,
                effective: sch.effective,
                epochs: sch.epochs,
                inner: sch.inner,
                batch: sch.batch,
                runs: regrets.len(),
                mean_regret: mean,
                std_regret: std,
            }
        })
        .collect();

    let regret_nondecreasing = points.windows(2).all(|w| w[1].mean_regret >= w[0].mean_regret);
    let per_step_decreasing = points.len() >= 2
        && points.windows(2).all(|w| per_step(&w[1]) < per_step(&w[0]));
    let (fit, fit_skipped) = match fit_reason(config, &points) {
        Some(reason) => (None, Some(reason)),
        None => {
            let xs: Vec<f64> = points.iter().map(|p| (p.effective as f64).ln()).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.mean_regret.ln()).collect();
            (Some(fit_line(&xs, &ys)), None)
        }
    };
    Ok(SweepResult {
        env: config.env.to_string(),
        j_star,
        seeds: config.seeds,
        cells,
        points,
        fit,
        fit_skipped,
        regret_nondecreasing,
        per_step_decreasing,
    })
}

fn per_step(p: &GridPoint) -> f64 {
    p.mean_regret / p.effective as f64
}

fn fit_reason(config: &SweepConfig, points: &[GridPoint]) -> Option<String> {
    if !config.env.has_choice() {
        return Some("degenerate: the environment offers no choice of action".into());
    }
    if points.len() < MIN_FIT_POINTS {
        return Some(format!("undefined: {} grid point(s), need {MIN_FIT_POINTS}", points.len()));
    }
    if config.seeds < MIN_FIT_SEEDS || points.iter().any(|p| p.runs < MIN_FIT_SEEDS) {
        return Some(format!("undefined: fewer than {MIN_FIT_SEEDS} successful seeds at some grid point"));
    }
    if points.iter().any(|p| !(p.mean_regret > 0.0)) {
        return Some("undefined: nonpositive mean regret".into());
    }
    None
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Ordinary least squares with a 95% interval on the slope. Needs at least
/// three points for the interval to be finite.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> SlopeFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let (std_error, half) = if xs.len() > 2 {
        let se = (sse / (n - 2.0) / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, n - 2.0).expect("positive degrees of freedom").inverse_cdf(0.975);
        (se, t * se)
    } else {
        (f64::NAN, f64::INFINITY)
    };
    SlopeFit { slope, intercept, std_error, ci_low: slope - half, ci_high: slope + half }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_geometric() {
        assert_eq!(geometric_grid(1 << 14, 1 << 20, 7), (14..=20).map(|k| 1usize << k).collect::<Vec<_>>());
        assert_eq!(geometric_grid(100, 1000, 1), vec![100]);
        assert!(geometric_grid(100, 1000, 0).is_empty());
    }

    #[test]
    fn line_fit_recovers_exact_slope() {
        let xs: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 1.0).collect();
        let f = fit_line(&xs, &ys);
        assert!((f.slope - 0.5).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!(f.ci_high - f.ci_low < 1e-9);
    }

    #[test]
    fn cycle2_sweep_is_degenerate() {
        let r = regret_sweep(&SweepConfig::geometric(EnvSpec::Cycle2, 256, 4096, 4, 5)).unwrap();
        assert!(r.fit.is_none() && r.fit_skipped.as_deref().unwrap().starts_with("degenerate"));
        assert!(r.points.iter().all(|p| p.mean_regret.abs() <= 0.5 + 1e-12));
    }

    #[test]
    fn single_point_has_undefined_slope() {
        let r = regret_sweep(&SweepConfig::new(EnvSpec::Bandit, vec![1024], 5)).unwrap();
        assert!(r.fit.is_none());
        assert!(r.fit_skipped.unwrap().starts_with("undefined"));
        assert!(!r.per_step_decreasing);
    }

    #[test]
    fn sweep_is_reproducible_and_csv_is_stable() {
        let c = SweepConfig::new(EnvSpec::Bandit, vec![256, 1024], 3);
        let (a, b) = (regret_sweep(&c).unwrap(), regret_sweep(&c).unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
        let csv = a.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "env,target,effective,seed,regret,regret_per_step,error");
        assert_eq!(csv.lines().count(), 1 + 6);
    }
}
