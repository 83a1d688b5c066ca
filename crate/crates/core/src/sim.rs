//! Simulation design and Monte Carlo drivers.
//!
//! Predictors `X₁ᵢ(t) = ξᵢ₁ sin(2πt) + ξᵢ₂ t²` (dense) and
//! `X₂ᵢ(t) = ζᵢ cos(2πt)` (sparse), coefficients `β₀(t) = t + t^{1/5}`,
//! `β₁(s,t) = sin(2πs) cos(πt)`, `β₂(s,t) = sin(4πs) cos(2πt)`, both lags
//! `[0.1, 0.4]`, and normal measurement error at a fixed signal-to-noise ratio.
//!
//! Random numbers come from ChaCha8 streams keyed by `(seed, replication)`
//! with one stream per `(subject, variable)`, so a subject's draws do not
//! depend on the sample size or on thread scheduling.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::basis::QuadratureRule;
use crate::error::{Error, Result};
use crate::grid::linspace;
use crate::model::{
    coefficient_surface, FunctionalDataset, LagDesign, LagSystem, LagWindow, ModelConfig, ModelFit, Predictor, Rho,
    SmoothedComponents,
};
use crate::selection::{npe, select_hyperparameters, InducedPanel, SearchSpace};
use crate::smoothing::{DenseFunctionalPanel, SparseFunctionalSample};

const SCORES: u64 = 0;
const Y_TIMES: u64 = 1;
const X2_TIMES: u64 = 2;
const Y_NOISE: u64 = 3;
const X1_NOISE: u64 = 4;
const X2_NOISE: u64 = 5;
const STREAMS_PER_SUBJECT: u64 = 8;

/// Subject index used for held-out subjects, far from any training index.
const HELD_OUT_BASE: usize = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub grid_size: usize,
    /// Inclusive range of response observation counts.
    pub m_y: (usize, usize),
    pub m_x2: (usize, usize),
    /// Responses are observed only at grid points at or after this time.
    pub response_start: f64,
    pub lags: LagWindow,
    /// Ratio of the mean squared latent deviation from the mean curve to the
    /// noise variance; `f64::INFINITY` disables noise.
    pub snr: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            grid_size: 100,
            m_y: (20, 50),
            m_x2: (30, 50),
            response_start: 0.4,
            lags: LagWindow::new(0.1, 0.4).expect("valid"),
            snr: 20.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..*self }
    }

    pub fn grid(&self) -> Vec<f64> {
        linspace(0.0, 1.0, self.grid_size)
    }

    fn response_indices(&self) -> Vec<usize> {
        self.grid()
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= self.response_start - 1e-12)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("simulation needs at least one subject".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("simulation grid needs at least two points".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        let available_y = self.response_indices().len();
        let check = |name: &str, (lo, hi): (usize, usize), available: usize| {
            if lo == 0 || lo > hi || hi > available {
                Err(Error::Config(format!(
                    "{name} count range [{lo}, {hi}] does not fit {available} grid points"
                )))
            } else {
                Ok(())
            }
        };
        check("response", self.m_y, available_y)?;
        check("sparse predictor", self.m_x2, self.grid_size)
    }
}

pub fn beta0(t: f64) -> f64 {
    t + t.powf(0.2)
}

pub fn beta1(s: f64, t: f64) -> f64 {
    (2.0 * PI * s).sin() * (PI * t).cos()
}

pub fn beta2(s: f64, t: f64) -> f64 {
    (4.0 * PI * s).sin() * (2.0 * PI * t).cos()
}

/// The three latent scores `(ξᵢ₁, ξᵢ₂, ζᵢ)` of one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub xi1: f64,
    pub xi2: f64,
    pub zeta: f64,
}

impl Scores {
    pub fn x1(&self, t: f64) -> f64 {
        self.xi1 * (2.0 * PI * t).sin() + self.xi2 * t * t
    }

    pub fn x2(&self, t: f64) -> f64 {
        self.zeta * (2.0 * PI * t).cos()
    }
}

/// Latent response `β₀(t) + ξᵢ₁A₁(t) + ξᵢ₂A₂(t) + ζᵢA₃(t)` where the `A`s are
/// the lag integrals of the coefficient surfaces against the predictor components.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    rule: QuadratureRule,
}

impl ResponseModel {
    pub fn new(lags: LagWindow) -> Self {
        Self {
            rule: QuadratureRule::gauss_legendre(40, lags.interval()).expect("valid rule"),
        }
    }

    /// `(A₁(t), A₂(t), A₃(t))`.
    pub fn components(&self, t: f64) -> [f64; 3] {
        let mut a = [0.0; 3];
        for (&s, &w) in self.rule.nodes().iter().zip(self.rule.weights()) {
            let u = t - s;
            a[0] += w * beta1(s, t) * (2.0 * PI * u).sin();
            a[1] += w * beta1(s, t) * u * u;
            a[2] += w * beta2(s, t) * (2.0 * PI * u).cos();
        }
        a
    }

    pub fn signal(&self, scores: &Scores, t: f64) -> f64 {
        let a = self.components(t);
        scores.xi1 * a[0] + scores.xi2 * a[1] + scores.zeta * a[2]
    }

    pub fn response(&self, scores: &Scores, t: f64) -> f64 {
        beta0(t) + self.signal(scores, t)
    }
}

/// Noise variances used for each variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevels {
    pub y: f64,
    pub x1: f64,
    pub x2: f64,
}

/// A generated dataset together with the noiseless truth behind it.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub data: FunctionalDataset,
    pub scores: Vec<Scores>,
    /// Latent values at every observation, aligned with the observed samples.
    pub latent_y: Vec<Vec<f64>>,
    pub latent_x1: DMatrix<f64>,
    pub latent_x2: Vec<Vec<f64>>,
    pub noise: NoiseLevels,
    pub config: SimConfig,
}

fn stream(seed: u64, replication: u64, subject: usize, variable: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replication.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(subject as u64 * STREAMS_PER_SUBJECT + variable);
    rng
}

fn normals(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

fn sorted_subset(rng: &mut ChaCha8Rng, pool: &[usize], range: (usize, usize)) -> Vec<usize> {
    let m = rng.gen_range(range.0..=range.1);
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), m).into_iter().map(|k| pool[k]).collect();
    picked.sort_unstable();
    picked
}

fn mean_square(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    sum / count as f64
}

struct SubjectDraw {
    scores: Scores,
    y_idx: Vec<usize>,
    x2_idx: Vec<usize>,
    y_noise: Vec<f64>,
    x1_noise: Vec<f64>,
    x2_noise: Vec<f64>,
}

fn draw_subject(cfg: &SimConfig, replication: u64, subject: usize, y_pool: &[usize], all: &[usize]) -> SubjectDraw {
    let mut rng = stream(cfg.seed, replication, subject, SCORES);
    let z = normals(&mut rng, 3);
    let y_idx = sorted_subset(&mut stream(cfg.seed, replication, subject, Y_TIMES), y_pool, cfg.m_y);
    let x2_idx = sorted_subset(&mut stream(cfg.seed, replication, subject, X2_TIMES), all, cfg.m_x2);
    SubjectDraw {
        scores: Scores {
            xi1: z[0],
            xi2: z[1],
            zeta: z[2],
        },
        y_noise: normals(&mut stream(cfg.seed, replication, subject, Y_NOISE), y_idx.len()),
        x1_noise: normals(&mut stream(cfg.seed, replication, subject, X1_NOISE), cfg.grid_size),
        x2_noise: normals(&mut stream(cfg.seed, replication, subject, X2_NOISE), x2_idx.len()),
        y_idx,
        x2_idx,
    }
}

/// Replication 0 of the design.
pub fn generate_dataset(cfg: &SimConfig) -> Result<SimulatedDataset> {
    generate_replication(cfg, 0)
}

pub fn generate_replication(cfg: &SimConfig, replication: u64) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let grid = cfg.grid();
    let y_pool = cfg.response_indices();
    let all: Vec<usize> = (0..cfg.grid_size).collect();
    let model = ResponseModel::new(cfg.lags);
    let y_table: Vec<[f64; 3]> = grid.iter().map(|&t| model.components(t)).collect();

    let draws: Vec<SubjectDraw> = (0..cfg.n)
        .into_par_iter()
        .map(|i| draw_subject(cfg, replication, i, &y_pool, &all))
        .collect();
    let scores: Vec<Scores> = draws.iter().map(|d| d.scores).collect();
    let latent_y_at = |s: &Scores, j: usize| {
        let a = y_table[j];
        beta0(grid[j]) + s.xi1 * a[0] + s.xi2 * a[1] + s.zeta * a[2]
    };

    let sd = |moment: f64| if cfg.snr.is_infinite() { 0.0 } else { (moment / cfg.snr).sqrt() };
    let noise = NoiseLevels {
        y: sd(mean_square(scores.iter().flat_map(|s| y_pool.iter().map(|&j| latent_y_at(s, j) - beta0(grid[j])).collect::<Vec<_>>()))).powi(2),
        x1: sd(mean_square(scores.iter().flat_map(|s| grid.iter().map(move |&t| s.x1(t))))).powi(2),
        x2: sd(mean_square(scores.iter().flat_map(|s| grid.iter().map(move |&t| s.x2(t))))).powi(2),
    };
    let (sd_y, sd_x1, sd_x2) = (noise.y.sqrt(), noise.x1.sqrt(), noise.x2.sqrt());

    let ids: Vec<String> = (0..cfg.n).map(|i| format!("s{:04}", i + 1)).collect();
    let latent_x1 = DMatrix::from_fn(cfg.n, cfg.grid_size, |i, j| scores[i].x1(grid[j]));
    let x1_values = DMatrix::from_fn(cfg.n, cfg.grid_size, |i, j| latent_x1[(i, j)] + sd_x1 * draws[i].x1_noise[j]);
    let mut y = Vec::with_capacity(cfg.n);
    let mut x2 = Vec::with_capacity(cfg.n);
    let mut latent_y = Vec::with_capacity(cfg.n);
    let mut latent_x2 = Vec::with_capacity(cfg.n);
    for (i, d) in draws.iter().enumerate() {
        let ly: Vec<f64> = d.y_idx.iter().map(|&j| latent_y_at(&d.scores, j)).collect();
        let lx: Vec<f64> = d.x2_idx.iter().map(|&j| d.scores.x2(grid[j])).collect();
        let oy = ly.iter().zip(&d.y_noise).map(|(v, e)| v + sd_y * e).collect();
        let ox = lx.iter().zip(&d.x2_noise).map(|(v, e)| v + sd_x2 * e).collect();
        y.push(SparseFunctionalSample::new(ids[i].clone(), d.y_idx.iter().map(|&j| grid[j]).collect(), oy)?);
        x2.push(SparseFunctionalSample::new(ids[i].clone(), d.x2_idx.iter().map(|&j| grid[j]).collect(), ox)?);
        latent_y.push(ly);
        latent_x2.push(lx);
    }
    let panel = DenseFunctionalPanel::new(grid, ids, x1_values)?;
    Ok(SimulatedDataset {
        data: FunctionalDataset::new(y, panel, x2)?,
        scores,
        latent_y,
        latent_x1,
        latent_x2,
        noise,
        config: *cfg,
    })
}

/// An extra subject drawn from the same design, independent of the training sample.
#[derive(Debug, Clone)]
pub struct HeldOutSubject {
    pub scores: Scores,
    pub x1: SparseFunctionalSample,
    pub x2: SparseFunctionalSample,
}

pub fn held_out_subject(sim: &SimulatedDataset, replication: u64, k: usize) -> Result<HeldOutSubject> {
    let cfg = &sim.config;
    let grid = cfg.grid();
    let all: Vec<usize> = (0..cfg.grid_size).collect();
    let d = draw_subject(cfg, replication, HELD_OUT_BASE + k, &cfg.response_indices(), &all);
    let id = format!("h{k:04}");
    let (sd1, sd2) = (sim.noise.x1.sqrt(), sim.noise.x2.sqrt());
    let x1 = grid.iter().zip(&d.x1_noise).map(|(&t, e)| d.scores.x1(t) + sd1 * e).collect();
    let x2_times: Vec<f64> = d.x2_idx.iter().map(|&j| grid[j]).collect();
    let x2 = x2_times.iter().zip(&d.x2_noise).map(|(&t, e)| d.scores.x2(t) + sd2 * e).collect();
    Ok(HeldOutSubject {
        scores: d.scores,
        x1: SparseFunctionalSample::new(id.clone(), grid.clone(), x1)?,
        x2: SparseFunctionalSample::new(id, x2_times, x2)?,
    })
}

/// Fit with the true lags and the regularization pair of smallest in-sample NPE.
#[derive(Debug, Clone)]
pub struct TrueLagFit {
    pub fit: ModelFit,
    /// In-sample NPE against the observed responses.
    pub npe: f64,
    /// In-sample NPE of the same predictions against the noiseless responses.
    pub npe_latent: f64,
}

pub fn fit_true_lags(sim: &SimulatedDataset, model: &ModelConfig, rhos: &[Rho]) -> Result<TrueLagFit> {
    if rhos.is_empty() {
        return Err(Error::Config("at least one regularization pair is required".into()));
    }
    let data = &sim.data;
    let components = SmoothedComponents::estimate(data, model)?;
    let design = LagDesign::new(sim.config.lags, sim.config.lags, model)?;
    let all: Vec<usize> = (0..data.n_subjects()).collect();
    let recovered = all
        .par_iter()
        .map(|&i| components.recovery().recover(&data.x1_sample(i), &data.x2()[i]))
        .collect::<Result<Vec<_>>>()?;
    let responses: Vec<&SparseFunctionalSample> = data.y().iter().collect();
    let panel = InducedPanel::new(&design, &all, &recovered, &responses)?;
    let observed = panel.observed();
    let start = design.valid_start();
    let latent: Vec<f64> = all
        .iter()
        .flat_map(|&i| {
            data.y()[i]
                .times()
                .iter()
                .zip(&sim.latent_y[i])
                .filter(move |(&t, _)| t >= start)
                .map(|(_, &v)| v)
        })
        .collect();
    let system = LagSystem::new(&components, design, model.eval_grid_size)?;
    let mut best: Option<(TrueLagFit, f64)> = None;
    for &rho in rhos {
        let fit = system.solve(rho)?;
        let predicted = panel.predictions(&fit)?;
        let value = npe(&predicted, &observed)?.value;
        if best.as_ref().map_or(true, |(_, v)| value < *v) {
            let npe_latent = npe(&predicted, &latent)?.value;
            best = Some((
                TrueLagFit {
                    fit,
                    npe: value,
                    npe_latent,
                },
                value,
            ));
        }
    }
    Ok(best.expect("nonempty rho list").0)
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std_error: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub n: usize,
    pub reps: usize,
    /// In-sample NPE against observed responses.
    pub npe: Summary,
    /// Same predictions scored against the noiseless responses.
    pub npe_latent: Summary,
}

/// In-sample NPE at the true lags for every sample size, averaged over replications.
pub fn run_table1(template: &SimConfig, n_list: &[usize], reps: usize, model: &ModelConfig, rhos: &[Rho]) -> Result<Vec<Table1Row>> {
    if reps == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let cfg = template.with_n(n);
            let fits = (0..reps as u64)
                .into_par_iter()
                .map(|r| {
                    let sim = generate_replication(&cfg, r)?;
                    let f = fit_true_lags(&sim, model, rhos)?;
                    Ok((f.npe, f.npe_latent))
                })
                .collect::<Result<Vec<_>>>()?;
            let (observed, latent): (Vec<f64>, Vec<f64>) = fits.into_iter().unzip();
            Ok(Table1Row {
                n,
                reps,
                npe: Summary::of(&observed),
                npe_latent: Summary::of(&latent),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagExperiment {
    pub target: f64,
    /// Selected shared upper lag per replication.
    pub selections: Vec<f64>,
    pub hits: usize,
}

/// Shared-window lag search with the lower lag fixed at the design's value.
pub fn run_lag_experiment(
    template: &SimConfig,
    uppers: &[f64],
    reps: usize,
    model: &ModelConfig,
    rhos: &[Rho],
    folds: usize,
) -> Result<LagExperiment> {
    if reps == 0 || uppers.is_empty() {
        return Err(Error::Config("lag experiment needs replications and candidates".into()));
    }
    let lower = template.lags.lower();
    let windows = uppers
        .iter()
        .map(|&u| LagWindow::new(lower, u))
        .collect::<Result<Vec<_>>>()?;
    let space = SearchSpace::shared(&windows, rhos.to_vec(), folds);
    let selections = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let sim = generate_replication(template, r)?;
            let result = select_hyperparameters(&sim.data, &space, fold_seed(template.seed, r), model)?;
            Ok(result.best_lags.0.upper())
        })
        .collect::<Result<Vec<_>>>()?;
    let target = template.lags.upper();
    let hits = selections.iter().filter(|&&u| (u - target).abs() < 1e-12).count();
    Ok(LagExperiment {
        target,
        selections,
        hits,
    })
}

/// Seed for the fold shuffle of a replication.
pub fn fold_seed(seed: u64, replication: u64) -> u64 {
    let mut z = seed ^ replication.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRow {
    pub n: usize,
    pub reps: usize,
    /// Sup-norm error of the coefficient surfaces over lag window × valid interval.
    pub beta1_error: Summary,
    pub beta2_error: Summary,
    /// Mean absolute error of held-out predictions against the noiseless responses.
    pub prediction_error: Summary,
}

/// Coefficient-surface and held-out prediction errors of true-lag fits.
pub fn run_consistency(
    template: &SimConfig,
    n_list: &[usize],
    reps: usize,
    held_out: usize,
    model: &ModelConfig,
    rhos: &[Rho],
) -> Result<Vec<ConsistencyRow>> {
    if reps == 0 || held_out == 0 {
        return Err(Error::Config("consistency run needs replications and held-out subjects".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let cfg = template.with_n(n);
            let errors = (0..reps as u64)
                .into_par_iter()
                .map(|r| {
                    let sim = generate_replication(&cfg, r)?;
                    let f = fit_true_lags(&sim, model, rhos)?;
                    let (e1, e2) = surface_errors(&f.fit)?;
                    let e3 = held_out_error(&sim, &f.fit, r, held_out)?;
                    Ok([e1, e2, e3])
                })
                .collect::<Result<Vec<_>>>()?;
            let column = |k: usize| Summary::of(&errors.iter().map(|e| e[k]).collect::<Vec<_>>());
            Ok(ConsistencyRow {
                n,
                reps,
                beta1_error: column(0),
                beta2_error: column(1),
                prediction_error: column(2),
            })
        })
        .collect()
}

/// Sup-norm errors of both coefficient surfaces on a 31 × 61 grid.
pub fn surface_errors(fit: &ModelFit) -> Result<(f64, f64)> {
    let (lags1, lags2) = fit.lags();
    let (lo, hi) = fit.valid_interval();
    let t_grid = linspace(lo, hi, 61);
    let sup = |which: Predictor, lags: LagWindow, truth: fn(f64, f64) -> f64| -> Result<f64> {
        let s_grid = linspace(lags.lower(), lags.upper(), 31);
        let est = coefficient_surface(fit, which, &s_grid, &t_grid)?;
        let mut worst = 0.0f64;
        for (i, &s) in s_grid.iter().enumerate() {
            for (j, &t) in t_grid.iter().enumerate() {
                worst = worst.max((est[(i, j)] - truth(s, t)).abs());
            }
        }
        Ok(worst)
    };
    Ok((sup(Predictor::Dense, lags1, beta1)?, sup(Predictor::Sparse, lags2, beta2)?))
}

/// Mean `|Ŷ*(t) − Y*(t)|` over held-out subjects and the grid points of the
/// valid interval, where `Y*` is the noiseless response.
pub fn held_out_error(sim: &SimulatedDataset, fit: &ModelFit, replication: u64, count: usize) -> Result<f64> {
    let (lo, _) = fit.valid_interval();
    let times: Vec<f64> = sim.config.grid().into_iter().filter(|&t| t >= lo).collect();
    let truth = ResponseModel::new(sim.config.lags);
    let mut total = 0.0;
    for k in 0..count {
        let subject = held_out_subject(sim, replication, k)?;
        let predicted = crate::model::predict(fit, &subject.x1, &subject.x2, &times)?;
        total += predicted
            .iter()
            .zip(&times)
            .map(|(p, &t)| (p - truth.response(&subject.scores, t)).abs())
            .sum::<f64>()
            / times.len() as f64;
    }
    Ok(total / count as f64)
}
