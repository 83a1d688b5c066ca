//! Normalized prediction error, K-fold cross-validation and the
//! hierarchical search over lag windows and regularization.
//!
//! The regularization pair is chosen per lag candidate by in-sample NPE on
//! the full data; the lag candidate is then chosen by cross-validated squared
//! prediction error at its selected pair.

use std::cmp::Ordering;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    FunctionalDataset, LagDesign, LagSystem, LagWindow, ModelConfig, ModelFit, RecoveredSubject, Rho,
    SmoothedComponents,
};
use crate::smoothing::SparseFunctionalSample;

/// Responses with `|Y|` below this are left out of the NPE.
pub const NPE_GUARD: f64 = 1e-8;

/// NPE value together with the number of guarded-out observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Npe {
    pub value: f64,
    pub excluded: usize,
}

/// `(1/N) Σ |Ŷ − Y| / |Y|` over observations with `|Y| >= NPE_GUARD`.
pub fn npe(predicted: &[f64], observed: &[f64]) -> Result<Npe> {
    if predicted.len() != observed.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    let mut total = 0.0;
    let mut kept = 0usize;
    for (&p, &y) in predicted.iter().zip(observed) {
        if y.abs() < NPE_GUARD {
            continue;
        }
        total += (p - y).abs() / y.abs();
        kept += 1;
    }
    let excluded = observed.len() - kept;
    if kept == 0 {
        return Err(Error::UndefinedNpe(excluded));
    }
    Ok(Npe {
        value: total / kept as f64,
        excluded,
    })
}

/// Splits `0..n` into `k` folds by a seeded shuffle; sizes differ by at most one.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("{k} folds for {n} subjects")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % k].push(i);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Induced predictors of a set of subjects at their response times inside
/// the valid interval, independent of the regularization.
#[derive(Debug, Clone)]
pub struct InducedPanel {
    subjects: Vec<PanelSubject>,
}

#[derive(Debug, Clone)]
struct PanelSubject {
    index: usize,
    times: Vec<f64>,
    observed: Vec<f64>,
    induced: Vec<DVector<f64>>,
}

impl InducedPanel {
    /// `recovered[i]` and `responses[i]` describe the subject with dataset index `indices[i]`.
    pub fn new(
        design: &LagDesign,
        indices: &[usize],
        recovered: &[RecoveredSubject],
        responses: &[&SparseFunctionalSample],
    ) -> Result<Self> {
        Self::with_floor(design, indices, recovered, responses, 0.0)
    }

    /// Keeps only response times at or after both `floor` and the valid start.
    pub fn with_floor(
        design: &LagDesign,
        indices: &[usize],
        recovered: &[RecoveredSubject],
        responses: &[&SparseFunctionalSample],
        floor: f64,
    ) -> Result<Self> {
        let start = design.valid_start().max(floor);
        let subjects = indices
            .par_iter()
            .zip(recovered.par_iter())
            .zip(responses.par_iter())
            .map(|((&index, subject), response)| {
                let (times, observed): (Vec<f64>, Vec<f64>) =
                    response.observations().filter(|&(t, _)| t >= start).unzip();
                let induced = times
                    .iter()
                    .map(|&t| design.induced_predictors(subject, t))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PanelSubject {
                    index,
                    times,
                    observed,
                    induced,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { subjects })
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }

    /// Dataset indices, times and observed responses, in panel order.
    pub fn observations(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().zip(&s.observed).map(move |(&t, &y)| (s.index, t, y)))
    }

    pub fn observed(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.observed.iter().copied()).collect()
    }

    /// Raw-scale predictions in the order of [`InducedPanel::observations`].
    pub fn predictions(&self, fit: &ModelFit) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_observations());
        for s in &self.subjects {
            for (&t, z) in s.times.iter().zip(&s.induced) {
                out.push(fit.intercept().eval(t) + fit.coefficients_at(t)?.dot(z));
            }
        }
        Ok(out)
    }

    /// `Σ (Ŷ − Y)²` over the panel.
    pub fn squared_error(&self, fit: &ModelFit) -> Result<f64> {
        let predicted = self.predictions(fit)?;
        Ok(predicted
            .iter()
            .zip(self.observed())
            .map(|(p, y)| (p - y) * (p - y))
            .sum())
    }
}

fn recover_all(components: &SmoothedComponents, data: &FunctionalDataset, rows: &[usize]) -> Result<Vec<RecoveredSubject>> {
    rows.par_iter()
        .map(|&i| components.recovery().recover(&data.x1_sample(i), &data.x2()[i]))
        .collect()
}

/// K-fold cross-validation error `(1/K) Σ_k Σ_{i∈k} Σ_j (Ŷ⁻ᵏᵢⱼ − Yᵢⱼ)²`.
pub fn cv_score(
    data: &FunctionalDataset,
    lags1: LagWindow,
    lags2: LagWindow,
    rho: Rho,
    folds: usize,
    seed: u64,
    cfg: &ModelConfig,
) -> Result<f64> {
    let evaluator = ModelEvaluator::new(data, cfg, folds, seed)?;
    evaluator.cv_score((lags1, lags2), rho, 0.0)
}

/// Fit at the regularization pair of smallest in-sample NPE.
#[derive(Debug, Clone)]
pub struct NpeFit {
    pub fit: ModelFit,
    pub rho: Rho,
    pub npe: Npe,
}

/// Fixed lags, regularization chosen from `rhos` by in-sample NPE; ties keep the earlier pair.
pub fn fit_min_npe(
    data: &FunctionalDataset,
    lags1: LagWindow,
    lags2: LagWindow,
    rhos: &[Rho],
    cfg: &ModelConfig,
) -> Result<NpeFit> {
    if rhos.is_empty() {
        return Err(Error::Config("at least one regularization pair is required".into()));
    }
    let components = SmoothedComponents::estimate(data, cfg)?;
    let design = LagDesign::new(lags1, lags2, cfg)?;
    let all: Vec<usize> = (0..data.n_subjects()).collect();
    let recovered = all
        .par_iter()
        .map(|&i| components.recovery().recover(&data.x1_sample(i), &data.x2()[i]))
        .collect::<Result<Vec<_>>>()?;
    let responses: Vec<&SparseFunctionalSample> = data.y().iter().collect();
    let panel = InducedPanel::new(&design, &all, &recovered, &responses)?;
    let observed = panel.observed();
    let system = LagSystem::new(&components, design, cfg.eval_grid_size)?;
    let mut best: Option<NpeFit> = None;
    for &rho in rhos {
        let fit = system.solve(rho)?;
        let value = npe(&panel.predictions(&fit)?, &observed)?;
        if best.as_ref().map_or(true, |b| value.value < b.npe.value) {
            best = Some(NpeFit { fit, rho, npe: value });
        }
    }
    Ok(best.expect("nonempty rho list"))
}

/// Candidate lag windows, regularization pairs and fold count.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub lag_pairs: Vec<(LagWindow, LagWindow)>,
    pub rhos: Vec<Rho>,
    pub folds: usize,
}

impl SearchSpace {
    /// Every combination of a window from `d1` with a window from `d2`.
    pub fn product(d1: &[LagWindow], d2: &[LagWindow], rhos: Vec<Rho>, folds: usize) -> Self {
        let lag_pairs = d1.iter().flat_map(|&a| d2.iter().map(move |&b| (a, b))).collect();
        Self { lag_pairs, rhos, folds }
    }

    /// The same window for both predictors.
    pub fn shared(d: &[LagWindow], rhos: Vec<Rho>, folds: usize) -> Self {
        Self {
            lag_pairs: d.iter().map(|&w| (w, w)).collect(),
            rhos,
            folds,
        }
    }

    /// `count` log-spaced pairs with `ρ₁ = ρ₂` from `lo` to `hi`.
    pub fn log_rho_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<Rho>> {
        if !(lo > 0.0 && hi >= lo) || count == 0 {
            return Err(Error::Config(format!("rho grid [{lo}, {hi}] with {count} points")));
        }
        if count == 1 {
            return Ok(vec![Rho::new(lo, lo)?]);
        }
        let (a, b) = (lo.ln(), hi.ln());
        (0..count)
            .map(|i| {
                let r = if i + 1 == count {
                    hi
                } else {
                    (a + (b - a) * i as f64 / (count - 1) as f64).exp()
                };
                Rho::new(r, r)
            })
            .collect()
    }

    /// 20 pairs on `[1e-5, 1e-2]`.
    pub fn default_rhos() -> Vec<Rho> {
        Self::log_rho_grid(1e-5, 1e-2, 20).expect("valid default grid")
    }

    pub fn validate(&self, n_subjects: usize) -> Result<()> {
        if self.lag_pairs.is_empty() || self.rhos.is_empty() {
            return Err(Error::Config("search space needs at least one lag pair and one rho".into()));
        }
        if self.folds < 2 || self.folds > n_subjects {
            return Err(Error::Config(format!("{} folds for {n_subjects} subjects", self.folds)));
        }
        for (a, b) in &self.lag_pairs {
            if a.upper().max(b.upper()) >= 1.0 {
                return Err(Error::Config(format!("lag windows {a} and {b} leave no valid response interval")));
            }
        }
        Ok(())
    }
}

/// Outcome of one lag candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    pub lags1: LagWindow,
    pub lags2: LagWindow,
    /// In-sample NPE for every regularization pair, in search-space order.
    pub npe_profile: Vec<f64>,
    pub rho: Rho,
    pub npe: f64,
    pub cv: f64,
}

impl CandidateResult {
    pub fn volume(&self) -> f64 {
        self.lags1.width() + self.lags2.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub best_lags: (LagWindow, LagWindow),
    pub best_rho: Rho,
    pub cv_table: Vec<CandidateResult>,
}

impl SelectionResult {
    pub fn best(&self) -> &CandidateResult {
        self.cv_table
            .iter()
            .find(|c| (c.lags1, c.lags2) == self.best_lags)
            .expect("best candidate is in the table")
    }
}

/// Scores lag candidates; the search logic is independent of how.
pub trait CandidateEvaluator: Sync {
    /// In-sample NPE of the candidate for each regularization pair.
    fn npe_profile(&self, lags: (LagWindow, LagWindow), rhos: &[Rho]) -> Result<Vec<f64>>;

    /// Cross-validation error counting only responses at or after `floor`.
    fn cv_score(&self, lags: (LagWindow, LagWindow), rho: Rho, floor: f64) -> Result<f64>;
}

fn annotate(lags: (LagWindow, LagWindow), rho: Rho, e: Error) -> Error {
    Error::Candidate {
        lags1: lags.0.to_string(),
        lags2: lags.1.to_string(),
        rho1: rho.first,
        rho2: rho.second,
        source: Box::new(e),
    }
}

fn lexicographic(a: &CandidateResult, b: &CandidateResult) -> Ordering {
    let key = |c: &CandidateResult| [c.lags1.lower(), c.lags1.upper(), c.lags2.lower(), c.lags2.upper()];
    let (ka, kb) = (key(a), key(b));
    ka.iter()
        .zip(&kb)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Hierarchical search driven by an arbitrary evaluator.
pub fn select_with<E: CandidateEvaluator>(evaluator: &E, space: &SearchSpace) -> Result<SelectionResult> {
    if space.lag_pairs.is_empty() || space.rhos.is_empty() {
        return Err(Error::Config("search space needs at least one lag pair and one rho".into()));
    }
    // Every candidate is scored on the same responses.
    let floor = space
        .lag_pairs
        .iter()
        .map(|(a, b)| a.upper().max(b.upper()))
        .fold(0.0, f64::max);
    let table = space
        .lag_pairs
        .par_iter()
        .map(|&lags| {
            let profile = evaluator
                .npe_profile(lags, &space.rhos)
                .map_err(|e| annotate(lags, space.rhos[0], e))?;
            let (best, npe) = profile
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
            let rho = space.rhos[best];
            let cv = evaluator.cv_score(lags, rho, floor).map_err(|e| annotate(lags, rho, e))?;
            Ok(CandidateResult {
                lags1: lags.0,
                lags2: lags.1,
                npe_profile: profile,
                rho,
                npe,
                cv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = table
        .iter()
        .min_by(|a, b| {
            a.cv.total_cmp(&b.cv)
                .then(a.volume().total_cmp(&b.volume()))
                .then_with(|| lexicographic(a, b))
        })
        .expect("nonempty table");
    Ok(SelectionResult {
        best_lags: (best.lags1, best.lags2),
        best_rho: best.rho,
        cv_table: table,
    })
}

/// Chooses lags and regularization for a dataset.
pub fn select_hyperparameters(
    data: &FunctionalDataset,
    space: &SearchSpace,
    seed: u64,
    cfg: &ModelConfig,
) -> Result<SelectionResult> {
    space.validate(data.n_subjects())?;
    let evaluator = ModelEvaluator::new(data, cfg, space.folds, seed)?;
    select_with(&evaluator, space)
}

struct Fold {
    components: SmoothedComponents,
    held_out: Vec<usize>,
    recovered: Vec<RecoveredSubject>,
}

/// Evaluator backed by the estimator; smoothed components for the full data
/// and for every training fold are computed once and shared by all candidates.
pub struct ModelEvaluator<'a> {
    data: &'a FunctionalDataset,
    cfg: ModelConfig,
    full: SmoothedComponents,
    full_recovered: Vec<RecoveredSubject>,
    folds: Vec<Fold>,
}

impl<'a> ModelEvaluator<'a> {
    pub fn new(data: &'a FunctionalDataset, cfg: &ModelConfig, folds: usize, seed: u64) -> Result<Self> {
        let n = data.n_subjects();
        let all: Vec<usize> = (0..n).collect();
        let full = SmoothedComponents::estimate(data, cfg)?;
        let full_recovered = recover_all(&full, data, &all)?;
        let partition = fold_partition(n, folds, seed)?;
        let folds = partition
            .iter()
            .map(|held_out| {
                let training: Vec<usize> = all.iter().copied().filter(|i| held_out.binary_search(i).is_err()).collect();
                let components = SmoothedComponents::estimate(&data.subset(&training), cfg)?;
                let recovered = recover_all(&components, data, held_out)?;
                Ok(Fold {
                    components,
                    held_out: held_out.clone(),
                    recovered,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            data,
            cfg: *cfg,
            full,
            full_recovered,
            folds,
        })
    }

    pub fn full_components(&self) -> &SmoothedComponents {
        &self.full
    }

    fn responses(&self, rows: &[usize]) -> Vec<&SparseFunctionalSample> {
        rows.iter().map(|&i| &self.data.y()[i]).collect()
    }

    /// Full-data fit and in-sample panel for a lag candidate.
    pub fn in_sample(&self, lags: (LagWindow, LagWindow)) -> Result<(LagSystem<'_>, InducedPanel)> {
        let design = LagDesign::new(lags.0, lags.1, &self.cfg)?;
        let all: Vec<usize> = (0..self.data.n_subjects()).collect();
        let panel = InducedPanel::new(&design, &all, &self.full_recovered, &self.responses(&all))?;
        let system = LagSystem::new(&self.full, design, self.cfg.eval_grid_size)?;
        Ok((system, panel))
    }
}

impl CandidateEvaluator for ModelEvaluator<'_> {
    fn npe_profile(&self, lags: (LagWindow, LagWindow), rhos: &[Rho]) -> Result<Vec<f64>> {
        let (system, panel) = self.in_sample(lags)?;
        let observed = panel.observed();
        rhos.iter()
            .map(|&rho| {
                let fit = system.solve(rho).map_err(|e| annotate(lags, rho, e))?;
                Ok(npe(&panel.predictions(&fit)?, &observed)?.value)
            })
            .collect()
    }

    fn cv_score(&self, lags: (LagWindow, LagWindow), rho: Rho, floor: f64) -> Result<f64> {
        let design = LagDesign::new(lags.0, lags.1, &self.cfg)?;
        let errors = self
            .folds
            .iter()
            .enumerate()
            .map(|(k, fold)| {
                let panel = InducedPanel::with_floor(
                    &design,
                    &fold.held_out,
                    &fold.recovered,
                    &self.responses(&fold.held_out),
                    floor,
                )?;
                if panel.n_observations() == 0 {
                    return Err(Error::FoldDegenerate { fold: k });
                }
                let fit = LagSystem::new(&fold.components, design.clone(), self.cfg.eval_grid_size)?.solve(rho)?;
                panel.squared_error(&fit)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(errors.iter().sum::<f64>() / self.folds.len() as f64)
    }
}
