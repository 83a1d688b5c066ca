use std::fmt::Write as _;

use histlag::grid::linspace;
use histlag::io;
use histlag::model::{coefficient_surface, predict, ModelFit, Predictor};
use histlag::selection::{fit_min_npe, select_hyperparameters};
use histlag::sim::{generate_dataset, run_lag_experiment, run_table1};

use crate::config::{RhoChoice, RunConfig};
use crate::Command;

/// Files to write under the output directory and the text for standard output.
pub struct Outputs {
    pub files: Vec<(String, Vec<u8>)>,
    pub report: String,
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn execute(command: &Command, cfg: &RunConfig) -> Result<Outputs, String> {
    cfg.model().validate().map_err(fail)?;
    match command {
        Command::Simulate { .. } => simulate(cfg),
        Command::Fit { data, .. } => {
            let data = io::load_dataset_csv(data).map_err(fail)?;
            fit(cfg, &data)
        }
        Command::Predict { fit, subjects } => {
            let fit = io::load_fit(fit).map_err(fail)?;
            let records = io::load_predictors_csv(subjects).map_err(fail)?;
            predictions(&fit, &records)
        }
        Command::Select { data, .. } => {
            let data = io::load_dataset_csv(data).map_err(fail)?;
            select(cfg, &data)
        }
        Command::BenchTable1 { .. } => table1(cfg),
        Command::BenchLags { .. } => lags(cfg),
    }
}

fn simulate(cfg: &RunConfig) -> Result<Outputs, String> {
    let sim = generate_dataset(&cfg.sim()).map_err(fail)?;
    let mut csv = Vec::new();
    io::write_dataset(&mut csv, &sim.data).map_err(fail)?;
    Ok(Outputs {
        files: vec![("dataset.csv".into(), csv)],
        report: format!("subjects = {}\n", sim.data.n_subjects()),
    })
}

fn surface_csv(fit: &ModelFit, which: Predictor, size: usize) -> Result<Vec<u8>, String> {
    let lags = match which {
        Predictor::Dense => fit.lags().0,
        Predictor::Sparse => fit.lags().1,
    };
    let (lo, hi) = fit.valid_interval();
    let s_grid = linspace(lags.lower(), lags.upper(), size);
    let t_grid = linspace(lo, hi, size);
    let values = coefficient_surface(fit, which, &s_grid, &t_grid).map_err(fail)?;
    let mut out = Vec::new();
    io::write_surface(&mut out, &s_grid, &t_grid, &values).map_err(fail)?;
    Ok(out)
}

fn fit(cfg: &RunConfig, data: &histlag::model::FunctionalDataset) -> Result<Outputs, String> {
    let model = cfg.model();
    let rhos = match cfg.rho {
        RhoChoice::Auto => cfg.rhos().map_err(fail)?,
        RhoChoice::Fixed(r) => vec![r],
    };
    let chosen = fit_min_npe(data, cfg.lags1, cfg.lags2, &rhos, &model).map_err(fail)?;
    let fit = &chosen.fit;
    let mut intercept = String::from("t,value\n");
    for (t, v) in fit.intercept().grid().iter().zip(fit.intercept().values()) {
        writeln!(intercept, "{t:.16e},{v:.16e}").expect("string write");
    }
    let files = vec![
        ("fit.txt".into(), io::fit_to_string(fit).into_bytes()),
        ("beta1.csv".into(), surface_csv(fit, Predictor::Dense, cfg.surface_grid_size)?),
        ("beta2.csv".into(), surface_csv(fit, Predictor::Sparse, cfg.surface_grid_size)?),
        ("intercept.csv".into(), intercept.into_bytes()),
    ];
    let mut report = String::new();
    writeln!(report, "lags1 = {}", fit.lags().0).expect("string write");
    writeln!(report, "lags2 = {}", fit.lags().1).expect("string write");
    writeln!(report, "rho = {:e},{:e}", chosen.rho.first, chosen.rho.second).expect("string write");
    writeln!(report, "npe = {:.16e}", chosen.npe.value).expect("string write");
    writeln!(report, "npe_excluded = {}", chosen.npe.excluded).expect("string write");
    Ok(Outputs { files, report })
}

fn predictions(fit: &ModelFit, records: &[io::SubjectRecord]) -> Result<Outputs, String> {
    let mut csv = String::from("subject_id,time,value\n");
    for r in records {
        let times = r.y.as_ref().map_or_else(|| fit.eval_times().to_vec(), |y| y.times().to_vec());
        let x1 = r.x1.as_ref().expect("checked on load");
        let x2 = r.x2.as_ref().expect("checked on load");
        let values = predict(fit, x1, x2, &times).map_err(|e| format!("subject {}: {e}", r.subject_id))?;
        for (t, v) in times.iter().zip(values) {
            writeln!(csv, "{},{t:.16e},{v:.16e}", r.subject_id).expect("string write");
        }
    }
    Ok(Outputs {
        files: vec![("predictions.csv".into(), csv.into_bytes())],
        report: format!("subjects = {}\n", records.len()),
    })
}

fn select(cfg: &RunConfig, data: &histlag::model::FunctionalDataset) -> Result<Outputs, String> {
    let space = cfg.search_space().map_err(fail)?;
    let result = select_hyperparameters(data, &space, cfg.seed, &cfg.model()).map_err(fail)?;
    let mut csv = String::from("lags1_lower,lags1_upper,lags2_lower,lags2_upper,rho1,rho2,npe,cv,selected\n");
    for c in &result.cv_table {
        let selected = (c.lags1, c.lags2) == result.best_lags;
        writeln!(
            csv,
            "{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            c.lags1.lower(),
            c.lags1.upper(),
            c.lags2.lower(),
            c.lags2.upper(),
            c.rho.first,
            c.rho.second,
            c.npe,
            c.cv,
            u8::from(selected)
        )
        .expect("string write");
    }
    let best = result.best();
    let report = format!(
        "lags1 = {}\nlags2 = {}\nrho = {:e},{:e}\nnpe = {:.16e}\ncv = {:.16e}\n",
        best.lags1, best.lags2, best.rho.first, best.rho.second, best.npe, best.cv
    );
    Ok(Outputs {
        files: vec![("selection.csv".into(), csv.into_bytes())],
        report,
    })
}

fn table1(cfg: &RunConfig) -> Result<Outputs, String> {
    let rows = run_table1(&cfg.sim(), &cfg.n_list, cfg.reps, &cfg.model(), &cfg.rhos().map_err(fail)?).map_err(fail)?;
    let mut csv = String::from("n,reps,npe_mean,npe_se,npe_latent_mean,npe_latent_se\n");
    let mut report = String::from("n\tNPE x 100\t(se)\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.n, r.reps, r.npe.mean, r.npe.std_error, r.npe_latent.mean, r.npe_latent.std_error
        )
        .expect("string write");
        writeln!(report, "{}\t{:.3}\t({:.3})", r.n, 100.0 * r.npe.mean, 100.0 * r.npe.std_error).expect("string write");
    }
    Ok(Outputs {
        files: vec![("table1.csv".into(), csv.into_bytes())],
        report,
    })
}

fn lags(cfg: &RunConfig) -> Result<Outputs, String> {
    let experiment = run_lag_experiment(
        &cfg.sim(),
        &cfg.uppers,
        cfg.reps,
        &cfg.model(),
        &cfg.rhos().map_err(fail)?,
        cfg.folds,
    )
    .map_err(fail)?;
    let mut csv = String::from("replication,selected_upper\n");
    for (r, u) in experiment.selections.iter().enumerate() {
        writeln!(csv, "{r},{u}").expect("string write");
    }
    let report = format!(
        "target = {}\nhits = {}\nreps = {}\n",
        experiment.target,
        experiment.hits,
        experiment.selections.len()
    );
    Ok(Outputs {
        files: vec![("lags.csv".into(), csv.into_bytes())],
        report,
    })
}
