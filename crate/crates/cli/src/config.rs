//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use histlag::model::{LagWindow, ModelConfig, Rho};
use histlag::selection::SearchSpace;
use histlag::sim::SimConfig;
use histlag::smoothing::{Bandwidth, KernelFamily, SmoothingConfig};

/// Regularization used by `fit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoChoice {
    /// Smallest in-sample NPE over `rho_grid`.
    Auto,
    Fixed(Rho),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,

    pub n: usize,
    pub grid_size: usize,
    pub m_y: (usize, usize),
    pub m_x2: (usize, usize),
    pub response_start: f64,
    pub true_lags: LagWindow,
    pub snr: f64,

    pub basis_order: usize,
    pub interior_knots: usize,
    pub quadrature_nodes: usize,
    pub eval_grid_size: usize,
    pub surface_grid_size: usize,
    pub fve: f64,
    pub bandwidth_1d: Bandwidth,
    pub bandwidth_2d: Bandwidth,
    pub bandwidth_constant: f64,
    pub kernel: KernelFamily,

    pub lags1: LagWindow,
    pub lags2: LagWindow,
    pub rho: RhoChoice,

    pub d1_grid: Vec<LagWindow>,
    /// Empty means the two predictors share `d1_grid`.
    pub d2_grid: Vec<LagWindow>,
    pub rho_grid: (f64, f64, usize),
    pub folds: usize,

    pub reps: usize,
    pub n_list: Vec<usize>,
    pub uppers: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let model = ModelConfig::default();
        let window = |a, b| LagWindow::new(a, b).expect("valid");
        Self {
            seed: 0,
            threads: 0,
            n: sim.n,
            grid_size: sim.grid_size,
            m_y: sim.m_y,
            m_x2: sim.m_x2,
            response_start: sim.response_start,
            true_lags: sim.lags,
            snr: sim.snr,
            basis_order: model.basis_order,
            interior_knots: model.interior_knots,
            quadrature_nodes: model.quadrature_nodes,
            eval_grid_size: model.eval_grid_size,
            surface_grid_size: model.surface_grid_size,
            fve: model.fve,
            bandwidth_1d: model.smoothing.bandwidth_1d,
            bandwidth_2d: model.smoothing.bandwidth_2d,
            bandwidth_constant: model.smoothing.auto_constant,
            kernel: model.smoothing.kernel,
            lags1: sim.lags,
            lags2: sim.lags,
            rho: RhoChoice::Auto,
            d1_grid: vec![window(0.1, 0.3), window(0.1, 0.4), window(0.1, 0.5)],
            d2_grid: Vec::new(),
            rho_grid: (1e-5, 1e-2, 20),
            folds: 10,
            reps: 20,
            n_list: vec![50, 100, 150, 200],
            uppers: vec![0.3, 0.4, 0.5],
        }
    }
}

fn number<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| format!("cannot parse {value:?}: {e}"))
}

fn list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(number).collect()
}

fn pair<T: std::str::FromStr + Copy>(value: &str) -> Result<(T, T), String>
where
    T::Err: Display,
{
    match list::<T>(value)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected two comma-separated values, got {value:?}")),
    }
}

fn window(value: &str) -> Result<LagWindow, String> {
    let (a, b) = pair::<f64>(value)?;
    LagWindow::new(a, b).map_err(|e| e.to_string())
}

fn windows(value: &str) -> Result<Vec<LagWindow>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|w| match w.split_once(':') {
            Some((a, b)) => LagWindow::new(number(a)?, number(b)?).map_err(|e| e.to_string()),
            None => Err(format!("lag window {w:?} must look like lower:upper")),
        })
        .collect()
}

fn bandwidth(value: &str) -> Result<Bandwidth, String> {
    match value.trim() {
        "auto" => Ok(Bandwidth::Auto),
        v => number(v).map(Bandwidth::Fixed),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn show_windows(items: &[LagWindow]) -> String {
    items
        .iter()
        .map(|w| format!("{}:{}", w.lower(), w.upper()))
        .collect::<Vec<_>>()
        .join(",")
}

fn show_window(w: LagWindow) -> String {
    format!("{},{}", w.lower(), w.upper())
}

fn show_bandwidth(b: Bandwidth) -> String {
    match b {
        Bandwidth::Auto => "auto".into(),
        Bandwidth::Fixed(h) => h.to_string(),
    }
}

impl RunConfig {
    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let wrap = |e: String| format!("{key}: {e}");
        match key {
            "seed" => self.seed = number(value).map_err(wrap)?,
            "threads" => self.threads = number(value).map_err(wrap)?,
            "n" => self.n = number(value).map_err(wrap)?,
            "grid_size" => self.grid_size = number(value).map_err(wrap)?,
            "m_y" => self.m_y = pair(value).map_err(wrap)?,
            "m_x2" => self.m_x2 = pair(value).map_err(wrap)?,
            "response_start" => self.response_start = number(value).map_err(wrap)?,
            "true_lags" => self.true_lags = window(value).map_err(wrap)?,
            "snr" => self.snr = number(value).map_err(wrap)?,
            "basis_order" => self.basis_order = number(value).map_err(wrap)?,
            "interior_knots" => self.interior_knots = number(value).map_err(wrap)?,
            "quadrature_nodes" => self.quadrature_nodes = number(value).map_err(wrap)?,
            "eval_grid_size" => self.eval_grid_size = number(value).map_err(wrap)?,
            "surface_grid_size" => self.surface_grid_size = number(value).map_err(wrap)?,
            "fve" => self.fve = number(value).map_err(wrap)?,
            "bandwidth_1d" => self.bandwidth_1d = bandwidth(value).map_err(wrap)?,
            "bandwidth_2d" => self.bandwidth_2d = bandwidth(value).map_err(wrap)?,
            "bandwidth_constant" => self.bandwidth_constant = number(value).map_err(wrap)?,
            "kernel" => {
                self.kernel = KernelFamily::parse(value).ok_or_else(|| wrap(format!("unknown kernel {value:?}")))?
            }
            "lags1" => self.lags1 = window(value).map_err(wrap)?,
            "lags2" => self.lags2 = window(value).map_err(wrap)?,
            "rho" => {
                self.rho = if value == "auto" {
                    RhoChoice::Auto
                } else {
                    let (a, b) = pair(value).map_err(wrap)?;
                    RhoChoice::Fixed(Rho::new(a, b).map_err(|e| wrap(e.to_string()))?)
                }
            }
            "d1_grid" => self.d1_grid = windows(value).map_err(wrap)?,
            "d2_grid" => self.d2_grid = windows(value).map_err(wrap)?,
            "rho_grid" => {
                self.rho_grid = match list::<f64>(value).map_err(wrap)?.as_slice() {
                    [lo, hi, count] if count.fract() == 0.0 && *count >= 1.0 => (*lo, *hi, *count as usize),
                    _ => return Err(wrap(format!("expected lo,hi,count, got {value:?}"))),
                }
            }
            "folds" => self.folds = number(value).map_err(wrap)?,
            "reps" => self.reps = number(value).map_err(wrap)?,
            "n_list" => self.n_list = list(value).map_err(wrap)?,
            "uppers" => self.uppers = list(value).map_err(wrap)?,
            _ => return Err(format!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a form `set` accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let rho = match self.rho {
            RhoChoice::Auto => "auto".into(),
            RhoChoice::Fixed(r) => format!("{},{}", r.first, r.second),
        };
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("n", self.n.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("m_y", format!("{},{}", self.m_y.0, self.m_y.1)),
            ("m_x2", format!("{},{}", self.m_x2.0, self.m_x2.1)),
            ("response_start", self.response_start.to_string()),
            ("true_lags", show_window(self.true_lags)),
            ("snr", self.snr.to_string()),
            ("basis_order", self.basis_order.to_string()),
            ("interior_knots", self.interior_knots.to_string()),
            ("quadrature_nodes", self.quadrature_nodes.to_string()),
            ("eval_grid_size", self.eval_grid_size.to_string()),
            ("surface_grid_size", self.surface_grid_size.to_string()),
            ("fve", self.fve.to_string()),
            ("bandwidth_1d", show_bandwidth(self.bandwidth_1d)),
            ("bandwidth_2d", show_bandwidth(self.bandwidth_2d)),
            ("bandwidth_constant", self.bandwidth_constant.to_string()),
            ("kernel", self.kernel.name().into()),
            ("lags1", show_window(self.lags1)),
            ("lags2", show_window(self.lags2)),
            ("rho", rho),
            ("d1_grid", show_windows(&self.d1_grid)),
            ("d2_grid", show_windows(&self.d2_grid)),
            ("rho_grid", format!("{},{},{}", self.rho_grid.0, self.rho_grid.1, self.rho_grid.2)),
            ("folds", self.folds.to_string()),
            ("reps", self.reps.to_string()),
            ("n_list", join(&self.n_list)),
            ("uppers", join(&self.uppers)),
        ]
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            self.set(key.trim(), value).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            basis_order: self.basis_order,
            interior_knots: self.interior_knots,
            quadrature_nodes: self.quadrature_nodes,
            smoothing: SmoothingConfig {
                bandwidth_1d: self.bandwidth_1d,
                bandwidth_2d: self.bandwidth_2d,
                kernel: self.kernel,
                auto_constant: self.bandwidth_constant,
            },
            fve: self.fve,
            eval_grid_size: self.eval_grid_size,
            surface_grid_size: self.surface_grid_size,
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            n: self.n,
            grid_size: self.grid_size,
            m_y: self.m_y,
            m_x2: self.m_x2,
            response_start: self.response_start,
            lags: self.true_lags,
            snr: self.snr,
            seed: self.seed,
        }
    }

    pub fn rhos(&self) -> histlag::Result<Vec<Rho>> {
        SearchSpace::log_rho_grid(self.rho_grid.0, self.rho_grid.1, self.rho_grid.2)
    }

    pub fn search_space(&self) -> histlag::Result<SearchSpace> {
        let rhos = self.rhos()?;
        Ok(if self.d2_grid.is_empty() {
            SearchSpace::shared(&self.d1_grid, rhos, self.folds)
        } else {
            SearchSpace::product(&self.d1_grid, &self.d2_grid, rhos, self.folds)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 42\nrho = 0.001, 0.002\nd2_grid = 0.1:0.2,0.2:0.45\nbandwidth_1d = 0.07\n# note\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.d2_grid.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::default().apply_text("seed = 1\nlambda = 3\n").unwrap_err();
        assert!(err.contains("line 2") && err.contains("lambda"), "{err}");
    }

    #[test]
    fn malformed_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("lags1", "0.4,0.1").is_err());
        assert!(cfg.set("rho", "0,1").is_err());
        assert!(cfg.set("rho_grid", "1e-5,1e-2").is_err());
        assert!(cfg.set("d1_grid", "0.1-0.3").is_err());
        assert!(cfg.set("kernel", "gaussian").is_err());
        assert!(cfg.set("n", "-3").is_err());
    }

    #[test]
    fn defaults_match_library() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model(), ModelConfig::default());
        assert_eq!(cfg.sim(), SimConfig::default());
        assert_eq!(cfg.rhos().unwrap(), SearchSpace::default_rhos());
    }
}
