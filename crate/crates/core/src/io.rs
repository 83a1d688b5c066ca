//! Reading and writing datasets, surfaces and fitted models.
//!
//! Datasets use a long CSV table `subject_id,variable,time,value` with
//! `variable` one of `y`, `x1`, `x2`. Fitted models are stored as plain text
//! split into `[section]` blocks; numbers are written in shortest round-trip
//! form so a reloaded fit is bitwise identical.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::basis::{BasisSystem, Interval};
use crate::error::{Error, Result};
use crate::fpca::Eigensystem;
use crate::grid::Curve;
use crate::model::{FunctionalDataset, LagDesign, ModelFit, Recovery, Rho};
use crate::smoothing::{DenseFunctionalPanel, KernelFamily, SparseFunctionalSample};

pub const DATASET_HEADER: [&str; 4] = ["subject_id", "variable", "time", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    Y,
    X1,
    X2,
}

impl Variable {
    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "y" => Some(Self::Y),
            "x1" => Some(Self::X1),
            "x2" => Some(Self::X2),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Y => "y",
            Self::X1 => "x1",
            Self::X2 => "x2",
        }
    }
}

/// All observations of one subject, grouped by variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub y: Option<SparseFunctionalSample>,
    pub x1: Option<SparseFunctionalSample>,
    pub x2: Option<SparseFunctionalSample>,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

/// Parses a long table; subjects keep their order of first appearance.
pub fn read_long_table(reader: impl Read) -> Result<Vec<SubjectRecord>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers().map_err(|e| parse_error(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != DATASET_HEADER {
        return Err(parse_error(1, format!("expected header {}", DATASET_HEADER.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, BTreeMap<Variable, Vec<(f64, f64, u64)>>> = HashMap::new();
    for record in csv.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(parse_error(line, format!("expected 4 fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_error(line, "empty subject_id"));
        }
        let variable = Variable::parse(&record[1])
            .ok_or_else(|| parse_error(line, format!("unknown variable '{}'", &record[1])))?;
        let number = |field: &str, name: &str| -> Result<f64> {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(line, format!("{name} '{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(line, format!("{name} '{field}' is not finite")));
            }
            Ok(v)
        };
        let time = number(&record[2], "time")?;
        let value = number(&record[3], "value")?;
        if !(0.0..=1.0).contains(&time) {
            return Err(parse_error(line, format!("time {time} outside [0, 1]")));
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().entry(variable).or_default().push((time, value, line));
    }
    order
        .into_iter()
        .map(|id| {
            let mut by_variable = rows.remove(&id).expect("recorded subject");
            let mut take = |v: Variable| -> Result<Option<SparseFunctionalSample>> {
                let Some(mut obs) = by_variable.remove(&v) else {
                    return Ok(None);
                };
                obs.sort_by(|a, b| a.0.total_cmp(&b.0));
                if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
                    return Err(parse_error(
                        w[1].2,
                        format!("duplicate time {} for subject {id}, variable {}", w[1].0, v.tag()),
                    ));
                }
                let sample = SparseFunctionalSample::new(
                    id.clone(),
                    obs.iter().map(|o| o.0).collect(),
                    obs.iter().map(|o| o.1).collect(),
                )?;
                Ok(Some(sample))
            };
            Ok(SubjectRecord {
                y: take(Variable::Y)?,
                x1: take(Variable::X1)?,
                x2: take(Variable::X2)?,
                subject_id: id,
            })
        })
        .collect()
}

fn dense_panel(records: &[SubjectRecord]) -> Result<DenseFunctionalPanel> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("dataset has no subjects".into()))?;
    let missing = |id: &str| Error::Data(format!("subject {id} has no x1 observations"));
    let grid = first.x1.as_ref().ok_or_else(|| missing(&first.subject_id))?.times().to_vec();
    let mut values = DMatrix::zeros(records.len(), grid.len());
    for (i, r) in records.iter().enumerate() {
        let x1 = r.x1.as_ref().ok_or_else(|| missing(&r.subject_id))?;
        if x1.times() != grid.as_slice() {
            return Err(Error::DenseGrid {
                subject: r.subject_id.clone(),
            });
        }
        values.row_mut(i).copy_from_slice(x1.values());
    }
    DenseFunctionalPanel::new(grid, records.iter().map(|r| r.subject_id.clone()).collect(), values)
}

pub fn dataset_from_records(records: &[SubjectRecord]) -> Result<FunctionalDataset> {
    let panel = dense_panel(records)?;
    let pick = |r: &SubjectRecord, v: Variable| {
        match v {
            Variable::Y => r.y.clone(),
            Variable::X2 => r.x2.clone(),
            Variable::X1 => r.x1.clone(),
        }
        .ok_or_else(|| Error::Data(format!("subject {} has no {} observations", r.subject_id, v.tag())))
    };
    let y = records.iter().map(|r| pick(r, Variable::Y)).collect::<Result<Vec<_>>>()?;
    let x2 = records.iter().map(|r| pick(r, Variable::X2)).collect::<Result<Vec<_>>>()?;
    FunctionalDataset::new(y, panel, x2)
}

pub fn read_dataset(reader: impl Read) -> Result<FunctionalDataset> {
    dataset_from_records(&read_long_table(reader)?)
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<FunctionalDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    read_dataset(file).map_err(|e| annotate_path(path, e))
}

fn annotate_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// New subjects for prediction: each needs `x1` and `x2`; `y` is ignored.
pub fn load_predictors_csv(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let records = read_long_table(file).map_err(|e| annotate_path(path, e))?;
    for r in &records {
        if r.x1.is_none() || r.x2.is_none() {
            return Err(Error::Data(format!("subject {} needs both x1 and x2 observations", r.subject_id)));
        }
    }
    Ok(records)
}

pub fn write_dataset(mut out: impl Write, data: &FunctionalDataset) -> std::io::Result<()> {
    writeln!(out, "{}", DATASET_HEADER.join(","))?;
    for i in 0..data.n_subjects() {
        let x1 = data.x1_sample(i);
        for (variable, sample) in [(Variable::Y, &data.y()[i]), (Variable::X1, &x1), (Variable::X2, &data.x2()[i])] {
            for (t, v) in sample.observations() {
                writeln!(out, "{},{},{t:e},{v:e}", sample.subject_id(), variable.tag())?;
            }
        }
    }
    out.flush()
}

pub fn save_dataset_csv(path: impl AsRef<Path>, data: &FunctionalDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    write_dataset(BufWriter::new(file), data).map_err(|e| io_error(path, e))
}

/// `s,t,value` rows, `t` in the outer loop; `values` is `|s_grid| × |t_grid|`.
pub fn write_surface(mut out: impl Write, s_grid: &[f64], t_grid: &[f64], values: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(out, "s,t,value")?;
    for (j, t) in t_grid.iter().enumerate() {
        for (i, s) in s_grid.iter().enumerate() {
            writeln!(out, "{s:.16e},{t:.16e},{:.16e}", values[(i, j)])?;
        }
    }
    out.flush()
}

pub fn save_surface_csv(path: impl AsRef<Path>, s_grid: &[f64], t_grid: &[f64], values: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    write_surface(BufWriter::new(file), s_grid, t_grid, values).map_err(|e| io_error(path, e))
}

const FIT_MAGIC: &str = "histlag-fit 1";

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (k, v) in values.into_iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        write!(s, "{v:e}").expect("writing to a string");
    }
    s
}

fn push_matrix(text: &mut String, name: &str, m: &DMatrix<f64>) {
    writeln!(text, "[{name}]").unwrap();
    writeln!(text, "{} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.row_iter() {
        writeln!(text, "{}", join(row.iter().copied())).unwrap();
    }
}

/// Serializes a fit to the text artifact format.
pub fn fit_to_string(fit: &ModelFit) -> String {
    let mut text = String::new();
    let (l1, l2) = fit.lags();
    let d = fit.design();
    let r = fit.recovery();
    writeln!(text, "{FIT_MAGIC}").unwrap();
    writeln!(text, "[model]").unwrap();
    writeln!(text, "lags1 = {}", join([l1.lower(), l1.upper()])).unwrap();
    writeln!(text, "lags2 = {}", join([l2.lower(), l2.upper()])).unwrap();
    writeln!(text, "rho = {}", join([fit.rho().first, fit.rho().second])).unwrap();
    writeln!(text, "n_subjects = {}", fit.n_subjects()).unwrap();
    writeln!(text, "basis1 = {} {}", d.basis1().order(), d.basis1().interior_knots()).unwrap();
    writeln!(text, "basis2 = {} {}", d.basis2().order(), d.basis2().interior_knots()).unwrap();
    writeln!(text, "quadrature_nodes = {}", d.quadrature_nodes()).unwrap();
    writeln!(text, "kernel = {}", r.kernel.name()).unwrap();
    writeln!(text, "x1_bandwidth = {:e}", r.x1_bandwidth).unwrap();
    writeln!(text, "truncation = {}", r.truncation).unwrap();
    writeln!(text, "noise_variance = {:e}", r.eigensystem.noise_variance()).unwrap();
    for (name, values) in [
        ("intercept_grid", fit.intercept().grid()),
        ("intercept", fit.intercept().values()),
        ("eval_times", fit.eval_times()),
        ("x1_grid", r.x1_grid.as_slice()),
        ("x1_mean", r.x1_mean.as_slice()),
        ("x2_mean_grid", r.x2_mean.grid()),
        ("x2_mean", r.x2_mean.values()),
        ("eigen_grid", r.eigensystem.grid()),
        ("eigenvalues", r.eigensystem.eigenvalues()),
    ] {
        writeln!(text, "[{name}]").unwrap();
        writeln!(text, "{}", join(values.iter().copied())).unwrap();
    }
    push_matrix(&mut text, "b1", fit.b1());
    push_matrix(&mut text, "b2", fit.b2());
    push_matrix(&mut text, "eigenfunctions", r.eigensystem.eigenfunctions());
    text
}

struct Sections {
    blocks: HashMap<String, (usize, Vec<(usize, String)>)>,
}

impl Sections {
    fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, FIT_MAGIC)) => {}
            _ => return Err(parse_error(1, format!("expected '{FIT_MAGIC}'"))),
        }
        let mut blocks: HashMap<String, (usize, Vec<(usize, String)>)> = HashMap::new();
        let mut current: Option<String> = None;
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if blocks.insert(name.to_string(), (no, Vec::new())).is_some() {
                    return Err(parse_error(no as u64, format!("duplicate section [{name}]")));
                }
                current = Some(name.to_string());
                continue;
            }
            let name = current
                .as_ref()
                .ok_or_else(|| parse_error(no as u64, "content before the first section"))?;
            blocks.get_mut(name).expect("open section").1.push((no, line.to_string()));
        }
        Ok(Self { blocks })
    }

    fn block(&self, name: &str) -> Result<&(usize, Vec<(usize, String)>)> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing section [{name}]"),
            })
    }

    fn key(&self, name: &str) -> Result<(usize, String)> {
        let (header, lines) = self.block("model")?;
        lines
            .iter()
            .find_map(|(no, l)| {
                let (k, v) = l.split_once('=')?;
                (k.trim() == name).then(|| (*no, v.trim().to_string()))
            })
            .ok_or_else(|| parse_error(*header as u64, format!("missing key '{name}'")))
    }

    fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let (header, lines) = self.block(name)?;
        match lines.as_slice() {
            [] => Ok(Vec::new()),
            [(no, line)] => parse_numbers(*no, line),
            _ => Err(parse_error(*header as u64, format!("section [{name}] must be one line"))),
        }
    }

    fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (header, lines) = self.block(name)?;
        let (no, dims) = lines
            .first()
            .ok_or_else(|| parse_error(*header as u64, format!("section [{name}] is empty")))?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| parse_error(*no as u64, "bad matrix dimensions")))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(parse_error(*no as u64, "matrix dimensions need two numbers"));
        };
        if lines.len() != rows + 1 {
            return Err(parse_error(*header as u64, format!("section [{name}] needs {rows} rows")));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for (i, (no, line)) in lines[1..].iter().enumerate() {
            let row = parse_numbers(*no, line)?;
            if row.len() != cols {
                return Err(parse_error(*no as u64, format!("expected {cols} values")));
            }
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

fn parse_numbers(line: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_error(line as u64, format!("'{t}' is not a number")))
        })
        .collect()
}

fn parse_pair(line: usize, text: &str) -> Result<(f64, f64)> {
    match parse_numbers(line, text)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(parse_error(line as u64, "expected two numbers")),
    }
}

fn parse_usize(line: usize, text: &str) -> Result<usize> {
    text.parse().map_err(|_| parse_error(line as u64, format!("'{text}' is not a count")))
}

/// Inverse of [`fit_to_string`].
pub fn fit_from_str(text: &str) -> Result<ModelFit> {
    let sec = Sections::parse(text)?;
    let pair = |k: &str| -> Result<(f64, f64)> {
        let (no, v) = sec.key(k)?;
        parse_pair(no, &v)
    };
    let count = |k: &str| -> Result<usize> {
        let (no, v) = sec.key(k)?;
        parse_usize(no, &v)
    };
    let real = |k: &str| -> Result<f64> {
        let (no, v) = sec.key(k)?;
        v.parse().map_err(|_| parse_error(no as u64, format!("'{v}' is not a number")))
    };
    let basis = |k: &str, lags: (f64, f64)| -> Result<BasisSystem> {
        let (no, v) = sec.key(k)?;
        let parts: Vec<usize> = v.split_whitespace().map(|p| parse_usize(no, p)).collect::<Result<_>>()?;
        let [order, knots] = parts[..] else {
            return Err(parse_error(no as u64, "basis needs order and interior knot count"));
        };
        BasisSystem::bspline(order, knots, Interval::new(lags.0, lags.1)?)
    };
    let lags1 = pair("lags1")?;
    let lags2 = pair("lags2")?;
    let rho = pair("rho")?;
    let design = LagDesign::from_bases(basis("basis1", lags1)?, basis("basis2", lags2)?, count("quadrature_nodes")?)?;
    let (kernel_line, kernel_name) = sec.key("kernel")?;
    let kernel = KernelFamily::parse(&kernel_name)
        .ok_or_else(|| parse_error(kernel_line as u64, format!("unknown kernel '{kernel_name}'")))?;
    let eigensystem = Eigensystem::from_parts(
        sec.numbers("eigen_grid")?,
        sec.numbers("eigenvalues")?,
        sec.matrix("eigenfunctions")?,
        real("noise_variance")?,
    )?;
    let recovery = Recovery {
        x1_grid: sec.numbers("x1_grid")?,
        x1_mean: sec.numbers("x1_mean")?,
        x1_bandwidth: real("x1_bandwidth")?,
        kernel,
        x2_mean: Curve::new(sec.numbers("x2_mean_grid")?, sec.numbers("x2_mean")?)?,
        eigensystem,
        truncation: count("truncation")?,
    };
    if recovery.x1_grid.len() != recovery.x1_mean.len() {
        return Err(Error::Shape("x1 mean and grid lengths differ".into()));
    }
    let eval_times = sec.numbers("eval_times")?;
    let b1 = sec.matrix("b1")?;
    let b2 = sec.matrix("b2")?;
    if b1.nrows() != eval_times.len()
        || b2.nrows() != eval_times.len()
        || b1.ncols() != design.basis1().len()
        || b2.ncols() != design.basis2().len()
    {
        return Err(Error::Shape("coefficient tables do not match the bases and evaluation times".into()));
    }
    Ok(ModelFit {
        intercept: Curve::new(sec.numbers("intercept_grid")?, sec.numbers("intercept")?)?,
        eval_times,
        b1,
        b2,
        design,
        rho: Rho::new(rho.0, rho.1)?,
        n_subjects: count("n_subjects")?,
        recovery,
    })
}

pub fn save_fit(path: impl AsRef<Path>, fit: &ModelFit) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, fit_to_string(fit)).map_err(|e| io_error(path, e))
}

pub fn load_fit(path: impl AsRef<Path>) -> Result<ModelFit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    fit_from_str(&text).map_err(|e| annotate_path(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "subject_id,variable,time,value
a,y,0.5,1.0
a,x1,0,0.1
a,x1,0.5,0.2
a,x1,1,0.3
a,x2,0.25,2.0
b,x1,0,1.1
b,x1,0.5,1.2
b,x1,1,1.3
b,y,0.75,-1.0
b,x2,0.5,3.0
";

    #[test]
    fn parses_long_table() {
        let data = read_dataset(SMALL.as_bytes()).unwrap();
        assert_eq!(data.n_subjects(), 2);
        assert_eq!(data.subject_ids(), ["a", "b"]);
        assert_eq!(data.x1().grid(), [0.0, 0.5, 1.0]);
        assert_eq!(data.y()[1].values(), [-1.0]);
    }

    #[test]
    fn reports_line_numbers() {
        let bad = SMALL.replace("b,y,0.75,-1.0", "b,y,0.75,abc");
        match read_dataset(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("unexpected {other:?}"),
        }
        let bad = SMALL.replace("a,x2", "a,z");
        assert!(matches!(read_dataset(bad.as_bytes()), Err(Error::Parse { line: 6, .. })));
        let bad = SMALL.replace("subject_id,variable", "id,variable");
        assert!(matches!(read_dataset(bad.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn rejects_mismatched_dense_grids() {
        let bad = SMALL.replace("b,x1,0.5,1.2", "b,x1,0.6,1.2");
        assert!(matches!(read_dataset(bad.as_bytes()), Err(Error::DenseGrid { subject }) if subject == "b"));
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let data = read_dataset(SMALL.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_dataset(&mut out, &data).unwrap();
        assert_eq!(read_dataset(out.as_slice()).unwrap(), data);
    }

    #[test]
    fn surface_rows_are_t_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut out = Vec::new();
        write_surface(&mut out, &[0.1, 0.2], &[0.5, 0.6], &m).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "s,t,value");
        assert!(lines[2].starts_with("2.0000000000000001e-1,5.0000000000000000e-1,3.0"));
    }
}
