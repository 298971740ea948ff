use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::points::PointSet;

use super::simulate::rk4_step;
use super::{ControlAffineSystem, StageCost, StateGridSpec};

/// Samples, drift labels under zero and one-hot inputs, and stage-cost values.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorDataset {
    pub points: PointSet,
    /// Channel 0 is the unforced drift; channel `j` uses input `e_j`.
    pub drift_labels: Vec<PointSet>,
    pub q_samples: Vec<f64>,
}

impl GeneratorDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.points.dim()
    }

    pub fn n_u(&self) -> usize {
        self.drift_labels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 {
            return Err(Error::arg("dataset is empty"));
        }
        if self.drift_labels.len() < 2 {
            return Err(Error::arg("dataset needs the unforced channel and at least one input channel"));
        }
        for (j, ch) in self.drift_labels.iter().enumerate() {
            if ch.len() != n || ch.dim() != self.points.dim() {
                return Err(Error::arg(format!("drift channel {j} is not row-aligned with the samples")));
            }
        }
        if self.q_samples.len() != n {
            return Err(Error::arg("stage-cost samples are not row-aligned with the samples"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelMode {
    Analytic,
    /// Central difference `(x(h) - x(-h)) / 2h` of noiseless RK4 flows under a constant input.
    FiniteDifference { h: f64 },
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

pub fn generate_dataset(
    sys: &ControlAffineSystem,
    grid: &StateGridSpec,
    stage_cost: &StageCost,
    label_mode: LabelMode,
    seed: u64,
) -> Result<GeneratorDataset> {
    let points = grid.points(seed)?;
    if points.dim() != sys.n_x() {
        return Err(Error::arg(format!(
            "grid produces {}-dimensional states but system '{}' has n_x = {}",
            points.dim(),
            sys.name,
            sys.n_x()
        )));
    }
    if let LabelMode::FiniteDifference { h } = label_mode {
        if !(h > 0.0) {
            return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
        }
    }
    let (n, n_x, n_u) = (points.len(), sys.n_x(), sys.n_u());

    let mut drift_labels = Vec::with_capacity(n_u + 1);
    let mut u = vec![0.0; n_u];
    for channel in 0..=n_u {
        u.iter_mut().for_each(|v| *v = 0.0);
        if channel > 0 {
            u[channel - 1] = 1.0;
        }
        let mut labels = PointSet::with_capacity(n_x, n);
        for x in points.rows() {
            let label = match label_mode {
                LabelMode::Analytic => sys.drift_under_input(x, &u)?,
                LabelMode::FiniteDifference { h } => {
                    let fwd = rk4_step(sys, x, &u, h);
                    let back = rk4_step(sys, x, &u, -h);
                    fwd.iter().zip(&back).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                }
            };
            if label.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalDomain {
                    what: format!("drift label (channel {channel})"),
                    location: format!("grid point {x:?}"),
                });
            }
            labels.push(&label);
        }
        drift_labels.push(labels);
    }

    let q_samples: Vec<f64> = points.rows().map(|x| stage_cost.eval(x)).collect();
    if let Some(i) = q_samples.iter().position(|q| !q.is_finite()) {
        return Err(Error::NumericalDomain {
            what: "stage cost".into(),
            location: format!("grid point {:?}", points.row(i)),
        });
    }
    Ok(GeneratorDataset {
        points,
        drift_labels,
        q_samples,
    })
}

fn header(n_x: usize, n_u: usize) -> Vec<String> {
    let mut cols: Vec<String> = (1..=n_x).map(|i| format!("x_{i}")).collect();
    for j in 0..=n_u {
        cols.extend((1..=n_x).map(|i| format!("d{j}_{i}")));
    }
    cols.push("q".into());
    cols
}

/// Writes the dataset as comma-separated text with 17 significant digits.
/// A leading `#` line carries the provenance tag.
pub fn write_dataset(path: &Path, data: &GeneratorDataset, tag: &str) -> Result<()> {
    data.validate()?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "# {tag}").map_err(io)?;
    writeln!(w, "{}", header(data.n_x(), data.n_u()).join(",")).map_err(io)?;
    let mut line = String::new();
    for i in 0..data.len() {
        line.clear();
        let values = data
            .points
            .row(i)
            .iter()
            .chain(data.drift_labels.iter().flat_map(|ch| ch.row(i)))
            .chain(std::iter::once(&data.q_samples[i]));
        for (k, v) in values.enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a dataset written by [`write_dataset`]; returns it with the provenance tag.
pub fn read_dataset(path: &Path) -> Result<(GeneratorDataset, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        kind: "dataset",
        path: path.to_path_buf(),
        reason,
    };
    let tag = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .unwrap_or_default()
        .to_string();

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let cols: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let n_x = cols.iter().filter(|c| c.starts_with("x_")).count();
    if n_x == 0 || (cols.len() - 1) % n_x != 0 || (cols.len() - 1) / n_x < 3 {
        return Err(bad(format!("unexpected header {cols:?}")));
    }
    let n_u = (cols.len() - 1) / n_x - 2;
    if cols != header(n_x, n_u) {
        return Err(bad(format!("unexpected header {cols:?}")));
    }

    let mut points = PointSet::with_capacity(n_x, 0);
    let mut drift_labels = vec![PointSet::with_capacity(n_x, 0); n_u + 1];
    let mut q_samples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let values: Vec<f64> = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {line}: {e}")))?;
        if values.len() != cols.len() {
            return Err(bad(format!("row {line} has {} fields", values.len())));
        }
        points.push(&values[..n_x]);
        for (j, ch) in drift_labels.iter_mut().enumerate() {
            ch.push(&values[n_x * (j + 1)..n_x * (j + 2)]);
        }
        q_samples.push(values[values.len() - 1]);
    }
    let data = GeneratorDataset {
        points,
        drift_labels,
        q_samples,
    };
    data.validate().map_err(|e| bad(e.to_string()))?;
    Ok((data, tag))
}
