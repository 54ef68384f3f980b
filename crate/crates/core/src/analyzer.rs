//! Current/historical attention statistics and top-attended positions.
//!
//! `ca` is the mean diagonal weight `A[i][i]`; `ha` is the mean and population
//! standard deviation of the strictly lower-triangular weights `A[i][j], j < i`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::harness::data::Dataset;
use crate::harness::model::Model;
use crate::harness::vocab::Vocab;
use crate::harness::HarnessError;
use crate::tape::Tape;
use crate::tensor::{BoolMask, Tensor};

/// Tolerance on `ca·diag_count + Σ lower = rows`.
pub const ROW_MASS_TOL: f64 = 1e-9;

const WINDOWS_PER_PASS: usize = 16;

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("attention matrix is empty")]
    Empty,
    #[error("attention matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("head {head} out of range for {n_heads} heads")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("row {row} out of range for a {n}x{n} matrix")]
    RowOutOfRange { row: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("attention rows do not sum to one (layer {layer}, head {head}): residual {residual:e}")]
    RowMass { layer: usize, head: HeadLabel, residual: f64 },
    #[error("stats report line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// Which head a record describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum HeadLabel {
    Head(usize),
    Averaged,
}

impl fmt::Display for HeadLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadLabel::Head(h) => write!(f, "{h}"),
            HeadLabel::Averaged => f.write_str("avg"),
        }
    }
}

impl FromStr for HeadLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "avg" => Ok(HeadLabel::Averaged),
            _ => s.parse().map(HeadLabel::Head).map_err(|_| format!("bad head label {s:?}")),
        }
    }
}

/// Pooled statistics. `None` marks an undefined value (no entries, or a
/// ratio over a zero `ha_mean`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttnStats {
    pub layer: usize,
    pub head: HeadLabel,
    pub ca: Option<f64>,
    pub ha_mean: Option<f64>,
    pub ha_std: Option<f64>,
    pub ratio: Option<f64>,
    pub diag_count: usize,
    pub lower_count: usize,
}

impl AttnStats {
    /// `ca·diag_count + ha_mean·lower_count - diag_count`; zero when every
    /// included row of a causal row-stochastic matrix sums to one.
    pub fn row_mass_residual(&self) -> f64 {
        let diag = self.ca.unwrap_or(0.0) * self.diag_count as f64;
        let lower = self.ha_mean.unwrap_or(0.0) * self.lower_count as f64;
        diag + lower - self.diag_count as f64
    }
}

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: &Neumaier) {
        self.add(other.sum);
        self.add(other.comp);
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mergeable accumulator over diagonal and strictly lower entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsAccumulator {
    include_first_row: bool,
    diag_sum: Neumaier,
    diag_count: usize,
    lower_count: usize,
    lower_mean: f64,
    lower_m2: f64,
}

impl StatsAccumulator {
    pub fn new(include_first_row: bool) -> Self {
        Self {
            include_first_row,
            diag_sum: Neumaier::default(),
            diag_count: 0,
            lower_count: 0,
            lower_mean: 0.0,
            lower_m2: 0.0,
        }
    }

    /// Adds the entries of one causal attention matrix.
    pub fn add_matrix(&mut self, a: &Tensor) -> Result<(), AnalyzerError> {
        let n = square(a)?;
        let first = usize::from(!self.include_first_row);
        for i in first..n {
            let row = a.row(i);
            self.diag_sum.add(row[i]);
            self.diag_count += 1;
            for &x in &row[..i] {
                self.lower_count += 1;
                let delta = x - self.lower_mean;
                self.lower_mean += delta / self.lower_count as f64;
                self.lower_m2 += delta * (x - self.lower_mean);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.diag_sum.merge(&other.diag_sum);
        self.diag_count += other.diag_count;
        let (na, nb) = (self.lower_count as f64, other.lower_count as f64);
        if other.lower_count == 0 {
            return;
        }
        if self.lower_count == 0 {
            self.lower_count = other.lower_count;
            self.lower_mean = other.lower_mean;
            self.lower_m2 = other.lower_m2;
            return;
        }
        let n = na + nb;
        let delta = other.lower_mean - self.lower_mean;
        self.lower_mean += delta * nb / n;
        self.lower_m2 += other.lower_m2 + delta * delta * na * nb / n;
        self.lower_count += other.lower_count;
    }

    pub fn finish(&self, layer: usize, head: HeadLabel) -> AttnStats {
        let ca = (self.diag_count > 0).then(|| self.diag_sum.value() / self.diag_count as f64);
        let (ha_mean, ha_std) = if self.lower_count > 0 {
            let var = (self.lower_m2 / self.lower_count as f64).max(0.0);
            (Some(self.lower_mean), Some(var.sqrt()))
        } else {
            (None, None)
        };
        let ratio = match (ca, ha_mean) {
            (Some(c), Some(h)) if h > 0.0 => Some(c / h),
            _ => None,
        };
        AttnStats {
            layer,
            head,
            ca,
            ha_mean,
            ha_std,
            ratio,
            diag_count: self.diag_count,
            lower_count: self.lower_count,
        }
    }
}

fn square(a: &Tensor) -> Result<usize, AnalyzerError> {
    if a.rank() != 2 {
        return Err(AnalyzerError::NotSquare {
            rows: a.rows(),
            cols: a.numel() / a.rows().max(1),
        });
    }
    let (rows, cols) = (a.rows(), a.cols());
    if rows != cols {
        return Err(AnalyzerError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(AnalyzerError::Empty);
    }
    Ok(rows)
}

/// Statistics of a single attention matrix, reported as layer 0, head 0.
pub fn matrix_stats(a: &Tensor, include_first_row: bool) -> Result<AttnStats, AnalyzerError> {
    let mut acc = StatsAccumulator::new(include_first_row);
    acc.add_matrix(a)?;
    Ok(acc.finish(0, HeadLabel::Head(0)))
}

/// Pools every entry of several matrices into one record.
pub fn pool_stats(matrices: &[Tensor], include_first_row: bool) -> Result<AttnStats, AnalyzerError> {
    let mut acc = StatsAccumulator::new(include_first_row);
    for a in matrices {
        acc.add_matrix(a)?;
    }
    Ok(acc.finish(0, HeadLabel::Head(0)))
}

/// Layers and heads to sweep. `None` means all; a sweep over all heads also
/// emits the head-averaged record for each layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Selection {
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

fn check_selection(model: &Model, sel: Selection) -> Result<(Vec<usize>, Vec<usize>), AnalyzerError> {
    let (n_layers, n_heads) = (model.config.n_layers, model.config.n_heads);
    let layers = match sel.layer {
        Some(l) if l >= n_layers => return Err(AnalyzerError::LayerOutOfRange { layer: l, n_layers }),
        Some(l) => vec![l],
        None => (0..n_layers).collect(),
    };
    let heads = match sel.head {
        Some(h) if h >= n_heads => return Err(AnalyzerError::HeadOutOfRange { head: h, n_heads }),
        Some(h) => vec![h],
        None => (0..n_heads).collect(),
    };
    Ok((layers, heads))
}

/// Attention matrices (as values) of each evaluation window:
/// `out[window][layer][head]`.
fn window_attention(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<Vec<Tensor>>>, AnalyzerError> {
    let windows = dataset.eval_windows(model.config.max_seq_len);
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(WINDOWS_PER_PASS) {
        let inputs: Vec<&[usize]> = chunk.iter().map(|w| dataset.window_inputs(w)).collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &inputs, false)?;
        for s in 0..chunk.len() {
            out.push(
                fwd.traces
                    .iter()
                    .map(|layer| layer[s].iter().map(|t| tape.value(t.final_weights()).clone()).collect())
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn average(mats: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(mats[0].shape());
    for m in mats {
        for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    let k = mats.len() as f64;
    acc.map(|v| v / k)
}

/// Pools attention statistics over every evaluation window of `dataset`.
/// Windows never contain padding, so every pooled entry is a real position.
pub fn corpus_stats(
    model: &Model,
    dataset: &Dataset,
    selection: Selection,
    include_first_row: bool,
) -> Result<Vec<AttnStats>, AnalyzerError> {
    let (layers, heads) = check_selection(model, selection)?;
    let with_avg = selection.head.is_none();
    let attention = window_attention(model, dataset)?;
    let mut out = Vec::new();
    for &l in &layers {
        let mut per_head = vec![StatsAccumulator::new(include_first_row); heads.len()];
        let mut avg = StatsAccumulator::new(include_first_row);
        for window in &attention {
            for (acc, &h) in per_head.iter_mut().zip(&heads) {
                acc.add_matrix(&window[l][h])?;
            }
            if with_avg {
                avg.add_matrix(&average(&window[l]))?;
            }
        }
        let mut records: Vec<AttnStats> = per_head
            .iter()
            .zip(&heads)
            .map(|(acc, &h)| acc.finish(l, HeadLabel::Head(h)))
            .collect();
        if with_avg {
            records.push(avg.finish(l, HeadLabel::Averaged));
        }
        for r in &records {
            let residual = r.row_mass_residual();
            if residual.abs() > ROW_MASS_TOL {
                return Err(AnalyzerError::RowMass {
                    layer: l,
                    head: r.head,
                    residual,
                });
            }
        }
        out.extend(records);
    }
    Ok(out)
}

/// The `k` causally visible positions of `row` with the largest weights,
/// ties broken towards the smaller position.
pub fn top_attended(a: &Tensor, row: usize, k: usize) -> Result<Vec<(usize, f64)>, AnalyzerError> {
    let n = square(a)?;
    top_attended_masked(a, &BoolMask::causal(n), row, k)
}

/// As [`top_attended`], with visibility taken from `mask`.
pub fn top_attended_masked(
    a: &Tensor,
    mask: &BoolMask,
    row: usize,
    k: usize,
) -> Result<Vec<(usize, f64)>, AnalyzerError> {
    let n = square(a)?;
    if row >= n {
        return Err(AnalyzerError::RowOutOfRange { row, n });
    }
    if k == 0 {
        return Err(AnalyzerError::ZeroK);
    }
    let mut visible: Vec<(usize, f64)> = a
        .row(row)
        .iter()
        .enumerate()
        .filter(|&(j, _)| mask.is_visible(row, j))
        .map(|(j, &w)| (j, w))
        .collect();
    visible.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    visible.truncate(k);
    Ok(visible)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttendedToken {
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

/// One analyzed position: head-averaged attention of `row` in window
/// `sequence`, which predicts the token at `predicted_index`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopAttendedRecord {
    pub sequence: usize,
    pub layer: usize,
    pub row: usize,
    pub predicted_index: usize,
    pub predicted_token: String,
    pub attended: Vec<AttendedToken>,
}

/// Top-`k` reports for every position of every evaluation window, per layer.
/// Positions and `predicted_index` are relative to the window start.
pub fn top_attended_report(
    model: &Model,
    dataset: &Dataset,
    vocab: &Vocab,
    k: usize,
) -> Result<Vec<Vec<TopAttendedRecord>>, AnalyzerError> {
    if k == 0 {
        return Err(AnalyzerError::ZeroK);
    }
    let windows = dataset.eval_windows(model.config.max_seq_len);
    let attention = window_attention(model, dataset)?;
    let mut out = vec![Vec::new(); model.config.n_layers];
    for (s, (w, per_layer)) in windows.iter().zip(&attention).enumerate() {
        let inputs = dataset.window_inputs(w);
        let targets = dataset.window_targets(w);
        for (l, heads) in per_layer.iter().enumerate() {
            let avg = average(heads);
            for row in 0..inputs.len() {
                let attended = top_attended(&avg, row, k)?
                    .into_iter()
                    .map(|(position, weight)| AttendedToken {
                        position,
                        token: vocab.token(inputs[position]).to_string(),
                        weight,
                    })
                    .collect();
                out[l].push(TopAttendedRecord {
                    sequence: s,
                    layer: l,
                    row,
                    predicted_index: row + 1,
                    predicted_token: vocab.token(targets[row]).to_string(),
                    attended,
                });
            }
        }
    }
    Ok(out)
}

pub const STATS_HEADER: [&str; 8] = ["layer", "head", "ca", "ha_mean", "ha_std", "ratio", "diag_count", "lower_count"];

/// Six significant digits, plain notation where reasonable.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_sig6)
}

/// Renders the stats CSV.
pub fn emit_stats_report(stats: &[AttnStats]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STATS_HEADER).expect("in-memory write");
    for s in stats {
        w.write_record([
            s.layer.to_string(),
            s.head.to_string(),
            cell(s.ca),
            cell(s.ha_mean),
            cell(s.ha_std),
            cell(s.ratio),
            s.diag_count.to_string(),
            s.lower_count.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn parse_stats_report(text: &str) -> Result<Vec<AttnStats>, AnalyzerError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| parse_err(1, e))?;
    if header.iter().ne(STATS_HEADER) {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        let num = |k: usize| -> Result<Option<f64>, AnalyzerError> {
            match &rec[k] {
                "NA" => Ok(None),
                s => s.parse().map(Some).map_err(|_| parse_err(line, format!("bad number {s:?}"))),
            }
        };
        let count = |k: usize| -> Result<usize, AnalyzerError> {
            rec[k].parse().map_err(|_| parse_err(line, format!("bad count {:?}", &rec[k])))
        };
        out.push(AttnStats {
            layer: count(0)?,
            head: rec[1].parse().map_err(|e| parse_err(line, e))?,
            ca: num(2)?,
            ha_mean: num(3)?,
            ha_std: num(4)?,
            ratio: num(5)?,
            diag_count: count(6)?,
            lower_count: count(7)?,
        });
    }
    Ok(out)
}

fn parse_err(line: usize, e: impl ToString) -> AnalyzerError {
    AnalyzerError::Parse {
        line,
        message: e.to_string(),
    }
}
