//! Closed-set identification, open-set verification and the JPEG
//! domain-adaptation grid.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::normalize_by_std;
use crate::pce::{pce_planes, DEFAULT_EXCLUSION_RADIUS};
use crate::pcn::{PairTensor, PcnModel};
use crate::plane::Plane;
use crate::training::{train, DeviceSet, Split, TrainConfig, TrainHistory};

/// Anything that scores a residual against a fingerprint, higher meaning
/// more likely the same device. Inputs are already cropped to equal size.
pub trait Scorer: Sync {
    fn tag(&self) -> &str;

    fn score(&self, residual: &Plane, fingerprint: &Plane) -> Result<f64>;

    /// One residual against many fingerprints.
    fn score_row(&self, residual: &Plane, fingerprints: &[&Plane]) -> Result<Vec<f64>> {
        fingerprints.iter().map(|k| self.score(residual, k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PceScorer {
    pub exclusion_radius: usize,
}

impl Default for PceScorer {
    fn default() -> Self {
        PceScorer { exclusion_radius: DEFAULT_EXCLUSION_RADIUS }
    }
}

impl Scorer for PceScorer {
    fn tag(&self) -> &str {
        "pce"
    }

    fn score(&self, residual: &Plane, fingerprint: &Plane) -> Result<f64> {
        Ok(pce_planes(residual, fingerprint, self.exclusion_radius)?.pce)
    }
}

/// Which network output is reported as the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcnOutput {
    /// Pre-sigmoid value; keeps ranking resolution where the sigmoid saturates.
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcnScorer {
    pub model: PcnModel<f32>,
    pub output: PcnOutput,
}

impl PcnScorer {
    pub fn new(model: PcnModel<f32>) -> Self {
        PcnScorer { model, output: PcnOutput::Logit }
    }

    fn pick(&self, s: crate::pcn::MatchScore) -> f64 {
        match self.output {
            PcnOutput::Logit => s.logit,
            PcnOutput::Probability => s.c_s,
        }
    }

    /// Same as [`Scorer::score_row`] but one pair at a time on the calling
    /// thread.
    pub fn score_row_sequential(&self, residual: &Plane, fingerprints: &[&Plane]) -> Result<Vec<f64>> {
        let w = normalize_by_std(residual)?;
        fingerprints
            .iter()
            .map(|k| Ok(self.pick(self.model.forward(&PairTensor::from_normalized(&normalize_by_std(k)?, &w)?)?)))
            .collect()
    }
}

impl Scorer for PcnScorer {
    fn tag(&self) -> &str {
        "pcn"
    }

    fn score(&self, residual: &Plane, fingerprint: &Plane) -> Result<f64> {
        Ok(self.pick(self.model.forward(&PairTensor::new(fingerprint, residual)?)?))
    }

    /// Normalizes the residual once and runs the pairs in parallel.
    fn score_row(&self, residual: &Plane, fingerprints: &[&Plane]) -> Result<Vec<f64>> {
        let w = normalize_by_std(residual)?;
        let pairs = fingerprints
            .par_iter()
            .map(|k| PairTensor::from_normalized(&normalize_by_std(k)?, &w))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.model.forward_batch(&pairs)?.into_iter().map(|s| self.pick(s)).collect())
    }
}

/// Scores of query residuals (rows) against fingerprints (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub query_names: Vec<String>,
    /// True source device of every row.
    pub query_devices: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major, `rows * cols`.
    pub values: Vec<f64>,
    pub scorer: String,
}

impl ScoreMatrix {
    pub fn new(
        query_names: Vec<String>,
        query_devices: Vec<String>,
        columns: Vec<String>,
        values: Vec<f64>,
        scorer: impl Into<String>,
    ) -> Result<Self> {
        if query_names.len() != query_devices.len() || values.len() != query_names.len() * columns.len() {
            return Err(Error::dim(format!(
                "{} names, {} devices, {} columns and {} values do not form a matrix",
                query_names.len(),
                query_devices.len(),
                columns.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite score for query {} against {}",
                query_names[i / columns.len()],
                columns[i % columns.len()]
            )));
        }
        Ok(ScoreMatrix { query_names, query_devices, columns, values, scorer: scorer.into() })
    }

    pub fn rows(&self) -> usize {
        self.query_names.len()
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    /// Same matrix with every score passed through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ScoreMatrix> {
        ScoreMatrix::new(
            self.query_names.clone(),
            self.query_devices.clone(),
            self.columns.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
            self.scorer.clone(),
        )
    }

    fn true_columns(&self) -> Result<Vec<usize>> {
        self.query_devices
            .iter()
            .map(|d| {
                self.columns
                    .iter()
                    .position(|c| c == d)
                    .ok_or_else(|| Error::config(format!("true device {d:?} is not among the fingerprint columns")))
            })
            .collect()
    }

    /// Long format: `query,device,score`.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "query,device,score")?;
        for i in 0..self.rows() {
            for (j, col) in self.columns.iter().enumerate() {
                writeln!(out, "{},{},{:.10e}", self.query_names[i], col, self.get(i, j))?;
            }
        }
        Ok(())
    }
}

/// Score the `split` residuals of `ds` against all of its fingerprints,
/// both cropped centrally to `crop`. Rows run in parallel.
pub fn score_matrix(ds: &DeviceSet, split: Split, scorer: &dyn Scorer, crop: usize) -> Result<ScoreMatrix> {
    let fps = ds.devices.iter().map(|d| d.fingerprint.k.central_square(crop)).collect::<Result<Vec<_>>>()?;
    let fp_refs: Vec<&Plane> = fps.iter().collect();
    let queries = ds.queries(split);
    if queries.is_empty() {
        return Err(Error::EmptyInput(format!("no {split} residuals to score")));
    }
    let rows = queries
        .par_iter()
        .map(|(_, w)| scorer.score_row(&w.values.central_square(crop)?, &fp_refs))
        .collect::<Result<Vec<_>>>()?;
    let mut names = Vec::with_capacity(queries.len());
    let mut counters = vec![0usize; ds.len()];
    for (d, _) in &queries {
        names.push(format!("{}/{split}/{:03}", ds.devices[*d].device_id, counters[*d]));
        counters[*d] += 1;
    }
    ScoreMatrix::new(
        names,
        queries.iter().map(|(d, _)| ds.devices[*d].device_id.clone()).collect(),
        ds.ids().into_iter().map(String::from).collect(),
        rows.concat(),
        scorer.tag(),
    )
}

/// Index of the largest value; ties go to the earliest.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedSetResult {
    /// Mean of the per-device accuracies.
    pub a_cs: f64,
    /// `(device, accuracy)` for every device that has at least one query,
    /// in column order.
    pub per_device: Vec<(String, f64)>,
}

pub fn closed_set_accuracy(sm: &ScoreMatrix) -> Result<ClosedSetResult> {
    if sm.rows() == 0 {
        return Err(Error::EmptyInput("score matrix has no rows".into()));
    }
    let truth = sm.true_columns()?;
    let mut hits = vec![0usize; sm.cols()];
    let mut totals = vec![0usize; sm.cols()];
    for (i, &t) in truth.iter().enumerate() {
        totals[t] += 1;
        if argmax(sm.row(i)) == t {
            hits[t] += 1;
        }
    }
    let per_device: Vec<(String, f64)> = (0..sm.cols())
        .filter(|&j| totals[j] > 0)
        .map(|j| (sm.columns[j].clone(), hits[j] as f64 / totals[j] as f64))
        .collect();
    let a_cs = per_device.iter().map(|(_, a)| a).sum::<f64>() / per_device.len() as f64;
    Ok(ClosedSetResult { a_cs, per_device })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// From `(0, 0)` at an infinite threshold to `(1, 1)`.
    pub points: Vec<RocPoint>,
}

impl Roc {
    /// Area under the swept curve by the trapezoid rule.
    pub fn trapezoid_area(&self) -> f64 {
        self.points.windows(2).map(|p| (p[1].fpr - p[0].fpr) * (p[1].tpr + p[0].tpr) / 2.0).sum()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "fpr,tpr,threshold")?;
        for p in &self.points {
            writeln!(out, "{:.10},{:.10},{:e}", p.fpr, p.tpr, p.threshold)?;
        }
        Ok(())
    }
}

/// `P(pos > neg) + P(pos = neg) / 2` over all pairs, plus the ROC from a
/// threshold sweep over every distinct score.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<Roc> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput(format!(
            "need positive and negative scores, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    // every tie group advances the curve at once; its area is a trapezoid,
    // which is exactly the half credit for tied pairs
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut wins = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (mut gp, mut gn) = (0usize, 0usize);
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        wins += gn as f64 * tp as f64 + 0.5 * gn as f64 * gp as f64;
        tp += gp;
        fp += gn;
        points.push(RocPoint { fpr: fp as f64 / nn, tpr: tp as f64 / np, threshold: t });
    }
    Ok(Roc { auc: wins / (np * nn), points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetResult {
    /// Pooled over every column.
    pub roc: Roc,
    /// `(device, auc)` per column that has both positives and negatives.
    pub per_device: Vec<(String, f64)>,
}

/// Positives are scores of residuals against their own device's
/// fingerprint; negatives are all other entries.
pub fn open_set(sm: &ScoreMatrix) -> Result<OpenSetResult> {
    let truth = sm.true_columns()?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut per_col: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); sm.cols()];
    for (i, &t) in truth.iter().enumerate() {
        for (j, &v) in sm.row(i).iter().enumerate() {
            if j == t {
                pos.push(v);
                per_col[j].0.push(v);
            } else {
                neg.push(v);
                per_col[j].1.push(v);
            }
        }
    }
    let roc = roc_auc(&pos, &neg)?;
    let per_device = per_col
        .iter()
        .enumerate()
        .filter(|(_, (p, n))| !p.is_empty() && !n.is_empty())
        .map(|(j, (p, n))| Ok((sm.columns[j].clone(), roc_auc(p, n)?.auc)))
        .collect::<Result<Vec<_>>>()?;
    Ok(OpenSetResult { roc, per_device })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub a_cs: f64,
    pub auc_os: f64,
    pub per_device_accuracy: Vec<(String, f64)>,
    pub per_device_auc: Vec<(String, f64)>,
    pub roc: Roc,
    /// `(key, value)` pairs describing how the report was produced.
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn from_matrix(sm: &ScoreMatrix, config: Vec<(String, String)>) -> Result<Self> {
        let closed = closed_set_accuracy(sm)?;
        let open = open_set(sm)?;
        Ok(EvalReport {
            a_cs: closed.a_cs,
            auc_os: open.roc.auc,
            per_device_accuracy: closed.per_device,
            per_device_auc: open.per_device,
            roc: open.roc,
            config,
        })
    }

    /// `metric,value` rows: headline numbers, per-device values and the
    /// config echo.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "metric,value")?;
        writeln!(out, "a_cs,{:.6}", self.a_cs)?;
        writeln!(out, "auc_os,{:.6}", self.auc_os)?;
        for (d, a) in &self.per_device_accuracy {
            writeln!(out, "accuracy:{d},{a:.6}")?;
        }
        for (d, a) in &self.per_device_auc {
            writeln!(out, "auc:{d},{a:.6}")?;
        }
        for (k, v) in &self.config {
            writeln!(out, "config:{k},{v}")?;
        }
        Ok(())
    }

    /// Writes `scores.csv`, `report.csv` and `roc.csv` into `dir`.
    pub fn save(&self, sm: &ScoreMatrix, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        sm.write_csv(&mut buf)?;
        fs::write(dir.join("scores.csv"), &buf)?;
        buf.clear();
        self.write_csv(&mut buf)?;
        fs::write(dir.join("report.csv"), &buf)?;
        buf.clear();
        self.roc.write_csv(&mut buf)?;
        fs::write(dir.join("roc.csv"), &buf)?;
        Ok(())
    }
}

/// Score the eval split of `ds` and summarize both protocols.
pub fn open_set_eval(ds: &DeviceSet, scorer: &dyn Scorer, crop: usize) -> Result<(EvalReport, ScoreMatrix)> {
    let sm = score_matrix(ds, Split::Eval, scorer, crop)?;
    let config = vec![
        ("scorer".to_string(), scorer.tag().to_string()),
        ("crop".to_string(), crop.to_string()),
        ("devices".to_string(), ds.len().to_string()),
        ("queries".to_string(), sm.rows().to_string()),
    ];
    Ok((EvalReport::from_matrix(&sm, config)?, sm))
}

/// Training or evaluation variant of the domain grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Single,
    Double,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Single => "single",
            Variant::Double => "double",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub train: Variant,
    pub eval: Variant,
    pub a_cs: f64,
    pub auc_os: f64,
    pub config: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub histories: Vec<(Variant, TrainHistory)>,
}

impl GridReport {
    pub fn cell(&self, train: Variant, eval: Variant) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.train == train && c.eval == eval)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "train,eval,a_cs,auc_os,config")?;
        for c in &self.cells {
            let cfg: Vec<String> = c.config.iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(out, "{},{},{:.6},{:.6},{}", c.train, c.eval, c.a_cs, c.auc_os, cfg.join(";"))?;
        }
        Ok(())
    }
}

/// Which devices train the network and which are held out for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl DeviceSplit {
    /// First `n_train` devices train, the rest evaluate.
    pub fn first(n_train: usize, total: usize) -> Self {
        DeviceSplit { train: (0..n_train).collect(), eval: (n_train..total).collect() }
    }
}

/// Evaluate already trained models on both variants: 2x2 cells.
pub fn evaluate_grid(
    models: &[(Variant, &PcnModel<f32>)],
    single: &DeviceSet,
    double: &DeviceSet,
    eval_devices: &[usize],
    crop: usize,
) -> Result<Vec<GridCell>> {
    if single.ids() != double.ids() {
        return Err(Error::config("single and double datasets must list the same devices in the same order"));
    }
    let eval_sets = [(Variant::Single, single.subset(eval_devices)?), (Variant::Double, double.subset(eval_devices)?)];
    let mut cells = Vec::new();
    for (train, model) in models {
        let scorer = PcnScorer::new((*model).clone());
        for (eval, set) in &eval_sets {
            let (report, _) = open_set_eval(set, &scorer, crop)?;
            let mut config = report.config.clone();
            config.push(("train".into(), train.to_string()));
            config.push(("eval".into(), eval.to_string()));
            cells.push(GridCell { train: *train, eval: *eval, a_cs: report.a_cs, auc_os: report.auc_os, config });
        }
    }
    Ok(cells)
}

/// Train one model per compression variant and evaluate each on both.
pub fn domain_grid(
    single: &DeviceSet,
    double: &DeviceSet,
    split: &DeviceSplit,
    cfg: &TrainConfig,
) -> Result<GridReport> {
    if single.ids() != double.ids() {
        return Err(Error::config("single and double datasets must list the same devices in the same order"));
    }
    let (m_single, h_single) = train(&single.subset(&split.train)?, cfg)?;
    let (m_double, h_double) = train(&double.subset(&split.train)?, cfg)?;
    let cells = evaluate_grid(
        &[(Variant::Single, &m_single), (Variant::Double, &m_double)],
        single,
        double,
        &split.eval,
        cfg.crop,
    )?;
    Ok(GridReport { cells, histories: vec![(Variant::Single, h_single), (Variant::Double, h_double)] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&str], cols: &[&str], values: Vec<f64>) -> ScoreMatrix {
        ScoreMatrix::new(
            (0..rows.len()).map(|i| format!("q{i}")).collect(),
            rows.iter().map(|s| s.to_string()).collect(),
            cols.iter().map(|s| s.to_string()).collect(),
            values,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn closed_set_examples() {
        let diag = matrix(&["a", "b", "c"], &["a", "b", "c"], vec![5.0, 1.0, 0.0, 0.0, 3.0, 1.0, 1.0, 2.0, 9.0]);
        assert_eq!(closed_set_accuracy(&diag).unwrap().a_cs, 1.0);

        let flat = matrix(&["a", "b", "c"], &["a", "b", "c"], vec![1.0; 9]);
        assert!((closed_set_accuracy(&flat).unwrap().a_cs - 1.0 / 3.0).abs() < 1e-15);

        // device c has two queries, one of them misattributed to a
        let one_err = matrix(
            &["a", "b", "c", "c"],
            &["a", "b", "c"],
            vec![3.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 3.0, 3.0, 0.0, 1.0],
        );
        let r = closed_set_accuracy(&one_err).unwrap();
        assert!((r.a_cs - (1.0 + 1.0 + 0.5) / 3.0).abs() < 1e-15);
        assert_eq!(r.per_device[2], ("c".to_string(), 0.5));

        let unknown = matrix(&["z"], &["a"], vec![1.0]);
        assert!(matches!(closed_set_accuracy(&unknown), Err(Error::Config(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().auc, 0.5);
        let roc = roc_auc(&[0.9, 0.4], &[0.6, 0.1]).unwrap();
        assert!((roc.auc - 0.75).abs() < 1e-15);
        assert!((roc.trapezoid_area() - roc.auc).abs() < 1e-12);
        assert_eq!(roc.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(roc.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(matches!(roc_auc(&[], &[1.0]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn open_set_extremes() {
        // oracle scorer: 1 on the true pair, 0 elsewhere
        let oracle = matrix(&["a", "b", "b"], &["a", "b"], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(open_set(&oracle).unwrap().roc.auc, 1.0);
        let constant = oracle.map(|_| 7.0).unwrap();
        assert_eq!(open_set(&constant).unwrap().roc.auc, 0.5);
    }

    #[test]
    fn report_csv_has_headline_rows() {
        let sm = matrix(&["a", "b"], &["a", "b"], vec![2.0, 0.0, 0.0, 1.0]);
        let report = EvalReport::from_matrix(&sm, vec![("crop".into(), "64".into())]).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,value\na_cs,1.000000\nauc_os,1.000000\n"));
        assert!(text.contains("config:crop,64"));
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let r = ScoreMatrix::new(vec!["q".into()], vec!["a".into()], vec!["a".into()], vec![f64::NAN], "x");
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
