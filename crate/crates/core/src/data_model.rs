//! Trajectories, missingness indicators and stage-wise complete-case samples.
//!
//! Stages are 1-based throughout the public API: `stage = 1` is the first
//! decision point. A history at stage `t` is laid out as
//! `(X1_*, A1, Y1, X2_*, ..., A{t-1}, Y{t-1}, Xt_*)`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RegimeError, Result};

/// A binary treatment coded as -1 / +1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Minus,
    Plus,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Plus, Arm::Minus];

    pub fn sign(self) -> f64 {
        match self {
            Arm::Plus => 1.0,
            Arm::Minus => -1.0,
        }
    }

    /// `sgn` with the convention `sgn(0) = +1`.
    pub fn from_score(score: f64) -> Arm {
        if score >= 0.0 {
            Arm::Plus
        } else {
            Arm::Minus
        }
    }

    pub fn from_code(code: f64) -> Option<Arm> {
        if code == 1.0 {
            Some(Arm::Plus)
        } else if code == -1.0 {
            Some(Arm::Minus)
        } else {
            None
        }
    }

    pub fn flip(self) -> Arm {
        match self {
            Arm::Plus => Arm::Minus,
            Arm::Minus => Arm::Plus,
        }
    }
}

/// How the final outcome is formed from the per-stage outcomes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    #[default]
    Sum,
    Last,
    Max,
}

impl Combiner {
    pub fn apply(self, outcomes: &[f64]) -> f64 {
        match self {
            Combiner::Sum => outcomes.iter().sum(),
            Combiner::Last => *outcomes.last().expect("at least one stage"),
            Combiner::Max => outcomes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `None` marks a missing covariate entry.
    pub covariates: Vec<Option<f64>>,
    pub treatment: Arm,
    pub outcome: f64,
}

impl StageRecord {
    /// `R_t`: every covariate entry of the stage is observed.
    pub fn observed(&self) -> bool {
        self.covariates.iter().all(Option::is_some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub stages: Vec<StageRecord>,
}

impl Trajectory {
    /// `min(R_1, ..., R_t) = 1`.
    pub fn complete_through(&self, stage: usize) -> bool {
        self.stages[..stage].iter().all(StageRecord::observed)
    }

    /// Raw history vector `h_t`; `None` when any required covariate is missing.
    pub fn history(&self, stage: usize) -> Option<Vec<f64>> {
        let mut h = Vec::new();
        for (k, rec) in self.stages[..stage].iter().enumerate() {
            for x in &rec.covariates {
                h.push((*x)?);
            }
            if k + 1 < stage {
                h.push(rec.treatment.sign());
                h.push(rec.outcome);
            }
        }
        Some(h)
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.outcome).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    /// Treatment columns embedded in later histories.
    Binary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortDataset {
    pub trajectories: Vec<Trajectory>,
    /// Covariate dimension per stage.
    pub dims: Vec<usize>,
    pub combiner: Combiner,
}

impl CohortDataset {
    pub fn new(trajectories: Vec<Trajectory>, dims: Vec<usize>, combiner: Combiner) -> Result<Self> {
        if dims.is_empty() {
            return Err(RegimeError::Data("cohort needs at least one stage".into()));
        }
        let cohort = CohortDataset {
            trajectories,
            dims,
            combiner,
        };
        for traj in &cohort.trajectories {
            cohort.check_shape(traj)?;
        }
        Ok(cohort)
    }

    fn check_shape(&self, traj: &Trajectory) -> Result<()> {
        if traj.stages.len() != self.dims.len() {
            return Err(RegimeError::Data(format!(
                "trajectory {} has {} stages, cohort has {}",
                traj.id,
                traj.stages.len(),
                self.dims.len()
            )));
        }
        for (t, (rec, &p)) in traj.stages.iter().zip(&self.dims).enumerate() {
            if rec.covariates.len() != p {
                return Err(RegimeError::Data(format!(
                    "trajectory {} stage {} has {} covariates, expected {}",
                    traj.id,
                    t + 1,
                    rec.covariates.len(),
                    p
                )));
            }
            if !rec.outcome.is_finite() {
                return Err(RegimeError::Data(format!(
                    "trajectory {} stage {} has a non-finite outcome",
                    traj.id,
                    t + 1
                )));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn final_outcome(&self, traj: &Trajectory) -> f64 {
        self.combiner.apply(&traj.outcomes())
    }

    /// Column names of `h_t`.
    pub fn history_columns(&self, stage: usize) -> Vec<String> {
        let mut names = Vec::new();
        for t in 1..=stage {
            for j in 1..=self.dims[t - 1] {
                names.push(format!("X{t}_{j}"));
            }
            if t < stage {
                names.push(format!("A{t}"));
                names.push(format!("Y{t}"));
            }
        }
        names
    }

    pub fn history_kinds(&self, stage: usize) -> Vec<ColumnKind> {
        self.history_columns(stage)
            .iter()
            .map(|c| {
                if c.starts_with('A') {
                    ColumnKind::Binary
                } else {
                    ColumnKind::Continuous
                }
            })
            .collect()
    }

    /// Fraction of trajectories with `R_t = 0`, per stage.
    pub fn missing_fractions(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.stages())
            .map(|t| self.trajectories.iter().filter(|tr| !tr.stages[t].observed()).count() as f64 / n)
            .collect()
    }

    /// Reads a delimited cohort file: header with `X{t}_{j}`, `A{t}`, `Y{t}`
    /// (and optionally `id`); empty covariate cells are missing.
    pub fn read_csv(path: &Path, combiner: Combiner) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        Self::from_records(&headers, reader.records(), combiner)
    }

    pub fn from_csv_str(text: &str, combiner: Combiner) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        Self::from_records(&headers, reader.records(), combiner)
    }

    fn from_records<I>(headers: &csv::StringRecord, records: I, combiner: Combiner) -> Result<Self>
    where
        I: Iterator<Item = std::result::Result<csv::StringRecord, csv::Error>>,
    {
        enum Col {
            Id,
            X(usize, usize),
            A(usize),
            Y(usize),
        }
        let mut cols = Vec::with_capacity(headers.len());
        let mut dims: BTreeMap<usize, usize> = BTreeMap::new();
        let mut stages = 0;
        for h in headers.iter() {
            let h = h.trim();
            let col = if h == "id" {
                Col::Id
            } else if let Some(rest) = h.strip_prefix('X') {
                let (t, j) = rest
                    .split_once('_')
                    .and_then(|(t, j)| Some((t.parse::<usize>().ok()?, j.parse::<usize>().ok()?)))
                    .ok_or_else(|| RegimeError::Data(format!("bad covariate column `{h}`")))?;
                let e = dims.entry(t).or_insert(0);
                *e = (*e).max(j);
                stages = stages.max(t);
                Col::X(t, j)
            } else if let Some(t) = h.strip_prefix('A').and_then(|t| t.parse::<usize>().ok()) {
                stages = stages.max(t);
                Col::A(t)
            } else if let Some(t) = h.strip_prefix('Y').and_then(|t| t.parse::<usize>().ok()) {
                stages = stages.max(t);
                Col::Y(t)
            } else {
                return Err(RegimeError::Data(format!("unrecognised column `{h}`")));
            };
            if matches!(col, Col::X(0, _) | Col::X(_, 0) | Col::A(0) | Col::Y(0)) {
                return Err(RegimeError::Data(format!("indices are 1-based in `{h}`")));
            }
            cols.push(col);
        }
        if stages == 0 {
            return Err(RegimeError::Data("no stage columns in header".into()));
        }
        let dims: Vec<usize> = (1..=stages).map(|t| dims.get(&t).copied().unwrap_or(0)).collect();

        let mut trajectories = Vec::new();
        for (row, rec) in records.enumerate() {
            let rec = rec?;
            let mut id = row;
            let mut covs: Vec<Vec<Option<f64>>> = dims.iter().map(|&p| vec![None; p]).collect();
            let mut treat: Vec<Option<Arm>> = vec![None; stages];
            let mut outc: Vec<Option<f64>> = vec![None; stages];
            for (col, cell) in cols.iter().zip(rec.iter()) {
                let cell = cell.trim();
                let parse = |what: &str| -> Result<f64> {
                    cell.parse::<f64>()
                        .map_err(|_| RegimeError::Data(format!("row {}: bad {what} value `{cell}`", row + 1)))
                };
                match *col {
                    Col::Id => {
                        id = cell
                            .parse()
                            .map_err(|_| RegimeError::Data(format!("row {}: bad id `{cell}`", row + 1)))?
                    }
                    Col::X(t, j) => {
                        if !cell.is_empty() {
                            covs[t - 1][j - 1] = Some(parse("covariate")?);
                        }
                    }
                    Col::A(t) => {
                        let a = Arm::from_code(parse("treatment")?)
                            .ok_or_else(|| RegimeError::Data(format!("row {}: treatment must be -1 or 1", row + 1)))?;
                        treat[t - 1] = Some(a);
                    }
                    Col::Y(t) => outc[t - 1] = Some(parse("outcome")?),
                }
            }
            let stages_vec = (0..stages)
                .map(|t| {
                    Ok(StageRecord {
                        covariates: covs[t].clone(),
                        treatment: treat[t]
                            .ok_or_else(|| RegimeError::Data(format!("row {}: A{} missing", row + 1, t + 1)))?,
                        outcome: outc[t]
                            .ok_or_else(|| RegimeError::Data(format!("row {}: Y{} missing", row + 1, t + 1)))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory { id, stages: stages_vec });
        }
        CohortDataset::new(trajectories, dims, combiner)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_records(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_records(&mut w)?;
        let bytes = w
            .into_inner()
            .map_err(|e| RegimeError::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn write_records<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut header = vec!["id".to_string()];
        for (t, &p) in self.dims.iter().enumerate() {
            for j in 1..=p {
                header.push(format!("X{}_{}", t + 1, j));
            }
            header.push(format!("A{}", t + 1));
            header.push(format!("Y{}", t + 1));
        }
        w.write_record(&header)?;
        for traj in &self.trajectories {
            let mut row = vec![traj.id.to_string()];
            for rec in &traj.stages {
                for x in &rec.covariates {
                    row.push(x.map(|v| format!("{v:?}")).unwrap_or_default());
                }
                row.push(format!("{}", rec.treatment.sign() as i32));
                row.push(format!("{:?}", rec.outcome));
            }
            w.write_record(&row)?;
        }
        Ok(())
    }
}

/// Per-coordinate affine map of histories onto the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescaling {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub kinds: Vec<ColumnKind>,
    pub degenerate: Vec<bool>,
}

impl Rescaling {
    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| self.apply_coord(j, v)).collect()
    }

    fn apply_coord(&self, j: usize, v: f64) -> f64 {
        let s = match self.kinds[j] {
            ColumnKind::Binary => (v + 1.0) / 2.0,
            ColumnKind::Continuous if self.degenerate[j] => 0.5,
            ColumnKind::Continuous => (v - self.mins[j]) / (self.maxs[j] - self.mins[j]),
        };
        s.clamp(0.0, 1.0)
    }

    pub fn apply_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(rows.nrows(), rows.ncols(), |i, j| self.apply_coord(j, rows[(i, j)]))
    }

    /// Inverse map; degenerate coordinates return their (single) observed value.
    pub fn invert(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(j, &v)| match self.kinds[j] {
                ColumnKind::Binary => 2.0 * v - 1.0,
                ColumnKind::Continuous if self.degenerate[j] => self.mins[j],
                ColumnKind::Continuous => self.mins[j] + v * (self.maxs[j] - self.mins[j]),
            })
            .collect()
    }
}

/// Complete-case sample `S_t`.
#[derive(Clone, Debug)]
pub struct StageSample {
    pub stage: usize,
    pub ids: Vec<usize>,
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// One row per patient; raw values unless `scaling` is set.
    pub histories: DMatrix<f64>,
    pub treatments: Vec<Arm>,
    pub pseudo_outcomes: Vec<Option<f64>>,
    /// `r_pse` per row.
    pub responded: Vec<bool>,
    pub scaling: Option<Rescaling>,
}

impl StageSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| RegimeError::Config(format!("history column `{name}` not in stage {}", self.stage)))
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.histories.row(i).iter().copied().collect()
    }

    pub fn arm_indicator(&self, arm: Arm) -> Vec<bool> {
        self.treatments.iter().map(|&a| a == arm).collect()
    }

    /// Sets pseudo-outcomes; rows without a value are marked as non-responders.
    pub fn with_pseudo_outcomes(mut self, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(RegimeError::Data("pseudo-outcome length mismatch".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RegimeError::Numeric("non-finite pseudo-outcome".into()));
        }
        self.responded = values.iter().map(Option::is_some).collect();
        self.pseudo_outcomes = values;
        Ok(self)
    }
}

fn check_stage(cohort: &CohortDataset, stage: usize) -> Result<()> {
    if stage == 0 || stage > cohort.stages() {
        return Err(RegimeError::Config(format!(
            "stage {stage} outside 1..={}",
            cohort.stages()
        )));
    }
    Ok(())
}

/// Rows with `R_1 = ... = R_t = 1`, ordered by id.
pub fn build_stage_sample(cohort: &CohortDataset, stage: usize) -> Result<StageSample> {
    check_stage(cohort, stage)?;
    let responded = pseudo_missingness_indicator(cohort, stage)?;
    let columns = cohort.history_columns(stage);
    let kinds = cohort.history_kinds(stage);
    let is_final = stage == cohort.stages();

    let mut members: Vec<&Trajectory> = cohort
        .trajectories
        .iter()
        .filter(|tr| tr.complete_through(stage))
        .collect();
    members.sort_by_key(|tr| tr.id);
    // `responded` is computed in the same order.
    let mut data = Vec::with_capacity(members.len() * columns.len());
    for tr in &members {
        let h = tr.history(stage).expect("complete-case row has a full history");
        if h.len() != columns.len() {
            return Err(RegimeError::Data(format!(
                "trajectory {} history length mismatch",
                tr.id
            )));
        }
        data.extend(h);
    }
    let histories = DMatrix::from_row_slice(members.len(), columns.len(), &data);
    let pseudo_outcomes = members
        .iter()
        .map(|tr| is_final.then(|| cohort.final_outcome(tr)))
        .collect();
    Ok(StageSample {
        stage,
        ids: members.iter().map(|tr| tr.id).collect(),
        columns,
        kinds,
        histories,
        treatments: members.iter().map(|tr| tr.stages[stage - 1].treatment).collect(),
        pseudo_outcomes,
        responded,
        scaling: None,
    })
}

/// `r_pse` over the rows of `S_t` (same order as [`build_stage_sample`]):
/// `R_{t+1}` for `t < T`, all ones at the final stage.
pub fn pseudo_missingness_indicator(cohort: &CohortDataset, stage: usize) -> Result<Vec<bool>> {
    check_stage(cohort, stage)?;
    let mut members: Vec<&Trajectory> = cohort
        .trajectories
        .iter()
        .filter(|tr| tr.complete_through(stage))
        .collect();
    members.sort_by_key(|tr| tr.id);
    Ok(members
        .iter()
        .map(|tr| stage == cohort.stages() || tr.stages[stage].observed())
        .collect())
}

/// Maps every history coordinate onto `[0, 1]` using the sample's own range.
pub fn rescale_covariates(sample: &StageSample) -> Result<StageSample> {
    if sample.is_empty() {
        return Err(RegimeError::Data("cannot rescale an empty sample".into()));
    }
    let p = sample.histories.ncols();
    let mut mins = vec![0.0; p];
    let mut maxs = vec![0.0; p];
    let mut degenerate = vec![false; p];
    for j in 0..p {
        let col = sample.histories.column(j);
        mins[j] = col.min();
        maxs[j] = col.max();
        degenerate[j] = sample.kinds[j] == ColumnKind::Continuous && maxs[j] - mins[j] <= 0.0;
    }
    let scaling = Rescaling {
        mins,
        maxs,
        kinds: sample.kinds.clone(),
        degenerate,
    };
    let mut out = sample.clone();
    out.histories = scaling.apply_rows(&sample.histories);
    out.scaling = Some(scaling);
    Ok(out)
}
