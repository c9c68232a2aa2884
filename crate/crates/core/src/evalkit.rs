//! Detection scoring: optimal one-to-one matching within a radius,
//! precision/recall/F1, localization error and aggregation over test sets.
//!
//! Standard deviations use the population (divide by n) convention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrusError};
use crate::fieldsim::{encode_labels, rng_from, GridSpec};
use crate::formats::PointSet;
use crate::network::Detection;
use crate::srusform::decode_detections;

pub const STD_CONVENTION: &str = "population";

/// One-to-one pairing of predictions with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred index, gt index, distance in um)`, sorted by pred index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }

    fn from_pairs(mut pairs: Vec<(usize, usize, f64)>, n_pred: usize, n_gt: usize) -> Self {
        pairs.sort_by_key(|p| p.0);
        let tp = pairs.len();
        Self {
            pairs,
            tp,
            fp: n_pred - tp,
            fn_: n_gt - tp,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Minimum-cost perfect assignment on a square matrix (shortest augmenting
/// paths with potentials). Returns `col_of_row`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based internals; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Optimal matching: the most pairs within `radius_um`, and among those
/// the smallest total distance.
pub fn match_detections(pred: &[[f64; 2]], gt: &[[f64; 2]], radius_um: f64) -> Result<MatchResult> {
    if !(radius_um > 0.0 && radius_um.is_finite()) {
        return Err(SrusError::config("match radius must be positive"));
    }
    let (np, ng) = (pred.len(), gt.len());
    if np == 0 || ng == 0 {
        return Ok(MatchResult::from_pairs(Vec::new(), np, ng));
    }
    // A forbidden cell costs more than any set of feasible pairs could save,
    // so the optimum maximizes the pair count before minimizing distance.
    let big = radius_um * (np.min(ng) as f64 + 1.0) + 1.0;
    let n = np.max(ng);
    let mut cost = vec![vec![big; n]; n];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = dist(*p, *g);
            if d <= radius_um {
                cost[i][j] = d;
            }
        }
    }
    let assign = hungarian(&cost);
    let pairs = assign
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < np && j < ng)
        .filter_map(|(i, &j)| {
            let d = dist(pred[i], gt[j]);
            (d <= radius_um).then_some((i, j, d))
        })
        .collect();
    Ok(MatchResult::from_pairs(pairs, np, ng))
}

/// Exhaustive search over all partial one-to-one assignments. Exponential;
/// meant for checking [`match_detections`] on small inputs.
pub fn brute_force_match(pred: &[[f64; 2]], gt: &[[f64; 2]], radius_um: f64) -> MatchResult {
    fn go(
        i: usize,
        pred: &[[f64; 2]],
        gt: &[[f64; 2]],
        r: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize, f64)>,
        best: &mut Option<(usize, f64, Vec<(usize, usize, f64)>)>,
    ) {
        if i == pred.len() {
            let total: f64 = cur.iter().map(|p| p.2).sum();
            let better = match best {
                None => true,
                Some((n, c, _)) => cur.len() > *n || (cur.len() == *n && total < *c),
            };
            if better {
                *best = Some((cur.len(), total, cur.clone()));
            }
            return;
        }
        go(i + 1, pred, gt, r, used, cur, best);
        for j in 0..gt.len() {
            let d = dist(pred[i], gt[j]);
            if !used[j] && d <= r {
                used[j] = true;
                cur.push((i, j, d));
                go(i + 1, pred, gt, r, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    go(0, pred, gt, radius_um, &mut vec![false; gt.len()], &mut Vec::new(), &mut best);
    let pairs = best.map(|b| b.2).unwrap_or_default();
    MatchResult::from_pairs(pairs, pred.len(), gt.len())
}

/// Precision, recall and F1 with zero conventions for empty denominators.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when there are no true positives.
    pub mean_loc_error_um: Option<f64>,
    pub std_loc_error_um: Option<f64>,
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Mean and standard deviation of matched distances.
pub fn localization_error(m: &MatchResult) -> Option<(f64, f64)> {
    let d: Vec<f64> = m.pairs.iter().map(|p| p.2).collect();
    mean_std(&d)
}

pub fn f1_score(m: &MatchResult) -> Metrics {
    Tally::from(m).metrics()
}

/// Pooled counts and distances over many frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub distances: Vec<f64>,
}

impl Tally {
    pub fn add(&mut self, m: &MatchResult) {
        self.tp += m.tp;
        self.fp += m.fp;
        self.fn_ += m.fn_;
        self.distances.extend(m.pairs.iter().map(|p| p.2));
    }

    pub fn metrics(&self) -> Metrics {
        let (precision, recall, f1) = prf(self.tp, self.fp, self.fn_);
        let loc = mean_std(&self.distances);
        Metrics {
            precision,
            recall,
            f1,
            mean_loc_error_um: loc.map(|l| l.0),
            std_loc_error_um: loc.map(|l| l.1),
        }
    }
}

impl From<&MatchResult> for Tally {
    fn from(m: &MatchResult) -> Self {
        let mut t = Tally::default();
        t.add(m);
        t
    }
}

/// Match every frame present in both point sets and pool the results.
/// Returns the tally and the number of frames scored.
pub fn score_point_sets(pred: &PointSet, truth: &PointSet, radius_um: f64) -> Result<(Tally, usize)> {
    let mut tally = Tally::default();
    let mut frames = 0;
    for fp in &pred.frames {
        if let Some(gt) = truth.points_at(fp.frame) {
            tally.add(&match_detections(&fp.points, gt, radius_um)?);
            frames += 1;
        }
    }
    Ok((tally, frames))
}

/// Mean ± population std of one metric across sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_sets: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    /// Over the sets where the error is defined; `None` if none are.
    pub mean_loc_error_um: Option<MeanStd>,
    pub std_loc_error_um: Option<MeanStd>,
}

pub fn aggregate(sets: &[Metrics]) -> Result<AggregateMetrics> {
    if sets.is_empty() {
        return Err(SrusError::input("cannot aggregate an empty list of metrics"));
    }
    let field = |f: &dyn Fn(&Metrics) -> Option<f64>| {
        let v: Vec<f64> = sets.iter().filter_map(f).collect();
        mean_std(&v).map(|(mean, std)| MeanStd { mean, std })
    };
    Ok(AggregateMetrics {
        n_sets: sets.len(),
        precision: field(&|m| Some(m.precision)).expect("non-empty"),
        recall: field(&|m| Some(m.recall)).expect("non-empty"),
        f1: field(&|m| Some(m.f1)).expect("non-empty"),
        mean_loc_error_um: field(&|m| m.mean_loc_error_um),
        std_loc_error_um: field(&|m| m.std_loc_error_um),
    })
}

/// Monte Carlo mean error of encoding uniform positions to bins and
/// decoding at bin centres: the floor for any K-bin localizer.
pub fn quantization_oracle(grid: &GridSpec, n_samples: usize, seed: u64) -> Result<f64> {
    grid.validate()?;
    if n_samples == 0 {
        return Err(SrusError::config("need at least one sample"));
    }
    let mut rng = rng_from(seed);
    let (w, h) = (grid.field_width_um(), grid.field_height_um());
    let mut total = 0.0;
    for _ in 0..n_samples {
        let p = [rng.random::<f64>() * w, rng.random::<f64>() * h];
        let (map, _) = encode_labels(&[p], grid);
        let dets: Vec<Detection> = map
            .positives()
            .into_iter()
            .map(|(i, j, kz, kx)| Detection { i, j, kz, kx, prob: 1.0 })
            .collect();
        let q = decode_detections(&dets, grid);
        total += dist(p, q[0]);
    }
    Ok(total / n_samples as f64)
}

/// Mean distance from a uniform point in a unit square to its centre.
pub fn square_mean_radius() -> f64 {
    (std::f64::consts::SQRT_2 + (1.0 + std::f64::consts::SQRT_2).ln()) / 6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub name: String,
    pub frames: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub metrics: Metrics,
}

impl SetReport {
    pub fn new(name: impl Into<String>, tally: &Tally, frames: usize) -> Self {
        Self {
            name: name.into(),
            frames,
            tp: tally.tp,
            fp: tally.fp,
            fn_: tally.fn_,
            metrics: tally.metrics(),
        }
    }
}

/// Evaluation report as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_set: Vec<SetReport>,
    pub aggregate: AggregateMetrics,
    pub config_echo: serde_json::Value,
    pub std_convention: String,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(per_set: Vec<SetReport>, config_echo: serde_json::Value) -> Result<Self> {
        let metrics: Vec<Metrics> = per_set.iter().map(|s| s.metrics).collect();
        Ok(Self {
            aggregate: aggregate(&metrics)?,
            per_set,
            config_echo,
            std_convention: STD_CONVENTION.to_string(),
            notes: vec![
                "true positives are optimal one-to-one matches within the configured radius".to_string(),
            ],
        })
    }
}
