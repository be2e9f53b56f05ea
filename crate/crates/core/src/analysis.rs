//! Representation diagnostics: linear probes of `φ(s, 0)` against maze
//! distance, cosine similarity of critic state-gradients across goals, and
//! CSV export of raw representations.
//!
//! CSV headers:
//! - `sa_repr.csv`: `id,s_0..s_{n-1},a_0..a_{m-1},repr_0..repr_{d-1}`
//! - `g_repr.csv`: `id,g_0..g_{k-1},repr_0..repr_{d-1}`
//! - similarity matrices: `goal_id,sim_0..sim_{n-1}`, empty cells undefined

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::ContrastiveCritic;
use crate::envs::{distance_field, Cell, MazeLayout};
use crate::numcore::{rng_stream, Streams};
use crate::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-3;
pub const DEFAULT_PROBE_SAMPLES: usize = 1000;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_mse: f64,
    pub test_mse: f64,
    pub ridge_coefficient: f64,
    pub num_samples: usize,
    pub num_train: usize,
    pub feature_source: String,
    /// `‖(XᵀX + λI)w - Xᵀy‖ / max(1, ‖Xᵀy‖)` on centred training data.
    pub normal_equation_residual: f64,
    /// Variance of the test targets, the MSE of a constant predictor.
    pub target_variance: f64,
}

/// A fitted ridge model `y ≈ x·w + b`. The intercept is not penalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub normal_equation_residual: f64,
}

impl RidgeFit {
    pub fn predict(&self, features: &ArrayView2<'_, f64>) -> Vec<f64> {
        features
            .rows()
            .into_iter()
            .map(|r| self.intercept + r.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>())
            .collect()
    }
}

/// Closed-form ridge regression on centred features and targets.
pub fn ridge_fit(features: &ArrayView2<'_, f64>, targets: &[f64], ridge: f64) -> Result<RidgeFit> {
    let (n, d) = features.dim();
    if n == 0 || targets.len() != n {
        return Err(Error::shape("ridge targets", n, targets.len()));
    }
    if !(ridge > 0.0) {
        return Err(Error::Config(format!(
            "ridge coefficient must be positive, got {ridge}"
        )));
    }
    let x_mean = features.mean_axis(Axis(0)).expect("non-empty");
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| features[[i, j]] - x_mean[j]);
    let yc = DVector::from_fn(n, |i, _| targets[i] - y_mean);
    let mut a = xc.transpose() * &xc;
    for i in 0..d {
        a[(i, i)] += ridge;
    }
    let rhs = xc.transpose() * &yc;
    let w = a
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| a.clone().lu().solve(&rhs))
        .ok_or_else(|| Error::Oracle("ridge system is singular".into()))?;
    let residual = (&a * &w - &rhs).norm() / rhs.norm().max(1.0);
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - x_mean.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>();
    Ok(RidgeFit {
        weights,
        intercept,
        normal_equation_residual: residual,
    })
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter()
        .zip(y)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / y.len().max(1) as f64
}

/// Seeded 80/20 split, ridge fit on the first part, MSE on both.
pub fn linear_probe(
    features: &ArrayView2<'_, f64>,
    targets: &[f64],
    ridge: f64,
    seed: u64,
    feature_source: &str,
) -> Result<ProbeReport> {
    let n = features.nrows();
    if n < 2 || targets.len() != n {
        return Err(Error::shape(
            "probe samples",
            "at least 2 matching rows",
            format!("{n} / {}", targets.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_stream(seed, Streams::Probe));
    let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1);
    let (train, test) = idx.split_at(n_train);
    let take = |rows: &[usize]| {
        (
            features.select(Axis(0), rows),
            rows.iter().map(|&i| targets[i]).collect::<Vec<_>>(),
        )
    };
    let (xtr, ytr) = take(train);
    let (xte, yte) = take(test);
    let fit = ridge_fit(&xtr.view(), &ytr, ridge)?;
    let mean = yte.iter().sum::<f64>() / yte.len() as f64;
    Ok(ProbeReport {
        train_mse: mse(&fit.predict(&xtr.view()), &ytr),
        test_mse: mse(&fit.predict(&xte.view()), &yte),
        ridge_coefficient: ridge,
        num_samples: n,
        num_train: n_train,
        feature_source: feature_source.to_string(),
        normal_equation_residual: fit.normal_equation_residual,
        target_variance: yte.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / yte.len() as f64,
    })
}

/// Free cell whose centre is nearest the middle of the grid (first in row
/// order on ties). Distances to a corner cell are close to linear in the
/// coordinates, so a central goal makes for a more telling probe target.
pub fn central_free_cell(layout: &MazeLayout) -> Option<Cell> {
    let (mr, mc) = (layout.rows() as f64 / 2.0, layout.cols() as f64 / 2.0);
    let dist = |&(r, c): &Cell| (r as f64 + 0.5 - mr).powi(2) + (c as f64 + 0.5 - mc).powi(2);
    layout
        .free_cells()
        .into_iter()
        .fold(None, |best, cell| match best {
            Some(b) if dist(&b) <= dist(&cell) => Some(b),
            _ => Some(cell),
        })
}

/// Uniform random positions in free cells of a unit-cell maze, with the BFS
/// hop count from each position's cell to `goal`.
pub fn maze_probe_samples(
    layout: &MazeLayout,
    goal: Cell,
    samples: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let field = distance_field(layout, goal)?;
    let cells: Vec<Cell> = layout
        .free_cells()
        .into_iter()
        .filter(|&(r, c)| field[r][c].is_some())
        .collect();
    let mut rng = rng_stream(seed, Streams::Probe);
    // separate stream position from the split shuffle
    rng.set_word_pos(1 << 40);
    let mut states = Array2::zeros((samples, 2));
    let mut targets = Vec::with_capacity(samples);
    for i in 0..samples {
        let (r, c) = cells[rng.random_range(0..cells.len())];
        states[[i, 0]] = c as f64 + rng.random_range(0.0..1.0);
        states[[i, 1]] = r as f64 + rng.random_range(0.0..1.0);
        targets.push(field[r][c].expect("filtered above") as f64);
    }
    Ok((states, targets))
}

/// Probe of the critic's `φ(s, a = 0)` in a unit-cell maze.
pub fn probe_critic(
    critic: &ContrastiveCritic,
    layout: &MazeLayout,
    goal: Cell,
    samples: usize,
    ridge: f64,
    seed: u64,
    feature_source: &str,
) -> Result<ProbeReport> {
    let (states, targets) = maze_probe_samples(layout, goal, samples, seed)?;
    if critic.observation_dim() != 2 {
        return Err(Error::shape(
            "probe critic observation dim",
            2,
            critic.observation_dim(),
        ));
    }
    let actions = Array2::zeros((samples, critic.action_dim()));
    let phi = critic.sa_repr(&states.view(), &actions.view())?;
    linear_probe(&phi.view(), &targets, ridge, seed, feature_source)
}

/// Pairwise cosine similarities; `None` where either gradient is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<Option<f64>>>,
    pub gradient_norms: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn undefined_rows(&self) -> Vec<usize> {
        self.gradient_norms
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Mean of the defined off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(j, _)| *j != i)
                    .filter_map(|(_, v)| *v)
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn cosine_matrix(vectors: &ArrayView2<'_, f64>) -> SimilarityMatrix {
    let norms: Vec<f64> = vectors
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let n = vectors.nrows();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let c = if i == j {
                    1.0
                } else {
                    (vectors.row(i).dot(&vectors.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                };
                values[i][j] = Some(c);
                values[j][i] = Some(c);
            }
        }
    }
    SimilarityMatrix {
        values,
        gradient_norms: norms,
    }
}

/// Cosine similarities of `∂f/∂s` at `(probe_state, a = 0, g)` across goals.
pub fn gradient_similarity(
    critic: &ContrastiveCritic,
    probe_state: &[f64],
    goals: &ArrayView2<'_, f64>,
) -> Result<SimilarityMatrix> {
    if probe_state.len() != critic.observation_dim() {
        return Err(Error::shape(
            "probe state",
            critic.observation_dim(),
            probe_state.len(),
        ));
    }
    let n = goals.nrows();
    let states = Array2::from_shape_fn((n, probe_state.len()), |(_, j)| probe_state[j]);
    let actions = Array2::zeros((n, critic.action_dim()));
    let (_, ds, _) = critic.input_gradients(&states.view(), &actions.view(), goals)?;
    Ok(cosine_matrix(&ds.view()))
}

pub fn write_similarity_csv(path: &Path, m: &SimilarityMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = m.values.len();
    let mut header = vec!["goal_id".to_string()];
    header.extend((0..n).map(|j| format!("sim_{j}")));
    w.write_record(&header)?;
    for (i, row) in m.values.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(
            row.iter()
                .map(|v| v.map_or(String::new(), |x| format!("{x:?}"))),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn header(prefixes: &[(&str, usize)]) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    for (p, n) in prefixes {
        h.extend((0..*n).map(|i| format!("{p}_{i}")));
    }
    h
}

fn write_rows(path: &Path, head: Vec<String>, blocks: &[ArrayView2<'_, f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&head)?;
    let n = blocks.first().map_or(0, |b| b.nrows());
    for i in 0..n {
        let mut rec = vec![i.to_string()];
        for b in blocks {
            // Debug formatting of f64 is shortest round-trip
            rec.extend(b.row(i).iter().map(|v| format!("{v:?}")));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `φ(s, a)` rows to `sa_path` and `ψ(g)` rows to `g_path`.
pub fn export_representations(
    critic: &ContrastiveCritic,
    states: &ArrayView2<'_, f64>,
    actions: &ArrayView2<'_, f64>,
    goals: &ArrayView2<'_, f64>,
    sa_path: &Path,
    g_path: &Path,
) -> Result<()> {
    let d = critic.repr_dim();
    let (obs, act, gd) = (
        critic.observation_dim(),
        critic.action_dim(),
        critic.goal_dim(),
    );
    if states.ncols() != obs || actions.ncols() != act || goals.ncols() != gd {
        return Err(Error::shape(
            "export inputs (obs, act, goal)",
            format!("{:?}", (obs, act, gd)),
            format!("{:?}", (states.ncols(), actions.ncols(), goals.ncols())),
        ));
    }
    let phi = if states.nrows() == 0 {
        Array2::zeros((0, d))
    } else {
        critic.sa_repr(states, actions)?
    };
    let psi = if goals.nrows() == 0 {
        Array2::zeros((0, d))
    } else {
        critic.g_repr(goals)?
    };
    write_rows(
        sa_path,
        header(&[("s", obs), ("a", act), ("repr", d)]),
        &[states.view(), actions.view(), phi.view()],
    )?;
    write_rows(
        g_path,
        header(&[("g", gd), ("repr", d)]),
        &[goals.view(), psi.view()],
    )
}

/// An exported CSV: column names and the numeric rows without the id column.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprTable {
    pub columns: Vec<String>,
    pub ids: Vec<usize>,
    pub values: Array2<f64>,
}

impl ReprTable {
    /// Columns whose names start with `prefix_`.
    pub fn block(&self, prefix: &str) -> Array2<f64> {
        let want = format!("{prefix}_");
        let idx: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with(&want))
            .map(|(i, _)| i)
            .collect();
        self.values.select(Axis(1), &idx)
    }
}

pub fn read_repr_csv(path: &Path) -> Result<ReprTable> {
    let mut r = csv::Reader::from_path(path)?;
    let head = r.headers()?.clone();
    if head.get(0) != Some("id") {
        return Err(Error::Dataset(format!(
            "{}: first column must be `id`",
            path.display()
        )));
    }
    let columns: Vec<String> = head.iter().skip(1).map(String::from).collect();
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(
            rec[0]
                .parse()
                .map_err(|e| Error::Dataset(format!("bad id: {e}")))?,
        );
        for v in rec.iter().skip(1) {
            flat.push(
                v.parse::<f64>()
                    .map_err(|e| Error::Dataset(format!("bad value `{v}`: {e}")))?,
            );
        }
    }
    let values = Array2::from_shape_vec((ids.len(), columns.len()), flat)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(ReprTable {
        columns,
        ids,
        values,
    })
}
