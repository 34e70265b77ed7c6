//! Representation metrics over per-loop hidden states: anisotropy, curvature, prompt
//! entropy, and linear CKA between steps.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{LoopedModel, TokenBatch};
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::Trajectory;

/// Rows are tokens, columns are features.
pub type Matrix = DMatrix<f64>;

const NORM_FLOOR: f64 = 1e-12;

fn row_norms(h: &Matrix) -> Vec<f64> {
    h.row_iter().map(|r| r.norm()).collect()
}

/// Mean cosine similarity over all token pairs `i < j`. Zero rows are dropped.
pub fn anisotropy(h: &Matrix) -> Result<f64> {
    let norms = row_norms(h);
    let keep: Vec<usize> = (0..h.nrows()).filter(|&i| norms[i] > NORM_FLOOR).collect();
    if keep.len() < h.nrows() {
        log::warn!("anisotropy: ignoring {} zero rows", h.nrows() - keep.len());
    }
    if keep.len() < 2 {
        return Err(Error::Contract(format!("anisotropy needs 2 nonzero rows, got {}", keep.len())));
    }
    let (mut sum, mut pairs) = (0.0, 0usize);
    for (a, &i) in keep.iter().enumerate() {
        for &j in &keep[a + 1..] {
            sum += h.row(i).dot(&h.row(j)) / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean turning angle between successive position differences `h_{i+1} - h_i`.
/// Zero differences are skipped.
pub fn curvature(h: &Matrix) -> Result<f64> {
    if h.nrows() < 3 {
        return Err(Error::Contract(format!("curvature needs 3 rows, got {}", h.nrows())));
    }
    let diffs: Vec<_> = (0..h.nrows() - 1).map(|i| h.row(i + 1) - h.row(i)).collect();
    let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
    for w in diffs.windows(2) {
        let (na, nb) = (w[0].norm(), w[1].norm());
        if na <= NORM_FLOOR || nb <= NORM_FLOOR {
            skipped += 1;
            continue;
        }
        sum += (w[0].dot(&w[1]) / (na * nb)).clamp(-1.0, 1.0).acos();
        count += 1;
    }
    if skipped > 0 {
        log::warn!("curvature: skipped {skipped} angles with a zero difference");
    }
    if count == 0 {
        return Err(Error::Contract("curvature: every difference is zero".into()));
    }
    Ok(sum / count as f64)
}

/// Von Neumann entropy of the unit-trace Gram matrix `H Hᵀ`, divided by `ln T`.
pub fn prompt_entropy(h: &Matrix) -> Result<f64> {
    let t = h.nrows();
    if t < 2 {
        return Err(Error::Contract(format!("prompt entropy needs 2 rows, got {t}")));
    }
    let gram = h * h.transpose();
    let trace = gram.trace();
    if trace <= NORM_FLOOR {
        log::warn!("prompt entropy of an all-zero matrix is taken as 0");
        return Ok(0.0);
    }
    let eig = SymmetricEigen::new(gram / trace);
    let entropy: f64 = eig.eigenvalues.iter().filter(|&&l| l > 0.0).map(|&l| -l * l.ln()).sum();
    Ok((entropy / (t as f64).ln()).clamp(0.0, 1.0))
}

fn center_columns(x: &Matrix) -> Matrix {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Linear CKA of column-centered representations. Zero-variance inputs give 0.
pub fn cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("cka: {} vs {} rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::Contract("cka needs 2 rows".into()));
    }
    let (xc, yc) = (center_columns(x), center_columns(y));
    let cross = (yc.transpose() * &xc).norm_squared();
    let den = (xc.transpose() * &xc).norm() * (yc.transpose() * &yc).norm();
    if den <= NORM_FLOOR * NORM_FLOOR {
        log::warn!("cka of a zero-variance input is taken as 0");
        return Ok(0.0);
    }
    Ok(cross / den)
}

/// Token states of one prompt after every loop, `h^(0)..h^(M)`.
#[derive(Clone, Debug)]
pub struct RepresentationSnapshot {
    pub prompt_id: usize,
    pub trajectory: Trajectory,
    pub states: Vec<Matrix>,
}

fn to_matrix<T: Scalar>(t: &Tensor<T>, keep_last: usize) -> Matrix {
    // t is [1, T, d]
    let (rows, d) = (t.shape()[1], t.shape()[2]);
    let skip = rows - keep_last.min(rows);
    Matrix::from_fn(rows - skip, d, |i, j| t.data()[(skip + i) * d + j].as_f64())
}

/// Runs each prompt through `trajectory`, keeping the last `last_tokens` positions of every state.
pub fn collect_snapshots<T: Scalar>(
    model: &LoopedModel<T>,
    prompts: &[Vec<usize>],
    trajectory: &Trajectory,
    last_tokens: usize,
) -> Result<Vec<RepresentationSnapshot>> {
    prompts
        .iter()
        .enumerate()
        .map(|(prompt_id, p)| {
            let mut g = Graph::inference();
            let out = model.forward(&mut g, &TokenBatch::single(p.clone())?, trajectory, true)?;
            let states = out.hiddens.iter().map(|&h| to_matrix(g.value(h), last_tokens)).collect();
            Ok(RepresentationSnapshot { prompt_id, trajectory: trajectory.clone(), states })
        })
        .collect()
}

/// Prompt-averaged metrics per loop step, plus the step-by-step CKA matrix.
#[derive(Clone, Debug)]
pub struct DiagnosticsReport {
    /// Normalized depth `t_s` of each state; `t_0 = 0`.
    pub times: Vec<f64>,
    pub anisotropy: Vec<f64>,
    pub curvature: Vec<f64>,
    pub entropy: Vec<f64>,
    pub cka: Matrix,
}

impl DiagnosticsReport {
    pub fn from_snapshots(snaps: &[RepresentationSnapshot]) -> Result<Self> {
        let first = snaps.first().ok_or_else(|| Error::Contract("no snapshots to report on".into()))?;
        let steps = first.states.len();
        if snaps.iter().any(|s| s.states.len() != steps) {
            return Err(Error::Contract("snapshots disagree on the number of steps".into()));
        }
        let n = snaps.len() as f64;
        let mut rep = Self {
            times: if steps == first.trajectory.budget() + 1 {
                first.trajectory.times().to_vec()
            } else {
                (0..steps).map(|s| s as f64 / (steps - 1).max(1) as f64).collect()
            },
            anisotropy: vec![0.0; steps],
            curvature: vec![0.0; steps],
            entropy: vec![0.0; steps],
            cka: Matrix::zeros(steps, steps),
        };
        for snap in snaps {
            for (s, h) in snap.states.iter().enumerate() {
                rep.anisotropy[s] += anisotropy(h)? / n;
                rep.curvature[s] += curvature(h)? / n;
                rep.entropy[s] += prompt_entropy(h)? / n;
                rep.cka[(s, s)] += cka(h, h)? / n;
                for r in 0..s {
                    let v = cka(&snap.states[r], h)? / n;
                    rep.cka[(r, s)] += v;
                    rep.cka[(s, r)] += v;
                }
            }
        }
        Ok(rep)
    }

    /// Mean CKA over distinct step pairs; 1 when there is a single step.
    pub fn mean_offdiag_cka(&self) -> f64 {
        let n = self.cka.nrows();
        if n < 2 {
            return 1.0;
        }
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|ij| self.cka[ij]).sum();
        off / (n * (n - 1)) as f64
    }

    /// Writes `steps.csv` (step, t, anisotropy, curvature, entropy) and `cka.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "t", "anisotropy", "curvature", "entropy"])?;
        for s in 0..self.times.len() {
            w.write_record(&[
                s.to_string(),
                self.times[s].to_string(),
                self.anisotropy[s].to_string(),
                self.curvature[s].to_string(),
                self.entropy[s].to_string(),
            ])?;
        }
        write_atomic(&dir.join("steps.csv"), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

        let n = self.cka.nrows();
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = std::iter::once("step".to_string()).chain((0..n).map(|j| j.to_string())).collect();
        w.write_record(&header)?;
        for i in 0..n {
            let row: Vec<String> =
                std::iter::once(i.to_string()).chain((0..n).map(|j| self.cka[(i, j)].to_string())).collect();
            w.write_record(&row)?;
        }
        write_atomic(&dir.join("cka.csv"), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
    }
}
