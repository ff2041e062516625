//! The partially known moment matrix, its rank, its completion and the
//! basis of the latent support extracted from it.
//!
//! Rows are indicator coordinates `(j, l)`; columns are cells `ℓ ∈ 𝓛⁰∖𝓛`
//! in graded order (`(0,0,0), (1,0,0), (2,0,0), (0,1,0), …, (1,1,0), …`).
//! Entry `((j,l), ℓ)` is `M_{ℓ + l_j}` when `ℓ_j = 0` and unknown otherwise.
//!
//! Completion regresses each incomplete column on other columns that have
//! values on all of its unknown rows, fitting on the rows where everything
//! involved is known, then fills the unknown rows from the same linear
//! combination. Rounds run against a frozen snapshot, so a column completed
//! in round `r` can serve as a regressor from round `r + 1` on.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GomError, Result};
use crate::indexing::{cells_up_to_order, subsets_up_to, CellIndex, Scheme};
use crate::linalg::{self, norm_sq, Matrix};
use crate::scalar::{negligible, Scalar};
use crate::tables::MomentTable;

#[derive(Debug, Clone)]
pub struct MomentMatrix<T> {
    pub scheme: Scheme,
    /// `(j, l)` with 0-based `j` and 1-based `l`.
    pub rows: Vec<(usize, usize)>,
    pub columns: Vec<CellIndex>,
    /// `entries[row][col]`
    pub entries: Vec<Vec<Option<T>>>,
    column_lookup: HashMap<CellIndex, usize>,
}

impl<T: Scalar> MomentMatrix<T> {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn entry(&self, row: usize, col: usize) -> Option<&T> {
        self.entries[row][col].as_ref()
    }

    pub fn column_index(&self, cell: &CellIndex) -> Option<usize> {
        self.column_lookup.get(cell).copied()
    }

    pub fn known_count(&self, col: usize) -> usize {
        (0..self.num_rows())
            .filter(|&r| self.entries[r][col].is_some())
            .count()
    }

    pub fn row_label(&self, row: usize) -> String {
        let (j, l) = self.rows[row];
        format!("({},{})", j + 1, l)
    }
}

/// One column per cell of order ≤ `column_order_cap` that leaves at least
/// one measurement marginalized.
pub fn build_moment_matrix<T: Scalar>(
    mt: &MomentTable<T>,
    column_order_cap: usize,
) -> Result<MomentMatrix<T>> {
    let scheme = mt.scheme.clone();
    let j_count = scheme.num_measurements();
    let cap = column_order_cap.min(j_count - 1);
    let mut columns: Vec<CellIndex> = cells_up_to_order(&scheme, cap);
    columns.sort_by(|a, b| a.graded_cmp(b));
    let rows = scheme.rows();
    let mut entries = vec![vec![None; columns.len()]; rows.len()];
    for (c, cell) in columns.iter().enumerate() {
        for (r, &(j, l)) in rows.iter().enumerate() {
            if cell.is_zero_at(j) {
                let target = cell.with(j, l);
                entries[r][c] = Some(mt.get(&target)?.clone());
            }
        }
    }
    let column_lookup = columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), i))
        .collect();
    Ok(MomentMatrix {
        scheme,
        rows,
        columns,
        entries,
        column_lookup,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RankSearch {
    /// Greedy growth of a fully known minor, largest Schur pivot first.
    #[default]
    Greedy,
    /// Every row subset; only for `|L| ≤ 12`.
    Exhaustive,
}

pub const DEFAULT_K_CAP: usize = 8;
const EXHAUSTIVE_ROW_LIMIT: usize = 12;

/// Largest `r ≤ k_cap` such that some `r × r` minor made only of known
/// entries is nonsingular (exact determinant when `rel_tol == 0`,
/// otherwise `σ_min > rel_tol · σ_max`).
pub fn estimate_rank<T: Scalar>(
    m: &MomentMatrix<T>,
    rel_tol: f64,
    k_cap: usize,
    search: RankSearch,
) -> usize {
    let k_cap = k_cap.min(m.num_rows()).min(m.num_cols());
    match search {
        RankSearch::Exhaustive if m.num_rows() <= EXHAUSTIVE_ROW_LIMIT => {
            exhaustive_rank(m, rel_tol, k_cap)
        }
        _ => greedy_rank(m, rel_tol, k_cap),
    }
}

fn greedy_rank<T: Scalar>(m: &MomentMatrix<T>, rel_tol: f64, k_cap: usize) -> usize {
    let (nr, nc) = (m.num_rows(), m.num_cols());
    let mut sel_rows: Vec<usize> = Vec::new();
    let mut sel_cols: Vec<usize> = Vec::new();
    while sel_rows.len() < k_cap {
        let minor = known_minor(m, &sel_rows, &sel_cols);
        let inv = match linalg::inverse(&minor, 0.0) {
            Some(inv) => inv,
            None => break,
        };
        let mut candidates: Vec<(f64, usize, usize, T)> = Vec::new();
        for c in 0..nc {
            if sel_cols.contains(&c) || sel_rows.iter().any(|&r| m.entries[r][c].is_none()) {
                continue;
            }
            let col_part: Vec<T> = sel_rows
                .iter()
                .map(|&r| m.entries[r][c].clone().unwrap())
                .collect();
            let u = inv.mul_vec(&col_part);
            for r in 0..nr {
                if sel_rows.contains(&r) {
                    continue;
                }
                let Some(rc) = &m.entries[r][c] else { continue };
                if sel_cols.iter().any(|&cc| m.entries[r][cc].is_none()) {
                    continue;
                }
                let row_part: Vec<T> = sel_cols
                    .iter()
                    .map(|&cc| m.entries[r][cc].clone().unwrap())
                    .collect();
                let schur = rc.clone() - linalg::dot(&row_part, &u);
                if schur.is_zero() {
                    continue;
                }
                candidates.push((schur.to_f64().abs(), r, c, schur));
            }
        }
        // largest pivot first; earlier row/column on ties
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.2.cmp(&b.2))
                .then(a.1.cmp(&b.1))
        });
        let mut grown = false;
        for (_, r, c, _) in candidates.into_iter().take(16) {
            let mut rows = sel_rows.clone();
            let mut cols = sel_cols.clone();
            rows.push(r);
            cols.push(c);
            if rel_tol == 0.0 || linalg::is_nonsingular(&known_minor(m, &rows, &cols), rel_tol) {
                sel_rows = rows;
                sel_cols = cols;
                grown = true;
                break;
            }
        }
        if !grown {
            break;
        }
    }
    sel_rows.len()
}

fn known_minor<T: Scalar>(m: &MomentMatrix<T>, rows: &[usize], cols: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(rows.len(), cols.len());
    for (a, &r) in rows.iter().enumerate() {
        for (b, &c) in cols.iter().enumerate() {
            out[(a, b)] = m.entries[r][c].clone().expect("known entry");
        }
    }
    out
}

fn exhaustive_rank<T: Scalar>(m: &MomentMatrix<T>, rel_tol: f64, k_cap: usize) -> usize {
    let nr = m.num_rows();
    let subsets = subsets_up_to(nr, k_cap);
    for r in (1..=k_cap).rev() {
        for rows in subsets.iter().filter(|s| s.len() == r) {
            let cols: Vec<usize> = (0..m.num_cols())
                .filter(|&c| rows.iter().all(|&row| m.entries[row][c].is_some()))
                .collect();
            if cols.len() < r {
                continue;
            }
            let sub = known_minor(m, rows, &cols);
            let full_row_rank = if rel_tol == 0.0 {
                linalg::rank(&sub, 0.0) == r
            } else {
                let sv = linalg::singular_values(&sub);
                sv[0] > 0.0 && sv[r - 1] > rel_tol * sv[0]
            };
            if full_row_rank {
                return r;
            }
        }
    }
    0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnStatus {
    /// No unknown entries to begin with.
    Known,
    Completed,
    /// No rank-K regressor set was found.
    Incomplete,
    /// A fit was found but its residual exceeded the threshold.
    Inconsistent,
}

#[derive(Debug, Clone)]
pub struct ColumnCompletion<T> {
    pub column: usize,
    pub status: ColumnStatus,
    pub round: usize,
    pub regressors: Vec<usize>,
    pub fit_rows: Vec<usize>,
    pub coefficients: Vec<T>,
    pub residual_norm: f64,
    pub column_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionOptions {
    /// Relative tolerance for regressor independence; `0` is exact.
    pub rank_tol: f64,
    /// Largest accepted residual relative to the norm of the column's
    /// fitted entries; `0` demands an exact fit.
    pub residual_tol: f64,
}

impl CompletionOptions {
    pub fn exact() -> Self {
        CompletionOptions {
            rank_tol: 0.0,
            residual_tol: 0.0,
        }
    }

    pub fn for_scalar<T: Scalar>() -> Self {
        let tol = T::default_tol();
        CompletionOptions {
            rank_tol: tol,
            residual_tol: 10.0 * tol,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletedMatrix<T> {
    pub base: MomentMatrix<T>,
    /// Known or filled values, `values[row][col]`.
    pub values: Vec<Vec<Option<T>>>,
    /// Columns whose every entry is known or filled with a passing fit.
    pub kappa: Vec<usize>,
    pub k: usize,
    pub numerical_rank: usize,
    pub columns: Vec<ColumnCompletion<T>>,
}

impl<T: Scalar> CompletedMatrix<T> {
    pub fn fills(&self) -> BTreeMap<(usize, usize), T> {
        let mut out = BTreeMap::new();
        for r in 0..self.base.num_rows() {
            for c in 0..self.base.num_cols() {
                if self.base.entries[r][c].is_none() {
                    if let Some(v) = &self.values[r][c] {
                        out.insert((r, c), v.clone());
                    }
                }
            }
        }
        out
    }

    pub fn column_values(&self, col: usize) -> Option<Vec<T>> {
        (0..self.base.num_rows())
            .map(|r| self.values[r][col].clone())
            .collect()
    }

    pub fn column_by_cell(&self, cell: &CellIndex) -> Option<Vec<T>> {
        self.column_values(self.base.column_index(cell)?)
    }

    pub fn completion_of(&self, cell: &CellIndex) -> Option<&ColumnCompletion<T>> {
        let idx = self.base.column_index(cell)?;
        self.columns.iter().find(|c| c.column == idx)
    }

    /// Columns left without a usable completion.
    pub fn flagged(&self) -> Vec<&ColumnCompletion<T>> {
        self.columns
            .iter()
            .filter(|c| {
                matches!(
                    c.status,
                    ColumnStatus::Incomplete | ColumnStatus::Inconsistent
                )
            })
            .collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.columns
            .iter()
            .filter(|c| c.status == ColumnStatus::Completed)
            .map(|c| c.residual_norm)
            .fold(0.0, f64::max)
    }

    /// CSV with `(j,l)` row labels and cell column labels. Unknown entries
    /// print as `?`, filled ones as `?=value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for cell in &self.base.columns {
            let _ = write!(out, ",\"{cell}\"");
        }
        out.push('\n');
        for r in 0..self.base.num_rows() {
            let _ = write!(out, "\"{}\"", self.base.row_label(r));
            for c in 0..self.base.num_cols() {
                out.push(',');
                match (&self.base.entries[r][c], &self.values[r][c]) {
                    (Some(v), _) => out.push_str(&v.to_repr()),
                    (None, Some(v)) => {
                        let _ = write!(out, "?={}", v.to_repr());
                    }
                    (None, None) => out.push('?'),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn residual_report(&self) -> serde_json::Value {
        let columns: Vec<serde_json::Value> = self
            .columns
            .iter()
            .map(|c| {
                serde_json::json!({
                    "column": self.base.columns[c.column].to_string(),
                    "status": c.status,
                    "round": c.round,
                    "regressors": c.regressors.iter()
                        .map(|&i| self.base.columns[i].to_string())
                        .collect::<Vec<_>>(),
                    "fit_rows": c.fit_rows.iter()
                        .map(|&r| self.base.row_label(r))
                        .collect::<Vec<_>>(),
                    "coefficients": c.coefficients.iter().map(|x| x.to_repr()).collect::<Vec<_>>(),
                    "residual_norm": c.residual_norm,
                    "column_norm": c.column_norm,
                })
            })
            .collect();
        serde_json::json!({
            "k": self.k,
            "numerical_rank": self.numerical_rank,
            "kappa": self.kappa.iter().map(|&i| self.base.columns[i].to_string()).collect::<Vec<_>>(),
            "columns": columns,
        })
    }
}

pub fn complete<T: Scalar>(
    m: &MomentMatrix<T>,
    k: usize,
    opts: CompletionOptions,
) -> Result<CompletedMatrix<T>> {
    if k == 0 {
        return Err(GomError::InvalidArgument("K must be at least 1".into()));
    }
    let (nr, nc) = (m.num_rows(), m.num_cols());
    let mut values = m.entries.clone();
    let mut reports: Vec<Option<ColumnCompletion<T>>> = vec![None; nc];
    let mut pending: Vec<usize> = Vec::new();
    for c in 0..nc {
        if m.known_count(c) == nr {
            reports[c] = Some(ColumnCompletion {
                column: c,
                status: ColumnStatus::Known,
                round: 0,
                regressors: Vec::new(),
                fit_rows: Vec::new(),
                coefficients: Vec::new(),
                residual_norm: 0.0,
                column_norm: norm_sq(&m.entries.iter().map(|r| r[c].clone().unwrap()).collect::<Vec<_>>())
                    .to_f64()
                    .sqrt(),
            });
        } else {
            pending.push(c);
        }
    }
    // most known entries first, column order on ties
    pending.sort_by_key(|&c| (std::cmp::Reverse(m.known_count(c)), c));

    let mut round = 0;
    while !pending.is_empty() {
        round += 1;
        let frozen = values.clone();
        let mut still_pending = Vec::new();
        let mut progressed = false;
        for &c in &pending {
            match fit_column(&frozen, c, k, opts.rank_tol) {
                Some(fit) => {
                    progressed = true;
                    let threshold = opts.residual_tol * fit.column_norm;
                    let accepted = if opts.residual_tol == 0.0 {
                        fit.exact_zero_residual
                    } else {
                        fit.residual_norm <= threshold
                    };
                    if accepted {
                        for (r, v) in &fit.fills {
                            values[*r][c] = Some(v.clone());
                        }
                    }
                    reports[c] = Some(ColumnCompletion {
                        column: c,
                        status: if accepted {
                            ColumnStatus::Completed
                        } else {
                            ColumnStatus::Inconsistent
                        },
                        round,
                        regressors: fit.regressors,
                        fit_rows: fit.fit_rows,
                        coefficients: fit.coefficients,
                        residual_norm: fit.residual_norm,
                        column_norm: fit.column_norm,
                    });
                }
                None => still_pending.push(c),
            }
        }
        pending = still_pending;
        if !progressed {
            break;
        }
    }
    for c in pending {
        reports[c] = Some(ColumnCompletion {
            column: c,
            status: ColumnStatus::Incomplete,
            round,
            regressors: Vec::new(),
            fit_rows: Vec::new(),
            coefficients: Vec::new(),
            residual_norm: f64::NAN,
            column_norm: f64::NAN,
        });
    }
    let columns: Vec<ColumnCompletion<T>> = reports.into_iter().map(|r| r.unwrap()).collect();
    let kappa: Vec<usize> = columns
        .iter()
        .filter(|c| matches!(c.status, ColumnStatus::Known | ColumnStatus::Completed))
        .map(|c| c.column)
        .collect();
    let kappa_cols: Vec<Vec<T>> = kappa
        .iter()
        .map(|&c| (0..nr).map(|r| values[r][c].clone().unwrap()).collect())
        .collect();
    let numerical_rank = if kappa_cols.is_empty() {
        0
    } else {
        linalg::rank(&Matrix::from_columns(&kappa_cols), opts.rank_tol)
    };
    if numerical_rank < k {
        let flagged = columns
            .iter()
            .filter(|c| c.status != ColumnStatus::Known && c.status != ColumnStatus::Completed)
            .count();
        return Err(GomError::NotIdentifiable {
            k,
            detail: format!(
                "completed columns span rank {numerical_rank}; {} of {} columns completed, {flagged} flagged",
                kappa.len(),
                nc
            ),
        });
    }
    Ok(CompletedMatrix {
        base: m.clone(),
        values,
        kappa,
        k,
        numerical_rank,
        columns,
    })
}

struct ColumnFit<T> {
    regressors: Vec<usize>,
    fit_rows: Vec<usize>,
    coefficients: Vec<T>,
    fills: Vec<(usize, T)>,
    residual_norm: f64,
    exact_zero_residual: bool,
    column_norm: f64,
}

fn fit_column<T: Scalar>(
    state: &[Vec<Option<T>>],
    target: usize,
    k: usize,
    rank_tol: f64,
) -> Option<ColumnFit<T>> {
    let nr = state.len();
    let nc = state.first().map_or(0, |r| r.len());
    let unknown: Vec<usize> = (0..nr).filter(|&r| state[r][target].is_none()).collect();
    let known: Vec<usize> = (0..nr).filter(|&r| state[r][target].is_some()).collect();
    if known.len() < k {
        return None;
    }
    let candidates: Vec<usize> = (0..nc)
        .filter(|&c| c != target && unknown.iter().all(|&r| state[r][c].is_some()))
        .collect();

    let mut chosen: Vec<usize> = Vec::new();
    let mut fit_rows = known.clone();
    while chosen.len() < k {
        let mut ranked: Vec<(usize, usize, Vec<usize>)> = candidates
            .iter()
            .filter(|c| !chosen.contains(c))
            .filter_map(|&c| {
                let rows: Vec<usize> = fit_rows
                    .iter()
                    .copied()
                    .filter(|&r| state[r][c].is_some())
                    .collect();
                (rows.len() >= k).then_some((rows.len(), c, rows))
            })
            .collect();
        // keep as many fitting rows as possible; column order on ties
        ranked.sort_by_key(|(n, c, _)| (std::cmp::Reverse(*n), *c));
        let mut accepted = false;
        for (_, c, rows) in ranked {
            let mut trial = chosen.clone();
            trial.push(c);
            let sub = submatrix(state, &rows, &trial);
            if linalg::rank(&sub, rank_tol) == trial.len() {
                chosen = trial;
                fit_rows = rows;
                accepted = true;
                break;
            }
        }
        if !accepted {
            return None;
        }
    }

    let design = submatrix(state, &fit_rows, &chosen);
    let rhs: Vec<T> = fit_rows
        .iter()
        .map(|&r| state[r][target].clone().unwrap())
        .collect();
    let ls = linalg::least_squares(&design, &rhs, rank_tol)?;
    let fills = unknown
        .iter()
        .map(|&r| {
            let v = chosen
                .iter()
                .zip(&ls.coefficients)
                .map(|(&c, x)| state[r][c].clone().unwrap() * x.clone())
                .sum();
            (r, v)
        })
        .collect();
    Some(ColumnFit {
        regressors: chosen,
        fit_rows,
        exact_zero_residual: ls.residual.iter().all(|v| v.is_zero()),
        residual_norm: ls.residual_norm(),
        column_norm: norm_sq(&rhs).to_f64().sqrt(),
        coefficients: ls.coefficients,
        fills,
    })
}

fn submatrix<T: Scalar>(state: &[Vec<Option<T>>], rows: &[usize], cols: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(rows.len(), cols.len());
    for (a, &r) in rows.iter().enumerate() {
        for (b, &c) in cols.iter().enumerate() {
            out[(a, b)] = state[r][c].clone().expect("value present");
        }
    }
    out
}

/// A basis `Λ = (λ¹, …, λᴷ)` of the latent support, one length-`|L|`
/// vector per latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis<T> {
    pub scheme: Scheme,
    pub columns: Vec<Vec<T>>,
    /// Every `j`-block of every column sums to one.
    pub lambda0: bool,
    /// Moment-matrix column each vector came from, if any.
    pub sources: Vec<Option<CellIndex>>,
}

impl<T: Scalar> Basis<T> {
    pub fn new(scheme: Scheme, columns: Vec<Vec<T>>) -> Result<Self> {
        let n = scheme.total_outcomes();
        if columns.is_empty() || columns.iter().any(|c| c.len() != n) {
            return Err(GomError::InvalidArgument(format!(
                "basis columns must be nonempty vectors of length {n}"
            )));
        }
        let lambda0 = columns.iter().all(|c| block_sums(&scheme, c).iter().all(|s| {
            negligible(&(s.clone() - T::one()), if T::is_exact() { 0.0 } else { 1e-12 }, 1.0)
        }));
        let sources = vec![None; columns.len()];
        Ok(Basis {
            scheme,
            columns,
            lambda0,
            sources,
        })
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    /// `|L| × K` matrix with the basis vectors as columns.
    pub fn matrix(&self) -> Matrix<T> {
        Matrix::from_columns(&self.columns)
    }

    /// Row `(j, l)` of the basis matrix: `(λ¹_{jl}, …, λᴷ_{jl})`.
    pub fn row(&self, j: usize, l: usize) -> Vec<T> {
        let r = self.scheme.row_of(j, l);
        self.columns.iter().map(|c| c[r].clone()).collect()
    }

    /// `Λ' = Λ A`.
    pub fn transform(&self, a: &Matrix<T>) -> Basis<T> {
        let m = self.matrix().mul(a);
        let columns = m.columns();
        let lambda0 = self.lambda0
            && (0..a.cols()).all(|c| {
                let s: T = (0..a.rows()).map(|r| a[(r, c)].clone()).sum();
                negligible(&(s - T::one()), if T::is_exact() { 0.0 } else { 1e-12 }, 1.0)
            });
        Basis {
            scheme: self.scheme.clone(),
            sources: vec![None; columns.len()],
            columns,
            lambda0,
        }
    }

    pub fn rank(&self, tol: f64) -> usize {
        linalg::rank(&self.matrix(), tol)
    }
}

pub fn block_sums<T: Scalar>(scheme: &Scheme, column: &[T]) -> Vec<T> {
    (0..scheme.num_measurements())
        .map(|j| {
            let off = scheme.block_offset(j);
            column[off..off + scheme.outcome_count(j)].iter().cloned().sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "cells")]
pub enum BasisSelection {
    /// Column pivoting over 𝒦: the marginal column `(0,…,0)` first, then
    /// repeatedly the column whose unit-block-sum rescaling has the largest
    /// component orthogonal to those already chosen.
    #[default]
    Pivoted,
    /// These moment-matrix columns, in this order.
    Columns(Vec<CellIndex>),
}

fn pivot_columns<T: Scalar>(cm: &CompletedMatrix<T>, tol: f64) -> Vec<usize> {
    let scheme = &cm.base.scheme;
    let j_count = scheme.num_measurements() as f64;
    // f64 copies scaled to unit mean block sum; scores only, never values
    let mut pool: Vec<(usize, Vec<f64>)> = cm
        .kappa
        .iter()
        .filter_map(|&c| {
            let col: Vec<f64> = cm.column_values(c)?.iter().map(Scalar::to_f64).collect();
            let mean = col.iter().sum::<f64>() / j_count;
            (mean.abs() > f64::MIN_POSITIVE).then(|| (c, col.iter().map(|x| x / mean).collect()))
        })
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut exact: Vec<Vec<T>> = Vec::new();
    let mut first = pool.iter().position(|(c, _)| cm.base.columns[*c].order() == 0);
    while chosen.len() < cm.k && !pool.is_empty() {
        let pick = first.take().unwrap_or_else(|| {
            let mut best = 0;
            for i in 1..pool.len() {
                // column order on ties keeps the choice deterministic
                if norm2(&pool[i].1) > norm2(&pool[best].1) * (1.0 + 1e-12) {
                    best = i;
                }
            }
            best
        });
        let (c, q) = pool.remove(pick);
        exact.push(cm.column_values(c).expect("kappa column complete"));
        if linalg::rank(&Matrix::from_columns(&exact), tol) < exact.len() {
            exact.pop();
            continue;
        }
        chosen.push(c);
        let qn = norm2(&q);
        if qn == 0.0 {
            continue;
        }
        for (_, v) in &mut pool {
            let proj = v.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (qn * qn);
            for (x, y) in v.iter_mut().zip(&q) {
                *x -= proj * y;
            }
        }
    }
    chosen
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn extract_basis<T: Scalar>(
    cm: &CompletedMatrix<T>,
    selection: &BasisSelection,
    tol: f64,
) -> Result<Basis<T>> {
    let k = cm.k;
    let chosen: Vec<usize> = match selection {
        BasisSelection::Pivoted => pivot_columns(cm, tol),
        BasisSelection::Columns(cells) => {
            if cells.len() != k {
                return Err(GomError::InvalidArgument(format!(
                    "{} basis columns requested for K = {k}",
                    cells.len()
                )));
            }
            cells
                .iter()
                .map(|cell| {
                    cm.base
                        .column_index(cell)
                        .filter(|c| cm.kappa.contains(c))
                        .ok_or_else(|| {
                            GomError::InvalidArgument(format!(
                                "column {cell} is not a completed moment-matrix column"
                            ))
                        })
                })
                .collect::<Result<_>>()?
        }
    };
    let columns: Vec<Vec<T>> = chosen
        .iter()
        .map(|&c| cm.column_values(c).expect("complete"))
        .collect();
    if chosen.len() < k || linalg::rank(&Matrix::from_columns(&columns), tol) < k {
        return Err(GomError::NotIdentifiable {
            k,
            detail: "selected columns are linearly dependent".into(),
        });
    }
    Ok(Basis {
        scheme: cm.base.scheme.clone(),
        sources: chosen.iter().map(|&c| Some(cm.base.columns[c].clone())).collect(),
        columns,
        lambda0: false,
    })
}

/// Scale every basis vector so its `j`-block sums are one. Block sums of a
/// vector must agree within `tol` (relative) before scaling; in float mode
/// each block is then rescaled onto the plane exactly.
pub fn normalize_lambda0<T: Scalar>(b: &Basis<T>, tol: f64) -> Result<Basis<T>> {
    let mut columns = Vec::with_capacity(b.k());
    for (idx, col) in b.columns.iter().enumerate() {
        let sums = block_sums(&b.scheme, col);
        let common = if T::is_exact() {
            sums[0].clone()
        } else {
            sums.iter().cloned().sum::<T>() / T::from_int(sums.len() as i64)
        };
        if common.is_zero() {
            return Err(GomError::NotScaledPlane(format!(
                "basis vector {} has zero block sums",
                idx + 1
            )));
        }
        let scale = common.to_f64().abs();
        if let Some(bad) = sums
            .iter()
            .position(|s| !negligible(&(s.clone() - common.clone()), tol, scale))
        {
            return Err(GomError::NotScaledPlane(format!(
                "basis vector {} (from column {}) has block sum {} for measurement {}, expected {}",
                idx + 1,
                b.sources[idx]
                    .as_ref()
                    .map_or("-".to_string(), |c| c.to_string()),
                sums[bad].to_repr(),
                bad + 1,
                common.to_repr()
            )));
        }
        let mut scaled: Vec<T> = col.iter().map(|v| v.clone() / common.clone()).collect();
        if !T::is_exact() {
            for j in 0..b.scheme.num_measurements() {
                let off = b.scheme.block_offset(j);
                let len = b.scheme.outcome_count(j);
                let s: T = scaled[off..off + len].iter().cloned().sum();
                for v in &mut scaled[off..off + len] {
                    *v /= s.clone();
                }
            }
        }
        columns.push(scaled);
    }
    Ok(Basis {
        scheme: b.scheme.clone(),
        columns,
        lambda0: true,
        sources: b.sources.clone(),
    })
}

/// Re-center a Λ₀ basis so the unconditional expectation of `G` becomes
/// `(1/K, …, 1/K)`. Uses the translation `A = I + (u − t) 1ᵀ` with
/// `u = eg`, `t = (1/K, …)`: its columns sum to one, `A⁻¹ = I + (t − u) 1ᵀ`
/// and `A⁻¹ u = t`. Returns the new basis `Λ A` and `A`.
pub fn normalize_lambda1<T: Scalar>(b: &Basis<T>, eg: &[T]) -> Result<(Basis<T>, Matrix<T>)> {
    let k = b.k();
    if !b.lambda0 {
        return Err(GomError::Precondition(
            "centering needs a basis with unit block sums".into(),
        ));
    }
    if eg.len() != k {
        return Err(GomError::InvalidArgument(format!(
            "expectation has {} entries, basis has {k}",
            eg.len()
        )));
    }
    let total: T = eg.iter().cloned().sum();
    let tol = if T::is_exact() { 0.0 } else { 1e-9 };
    if !negligible(&(total.clone() - T::one()), tol, 1.0) {
        return Err(GomError::Precondition(format!(
            "expectation sums to {}, not 1",
            total.to_repr()
        )));
    }
    let t = T::ratio(1, k as i64);
    let mut a = Matrix::identity(k);
    for r in 0..k {
        let shift = eg[r].clone() - t.clone();
        if shift.is_zero() {
            continue;
        }
        for c in 0..k {
            a[(r, c)] += shift.clone();
        }
    }
    let mut out = b.transform(&a);
    out.lambda0 = true;
    Ok((out, a))
}
