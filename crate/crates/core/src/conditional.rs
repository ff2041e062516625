//! Conditional moments of the latent vector from anchor subsystems of the
//! main system.
//!
//! The unknowns are `h^v_ℓ = M_ℓ · 𝓔(G^v | X = ℓ)`. For an anchor set of
//! `K` rows `(j_k, l_k)` with nonsingular matrix `A = (λ^{k'}_{j_k l_k})`,
//! all with `ℓ_{j_k} = 0`,
//!
//! ```text
//! Σ_k' λ^{k'}_{j_k l_k} h^{1_k'}_ℓ = M_{ℓ + (l_k)_{j_k}}
//! ```
//!
//! determines `h^1_ℓ`. Second moments come from the same system one level
//! up, with the right-hand side `h^{1_{k0}}` evaluated at the shifted cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GomError, Result};
use crate::indexing::{subsets_up_to, v_indices, CellIndex, PowerIndex};
use crate::linalg::{self, Matrix};
use crate::moment_matrix::Basis;
use crate::scalar::{negligible, Scalar};
use crate::tables::MomentTable;

/// `(v, ℓ) ↦ h^v_ℓ`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HTable<T> {
    pub entries: BTreeMap<(PowerIndex, CellIndex), T>,
    pub basis_id: String,
}

impl<T: Scalar> HTable<T> {
    pub fn new(basis_id: impl Into<String>) -> Self {
        HTable {
            entries: BTreeMap::new(),
            basis_id: basis_id.into(),
        }
    }

    pub fn insert(&mut self, v: PowerIndex, cell: CellIndex, value: T) {
        self.entries.insert((v, cell), value);
    }

    pub fn get(&self, v: &PowerIndex, cell: &CellIndex) -> Option<&T> {
        self.entries.get(&(v.clone(), cell.clone()))
    }

    /// Stores `h⁰_ℓ = M_ℓ`, `h^{1_k}_ℓ` and, when present, the second-order
    /// entries of one solved cell.
    pub fn record(&mut self, c: &CellConditional<T>) {
        let k = c.h1.len();
        self.insert(PowerIndex::zeros(k), c.cell.clone(), c.mass.clone());
        for (i, h) in c.h1.iter().enumerate() {
            self.insert(PowerIndex::unit(i, k), c.cell.clone(), h.clone());
        }
        if let Some(h2) = &c.h2 {
            for a in 0..k {
                for b in a..k {
                    let v = PowerIndex::unit(a, k).plus_unit(b);
                    self.insert(v, c.cell.clone(), h2[(a, b)].clone());
                }
            }
        }
    }
}

/// `K` anchor rows `(j, l)` (0-based `j`, 1-based `l`) with nonsingular
/// basis submatrix, plus an optional extra row for second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<T> {
    pub pairs: Vec<(usize, usize)>,
    pub extra: Option<(usize, usize)>,
    pub anchor_matrix: Matrix<T>,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn from_pairs(b: &Basis<T>, pairs: Vec<(usize, usize)>, tol: f64) -> Result<Self> {
        if pairs.len() != b.k() {
            return Err(GomError::InvalidArgument(format!(
                "{} anchor rows for K = {}",
                pairs.len(),
                b.k()
            )));
        }
        let anchor_matrix = rows_matrix(b, &pairs);
        if !linalg::is_nonsingular(&anchor_matrix, tol) {
            return Err(GomError::Singular(format!(
                "anchor rows {} give a singular matrix",
                format_pairs(&pairs)
            )));
        }
        Ok(AnchorSet {
            pairs,
            extra: None,
            anchor_matrix,
        })
    }

    /// `𝒥₀`, sorted, 0-based.
    pub fn measurements(&self) -> Vec<usize> {
        let mut js: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        js.sort_unstable();
        js.dedup();
        js
    }

    /// `𝒥₀ ∪ {j₀}` when the extra row exists.
    pub fn extended_measurements(&self) -> Option<Vec<usize>> {
        let (j0, _) = self.extra?;
        let mut js = self.measurements();
        if !js.contains(&j0) {
            js.push(j0);
            js.sort_unstable();
        }
        Some(js)
    }

    pub fn admits_expectation(&self, cell: &CellIndex) -> bool {
        self.measurements().iter().all(|&j| cell.is_zero_at(j))
    }

    pub fn admits_variance(&self, cell: &CellIndex) -> bool {
        self.extended_measurements()
            .is_some_and(|js| js.iter().all(|&j| cell.is_zero_at(j)))
    }
}

pub fn format_pairs(pairs: &[(usize, usize)]) -> String {
    pairs
        .iter()
        .map(|(j, l)| format!("({},{})", j + 1, l))
        .collect::<Vec<_>>()
        .join(" ")
}

fn rows_matrix<T: Scalar>(b: &Basis<T>, pairs: &[(usize, usize)]) -> Matrix<T> {
    Matrix::from_rows(pairs.iter().map(|&(j, l)| b.row(j, l)).collect())
}

fn rows_of<T: Scalar>(b: &Basis<T>, measurements: &[usize]) -> Vec<(usize, usize)> {
    measurements
        .iter()
        .flat_map(|&j| (1..=b.scheme.outcome_count(j)).map(move |l| (j, l)))
        .collect()
}

/// Greedy elimination with complete pivoting over the candidate rows:
/// each step takes the row holding the largest remaining entry. Returns
/// `K` rows if the candidates have rank `K`.
fn pivot_rows<T: Scalar>(b: &Basis<T>, candidates: &[(usize, usize)], tol: f64) -> Option<Vec<(usize, usize)>> {
    let k = b.k();
    if candidates.len() < k {
        return None;
    }
    let mut work: Vec<Vec<T>> = candidates.iter().map(|&(j, l)| b.row(j, l)).collect();
    let scale = work
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x.to_f64().abs())
        .fold(0.0, f64::max);
    let mut used_rows = vec![false; candidates.len()];
    let mut used_cols = vec![false; k];
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, usize, f64)> = None;
        for (r, row) in work.iter().enumerate() {
            if used_rows[r] {
                continue;
            }
            for c in 0..k {
                if used_cols[c] || row[c].is_zero() {
                    continue;
                }
                let mag = row[c].to_f64().abs();
                if best.is_none_or(|(_, _, m)| mag > m) {
                    best = Some((r, c, mag));
                }
            }
        }
        let (r, c, _) = best?;
        if negligible(&work[r][c], tol, scale) {
            return None;
        }
        used_rows[r] = true;
        used_cols[c] = true;
        chosen.push(r);
        let pivot_row = work[r].clone();
        for (i, row) in work.iter_mut().enumerate() {
            if used_rows[i] {
                continue;
            }
            let f = row[c].clone() / pivot_row[c].clone();
            if f.is_zero() {
                continue;
            }
            for (x, p) in row.iter_mut().zip(&pivot_row) {
                *x -= f.clone() * p.clone();
            }
        }
    }
    chosen.sort_unstable();
    Some(chosen.into_iter().map(|r| candidates[r]).collect())
}

/// Anchor rows drawn from the smallest (then lexicographically first)
/// subset of `allowed` measurements that supports `K` pivots.
pub fn search_anchor_rows<T: Scalar>(
    b: &Basis<T>,
    allowed: &[usize],
    tol: f64,
) -> Option<Vec<(usize, usize)>> {
    for subset in subsets_up_to(allowed.len(), b.k()).into_iter().skip(1) {
        let js: Vec<usize> = subset.iter().map(|&i| allowed[i]).collect();
        if let Some(rows) = pivot_rows(b, &rows_of(b, &js), tol) {
            return Some(rows);
        }
    }
    None
}

/// Canonical anchors: `K` rows from as few measurements as possible,
/// max-magnitude pivoting within them, and an extra row `(j₀, l₀)` with
/// `j₀ ∉ 𝒥₀` such that every `K × K` submatrix of the extended matrix is
/// nonsingular (the one with the best-conditioned worst submatrix wins).
pub fn select_anchors<T: Scalar>(b: &Basis<T>, tol: f64) -> Result<AnchorSet<T>> {
    let all: Vec<usize> = (0..b.scheme.num_measurements()).collect();
    let pairs = search_anchor_rows(b, &all, tol).ok_or_else(|| {
        GomError::Singular("basis does not have rank K on any set of rows".into())
    })?;
    let mut anchors = AnchorSet::from_pairs(b, pairs, tol)?;
    anchors.extra = find_extra(b, &anchors.pairs, &[], tol);
    Ok(anchors)
}

/// Best extra row outside the anchors' measurements (and outside
/// `excluded`) for which all `K × K` submatrices of the extended matrix
/// are nonsingular.
fn find_extra<T: Scalar>(
    b: &Basis<T>,
    pairs: &[(usize, usize)],
    excluded: &[usize],
    tol: f64,
) -> Option<(usize, usize)> {
    let js: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut best: Option<((usize, usize), f64)> = None;
    for (j, l) in b.scheme.rows() {
        if js.contains(&j) || excluded.contains(&j) {
            continue;
        }
        let mut ext = pairs.to_vec();
        ext.push((j, l));
        let mut worst = f64::INFINITY;
        let mut ok = true;
        for drop in 0..ext.len() {
            let sub: Vec<(usize, usize)> = ext
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != drop)
                .map(|(_, p)| *p)
                .collect();
            let m = rows_matrix(b, &sub);
            if !linalg::is_nonsingular(&m, tol) {
                ok = false;
                break;
            }
            worst = worst.min(linalg::determinant(&m).to_f64().abs());
        }
        if ok && best.is_none_or(|(_, w)| worst > w) {
            best = Some(((j, l), worst));
        }
    }
    best.map(|(p, _)| p)
}

/// Anchor rows for the expectation at `cell`: the canonical pairs when
/// they only touch measurements `cell` leaves unobserved, otherwise a
/// searched set inside the unobserved measurements.
pub fn expectation_rows<T: Scalar>(
    b: &Basis<T>,
    canonical: &AnchorSet<T>,
    cell: &CellIndex,
    tol: f64,
) -> Option<Vec<(usize, usize)>> {
    if canonical.admits_expectation(cell) {
        return Some(canonical.pairs.clone());
    }
    search_anchor_rows(b, &cell.zero_set(), tol)
}

/// How second moments at one cell are solved: `rows` is the outer
/// system, `shifted[k]` the anchors for the expectation at
/// `cell + (l_k)_{j_k}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariancePlan {
    pub rows: Vec<(usize, usize)>,
    pub shifted: Vec<Vec<(usize, usize)>>,
}

pub fn variance_plan<T: Scalar>(
    b: &Basis<T>,
    canonical: &AnchorSet<T>,
    cell: &CellIndex,
    tol: f64,
) -> Option<VariancePlan> {
    // the extended canonical set: shifted cell k uses the other K rows
    if let Some(extra) = canonical.extra {
        if canonical.admits_variance(cell) {
            let mut ext = canonical.pairs.clone();
            ext.push(extra);
            if let Some(plan) = plan_for_rows(b, cell, &canonical.pairs, Some(&ext), tol) {
                return Some(plan);
            }
        }
    }
    let zeros = cell.zero_set();
    for subset in subsets_up_to(zeros.len(), b.k()).into_iter().skip(1) {
        let js: Vec<usize> = subset.iter().map(|&i| zeros[i]).collect();
        let Some(rows) = pivot_rows(b, &rows_of(b, &js), tol) else {
            continue;
        };
        if let Some(plan) = plan_for_rows(b, cell, &rows, None, tol) {
            return Some(plan);
        }
    }
    None
}

fn plan_for_rows<T: Scalar>(
    b: &Basis<T>,
    cell: &CellIndex,
    rows: &[(usize, usize)],
    extended: Option<&[(usize, usize)]>,
    tol: f64,
) -> Option<VariancePlan> {
    let mut shifted = Vec::with_capacity(rows.len());
    for (k, &(j, l)) in rows.iter().enumerate() {
        let target = cell.with(j, l);
        let preferred = extended.map(|ext| {
            ext.iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, p)| *p)
                .collect::<Vec<_>>()
        });
        let anchors = match preferred {
            Some(p) if p.iter().all(|&(jj, _)| target.is_zero_at(jj)) => Some(p),
            _ => search_anchor_rows(b, &target.zero_set(), tol),
        }?;
        shifted.push(anchors);
    }
    Some(VariancePlan {
        rows: rows.to_vec(),
        shifted,
    })
}

/// `h^1_ℓ` from the anchor rows: solves `A h = (M_{ℓ + (l_k)_{j_k}})_k`.
pub fn solve_h1<T: Scalar>(
    b: &Basis<T>,
    rows: &[(usize, usize)],
    mt: &MomentTable<T>,
    cell: &CellIndex,
    tol: f64,
) -> Result<Vec<T>> {
    for &(j, _) in rows {
        if !cell.is_zero_at(j) {
            return Err(GomError::Precondition(format!(
                "anchor measurement {} is observed in {cell}",
                j + 1
            )));
        }
    }
    let a = rows_matrix(b, rows);
    let rhs: Vec<T> = rows
        .iter()
        .map(|&(j, l)| mt.get(&cell.with(j, l)).cloned())
        .collect::<Result<_>>()?;
    linalg::solve(&a, &rhs, tol).ok_or_else(|| {
        GomError::Singular(format!("anchor rows {} at cell {cell}", format_pairs(rows)))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expectation<T> {
    pub h: Vec<T>,
    pub e: Vec<T>,
}

/// `𝓔(G | X = ℓ)` with the given anchors; every anchor measurement must be
/// unobserved in `ℓ`.
pub fn conditional_expectation<T: Scalar>(
    b: &Basis<T>,
    anchors: &AnchorSet<T>,
    mt: &MomentTable<T>,
    cell: &CellIndex,
) -> Result<Expectation<T>> {
    expectation_with_rows(b, &anchors.pairs, mt, cell, T::default_tol())
}

pub fn expectation_with_rows<T: Scalar>(
    b: &Basis<T>,
    rows: &[(usize, usize)],
    mt: &MomentTable<T>,
    cell: &CellIndex,
    tol: f64,
) -> Result<Expectation<T>> {
    let mass = mt.get(cell)?.clone();
    if mass.is_zero() || mass < T::zero() {
        return Err(GomError::ZeroProbability(cell.clone()));
    }
    let h = solve_h1(b, rows, mt, cell, tol)?;
    let e = h.iter().map(|x| x.clone() / mass.clone()).collect();
    Ok(Expectation { h, e })
}

/// `h^{1_{k0} + 1_{k'}}_ℓ` as a symmetric `K × K` matrix.
pub fn solve_h2<T: Scalar>(
    b: &Basis<T>,
    plan: &VariancePlan,
    mt: &MomentTable<T>,
    cell: &CellIndex,
    tol: f64,
) -> Result<Matrix<T>> {
    let k = b.k();
    // shifted_h[r][k0] = h^{1_{k0}} at cell + row r
    let shifted_h: Vec<Vec<T>> = plan
        .rows
        .iter()
        .zip(&plan.shifted)
        .map(|(&(j, l), anchors)| solve_h1(b, anchors, mt, &cell.with(j, l), tol))
        .collect::<Result<_>>()?;
    let a = rows_matrix(b, &plan.rows);
    let rhs = Matrix::from_rows(shifted_h);
    let x = linalg::solve_many(&a, &rhs, tol).ok_or_else(|| GomError::VarianceSingular(cell.clone()))?;
    // x[(k', k0)] = h^{1_k0 + 1_k'}; symmetric up to rounding
    let half = T::ratio(1, 2);
    let mut out = Matrix::zeros(k, k);
    for p in 0..k {
        for q in 0..k {
            out[(p, q)] = if T::is_exact() {
                x[(q, p)].clone()
            } else {
                (x[(q, p)].clone() + x[(p, q)].clone()) * half.clone()
            };
        }
    }
    Ok(out)
}

/// `𝓔(G^{1_{k0} + 1_{k'}} | X = ℓ)` using the canonical pairs as the
/// outer system (the extra row must exist and be unobserved in `ℓ`).
pub fn conditional_second_moments<T: Scalar>(
    b: &Basis<T>,
    anchors: &AnchorSet<T>,
    mt: &MomentTable<T>,
    cell: &CellIndex,
) -> Result<Matrix<T>> {
    let tol = T::default_tol();
    if !anchors.admits_variance(cell) {
        return Err(GomError::Precondition(format!(
            "second moments at {cell} need unobserved anchor measurements {:?} and an extra row",
            anchors.measurements().iter().map(|j| j + 1).collect::<Vec<_>>()
        )));
    }
    let mut ext = anchors.pairs.clone();
    ext.push(anchors.extra.expect("checked"));
    let plan = plan_for_rows(b, cell, &anchors.pairs, Some(&ext), tol)
        .ok_or_else(|| GomError::VarianceSingular(cell.clone()))?;
    second_moments_with_plan(b, &plan, mt, cell, tol)
}

pub fn second_moments_with_plan<T: Scalar>(
    b: &Basis<T>,
    plan: &VariancePlan,
    mt: &MomentTable<T>,
    cell: &CellIndex,
    tol: f64,
) -> Result<Matrix<T>> {
    let mass = mt.get(cell)?.clone();
    if mass.is_zero() || mass < T::zero() {
        return Err(GomError::ZeroProbability(cell.clone()));
    }
    let h2 = solve_h2(b, plan, mt, cell, tol)?;
    Ok(h2.map(|x| x.clone() / mass.clone()))
}

pub const NEGATIVE_VARIANCE_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Variance<T> {
    pub values: Vec<T>,
    /// Coordinates whose variance came out below `-1e-9`.
    pub inconsistent: Vec<usize>,
}

/// `𝓓_k = 𝓔(G_k² | X = ℓ) − 𝓔(G_k | X = ℓ)²`. In float mode values in
/// `(-1e-9, 0)` are clamped to zero; more negative values are kept and
/// reported.
pub fn conditional_variance<T: Scalar>(first: &[T], second: &Matrix<T>) -> Variance<T> {
    let mut inconsistent = Vec::new();
    let values = first
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let d = second[(k, k)].clone() - e.clone() * e.clone();
            if d < T::zero() {
                if !T::is_exact() && d.to_f64() > -NEGATIVE_VARIANCE_CLAMP {
                    log::warn!("clamping variance {} of coordinate {} to 0", d.to_repr(), k + 1);
                    return T::zero();
                }
                inconsistent.push(k);
            }
            d
        })
        .collect();
    Variance {
        values,
        inconsistent,
    }
}

/// Everything solved at one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellConditional<T> {
    pub cell: CellIndex,
    pub mass: T,
    pub h1: Vec<T>,
    pub expectation: Vec<T>,
    pub expectation_anchors: Vec<(usize, usize)>,
    pub h2: Option<Matrix<T>>,
    pub second: Option<Matrix<T>>,
    pub variance: Option<Variance<T>>,
    pub variance_plan: Option<VariancePlan>,
}

/// Solve expectations (and, if `want_variance`, second moments) at `cell`.
/// Variances are left out, not reported as errors, when no admissible plan
/// exists or the moment table lacks the needed orders.
pub fn solve_cell<T: Scalar>(
    b: &Basis<T>,
    canonical: &AnchorSet<T>,
    mt: &MomentTable<T>,
    cell: &CellIndex,
    want_variance: bool,
    tol: f64,
) -> Result<CellConditional<T>> {
    let rows = expectation_rows(b, canonical, cell, tol).ok_or_else(|| {
        GomError::CellNotIdentifiable {
            cell: cell.clone(),
            anchors: canonical.measurements().iter().map(|j| j + 1).collect(),
        }
    })?;
    let Expectation { h, e } = expectation_with_rows(b, &rows, mt, cell, tol)?;
    let mut out = CellConditional {
        cell: cell.clone(),
        mass: mt.get(cell)?.clone(),
        h1: h,
        expectation: e,
        expectation_anchors: rows,
        h2: None,
        second: None,
        variance: None,
        variance_plan: None,
    };
    if want_variance && cell.order() + 2 <= mt.max_order {
        if let Some(plan) = variance_plan(b, canonical, cell, tol) {
            match solve_h2(b, &plan, mt, cell, tol) {
                Ok(h2) => {
                    let second = h2.map(|x| x.clone() / out.mass.clone());
                    out.variance = Some(conditional_variance(&out.expectation, &second));
                    out.h2 = Some(h2);
                    out.second = Some(second);
                    out.variance_plan = Some(plan);
                }
                Err(GomError::MissingMoment(_)) => {}
                Err(err) => return Err(err),
            }
        }
    }
    Ok(out)
}

/// `β̂ = Λ 𝓔(G | X = ℓ)`, a point of the outcome-probability plane.
pub fn reconstruct_beta<T: Scalar>(b: &Basis<T>, eg: &[T]) -> Result<Vec<T>> {
    if !b.lambda0 {
        return Err(GomError::Precondition(
            "reconstruction needs a basis with unit block sums".into(),
        ));
    }
    if eg.len() != b.k() {
        return Err(GomError::InvalidArgument(format!(
            "expectation has {} entries, basis has {}",
            eg.len(),
            b.k()
        )));
    }
    let total: T = eg.iter().cloned().sum();
    if !negligible(&(total - T::one()), if T::is_exact() { 0.0 } else { 1e-8 }, 1.0) {
        return Err(GomError::Precondition("expectation does not sum to 1".into()));
    }
    Ok(b.matrix().mul_vec(eg))
}

/// Moments `𝓔(G^v)` over `𝓥[J']` re-expressed in the basis `Λ A`:
/// with `G = A G'`, each `G'^v` is a product of linear forms in `G`
/// whose expansion gives `𝓔'(G^v) = Σ_{v'} c_{v v'} 𝓔(G^{v'})`.
pub fn change_basis_moments<T: Scalar>(
    moments: &BTreeMap<PowerIndex, T>,
    a: &Matrix<T>,
    tol: f64,
) -> Result<BTreeMap<PowerIndex, T>> {
    let k = a.rows();
    let a_inv = linalg::inverse(a, tol)
        .ok_or_else(|| GomError::Singular("change-of-basis matrix".into()))?;
    let mut out = BTreeMap::new();
    for v in moments.keys() {
        if v.dims() != k {
            return Err(GomError::InvalidArgument(format!(
                "power index {v} does not match K = {k}"
            )));
        }
        let poly = expand_power(&a_inv, v);
        let mut acc = T::zero();
        for (w, c) in poly {
            let m = moments.get(&w).ok_or_else(|| {
                GomError::InvalidArgument(format!("moment for power {w} not supplied"))
            })?;
            acc += c * m.clone();
        }
        out.insert(v.clone(), acc);
    }
    Ok(out)
}

/// `Π_k (Σ_m ā_{km} G_m)^{v_k}` as a polynomial `{v' ↦ coefficient}`.
fn expand_power<T: Scalar>(a_inv: &Matrix<T>, v: &PowerIndex) -> BTreeMap<PowerIndex, T> {
    let k = a_inv.rows();
    let mut poly: BTreeMap<PowerIndex, T> = BTreeMap::new();
    poly.insert(PowerIndex::zeros(k), T::one());
    for factor in v.canonical_sequence() {
        let mut next: BTreeMap<PowerIndex, T> = BTreeMap::new();
        for (mono, c) in &poly {
            for m in 0..k {
                let coef = a_inv[(factor, m)].clone();
                if coef.is_zero() {
                    continue;
                }
                let key = mono.plus_unit(m);
                let entry = next.entry(key).or_insert_with(T::zero);
                *entry += c.clone() * coef;
            }
        }
        poly = next;
    }
    poly
}

/// First moments map as `A⁻¹ e`.
pub fn change_basis_first<T: Scalar>(e: &[T], a: &Matrix<T>, tol: f64) -> Result<Vec<T>> {
    let a_inv = linalg::inverse(a, tol)
        .ok_or_else(|| GomError::Singular("change-of-basis matrix".into()))?;
    Ok(a_inv.mul_vec(e))
}

/// Second moments map as `A⁻¹ S A⁻ᵀ`.
pub fn change_basis_second<T: Scalar>(s: &Matrix<T>, a: &Matrix<T>, tol: f64) -> Result<Matrix<T>> {
    let a_inv = linalg::inverse(a, tol)
        .ok_or_else(|| GomError::Singular("change-of-basis matrix".into()))?;
    Ok(a_inv.mul(s).mul(&a_inv.transpose()))
}

/// All `𝓥[order]` moments of a second-moment matrix, keyed by power index.
pub fn second_moment_map<T: Scalar>(s: &Matrix<T>) -> BTreeMap<PowerIndex, T> {
    let k = s.rows();
    v_indices(2, k)
        .into_iter()
        .map(|v| {
            let seq = v.canonical_sequence();
            let value = s[(seq[0], seq[1])].clone();
            (v, value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indexing::multinomial_c;
    use crate::moment_matrix::{
        build_moment_matrix, complete, extract_basis, normalize_lambda0, BasisSelection, CompletionOptions,
    };
    use crate::oracle::{exact_conditional_summary, exact_ell_moments, three_point_model};
    use crate::scalar::Rational;
    use proptest::prelude::*;

    fn q(n: i64, d: i64) -> Rational {
        Rational::ratio(n, d)
    }

    fn cell(v: &[u16]) -> CellIndex {
        CellIndex(v.to_vec())
    }

    fn alpha_basis() -> (Basis<Rational>, MomentTable<Rational>) {
        let model = three_point_model();
        let mt = exact_ell_moments(&model, 3);
        let m = build_moment_matrix(&mt, 2).unwrap();
        let cm = complete(&m, 2, CompletionOptions::exact()).unwrap();
        let sel = BasisSelection::Columns(vec![cell(&[0, 0, 0]), cell(&[0, 0, 2])]);
        let b = normalize_lambda0(&extract_basis(&cm, &sel, 0.0).unwrap(), 0.0).unwrap();
        (b, mt)
    }

    #[test]
    fn anchors_are_nonsingular_and_compact() {
        let (b, _) = alpha_basis();
        let anchors = select_anchors(&b, 0.0).unwrap();
        assert_eq!(anchors.measurements().len(), 1);
        assert!(!linalg::determinant(&anchors.anchor_matrix).is_zero());
        let (j0, _) = anchors.extra.unwrap();
        assert!(!anchors.measurements().contains(&j0));
    }

    #[test]
    fn single_dimension_takes_largest_row() {
        let scheme = crate::Scheme::new(vec![2, 3]).unwrap();
        let b = Basis::new(scheme, vec![vec![q(1, 4), q(3, 4), q(1, 5), q(1, 5), q(3, 5)]]).unwrap();
        let anchors = select_anchors(&b, 0.0).unwrap();
        assert_eq!(anchors.pairs, vec![(0, 2)]);
    }

    #[test]
    fn degenerate_rows_force_measurement() {
        // measurements 1 and 2 have identical rows, so only measurement 3
        // separates the two basis vectors
        let scheme = crate::Scheme::new(vec![2, 2, 2]).unwrap();
        let b = Basis::new(
            scheme,
            vec![
                vec![q(1, 2), q(1, 2), q(1, 2), q(1, 2), q(1, 3), q(2, 3)],
                vec![q(1, 2), q(1, 2), q(1, 2), q(1, 2), q(3, 4), q(1, 4)],
            ],
        )
        .unwrap();
        let anchors = select_anchors(&b, 0.0).unwrap();
        assert_eq!(anchors.measurements(), vec![2]);
        assert!(anchors.extra.is_some_and(|(j, _)| j < 2));
    }

    #[test]
    fn worked_example_first_and_second_moments() {
        let (b, mt) = alpha_basis();
        let rows = vec![(1, 1), (1, 2)];
        let ex = expectation_with_rows(&b, &rows, &mt, &cell(&[1, 0, 0]), 0.0).unwrap();
        assert_eq!(ex.h, vec![q(131, 99), q(-76, 99)]);
        assert_eq!(ex.e, vec![q(131, 55), q(-76, 55)]);

        let anchors = select_anchors(&b, 0.0).unwrap();
        let plan = variance_plan(&b, &anchors, &cell(&[1, 0, 0]), 0.0).unwrap();
        let h2 = solve_h2(&b, &plan, &mt, &cell(&[1, 0, 0]), 0.0).unwrap();
        assert_eq!(h2[(0, 0)], q(3323, 726));
        assert_eq!(h2[(0, 1)], q(-7087, 2178));
        assert_eq!(h2[(1, 0)], q(-7087, 2178));
        // M_(1,0,0) · 1083/242
        assert_eq!(h2[(1, 1)], q(1805, 726));
        let second = second_moments_with_plan(&b, &plan, &mt, &cell(&[1, 0, 0]), 0.0).unwrap();
        assert_eq!(second[(0, 0)], q(9969, 1210));
        assert_eq!(second[(1, 1)], q(1083, 242));
        let var = conditional_variance(&ex.e, &second);
        assert_eq!(var.values, vec![q(15523, 6050), q(15523, 6050)]);
        assert!(var.inconsistent.is_empty());
    }

    #[test]
    fn solve_cell_matches_oracle_everywhere() {
        let (b, mt) = alpha_basis();
        let model = three_point_model();
        let anchors = select_anchors(&b, 0.0).unwrap();
        for c in crate::indexing::cells_up_to_order(&b.scheme, 1) {
            let solved = solve_cell(&b, &anchors, &mt, &c, true, 0.0).unwrap();
            let (mean, var) = exact_conditional_summary(&model, &b, &c).unwrap();
            assert_eq!(solved.expectation, mean, "cell {c}");
            assert_eq!(solved.variance.unwrap().values, var, "cell {c}");
            let s: Rational = solved.expectation.iter().cloned().sum();
            assert_eq!(s, q(1, 1));
        }
    }

    #[test]
    fn anchors_observed_is_a_precondition_error() {
        let (b, mt) = alpha_basis();
        let err = solve_h1(&b, &[(0, 1), (0, 2)], &mt, &cell(&[1, 0, 0]), 0.0).unwrap_err();
        assert!(matches!(err, GomError::Precondition(_)));
    }

    #[test]
    fn identity_change_of_basis() {
        let mut m = BTreeMap::new();
        m.insert(PowerIndex(vec![2, 0]), q(3, 2));
        m.insert(PowerIndex(vec![1, 1]), q(-1, 7));
        m.insert(PowerIndex(vec![0, 2]), q(5, 3));
        let out = change_basis_moments(&m, &Matrix::identity(2), 0.0).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn alpha_to_beta_basis_maps_table_rows() {
        let (b, mt) = alpha_basis();
        let model = three_point_model();
        // β = Λ_α A  ⇒  A = coordinates of the support points in the α basis
        let coords = crate::oracle::coordinates_in_basis(&model, &b).unwrap();
        let a = Matrix::from_columns(&coords[..2]);
        let anchors = select_anchors(&b, 0.0).unwrap();
        let solved = solve_cell(&b, &anchors, &mt, &cell(&[1, 0, 0]), true, 0.0).unwrap();
        let e_beta = change_basis_first(&solved.expectation, &a, 0.0).unwrap();
        assert_eq!(e_beta, vec![q(23, 30), q(7, 30)]);
        let s_beta = change_basis_second(solved.second.as_ref().unwrap(), &a, 0.0).unwrap();
        let var = conditional_variance(&e_beta, &s_beta);
        assert_eq!(var.values[0], q(43, 450));

        let beta_basis = b.transform(&a);
        assert_eq!(
            reconstruct_beta(&beta_basis, &e_beta).unwrap(),
            reconstruct_beta(&b, &solved.expectation).unwrap()
        );
    }

    #[test]
    fn reconstruct_unit_vector_gives_basis_column() {
        let (b, _) = alpha_basis();
        assert_eq!(reconstruct_beta(&b, &[q(0, 1), q(1, 1)]).unwrap(), b.columns[1]);
    }

    /// Expand to ordered index sequences, transform each factor, collapse.
    fn brute_force(moments: &BTreeMap<PowerIndex, Rational>, a: &Matrix<Rational>, order: u32) -> BTreeMap<PowerIndex, Rational> {
        let k = a.rows();
        let a_inv = linalg::inverse(a, 0.0).unwrap();
        let seqs: Vec<Vec<usize>> = (0..k.pow(order))
            .map(|mut n| {
                (0..order)
                    .map(|_| {
                        let d = n % k;
                        n /= k;
                        d
                    })
                    .collect()
            })
            .collect();
        let collapse = |w: &[usize]| {
            let mut v = PowerIndex::zeros(k);
            for &i in w {
                v = v.plus_unit(i);
            }
            v
        };
        // 𝓦-indexed moments; their 𝓥 collapse must weigh by C_v
        let mut out = BTreeMap::new();
        for v in v_indices(order, k) {
            let mut total = Rational::ratio(0, 1);
            for w in seqs.iter().filter(|w| collapse(w) == v) {
                for w2 in &seqs {
                    let mut c = Rational::ratio(1, 1);
                    for (x, y) in w.iter().zip(w2) {
                        c *= a_inv[(*x, *y)].clone();
                    }
                    total += c * moments[&collapse(w2)].clone();
                }
            }
            out.insert(v.clone(), total / Rational::from_int(multinomial_c(&v) as i64));
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tensor_transform_matches_brute_force(
            entries in proptest::collection::vec(-5i64..=5, 4),
            m in proptest::collection::vec(1i64..=9, 4),
        ) {
            let a = Matrix::from_rows(vec![
                vec![q(entries[0], 1), q(entries[1], 1)],
                vec![q(1 - entries[0], 1), q(1 - entries[1], 1)],
            ]);
            prop_assume!(!linalg::determinant(&a).is_zero());
            let mut moments = BTreeMap::new();
            for (i, v) in v_indices(2, 2).into_iter().enumerate() {
                moments.insert(v, q(m[i], 7));
            }
            let fast = change_basis_moments(&moments, &a, 0.0).unwrap();
            prop_assert_eq!(fast, brute_force(&moments, &a, 2));
            let mut third = BTreeMap::new();
            for (i, v) in v_indices(3, 2).into_iter().enumerate() {
                third.insert(v, q(m[i % 4] + i as i64, 11));
            }
            prop_assert_eq!(change_basis_moments(&third, &a, 0.0).unwrap(), brute_force(&third, &a, 3));
        }
    }
}
