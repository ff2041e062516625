//! Alternating least squares on the main system with frequencies in place
//! of moments.
//!
//! Unknowns are the basis `α` (`|L| × K`), first-order `h¹_ℓ` on cells
//! of order `≤ min(J−1, max_order−1)` and symmetric second-order `H²_ℓ`
//! on cells of order `≤ min(J−2, max_order−2)`. Equations:
//!
//! ```text
//! α_{jl} · h¹_ℓ          = f_{ℓ + l_j}          (ℓ_j = 0)
//! α_{jl} · H²_ℓ[k0, ·]   = h¹_{ℓ + l_j}[k0]     (ℓ_j = 0)
//! Σ_k h¹_0[k] = 1,   Σ_{k,k'} H²_0[k,k'] = 1
//! ```
//!
//! The h-step is an exact linear least-squares solve for fixed `α`; the
//! α-step solves each measurement block with its rows constrained to sum
//! to one, so unit block sums are kept exactly. Both half-steps minimize
//! the same objective, so the residual never goes up.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{assemble, FitConfig, FittedModel};
use crate::error::Result;
use crate::indexing::{cells_up_to_order, CellIndex, Scheme};
use crate::moment_matrix::Basis;
use crate::scalar::Scalar;
use crate::tables::MomentTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub iterations: usize,
    pub accepted_iterations: usize,
    pub converged: bool,
}

struct System {
    scheme: Scheme,
    k: usize,
    c1: Vec<CellIndex>,
    c1_index: HashMap<CellIndex, usize>,
    c2: Vec<CellIndex>,
    f: HashMap<CellIndex, f64>,
    scale: f64,
}

impl System {
    fn new<T: Scalar>(scheme: &Scheme, k: usize, mt: &MomentTable<T>, max_order: usize) -> System {
        let j = scheme.num_measurements();
        let top = max_order.min(mt.max_order);
        let c1: Vec<CellIndex> = cells_up_to_order(scheme, top.saturating_sub(1).min(j - 1))
            .into_iter()
            .filter(|c| mt.contains(c))
            .collect();
        let c2: Vec<CellIndex> = if top >= 2 && j >= 2 {
            cells_up_to_order(scheme, (top - 2).min(j - 2))
                .into_iter()
                .filter(|c| mt.contains(c))
                .collect()
        } else {
            Vec::new()
        };
        let c1_index = c1.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let f: HashMap<CellIndex, f64> = mt.values.iter().map(|(c, v)| (c.clone(), v.to_f64())).collect();
        let scale = f.values().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        System {
            scheme: scheme.clone(),
            k,
            c1,
            c1_index,
            c2,
            f,
            scale,
        }
    }

    fn pairs(&self) -> usize {
        self.k * (self.k + 1) / 2
    }

    fn pair_index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        // row-major upper triangle
        a * self.k - a * (a + 1) / 2 + b
    }

    fn h2_offset(&self) -> usize {
        self.c1.len() * self.k
    }

    fn unknowns(&self) -> usize {
        self.h2_offset() + self.c2.len() * self.pairs()
    }
}

struct HValues {
    h1: Vec<Vec<f64>>,
    /// Full symmetric `K × K` per C2 cell.
    h2: Vec<DMatrix<f64>>,
}

/// Least-squares `h` for fixed `α` and the residual norm.
fn h_step(sys: &System, alpha: &DMatrix<f64>) -> (HValues, f64) {
    let k = sys.k;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for (ci, cell) in sys.c1.iter().enumerate() {
        for j in cell.zero_set() {
            for l in 1..=sys.scheme.outcome_count(j) {
                let Some(&target) = sys.f.get(&cell.with(j, l)) else {
                    continue;
                };
                let r = sys.scheme.row_of(j, l);
                rows.push((0..k).map(|c| (ci * k + c, alpha[(r, c)])).collect());
                rhs.push(target);
            }
        }
    }
    let off = sys.h2_offset();
    let p = sys.pairs();
    for (ci, cell) in sys.c2.iter().enumerate() {
        for j in cell.zero_set() {
            for l in 1..=sys.scheme.outcome_count(j) {
                let Some(&shift) = sys.c1_index.get(&cell.with(j, l)) else {
                    continue;
                };
                let r = sys.scheme.row_of(j, l);
                for k0 in 0..k {
                    let mut row: Vec<(usize, f64)> = (0..k)
                        .map(|c| (off + ci * p + sys.pair_index(k0, c), alpha[(r, c)]))
                        .collect();
                    row.push((shift * k + k0, -1.0));
                    rows.push(row);
                    rhs.push(0.0);
                }
            }
        }
    }
    let empty = sys.scheme.empty_cell();
    if let Some(&e) = sys.c1_index.get(&empty) {
        rows.push((0..k).map(|c| (e * k + c, 1.0)).collect());
        rhs.push(1.0);
    }
    if let Some(e) = sys.c2.iter().position(|c| *c == empty) {
        let mut row = Vec::new();
        for a in 0..k {
            for b in a..k {
                row.push((off + e * p + sys.pair_index(a, b), if a == b { 1.0 } else { 2.0 }));
            }
        }
        rows.push(row);
        rhs.push(1.0);
    }

    let n = sys.unknowns();
    let x = sparse_least_squares(&rows, &rhs, n);
    let residual = rows
        .iter()
        .zip(&rhs)
        .map(|(row, y)| {
            let r = row.iter().map(|&(c, v)| v * x[c]).sum::<f64>() - y;
            r * r
        })
        .sum::<f64>()
        .sqrt();

    let h1 = (0..sys.c1.len())
        .map(|ci| (0..k).map(|c| x[ci * k + c]).collect())
        .collect();
    let h2 = (0..sys.c2.len())
        .map(|ci| DMatrix::from_fn(k, k, |r, c| x[off + ci * p + sys.pair_index(r, c)]))
        .collect();
    (HValues { h1, h2 }, residual)
}

/// Least squares for rows with few nonzeros: normal equations accumulated
/// sparsely, a Cholesky solve with a ridge of `1e-13 · max diag` (columns
/// the equations leave free get the minimum-norm value), then one step of
/// iterative refinement against the unsquared system.
fn sparse_least_squares(rows: &[Vec<(usize, f64)>], rhs: &[f64], n: usize) -> DVector<f64> {
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut atb = DVector::<f64>::zeros(n);
    for (row, &y) in rows.iter().zip(rhs) {
        for &(a, va) in row {
            atb[a] += va * y;
            for &(b, vb) in row {
                ata[(a, b)] += va * vb;
            }
        }
    }
    let ridge = 1e-13 * (0..n).map(|i| ata[(i, i)]).fold(0.0, f64::max).max(1e-300);
    for i in 0..n {
        ata[(i, i)] += ridge;
    }
    let Some(chol) = ata.cholesky() else {
        return DVector::zeros(n);
    };
    let mut x = chol.solve(&atb);
    let mut correction = DVector::<f64>::zeros(n);
    for (row, &y) in rows.iter().zip(rhs) {
        let r = y - row.iter().map(|&(c, v)| v * x[c]).sum::<f64>();
        for &(c, v) in row {
            correction[c] += v * r;
        }
    }
    x += chol.solve(&correction);
    x
}

/// Block-wise constrained least squares for `α` with `h` fixed: for
/// measurement `j` with shared design `X`, minimize `Σ_l ‖X a_l − y_l‖²`
/// subject to `Σ_l a_l = 1`.
fn alpha_step(sys: &System, h: &HValues, current: &DMatrix<f64>) -> DMatrix<f64> {
    let k = sys.k;
    let mut alpha = current.clone();
    for j in 0..sys.scheme.num_measurements() {
        let lj = sys.scheme.outcome_count(j);
        let mut design: Vec<Vec<f64>> = Vec::new();
        let mut targets: Vec<Vec<f64>> = vec![Vec::new(); lj];
        for (ci, cell) in sys.c1.iter().enumerate() {
            if !cell.is_zero_at(j) {
                continue;
            }
            let ys: Option<Vec<f64>> = (1..=lj).map(|l| sys.f.get(&cell.with(j, l)).copied()).collect();
            let Some(ys) = ys else { continue };
            design.push(h.h1[ci].clone());
            for (t, y) in targets.iter_mut().zip(ys) {
                t.push(y);
            }
        }
        for (ci, cell) in sys.c2.iter().enumerate() {
            if !cell.is_zero_at(j) {
                continue;
            }
            let shifts: Option<Vec<usize>> = (1..=lj)
                .map(|l| sys.c1_index.get(&cell.with(j, l)).copied())
                .collect();
            let Some(shifts) = shifts else { continue };
            for k0 in 0..k {
                design.push((0..k).map(|c| h.h2[ci][(k0, c)]).collect());
                for (t, &s) in targets.iter_mut().zip(&shifts) {
                    t.push(h.h1[s][k0]);
                }
            }
        }
        if design.len() < k {
            continue;
        }
        let x = DMatrix::from_fn(design.len(), k, |r, c| design[r][c]);
        let gram = x.transpose() * &x;
        let Some(gram_inv) = gram.clone().try_inverse() else {
            continue;
        };
        let sv = gram.singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            continue;
        }
        let xty: Vec<DVector<f64>> = targets
            .iter()
            .map(|t| x.transpose() * DVector::from_column_slice(t))
            .collect();
        let ones = DVector::from_element(k, 1.0);
        let total = xty.iter().fold(DVector::zeros(k), |acc, v| acc + v);
        let mu = (&gram * &ones - total) / lj as f64;
        for (l, v) in xty.iter().enumerate() {
            let a = &gram_inv * (v + &mu);
            let r = sys.scheme.row_of(j, l + 1);
            for c in 0..k {
                alpha[(r, c)] = a[c];
            }
        }
    }
    alpha
}

fn basis_matrix<T: Scalar>(b: &Basis<T>) -> DMatrix<f64> {
    let n = b.scheme.total_outcomes();
    DMatrix::from_fn(n, b.k(), |r, c| b.columns[c][r].to_f64())
}

/// `min_h` of the main-system residual norm for the given basis, in `f64`.
pub fn main_system_residual<T: Scalar>(b: &Basis<T>, mt: &MomentTable<T>, max_order: usize) -> f64 {
    let sys = System::new(&b.scheme, b.k(), mt, max_order);
    h_step(&sys, &basis_matrix(b)).1
}

/// Refine basis and `h` jointly; the returned model never has a larger
/// main-system residual than `model`. Conditionals are re-solved from the
/// refined basis.
pub fn refine_joint_ls<T: Scalar>(
    model: &FittedModel<T>,
    mt: &MomentTable<T>,
    config: &FitConfig,
) -> Result<FittedModel<T>> {
    let sys = System::new(&model.scheme, model.k, mt, config.max_order);
    let alpha0 = basis_matrix(&model.basis);
    let (mut h, r0) = h_step(&sys, &alpha0);
    let floor = 1e-13 * sys.scale;

    let mut best_alpha = alpha0.clone();
    let mut best_r = r0;
    let mut accepted = 0;
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=config.refine_max_iters {
        iterations = it;
        let alpha = alpha_step(&sys, &h, &best_alpha);
        let (h_new, r) = h_step(&sys, &alpha);
        if r < best_r - config.refine_tol * best_r - floor {
            best_alpha = alpha;
            best_r = r;
            h = h_new;
            accepted += 1;
        } else {
            if r > best_r + floor {
                log::warn!("refinement step raised the residual ({best_r:e} → {r:e}); keeping the best iterate");
            }
            converged = true;
            break;
        }
    }
    log::info!("refinement: residual {r0:e} → {best_r:e} in {iterations} iteration(s)");

    let mut report = RefineReport {
        initial_residual: r0,
        final_residual: r0,
        iterations,
        accepted_iterations: accepted,
        converged,
    };
    if accepted == 0 {
        let mut out = model.clone();
        out.diagnostics.main_system_residual = r0;
        out.diagnostics.refinement = Some(report);
        return Ok(out);
    }

    let n = model.scheme.total_outcomes();
    let columns: Vec<Vec<T>> = (0..model.k)
        .map(|c| (0..n).map(|r| T::from_f64(best_alpha[(r, c)])).collect())
        .collect();
    let mut basis = Basis::new(model.scheme.clone(), columns)?;
    basis.lambda0 = true;
    basis.sources = model.basis.sources.clone();
    let mut refined = assemble(mt, basis, model.diagnostics.clone(), config)?;
    let final_r = main_system_residual(&refined.basis, mt, config.max_order);
    if final_r > r0 {
        log::warn!("refined model ended above the starting residual after centering; returning the input");
        let mut out = model.clone();
        out.diagnostics.main_system_residual = r0;
        out.diagnostics.refinement = Some(report);
        return Ok(out);
    }
    report.final_residual = final_r;
    refined.diagnostics.main_system_residual = final_r;
    refined.diagnostics.refinement = Some(report);
    Ok(refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit, fit_sample};
    use crate::moment_matrix::BasisSelection;
    use crate::oracle::{exact_ell_moments, sample, three_point_model};

    fn cell(v: &[u16]) -> CellIndex {
        CellIndex(v.to_vec())
    }

    fn config() -> FitConfig {
        FitConfig {
            k_override: Some(2),
            basis: BasisSelection::Columns(vec![cell(&[0, 0, 0]), cell(&[0, 0, 2])]),
            ..FitConfig::float()
        }
    }

    #[test]
    fn pair_index_is_a_bijection() {
        let scheme = Scheme::new(vec![2, 2, 2]).unwrap();
        let mt = exact_ell_moments(&three_point_model(), 3).convert::<f64>();
        let mut sys = System::new(&scheme, 3, &mt, 3);
        sys.k = 3;
        let mut seen: Vec<usize> = Vec::new();
        for a in 0..3 {
            for b in a..3 {
                seen.push(sys.pair_index(a, b));
                assert_eq!(sys.pair_index(a, b), sys.pair_index(b, a));
            }
        }
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn exact_input_is_a_fixed_point() {
        let mt = exact_ell_moments(&three_point_model(), 3).convert::<f64>();
        let model = fit(&mt, &config()).unwrap();
        assert!(model.diagnostics.main_system_residual < 1e-12);
        let refined = refine_joint_ls(&model, &mt, &config()).unwrap();
        let report = refined.diagnostics.refinement.clone().unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(report.accepted_iterations, 0);
        assert_eq!(refined.basis, model.basis);
    }

    #[test]
    fn perturbed_basis_moves_toward_zero_residual() {
        let mt = exact_ell_moments(&three_point_model(), 3).convert::<f64>();
        let mut model = fit(&mt, &config()).unwrap();
        for col in &mut model.basis.columns {
            for (i, v) in col.iter_mut().enumerate() {
                // ±1%, keeping block sums at one
                *v *= if i % 2 == 0 { 1.01 } else { 1.0 };
            }
        }
        let scheme = model.scheme.clone();
        for col in &mut model.basis.columns {
            for j in 0..3 {
                let off = scheme.block_offset(j);
                let s: f64 = col[off..off + 2].iter().sum();
                col[off] /= s;
                col[off + 1] /= s;
            }
        }
        let before = main_system_residual(&model.basis, &mt, 3);
        assert!(before > 1e-6);
        let refined = refine_joint_ls(&model, &mt, &config()).unwrap();
        let after = refined.diagnostics.main_system_residual;
        assert!(after < 0.1 * before, "{before} → {after}");
    }

    #[test]
    fn noisy_refinement_never_increases_residual() {
        let model = three_point_model();
        for seed in 0..3 {
            let s = sample(&model, 10_000, seed).unwrap();
            let fitted = fit_sample::<f64>(&s, &config()).unwrap();
            let before = fitted.diagnostics.main_system_residual;
            let mt = fitted.moments.clone();
            let refined = refine_joint_ls(&fitted, &mt, &config()).unwrap();
            assert!(refined.diagnostics.main_system_residual <= before);
            for col in &refined.basis.columns {
                let s: f64 = col[0..2].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
