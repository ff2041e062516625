//! The two-step estimator: moments → completed moment matrix → basis →
//! conditional moments, with an optional joint least-squares refinement.

mod refine;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use refine::{main_system_residual, refine_joint_ls, RefineReport};

use crate::conditional::{select_anchors, solve_cell, AnchorSet, CellConditional};
use crate::conditional::reconstruct_beta;
use crate::error::{GomError, Result};
use crate::indexing::{cells_up_to_order, CellIndex, Scheme};
use crate::linalg::Matrix;
use crate::moment_matrix::{
    build_moment_matrix, complete, estimate_rank, extract_basis, normalize_lambda0, normalize_lambda1, Basis,
    BasisSelection, ColumnStatus, CompletionOptions, RankSearch, DEFAULT_K_CAP,
};
use crate::scalar::{Arithmetic, Scalar};
use crate::tables::{check_summation, tabulate_parallel, to_frequencies, MomentSource, MomentTable, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Normalization {
    #[default]
    #[serde(rename = "lambda0")]
    Lambda0,
    /// Unit block sums, then centered so `𝓔(G) = (1/K, …, 1/K)`.
    #[serde(rename = "lambda0+lambda1")]
    Lambda0Lambda1,
}

impl std::str::FromStr for Normalization {
    type Err = GomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda0" => Ok(Normalization::Lambda0),
            "lambda0+lambda1" | "lambda1" => Ok(Normalization::Lambda0Lambda1),
            other => Err(GomError::Parse(format!("unknown normalization '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k_override: Option<usize>,
    /// `None`: 0 in rational mode, `1e-8` in float mode.
    pub rank_rel_tol: Option<f64>,
    /// Relative residual allowed for a completed column. `None`: exact in
    /// rational mode, `10 × rank_rel_tol` for exact float moments, no
    /// limit for empirical frequencies.
    pub completion_tol: Option<f64>,
    /// Relative disagreement allowed between the block sums of a basis
    /// column. `None`: 0 in rational mode, `1e-8` for exact float moments,
    /// `0.25` for empirical frequencies.
    pub lambda0_tol: Option<f64>,
    pub normalization: Normalization,
    pub arithmetic: Arithmetic,
    pub refine: bool,
    pub refine_max_iters: usize,
    pub refine_tol: f64,
    /// Highest cell order tabulated and used.
    pub max_order: usize,
    /// Highest order of moment-matrix columns.
    pub column_order: usize,
    pub k_cap: usize,
    pub rank_search: RankSearch,
    pub basis: BasisSelection,
    pub seed: u64,
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_override: None,
            rank_rel_tol: None,
            completion_tol: None,
            lambda0_tol: None,
            normalization: Normalization::Lambda0,
            arithmetic: Arithmetic::Rational,
            refine: false,
            refine_max_iters: 50,
            refine_tol: 1e-9,
            max_order: 3,
            column_order: 2,
            k_cap: DEFAULT_K_CAP,
            rank_search: RankSearch::Greedy,
            basis: BasisSelection::Pivoted,
            seed: 0,
            threads: 1,
        }
    }
}

impl FitConfig {
    pub fn float() -> Self {
        FitConfig {
            arithmetic: Arithmetic::Float,
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tols = [
            self.rank_rel_tol,
            self.completion_tol,
            self.lambda0_tol,
            Some(self.refine_tol),
        ];
        if tols.iter().flatten().any(|t| !(*t >= 0.0)) {
            return Err(GomError::InvalidArgument("tolerances must be nonnegative".into()));
        }
        if self.refine_max_iters == 0 {
            return Err(GomError::InvalidArgument("refine_max_iters must be at least 1".into()));
        }
        if self.max_order < 2 {
            return Err(GomError::InvalidArgument("max_order must be at least 2".into()));
        }
        if self.column_order == 0 {
            return Err(GomError::InvalidArgument("column_order must be at least 1".into()));
        }
        if self.k_override == Some(0) {
            return Err(GomError::InvalidArgument("K must be at least 1".into()));
        }
        Ok(())
    }

    fn rank_tol<T: Scalar>(&self) -> f64 {
        self.rank_rel_tol.unwrap_or_else(T::default_tol)
    }

    fn completion_options<T: Scalar>(&self, source: MomentSource) -> CompletionOptions {
        let rank_tol = self.rank_tol::<T>();
        let residual_tol = self.completion_tol.unwrap_or(if T::is_exact() {
            0.0
        } else if source == MomentSource::EmpiricalFrequency {
            f64::INFINITY
        } else {
            10.0 * rank_tol.max(f64::EPSILON)
        });
        CompletionOptions { rank_tol, residual_tol }
    }

    fn lambda0_tolerance<T: Scalar>(&self, source: MomentSource) -> f64 {
        self.lambda0_tol.unwrap_or(if T::is_exact() {
            0.0
        } else if source == MomentSource::EmpiricalFrequency {
            0.25
        } else {
            1e-8
        })
    }
}

/// Per-column completion outcome, as reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDiagnostic {
    pub column: CellIndex,
    pub status: ColumnStatus,
    pub round: usize,
    pub regressors: Vec<CellIndex>,
    /// `None` for columns that were never fitted.
    pub residual_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub estimated_rank: Option<usize>,
    pub completion: Vec<ColumnDiagnostic>,
    pub completion_max_residual: f64,
    pub summation_checked: usize,
    pub summation_violations: usize,
    pub main_system_residual: f64,
    /// Cells with no admissible anchor set.
    pub not_identifiable: Vec<CellIndex>,
    pub zero_probability: Vec<CellIndex>,
    pub variance_unavailable: Vec<CellIndex>,
    pub negative_variance: Vec<CellIndex>,
    pub refinement: Option<RefineReport>,
}

#[derive(Debug, Clone)]
pub struct FittedModel<T> {
    pub scheme: Scheme,
    pub k: usize,
    pub basis: Basis<T>,
    pub anchors: AnchorSet<T>,
    /// The centering transform, when one was applied.
    pub lambda1_transform: Option<Matrix<T>>,
    pub moments: MomentTable<T>,
    pub conditionals: BTreeMap<CellIndex, CellConditional<T>>,
    pub diagnostics: Diagnostics,
    pub config: FitConfig,
}

/// Tabulate a sample and fit its frequencies.
pub fn fit_sample<T: Scalar>(sample: &Sample, config: &FitConfig) -> Result<FittedModel<T>> {
    config.validate()?;
    let order = config.max_order.min(sample.scheme().num_measurements());
    let table = tabulate_parallel(sample, order, config.threads).map_err(|e| e.in_stage("tabulation"))?;
    fit(&to_frequencies::<T>(&table), config)
}

pub fn fit<T: Scalar>(mt: &MomentTable<T>, config: &FitConfig) -> Result<FittedModel<T>> {
    config.validate()?;
    if config.arithmetic != T::ARITHMETIC {
        return Err(GomError::InvalidArgument(format!(
            "configuration asks for {} arithmetic but the table is {}",
            config.arithmetic,
            T::ARITHMETIC
        )));
    }
    let scheme = mt.scheme.clone();
    let j_count = scheme.num_measurements();
    let rank_tol = config.rank_tol::<T>();
    let mut diagnostics = Diagnostics::default();

    let summation_tol = if T::is_exact() { 0.0 } else { 1e-12 };
    let summation = check_summation(mt, summation_tol);
    diagnostics.summation_checked = summation.checked;
    diagnostics.summation_violations = summation.violations.len();
    if !summation.is_clean() {
        log::warn!(
            "{} summation identities fail (missing data or inconsistent input)",
            summation.violations.len()
        );
    }

    let column_order = config
        .column_order
        .min(mt.max_order.saturating_sub(1))
        .min(j_count - 1);
    if column_order == 0 {
        return Err(GomError::InvalidArgument(
            "moment table must reach order 2 to build the moment matrix".into(),
        ));
    }
    let m = build_moment_matrix(mt, column_order).map_err(|e| e.in_stage("moment matrix"))?;

    let estimated = estimate_rank(&m, rank_tol, config.k_cap, config.rank_search);
    diagnostics.estimated_rank = Some(estimated);
    let k = config.k_override.unwrap_or(estimated);
    if k == 0 {
        return Err(GomError::NotIdentifiable {
            k,
            detail: "moment matrix has no nonzero known minor".into(),
        }
        .in_stage("rank"));
    }
    log::info!("K = {k} (estimated rank {estimated})");

    let cm = complete(&m, k, config.completion_options::<T>(mt.source)).map_err(|e| e.in_stage("completion"))?;
    diagnostics.completion = cm
        .columns
        .iter()
        .map(|c| ColumnDiagnostic {
            column: m.columns[c.column].clone(),
            status: c.status,
            round: c.round,
            regressors: c.regressors.iter().map(|&r| m.columns[r].clone()).collect(),
            residual_norm: c.residual_norm.is_finite().then_some(c.residual_norm),
        })
        .collect();
    diagnostics.completion_max_residual = cm.max_residual();

    let raw = extract_basis(&cm, &config.basis, rank_tol).map_err(|e| e.in_stage("basis"))?;
    let basis = normalize_lambda0(&raw, config.lambda0_tolerance::<T>(mt.source))
        .map_err(|e| e.in_stage("normalization"))?;

    let mut model = assemble(mt, basis, diagnostics, config)?;
    model.diagnostics.main_system_residual = main_system_residual(&model.basis, mt, config.max_order);
    if config.refine {
        if T::is_exact() {
            log::warn!("refinement runs in float mode only; skipped");
        } else {
            model = refine_joint_ls(&model, mt, config)?;
        }
    }
    Ok(model)
}

/// Center (if asked), pick anchors and solve every admissible cell.
pub(crate) fn assemble<T: Scalar>(
    mt: &MomentTable<T>,
    basis: Basis<T>,
    diagnostics: Diagnostics,
    config: &FitConfig,
) -> Result<FittedModel<T>> {
    let rank_tol = config.rank_tol::<T>();
    let scheme = mt.scheme.clone();
    let mut basis = basis;
    let mut lambda1_transform = None;
    if config.normalization == Normalization::Lambda0Lambda1 {
        let anchors = select_anchors(&basis, rank_tol).map_err(|e| e.in_stage("anchors"))?;
        let empty = scheme.empty_cell();
        let eg = solve_cell(&basis, &anchors, mt, &empty, false, rank_tol)
            .map_err(|e| e.in_stage("centering"))?
            .expectation;
        let (centered, a) = normalize_lambda1(&basis, &eg).map_err(|e| e.in_stage("centering"))?;
        basis = centered;
        lambda1_transform = Some(a);
    }
    let anchors = select_anchors(&basis, rank_tol).map_err(|e| e.in_stage("anchors"))?;
    let mut model = FittedModel {
        scheme,
        k: basis.k(),
        basis,
        anchors,
        lambda1_transform,
        moments: mt.clone(),
        conditionals: BTreeMap::new(),
        diagnostics,
        config: config.clone(),
    };
    solve_all_cells(&mut model, config.threads)?;
    Ok(model)
}

/// Reassemble a model from stored parts, keeping the given basis, anchors
/// and centering transform as they are.
pub fn rebuild<T: Scalar>(
    mt: MomentTable<T>,
    basis: Basis<T>,
    anchors: AnchorSet<T>,
    lambda1_transform: Option<Matrix<T>>,
    diagnostics: Diagnostics,
    config: FitConfig,
) -> Result<FittedModel<T>> {
    if basis.scheme != mt.scheme {
        return Err(GomError::InvalidArgument("basis and moments use different schemes".into()));
    }
    let threads = config.threads;
    let mut model = FittedModel {
        scheme: mt.scheme.clone(),
        k: basis.k(),
        basis,
        anchors,
        lambda1_transform,
        moments: mt,
        conditionals: BTreeMap::new(),
        diagnostics,
        config,
    };
    solve_all_cells(&mut model, threads)?;
    Ok(model)
}

fn solve_all_cells<T: Scalar>(model: &mut FittedModel<T>, threads: usize) -> Result<()> {
    let mt = &model.moments;
    let j_count = model.scheme.num_measurements();
    let order = mt.max_order.saturating_sub(1).min(j_count - 1);
    let cells: Vec<CellIndex> = cells_up_to_order(&model.scheme, order)
        .into_iter()
        .filter(|c| mt.contains(c))
        .collect();
    let tol = model.config.rank_tol::<T>();
    let (basis, anchors) = (&model.basis, &model.anchors);
    let solve = |c: &CellIndex| (c.clone(), solve_cell(basis, anchors, mt, c, true, tol));
    let threads = threads.max(1).min(cells.len().max(1));
    let results: Vec<(CellIndex, Result<CellConditional<T>>)> = if threads == 1 {
        cells.iter().map(solve).collect()
    } else {
        let chunk = cells.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(solve).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("conditional worker panicked"))
                .collect()
        })
    };
    let d = &mut model.diagnostics;
    d.not_identifiable.clear();
    d.zero_probability.clear();
    d.variance_unavailable.clear();
    d.negative_variance.clear();
    model.conditionals.clear();
    for (cell, res) in results {
        match res {
            Ok(c) => {
                match &c.variance {
                    None => d.variance_unavailable.push(cell.clone()),
                    Some(v) if !v.inconsistent.is_empty() => d.negative_variance.push(cell.clone()),
                    _ => {}
                }
                model.conditionals.insert(cell, c);
            }
            Err(GomError::CellNotIdentifiable { .. }) | Err(GomError::Singular(_)) => {
                d.not_identifiable.push(cell)
            }
            Err(GomError::ZeroProbability(_)) => d.zero_probability.push(cell),
            Err(GomError::MissingMoment(_)) => d.variance_unavailable.push(cell),
            Err(e) => return Err(e.in_stage("conditionals")),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub cell: CellIndex,
    pub expectation: Vec<T>,
    pub variance: Option<Vec<T>>,
    pub beta: Vec<T>,
    pub anchors: Vec<(usize, usize)>,
}

impl<T: Scalar> Prediction<T> {
    pub fn std_dev(&self) -> Option<Vec<f64>> {
        self.variance
            .as_ref()
            .map(|v| v.iter().map(|x| x.to_f64().max(0.0).sqrt()).collect())
    }
}

/// Conditional moments at `cell`, stored or freshly solved, with the
/// reconstructed outcome probabilities `Λ 𝓔(G | X = ℓ)`.
pub fn predict<T: Scalar>(model: &FittedModel<T>, cell: &CellIndex) -> Result<Prediction<T>> {
    model.scheme.validate_cell(cell)?;
    let tol = model.config.rank_tol::<T>();
    let solved;
    let c = match model.conditionals.get(cell) {
        Some(c) => c,
        None => {
            if cell.is_complete() {
                return Err(GomError::CellNotIdentifiable {
                    cell: cell.clone(),
                    anchors: model.anchors.measurements().iter().map(|j| j + 1).collect(),
                });
            }
            solved = solve_cell(&model.basis, &model.anchors, &model.moments, cell, true, tol).map_err(
                |e| match e {
                    GomError::MissingMoment(m) => GomError::Precondition(format!(
                        "cell {cell} needs moment {m}, beyond the tabulated order {}",
                        model.moments.max_order
                    )),
                    other => other,
                },
            )?;
            &solved
        }
    };
    let beta = reconstruct_beta(&model.basis, &c.expectation)?;
    Ok(Prediction {
        cell: cell.clone(),
        expectation: c.expectation.clone(),
        variance: c.variance.as_ref().map(|v| v.values.clone()),
        beta,
        anchors: c.expectation_anchors.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_ell_moments, three_point_model, DiscreteLatentModel};
    use crate::scalar::Rational;

    fn q(n: i64, d: i64) -> Rational {
        Rational::ratio(n, d)
    }

    fn cell(v: &[u16]) -> CellIndex {
        CellIndex(v.to_vec())
    }

    fn example_config() -> FitConfig {
        FitConfig {
            basis: BasisSelection::Columns(vec![cell(&[0, 0, 0]), cell(&[0, 0, 2])]),
            ..FitConfig::default()
        }
    }

    #[test]
    fn example_fit_in_rational_mode() {
        let mt = exact_ell_moments(&three_point_model(), 3);
        let model = fit(&mt, &example_config()).unwrap();
        assert_eq!(model.k, 2);
        assert_eq!(model.diagnostics.estimated_rank, Some(2));
        assert_eq!(model.diagnostics.summation_violations, 0);
        let p = predict(&model, &cell(&[1, 0, 0])).unwrap();
        assert_eq!(p.expectation, vec![q(131, 55), q(-76, 55)]);
        assert_eq!(p.variance.clone().unwrap(), vec![q(15523, 6050); 2]);
        let sd = p.std_dev().unwrap();
        assert!((sd[0] - 1.6018).abs() < 5e-5);
        for c in model.conditionals.values() {
            let s: Rational = c.expectation.iter().cloned().sum();
            assert_eq!(s, q(1, 1));
        }
        assert!(model.diagnostics.main_system_residual < 1e-12);
    }

    #[test]
    fn unconditional_prediction_sums_to_one() {
        let mt = exact_ell_moments(&three_point_model(), 3);
        let model = fit(&mt, &FitConfig::default()).unwrap();
        let p = predict(&model, &cell(&[0, 0, 0])).unwrap();
        let s: Rational = p.expectation.iter().cloned().sum();
        assert_eq!(s, q(1, 1));
        assert!(matches!(
            predict(&model, &cell(&[1, 1, 1])),
            Err(GomError::CellNotIdentifiable { .. })
        ));
    }

    #[test]
    fn one_point_model_has_unit_expectation_and_no_variance() {
        let scheme = Scheme::new(vec![2, 3, 2]).unwrap();
        let point = vec![q(1, 4), q(3, 4), q(1, 6), q(1, 3), q(1, 2), q(2, 5), q(3, 5)];
        let model = DiscreteLatentModel::new(scheme, vec![point], vec![q(1, 1)]).unwrap();
        let mt = exact_ell_moments(&model, 3);
        let fitted = fit(&mt, &FitConfig::default()).unwrap();
        assert_eq!(fitted.k, 1);
        for c in fitted.conditionals.values() {
            assert_eq!(c.expectation, vec![q(1, 1)]);
            if let Some(v) = &c.variance {
                assert_eq!(v.values, vec![q(0, 1)]);
            }
        }
    }

    #[test]
    fn overspecified_k_is_an_identification_failure() {
        let mt = exact_ell_moments(&three_point_model(), 3);
        let cfg = FitConfig {
            k_override: Some(5),
            ..FitConfig::default()
        };
        let err = fit(&mt, &cfg).unwrap_err();
        assert!(err.is_identification_failure());
        assert!(err.to_string().starts_with("completion:"));
    }

    #[test]
    fn centering_yields_uniform_unconditional_expectation() {
        let mt = exact_ell_moments(&three_point_model(), 3);
        let cfg = FitConfig {
            normalization: Normalization::Lambda0Lambda1,
            ..example_config()
        };
        let model = fit(&mt, &cfg).unwrap();
        let p = predict(&model, &cell(&[0, 0, 0])).unwrap();
        assert_eq!(p.expectation, vec![q(1, 2), q(1, 2)]);
        // β̂ does not depend on the basis convention
        let plain = fit(&mt, &example_config()).unwrap();
        for c in [cell(&[1, 0, 0]), cell(&[0, 2, 0])] {
            assert_eq!(predict(&model, &c).unwrap().beta, predict(&plain, &c).unwrap().beta);
        }
    }

    #[test]
    fn float_fit_on_exact_moments() {
        let mt = exact_ell_moments(&three_point_model(), 3).convert::<f64>();
        let cfg = FitConfig {
            k_override: Some(2),
            ..FitConfig { basis: example_config().basis, ..FitConfig::float() }
        };
        let model = fit(&mt, &cfg).unwrap();
        let p = predict(&model, &cell(&[1, 0, 0])).unwrap();
        assert!((p.expectation[0] - 131.0 / 55.0).abs() < 1e-10);
    }

    #[test]
    fn arithmetic_mismatch_is_rejected() {
        let mt = exact_ell_moments(&three_point_model(), 3);
        assert!(fit(&mt, &FitConfig::float()).is_err());
    }

    #[test]
    fn threaded_cells_match_serial() {
        let mt = exact_ell_moments(&three_point_model(), 3);
        let serial = fit(&mt, &FitConfig::default()).unwrap();
        let cfg = FitConfig {
            threads: 3,
            ..FitConfig::default()
        };
        let threaded = fit(&mt, &cfg).unwrap();
        assert_eq!(serial.conditionals, threaded.conditionals);
    }
}
