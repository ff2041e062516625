//! Ground truth: discrete latent models with finitely many support points,
//! their exact ℓ-moments and conditional moments, and seeded sampling under
//! local independence.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GomError, Result};
use crate::indexing::{cells_up_to_order, CellIndex, PowerIndex, Scheme};
use crate::linalg::{self, Matrix};
use crate::moment_matrix::{
    block_sums, build_moment_matrix, complete, estimate_rank, Basis, CompletionOptions, RankSearch,
};
use crate::scalar::{negligible, Rational, Scalar};
use crate::tables::{convert_scalar, MomentSource, MomentTable, Sample};

/// Support points `β⁽ⁱ⁾` with probabilities `p_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLatentModel<T> {
    pub scheme: Scheme,
    pub points: Vec<Vec<T>>,
    pub weights: Vec<T>,
}

impl<T: Scalar> DiscreteLatentModel<T> {
    pub fn new(scheme: Scheme, points: Vec<Vec<T>>, weights: Vec<T>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(GomError::InvalidArgument(format!(
                "{} points with {} weights",
                points.len(),
                weights.len()
            )));
        }
        let tol = if T::is_exact() { 0.0 } else { 1e-9 };
        for (i, p) in points.iter().enumerate() {
            if p.len() != scheme.total_outcomes() {
                return Err(GomError::InvalidArgument(format!(
                    "point {} has length {}, expected {}",
                    i + 1,
                    p.len(),
                    scheme.total_outcomes()
                )));
            }
            if p.iter().any(|x| *x < T::zero()) {
                return Err(GomError::InvalidArgument(format!(
                    "point {} has a negative probability",
                    i + 1
                )));
            }
            if let Some(j) = block_sums(&scheme, p)
                .iter()
                .position(|s| !negligible(&(s.clone() - T::one()), tol, 1.0))
            {
                return Err(GomError::InvalidArgument(format!(
                    "point {}: probabilities for measurement {} do not sum to 1",
                    i + 1,
                    j + 1
                )));
            }
        }
        if weights.iter().any(|w| *w < T::zero()) {
            return Err(GomError::InvalidArgument("negative weight".into()));
        }
        let total: T = weights.iter().cloned().sum();
        if !negligible(&(total - T::one()), tol, 1.0) {
            return Err(GomError::InvalidArgument("weights do not sum to 1".into()));
        }
        Ok(DiscreteLatentModel {
            scheme,
            points,
            weights,
        })
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn convert<U: Scalar>(&self) -> DiscreteLatentModel<U> {
        let conv = |v: &Vec<T>| v.iter().map(convert_scalar::<T, U>).collect::<Vec<U>>();
        DiscreteLatentModel {
            scheme: self.scheme.clone(),
            points: self.points.iter().map(conv).collect(),
            weights: conv(&self.weights),
        }
    }

    /// `Π_{j observed} β⁽ⁱ⁾_{jℓ_j}`
    fn cell_likelihood(&self, point: usize, cell: &CellIndex) -> T {
        let p = &self.points[point];
        let mut out = T::one();
        for (j, l) in cell.observed() {
            out *= p[self.scheme.row_of(j, l)].clone();
        }
        out
    }

    /// The support points as a basis (not necessarily independent).
    pub fn support_basis(&self) -> Result<Basis<T>> {
        Basis::new(self.scheme.clone(), self.points.clone())
    }
}

/// `M_ℓ = Σ_i p_i Π_{j: ℓ_j ≠ 0} β⁽ⁱ⁾_{jℓ_j}` for every cell of order
/// `≤ max_order`.
pub fn exact_ell_moments<T: Scalar>(model: &DiscreteLatentModel<T>, max_order: usize) -> MomentTable<T> {
    let max_order = max_order.min(model.scheme.num_measurements());
    let values = cells_up_to_order(&model.scheme, max_order)
        .into_iter()
        .map(|cell| {
            let m = exact_moment(model, &cell);
            (cell, m)
        })
        .collect();
    MomentTable {
        scheme: model.scheme.clone(),
        values,
        source: MomentSource::ExactOracle,
        max_order,
    }
}

pub fn exact_moment<T: Scalar>(model: &DiscreteLatentModel<T>, cell: &CellIndex) -> T {
    (0..model.k())
        .map(|i| model.weights[i].clone() * model.cell_likelihood(i, cell))
        .sum()
}

/// Coordinates `g⁽ⁱ⁾` of every support point in basis `b` (`Λ g = β`).
pub fn coordinates_in_basis<T: Scalar>(
    model: &DiscreteLatentModel<T>,
    b: &Basis<T>,
) -> Result<Vec<Vec<T>>> {
    let lam = b.matrix();
    let tol = T::default_tol();
    model
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let ls = linalg::least_squares(&lam, p, tol).ok_or_else(|| {
                GomError::ModelBasisMismatch("basis columns are linearly dependent".into())
            })?;
            let scale = linalg::norm_sq(p).to_f64().sqrt();
            let ok = if T::is_exact() {
                ls.residual.iter().all(|r| r.is_zero())
            } else {
                ls.residual_norm() <= 1e-9 * scale.max(1.0)
            };
            if !ok {
                return Err(GomError::ModelBasisMismatch(format!(
                    "support point {} lies outside the span of the basis (residual {:e})",
                    i + 1,
                    ls.residual_norm()
                )));
            }
            Ok(ls.coefficients)
        })
        .collect()
}

/// `𝓔(G^v | X = ℓ) = Σ_i p_i (g⁽ⁱ⁾)^v Π_{j observed} Σ_k g⁽ⁱ⁾_k λᵏ_{jℓ_j} / M_ℓ`.
pub fn exact_conditional_moment<T: Scalar>(
    model: &DiscreteLatentModel<T>,
    b: &Basis<T>,
    cell: &CellIndex,
    v: &PowerIndex,
) -> Result<T> {
    let coords = coordinates_in_basis(model, b)?;
    conditional_from_coordinates(model, b, &coords, cell, v)
}

/// Same as [`exact_conditional_moment`] with precomputed coordinates.
pub fn conditional_from_coordinates<T: Scalar>(
    model: &DiscreteLatentModel<T>,
    b: &Basis<T>,
    coords: &[Vec<T>],
    cell: &CellIndex,
    v: &PowerIndex,
) -> Result<T> {
    if v.dims() != b.k() {
        return Err(GomError::InvalidArgument(format!(
            "power index {v} has {} entries, basis has {}",
            v.dims(),
            b.k()
        )));
    }
    let mut numer = T::zero();
    let mut mass = T::zero();
    for (i, g) in coords.iter().enumerate() {
        let mut density = model.weights[i].clone();
        for (j, l) in cell.observed() {
            let row = b.row(j, l);
            density *= linalg::dot(&row, g);
        }
        let mut mono = T::one();
        for (gk, &e) in g.iter().zip(&v.0) {
            for _ in 0..e {
                mono *= gk.clone();
            }
        }
        numer += density.clone() * mono;
        mass += density;
    }
    if mass.is_zero() {
        return Err(GomError::ZeroProbability(cell.clone()));
    }
    Ok(numer / mass)
}

/// Conditional expectation and variance of every latent coordinate.
pub fn exact_conditional_summary<T: Scalar>(
    model: &DiscreteLatentModel<T>,
    b: &Basis<T>,
    cell: &CellIndex,
) -> Result<(Vec<T>, Vec<T>)> {
    let coords = coordinates_in_basis(model, b)?;
    summary_from_coordinates(model, b, &coords, cell)
}

/// Same as [`exact_conditional_summary`] with precomputed coordinates.
pub fn summary_from_coordinates<T: Scalar>(
    model: &DiscreteLatentModel<T>,
    b: &Basis<T>,
    coords: &[Vec<T>],
    cell: &CellIndex,
) -> Result<(Vec<T>, Vec<T>)> {
    let k = b.k();
    let mut mean = Vec::with_capacity(k);
    let mut var = Vec::with_capacity(k);
    for c in 0..k {
        let e1 = conditional_from_coordinates(model, b, coords, cell, &PowerIndex::unit(c, k))?;
        let mut two = PowerIndex::zeros(k);
        two.0[c] = 2;
        let e2 = conditional_from_coordinates(model, b, coords, cell, &two)?;
        var.push(e2 - e1.clone() * e1.clone());
        mean.push(e1);
    }
    Ok((mean, var))
}

/// Draw `n` records: a support point with probability `p_i`, then each
/// measurement independently from that point's block. Deterministic given
/// `seed` (ChaCha8).
pub fn sample<T: Scalar>(model: &DiscreteLatentModel<T>, n: usize, seed: u64) -> Result<Sample> {
    if n == 0 {
        return Err(GomError::InvalidArgument("sample size must be at least 1".into()));
    }
    let scheme = &model.scheme;
    let weights: Vec<f64> = model.weights.iter().map(|w| w.to_f64()).collect();
    let component = WeightedIndex::new(&weights)
        .map_err(|e| GomError::InvalidArgument(format!("weights: {e}")))?;
    let blocks: Vec<Vec<WeightedIndex<f64>>> = model
        .points
        .iter()
        .map(|p| {
            (0..scheme.num_measurements())
                .map(|j| {
                    let off = scheme.block_offset(j);
                    let probs: Vec<f64> = p[off..off + scheme.outcome_count(j)]
                        .iter()
                        .map(|x| x.to_f64())
                        .collect();
                    WeightedIndex::new(&probs)
                        .map_err(|e| GomError::InvalidArgument(format!("outcome probabilities: {e}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let i = component.sample(&mut rng);
            blocks[i]
                .iter()
                .map(|d| (d.sample(&mut rng) + 1) as u16)
                .collect()
        })
        .collect();
    Sample::new(scheme.clone(), rows)
}

pub const REJECTION_BUDGET: usize = 200;

/// `K` support points with entries drawn from `1..=20` and normalized per
/// block, equal weights. Redrawn until the points are linearly independent
/// and, with `general_position`, until the exact moment matrix completes
/// at rank `K`, its estimated rank is `K`, and the centered points have
/// smallest nonzero singular value above `1e-3`.
pub fn random_model<T: Scalar>(
    scheme: &Scheme,
    k: usize,
    seed: u64,
    general_position: bool,
) -> Result<DiscreteLatentModel<T>> {
    let room = scheme.total_outcomes() - scheme.num_measurements() + 1;
    if k == 0 || k > room {
        return Err(GomError::Precondition(format!(
            "K = {k} must lie in 1..={room} for outcome counts {:?}",
            scheme.outcomes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..REJECTION_BUDGET {
        let points: Vec<Vec<Rational>> = (0..k).map(|_| random_point(scheme, &mut rng)).collect();
        let weights = vec![Rational::ratio(1, k as i64); k];
        let model = DiscreteLatentModel::new(scheme.clone(), points, weights)?;
        if accept(&model, general_position) {
            return Ok(model.convert());
        }
    }
    Err(GomError::RejectionBudget {
        attempts: REJECTION_BUDGET,
    })
}

fn random_point(scheme: &Scheme, rng: &mut impl Rng) -> Vec<Rational> {
    let mut out = Vec::with_capacity(scheme.total_outcomes());
    for j in 0..scheme.num_measurements() {
        let raw: Vec<i64> = (0..scheme.outcome_count(j))
            .map(|_| rng.gen_range(1..=20))
            .collect();
        let total: i64 = raw.iter().sum();
        out.extend(raw.iter().map(|&x| Rational::ratio(x, total)));
    }
    out
}

fn accept(model: &DiscreteLatentModel<Rational>, general_position: bool) -> bool {
    let k = model.k();
    let pts = Matrix::from_columns(&model.points);
    if linalg::rank(&pts, 0.0) < k {
        return false;
    }
    if !general_position {
        return true;
    }
    if k >= 2 {
        let n = model.scheme.total_outcomes();
        let mean: Vec<f64> = (0..n)
            .map(|r| model.points.iter().map(|p| p[r].to_f64()).sum::<f64>() / k as f64)
            .collect();
        let centered: Vec<Vec<f64>> = model
            .points
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(x, m)| x.to_f64() - m).collect())
            .collect();
        let sv = linalg::singular_values(&Matrix::from_columns(&centered));
        if sv.len() < k - 1 || sv[k - 2] <= 1e-3 {
            return false;
        }
    }
    let j = model.scheme.num_measurements();
    let cap = 2.min(j - 1);
    let mt = exact_ell_moments(model, cap + 1);
    let Ok(m) = build_moment_matrix(&mt, cap) else {
        return false;
    };
    if estimate_rank(&m, 0.0, k.max(crate::moment_matrix::DEFAULT_K_CAP), RankSearch::Greedy) != k {
        return false;
    }
    complete(&m, k, CompletionOptions::exact())
        .map(|cm| cm.flagged().is_empty())
        .unwrap_or(false)
}

/// The three-point model of the worked example: two points and their
/// midpoint, equally weighted, on three binary measurements.
pub fn three_point_model() -> DiscreteLatentModel<Rational> {
    let q = Rational::ratio;
    let b1 = vec![q(1, 1), q(0, 1), q(1, 3), q(2, 3), q(4, 5), q(1, 5)];
    let b2 = vec![q(1, 9), q(8, 9), q(3, 5), q(2, 5), q(1, 4), q(3, 4)];
    let b3: Vec<Rational> = b1
        .iter()
        .zip(&b2)
        .map(|(a, b)| (a.clone() + b.clone()) / q(2, 1))
        .collect();
    DiscreteLatentModel::new(
        Scheme::new(vec![2, 2, 2]).unwrap(),
        vec![b1, b2, b3],
        vec![q(1, 3), q(1, 3), q(1, 3)],
    )
    .expect("valid model")
}

/// JSON form: scheme, points and weights as `p/q` or decimal strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub outcomes: Vec<usize>,
    pub points: Vec<Vec<String>>,
    pub weights: Vec<String>,
}

impl<T: Scalar> DiscreteLatentModel<T> {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format_version: 1,
            outcomes: self.scheme.outcomes().to_vec(),
            points: self
                .points
                .iter()
                .map(|p| p.iter().map(|x| x.to_repr()).collect())
                .collect(),
            weights: self.weights.iter().map(|x| x.to_repr()).collect(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let scheme = Scheme::new(file.outcomes.clone())?;
        let parse = |v: &Vec<String>| v.iter().map(|s| T::parse_repr(s)).collect::<Result<Vec<T>>>();
        let points = file.points.iter().map(parse).collect::<Result<Vec<_>>>()?;
        let weights = parse(&file.weights)?;
        DiscreteLatentModel::new(scheme, points, weights)
    }
}
