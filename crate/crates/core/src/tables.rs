//! Contingency and frequency tables over 𝓛⁰.
//!
//! Missing outcomes are coded `0`. A record contributes to cell `ℓ` only
//! when it observes every measurement `ℓ` fixes, and the frequency of `ℓ`
//! is divided by the number of records observing that measurement set.
//! With complete data this is plain `N_ℓ / N`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{GomError, Result};
use crate::indexing::{cells_up_to_order, subsets_up_to, CellIndex, Scheme};
use crate::scalar::{negligible, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    scheme: Scheme,
    rows: Vec<Vec<u16>>,
}

impl Sample {
    /// Validates every code; row numbers in errors are 1-based.
    pub fn new(scheme: Scheme, rows: Vec<Vec<u16>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(GomError::InvalidArgument("sample has no records".into()));
        }
        let j_count = scheme.num_measurements();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != j_count {
                return Err(GomError::InvalidRecord {
                    row: i + 1,
                    message: format!("expected {j_count} outcomes, found {}", row.len()),
                });
            }
            for (j, &code) in row.iter().enumerate() {
                if code as usize > scheme.outcome_count(j) {
                    return Err(GomError::InvalidRecord {
                        row: i + 1,
                        message: format!(
                            "outcome {code} out of range 1..={} for measurement {}",
                            scheme.outcome_count(j),
                            j + 1
                        ),
                    });
                }
            }
        }
        Ok(Sample { scheme, rows })
    }

    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    pub fn rows(&self) -> &[Vec<u16>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_missing(&self) -> bool {
        self.rows.iter().any(|r| r.contains(&0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub scheme: Scheme,
    pub counts: BTreeMap<CellIndex, u64>,
    /// Per observed-measurement-set record counts, keyed by the sorted
    /// 0-based measurement list.
    pub observed: BTreeMap<Vec<usize>, u64>,
    pub n: u64,
    pub max_order: usize,
}

impl ContingencyTable {
    pub fn count(&self, cell: &CellIndex) -> Option<u64> {
        self.counts.get(cell).copied()
    }

    /// Number of records observing every measurement `cell` fixes.
    pub fn denominator(&self, cell: &CellIndex) -> u64 {
        let support: Vec<usize> = cell.observed().map(|(j, _)| j).collect();
        self.observed.get(&support).copied().unwrap_or(0)
    }

    fn merge(&mut self, other: ContingencyTable) {
        for (cell, c) in other.counts {
            *self.counts.entry(cell).or_insert(0) += c;
        }
        for (set, c) in other.observed {
            *self.observed.entry(set).or_insert(0) += c;
        }
        self.n += other.n;
    }
}

pub fn tabulate(sample: &Sample, max_order: usize) -> Result<ContingencyTable> {
    tabulate_parallel(sample, max_order, 1)
}

/// Tabulate with records split across `threads` workers; the merge is plain
/// addition, so the result does not depend on the split.
pub fn tabulate_parallel(
    sample: &Sample,
    max_order: usize,
    threads: usize,
) -> Result<ContingencyTable> {
    let scheme = sample.scheme();
    let j_count = scheme.num_measurements();
    if max_order == 0 || max_order > j_count {
        return Err(GomError::InvalidArgument(format!(
            "max_order must be in 1..={j_count}, got {max_order}"
        )));
    }
    let threads = threads.max(1).min(sample.len());
    let chunk = sample.len().div_ceil(threads);
    let mut partials: Vec<ContingencyTable> = std::thread::scope(|s| {
        let handles: Vec<_> = sample
            .rows()
            .chunks(chunk)
            .map(|rows| s.spawn(move || tabulate_rows(scheme, rows, max_order)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("tabulation worker panicked"))
            .collect()
    });
    let mut table = partials.remove(0);
    for p in partials {
        table.merge(p);
    }
    // make every cell of order ≤ max_order explicit, zero counts included
    for cell in cells_up_to_order(scheme, max_order) {
        table.counts.entry(cell).or_insert(0);
    }
    for set in subsets_up_to(j_count, max_order) {
        table.observed.entry(set).or_insert(0);
    }
    Ok(table)
}

fn tabulate_rows(scheme: &Scheme, rows: &[Vec<u16>], max_order: usize) -> ContingencyTable {
    let j_count = scheme.num_measurements();
    let mut counts: HashMap<Vec<u16>, u64> = HashMap::new();
    let mut observed: HashMap<Vec<usize>, u64> = HashMap::new();
    let mut subsets_cache: HashMap<usize, Vec<Vec<usize>>> = HashMap::new();
    for row in rows {
        let seen: Vec<usize> = (0..j_count).filter(|&j| row[j] != 0).collect();
        let subsets = subsets_cache
            .entry(seen.len())
            .or_insert_with(|| subsets_up_to(seen.len(), max_order));
        for subset in subsets.iter() {
            let support: Vec<usize> = subset.iter().map(|&i| seen[i]).collect();
            let mut cell = vec![0u16; j_count];
            for &j in &support {
                cell[j] = row[j];
            }
            *counts.entry(cell).or_insert(0) += 1;
            *observed.entry(support).or_insert(0) += 1;
        }
    }
    ContingencyTable {
        scheme: scheme.clone(),
        counts: counts
            .into_iter()
            .map(|(k, v)| (CellIndex(k), v))
            .collect(),
        observed: observed.into_iter().collect(),
        n: rows.len() as u64,
        max_order,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentSource {
    EmpiricalFrequency,
    ExactOracle,
    Provided,
}

/// Estimated or exact ℓ-moments, keyed by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable<T> {
    pub scheme: Scheme,
    pub values: BTreeMap<CellIndex, T>,
    pub source: MomentSource,
    pub max_order: usize,
}

impl<T: Scalar> MomentTable<T> {
    pub fn get(&self, cell: &CellIndex) -> Result<&T> {
        self.values
            .get(cell)
            .ok_or_else(|| GomError::MissingMoment(cell.clone()))
    }

    pub fn contains(&self, cell: &CellIndex) -> bool {
        self.values.contains_key(cell)
    }

    pub fn convert<U: Scalar>(&self) -> MomentTable<U> {
        MomentTable {
            scheme: self.scheme.clone(),
            values: self
                .values
                .iter()
                .map(|(c, v)| (c.clone(), convert_scalar(v)))
                .collect(),
            source: self.source,
            max_order: self.max_order,
        }
    }
}

/// Exact when converting into rationals from rationals; floats go through
/// their exact binary value.
pub fn convert_scalar<T: Scalar, U: Scalar>(v: &T) -> U {
    if T::is_exact() && U::is_exact() {
        U::parse_repr(&v.to_repr()).expect("rational repr parses")
    } else {
        U::from_f64(v.to_f64())
    }
}

/// `f_ℓ = N_ℓ / (records observing ℓ's measurements)`. Cells nobody
/// observed are left out.
pub fn to_frequencies<T: Scalar>(ct: &ContingencyTable) -> MomentTable<T> {
    let values = ct
        .counts
        .iter()
        .filter_map(|(cell, &count)| {
            let denom = ct.denominator(cell);
            (denom > 0).then(|| (cell.clone(), T::ratio(count as i64, denom as i64)))
        })
        .collect();
    MomentTable {
        scheme: ct.scheme.clone(),
        values,
        source: MomentSource::EmpiricalFrequency,
        max_order: ct.max_order,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummationViolation {
    /// The coarse cell `ℓ''`.
    pub cell: CellIndex,
    /// Measurements (0-based) summed out, `𝒥'' ∖ 𝒥'`.
    pub summed: Vec<usize>,
    pub value: f64,
    pub refined_sum: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummationReport {
    pub checked: usize,
    pub violations: Vec<SummationViolation>,
}

impl SummationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `M_ℓ'' = Σ_{ℓ' ∈ ℓ''} M_ℓ'` for every tabulated coarse cell and
/// every nonempty set of its marginalized measurements whose refinements
/// are still tabulated. `tol == 0` demands exact equality.
pub fn check_summation<T: Scalar>(mt: &MomentTable<T>, tol: f64) -> SummationReport {
    let mut report = SummationReport::default();
    for (cell, value) in &mt.values {
        let zeros = cell.zero_set();
        let room = mt.max_order.saturating_sub(cell.order());
        for pick in subsets_up_to(zeros.len(), room).into_iter().skip(1) {
            let summed: Vec<usize> = pick.iter().map(|&i| zeros[i]).collect();
            let Some(total) = sum_refinements(mt, cell, &summed) else {
                continue;
            };
            report.checked += 1;
            let diff = value.clone() - total.clone();
            if !negligible(&diff, tol, 1.0) {
                report.violations.push(SummationViolation {
                    cell: cell.clone(),
                    summed,
                    value: value.to_f64(),
                    refined_sum: total.to_f64(),
                    deviation: diff.to_f64().abs(),
                });
            }
        }
    }
    report
}

fn sum_refinements<T: Scalar>(mt: &MomentTable<T>, cell: &CellIndex, fill: &[usize]) -> Option<T> {
    let mut total = T::zero();
    let mut current = cell.clone();
    for &j in fill {
        current.0[j] = 1;
    }
    loop {
        total += mt.values.get(&current)?.clone();
        let mut pos = fill.len();
        loop {
            if pos == 0 {
                return Some(total);
            }
            pos -= 1;
            let j = fill[pos];
            if (current.0[j] as usize) < mt.scheme.outcome_count(j) {
                current.0[j] += 1;
                break;
            }
            current.0[j] = 1;
        }
    }
}
