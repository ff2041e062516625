//! Measurement schemes, contingency-table cells and latent power indices.
//!
//! A cell `ℓ` has one entry per measurement: `0` marks a marginalized
//! measurement, `1..=L_j` a fixed outcome. Cells derive `Ord`
//! lexicographically with measurement 1 most significant.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GomError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scheme {
    outcomes: Vec<usize>,
}

impl Scheme {
    pub fn new(outcomes: Vec<usize>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(GomError::InvalidScheme("no measurements".into()));
        }
        if let Some(j) = outcomes.iter().position(|&l| l < 2) {
            return Err(GomError::InvalidScheme(format!(
                "measurement {} has {} outcome(s); at least 2 are required",
                j + 1,
                outcomes[j]
            )));
        }
        if let Some(j) = outcomes.iter().position(|&l| l > u16::MAX as usize) {
            return Err(GomError::InvalidScheme(format!(
                "measurement {} has too many outcomes",
                j + 1
            )));
        }
        Ok(Scheme { outcomes })
    }

    /// Number of measurements `J`.
    pub fn num_measurements(&self) -> usize {
        self.outcomes.len()
    }

    pub fn outcomes(&self) -> &[usize] {
        &self.outcomes
    }

    pub fn outcome_count(&self, j: usize) -> usize {
        self.outcomes[j]
    }

    /// `|L| = Σ L_j`, the number of indicator coordinates.
    pub fn total_outcomes(&self) -> usize {
        self.outcomes.iter().sum()
    }

    /// `|L*| = Π L_j`, the number of complete cells. Saturates on overflow.
    pub fn complete_cells(&self) -> usize {
        self.outcomes
            .iter()
            .fold(1usize, |acc, &l| acc.saturating_mul(l))
    }

    /// Offset of block `j` inside a length-`|L|` vector.
    pub fn block_offset(&self, j: usize) -> usize {
        self.outcomes[..j].iter().sum()
    }

    /// Flat position of indicator `(j, l)` (0-based `j`, 1-based `l`).
    pub fn row_of(&self, j: usize, l: usize) -> usize {
        debug_assert!(l >= 1 && l <= self.outcomes[j]);
        self.block_offset(j) + l - 1
    }

    /// All `(j, l)` pairs in block order.
    pub fn rows(&self) -> Vec<(usize, usize)> {
        self.outcomes
            .iter()
            .enumerate()
            .flat_map(|(j, &lj)| (1..=lj).map(move |l| (j, l)))
            .collect()
    }

    pub fn empty_cell(&self) -> CellIndex {
        CellIndex(vec![0; self.num_measurements()])
    }

    pub fn validate_cell(&self, cell: &CellIndex) -> Result<()> {
        if cell.len() != self.num_measurements() {
            return Err(GomError::InvalidArgument(format!(
                "cell {cell} has {} entries, scheme has {} measurements",
                cell.len(),
                self.num_measurements()
            )));
        }
        for (j, (&v, &lj)) in cell.0.iter().zip(&self.outcomes).enumerate() {
            if v as usize > lj {
                return Err(GomError::InvalidArgument(format!(
                    "cell {cell}: outcome {v} out of range 0..={lj} for measurement {}",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellIndex(pub Vec<u16>);

impl CellIndex {
    pub fn new(entries: Vec<u16>) -> Self {
        CellIndex(entries)
    }

    pub fn entries(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> usize {
        self.0[j] as usize
    }

    /// Measurements marginalized in this cell (0-based).
    pub fn zero_set(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| self.0[j] == 0).collect()
    }

    pub fn is_zero_at(&self, j: usize) -> bool {
        self.0[j] == 0
    }

    /// Number of observed (nonzero) coordinates.
    pub fn order(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    /// True iff the cell fixes every measurement (`ℓ ∈ 𝓛`).
    pub fn is_complete(&self) -> bool {
        self.0.iter().all(|&v| v != 0)
    }

    /// `ℓ + l_j`: fix outcome `l` of a marginalized measurement `j`.
    pub fn with(&self, j: usize, l: usize) -> CellIndex {
        debug_assert!(self.0[j] == 0, "measurement already observed");
        let mut out = self.clone();
        out.0[j] = l as u16;
        out
    }

    /// Observed `(j, l)` pairs in measurement order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(j, &v)| (j, v as usize))
    }

    /// Column order of the moment matrix: by order, then by the list of
    /// observed `(j, l)` pairs.
    pub fn graded_cmp(&self, other: &CellIndex) -> Ordering {
        self.order()
            .cmp(&other.order())
            .then_with(|| self.observed().cmp(other.observed()))
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str(")")
    }
}

impl std::str::FromStr for CellIndex {
    type Err = GomError;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        inner
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u16>()
                    .map_err(|_| GomError::Parse(format!("bad cell '{s}'")))
            })
            .collect::<Result<Vec<_>>>()
            .map(CellIndex)
    }
}

/// 𝓛^[𝒥]: all cells whose zero set is exactly `zeros` (0-based), in
/// lexicographic order.
pub fn enumerate_cells(scheme: &Scheme, zeros: &[usize]) -> Vec<CellIndex> {
    let j_count = scheme.num_measurements();
    let mut marginal = vec![false; j_count];
    for &j in zeros {
        marginal[j] = true;
    }
    let free: Vec<usize> = (0..j_count).filter(|&j| !marginal[j]).collect();
    let mut out = Vec::new();
    let mut current = vec![0u16; j_count];
    for &j in &free {
        current[j] = 1;
    }
    loop {
        out.push(CellIndex(current.clone()));
        // odometer over the free coordinates, last one fastest
        let mut pos = free.len();
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            let j = free[pos];
            if (current[j] as usize) < scheme.outcome_count(j) {
                current[j] += 1;
                break;
            }
            current[j] = 1;
        }
    }
}

/// Every subset of `0..n` with at most `max_size` elements, ordered by size
/// then lexicographically.
pub fn subsets_up_to(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for size in 1..=max_size.min(n) {
        let mut comb: Vec<usize> = (0..size).collect();
        loop {
            out.push(comb.clone());
            let mut i = size;
            let mut advanced = false;
            while i > 0 {
                i -= 1;
                if comb[i] < n - size + i {
                    comb[i] += 1;
                    for k in i + 1..size {
                        comb[k] = comb[k - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
    }
    out
}

/// All cells of 𝓛⁰ with at most `max_order` observed coordinates, in
/// lexicographic order.
pub fn cells_up_to_order(scheme: &Scheme, max_order: usize) -> Vec<CellIndex> {
    let j_count = scheme.num_measurements();
    let mut cells: Vec<CellIndex> = subsets_up_to(j_count, max_order)
        .into_iter()
        .flat_map(|observed| {
            let zeros: Vec<usize> = (0..j_count).filter(|j| !observed.contains(j)).collect();
            enumerate_cells(scheme, &zeros)
        })
        .collect();
    cells.sort();
    cells
}

/// `ℓ'' ∋ ℓ'`: `fine` agrees with `coarse` on every coordinate `coarse` observes.
pub fn refines(fine: &CellIndex, coarse: &CellIndex) -> bool {
    fine.len() == coarse.len()
        && fine
            .0
            .iter()
            .zip(&coarse.0)
            .all(|(&f, &c)| c == 0 || f == c)
}

/// `ℓ^[𝒥']`: zero out the listed measurements.
pub fn project(cell: &CellIndex, extra_zeros: &[usize]) -> CellIndex {
    let mut out = cell.clone();
    for &j in extra_zeros {
        out.0[j] = 0;
    }
    out
}

/// Exponent vector `v` of a monomial `G^v` in the latent coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerIndex(pub Vec<u32>);

impl PowerIndex {
    pub fn zeros(k: usize) -> Self {
        PowerIndex(vec![0; k])
    }

    /// `𝟏_k`.
    pub fn unit(k: usize, dims: usize) -> Self {
        let mut v = vec![0; dims];
        v[k] = 1;
        PowerIndex(v)
    }

    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn plus_unit(&self, k: usize) -> Self {
        let mut v = self.clone();
        v.0[k] += 1;
        v
    }

    /// The sorted multi-index sequence `w` with `v_k` copies of each `k`.
    pub fn canonical_sequence(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat(k).take(n as usize))
            .collect()
    }
}

impl fmt::Display for PowerIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// 𝓥[J', K] in lexicographic order.
pub fn v_indices(order: u32, dims: usize) -> Vec<PowerIndex> {
    assert!(dims >= 1, "at least one latent dimension");
    let mut out = Vec::new();
    let mut current = vec![0u32; dims];
    fill_v(order, 0, &mut current, &mut out);
    out
}

fn fill_v(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<PowerIndex>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(PowerIndex(current.clone()));
        return;
    }
    for v in 0..=remaining {
        current[pos] = v;
        fill_v(remaining - v, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// `C_v = (Σ v_k)! / Π v_k!`, the number of sequences `w` collapsing to `v`.
pub fn multinomial_c(v: &PowerIndex) -> u128 {
    // product of binomials avoids the large factorials
    let mut total: u32 = 0;
    let mut acc: u128 = 1;
    for &vk in &v.0 {
        for i in 1..=vk {
            total += 1;
            acc = acc * total as u128 / i as u128;
        }
    }
    acc
}
