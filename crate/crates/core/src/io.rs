//! File formats: sample CSV, scheme sidecar, moment/frequency tables and
//! fitted models as JSON. Exact values are written as `p/q` strings,
//! floats as shortest round-trip decimals.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::conditional::{select_anchors, AnchorSet};
use crate::error::{GomError, Result};
use crate::estimator::{rebuild, Diagnostics, FitConfig, FittedModel};
use crate::indexing::{CellIndex, Scheme};
use crate::linalg::Matrix;
use crate::moment_matrix::Basis;
use crate::scalar::{Arithmetic, Scalar};
use crate::tables::{ContingencyTable, MomentSource, MomentTable, Sample, SummationReport};

pub const FORMAT_VERSION: u32 = 1;

/// Outcome counts per measurement, optionally with column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeFile {
    pub outcomes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

/// Reads records with a header row. Outcomes are `1..=L_j`; an empty
/// field or `0` marks a missing outcome. Without a scheme, `L_j` is the
/// largest code seen in column `j`.
pub fn read_sample_csv<R: Read>(reader: R, scheme: Option<&Scheme>) -> Result<(Sample, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() {
        return Err(GomError::InvalidRecord {
            row: 0,
            message: "missing header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        let rec = rec.map_err(|e| GomError::InvalidRecord {
            row: row_no,
            message: e.to_string(),
        })?;
        if rec.len() != names.len() {
            return Err(GomError::InvalidRecord {
                row: row_no,
                message: format!("expected {} fields, found {}", names.len(), rec.len()),
            });
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, field)| {
                if field.is_empty() {
                    return Ok(0);
                }
                field.parse::<u16>().map_err(|_| GomError::InvalidRecord {
                    row: row_no,
                    message: format!("'{field}' in column '{}' is not an outcome code", names[j]),
                })
            })
            .collect::<Result<Vec<u16>>>()?;
        rows.push(row);
    }
    let scheme = match scheme {
        Some(s) => {
            if s.num_measurements() != names.len() {
                return Err(GomError::InvalidScheme(format!(
                    "scheme has {} measurements, file has {} columns",
                    s.num_measurements(),
                    names.len()
                )));
            }
            s.clone()
        }
        None => {
            let maxima: Vec<usize> = (0..names.len())
                .map(|j| rows.iter().map(|r| r[j] as usize).max().unwrap_or(0))
                .collect();
            Scheme::new(maxima).map_err(|e| match e {
                GomError::InvalidScheme(m) => GomError::InvalidScheme(format!(
                    "{m} (inferred from observed codes; supply a scheme file)"
                )),
                other => other,
            })?
        }
    };
    Ok((Sample::new(scheme, rows)?, names))
}

pub fn write_sample_csv<W: Write>(writer: W, sample: &Sample, names: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let j = sample.scheme().num_measurements();
    let header: Vec<String> = match names {
        Some(n) => n.to_vec(),
        None => (1..=j).map(|i| format!("X{i}")).collect(),
    };
    w.write_record(&header)?;
    for row in sample.rows() {
        w.write_record(row.iter().map(|&c| if c == 0 { String::new() } else { c.to_string() }))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub cell: CellIndex,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denominator: Option<u64>,
}

/// Frequencies (with counts) or exact/provided moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTableFile {
    pub format_version: u32,
    pub outcomes: Vec<usize>,
    pub max_order: usize,
    pub source: MomentSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<u64>,
    pub cells: Vec<TableCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summation: Option<SummationReport>,
}

impl MomentTableFile {
    /// Frequencies `count / denominator` as reduced fractions.
    pub fn from_counts(ct: &ContingencyTable, summation: Option<SummationReport>) -> Self {
        let cells = ct
            .counts
            .iter()
            .map(|(cell, &count)| {
                let denom = ct.denominator(cell);
                let value = if denom == 0 {
                    "0".to_string()
                } else {
                    crate::scalar::Rational::ratio(count as i64, denom as i64).to_repr()
                };
                TableCell {
                    cell: cell.clone(),
                    value,
                    count: Some(count),
                    denominator: Some(denom),
                }
            })
            .collect();
        MomentTableFile {
            format_version: FORMAT_VERSION,
            outcomes: ct.scheme.outcomes().to_vec(),
            max_order: ct.max_order,
            source: MomentSource::EmpiricalFrequency,
            records: Some(ct.n),
            cells,
            summation,
        }
    }

    pub fn from_table<T: Scalar>(mt: &MomentTable<T>) -> Self {
        MomentTableFile {
            format_version: FORMAT_VERSION,
            outcomes: mt.scheme.outcomes().to_vec(),
            max_order: mt.max_order,
            source: mt.source,
            records: None,
            cells: mt
                .values
                .iter()
                .map(|(cell, v)| TableCell {
                    cell: cell.clone(),
                    value: v.to_repr(),
                    count: None,
                    denominator: None,
                })
                .collect(),
            summation: None,
        }
    }

    /// Cells whose denominator is zero (never observed) are left out.
    pub fn to_table<T: Scalar>(&self) -> Result<MomentTable<T>> {
        let scheme = Scheme::new(self.outcomes.clone())?;
        let mut values = BTreeMap::new();
        for c in &self.cells {
            scheme.validate_cell(&c.cell)?;
            let v = match (c.count, c.denominator) {
                (_, Some(0)) => continue,
                (Some(n), Some(d)) => T::ratio(n as i64, d as i64),
                _ => T::parse_repr(&c.value)?,
            };
            values.insert(c.cell.clone(), v);
        }
        Ok(MomentTable {
            scheme,
            values,
            source: self.source,
            max_order: self.max_order,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDoc {
    pub columns: Vec<Vec<String>>,
    pub sources: Vec<Option<CellIndex>>,
    pub lambda0: bool,
}

/// Pairs are `[j, l]` with 1-based `j` and `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorDoc {
    pub pairs: Vec<[usize; 2]>,
    pub extra: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDoc {
    pub cell: CellIndex,
    pub probability: String,
    pub expectation: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_dev: Option<Vec<f64>>,
    pub anchors: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub format_version: u32,
    pub arithmetic: Arithmetic,
    pub outcomes: Vec<usize>,
    pub k: usize,
    pub basis: BasisDoc,
    pub lambda1_transform: Option<Vec<Vec<String>>>,
    pub anchors: AnchorDoc,
    pub moments: MomentTableFile,
    pub conditionals: Vec<ConditionalDoc>,
    pub diagnostics: Diagnostics,
    pub config: FitConfig,
}

fn pair_doc(p: (usize, usize)) -> [usize; 2] {
    [p.0 + 1, p.1]
}

fn pair_from_doc(p: [usize; 2]) -> (usize, usize) {
    (p[0].saturating_sub(1), p[1])
}

fn reprs<T: Scalar>(v: &[T]) -> Vec<String> {
    v.iter().map(Scalar::to_repr).collect()
}

fn parse_all<T: Scalar>(v: &[String]) -> Result<Vec<T>> {
    v.iter().map(|s| T::parse_repr(s)).collect()
}

impl ModelDoc {
    pub fn from_model<T: Scalar>(model: &FittedModel<T>) -> Self {
        let conditionals = model
            .conditionals
            .values()
            .map(|c| ConditionalDoc {
                cell: c.cell.clone(),
                probability: c.mass.to_repr(),
                expectation: reprs(&c.expectation),
                variance: c.variance.as_ref().map(|v| reprs(&v.values)),
                std_dev: c
                    .variance
                    .as_ref()
                    .map(|v| v.values.iter().map(|x| x.to_f64().max(0.0).sqrt()).collect()),
                anchors: c.expectation_anchors.iter().map(|&p| pair_doc(p)).collect(),
            })
            .collect();
        ModelDoc {
            format_version: FORMAT_VERSION,
            arithmetic: T::ARITHMETIC,
            outcomes: model.scheme.outcomes().to_vec(),
            k: model.k,
            basis: BasisDoc {
                columns: model.basis.columns.iter().map(|c| reprs(c)).collect(),
                sources: model.basis.sources.clone(),
                lambda0: model.basis.lambda0,
            },
            lambda1_transform: model
                .lambda1_transform
                .as_ref()
                .map(|a| (0..a.rows()).map(|r| reprs(a.row(r))).collect()),
            anchors: AnchorDoc {
                pairs: model.anchors.pairs.iter().map(|&p| pair_doc(p)).collect(),
                extra: model.anchors.extra.map(pair_doc),
            },
            moments: MomentTableFile::from_table(&model.moments),
            conditionals,
            diagnostics: model.diagnostics.clone(),
            config: model.config.clone(),
        }
    }

    /// Restores the model; conditionals are re-solved from basis, anchors
    /// and the embedded moments, which reproduces the stored values.
    pub fn to_model<T: Scalar>(&self) -> Result<FittedModel<T>> {
        if self.arithmetic != T::ARITHMETIC {
            return Err(GomError::InvalidArgument(format!(
                "model was fitted in {} arithmetic",
                self.arithmetic
            )));
        }
        let scheme = Scheme::new(self.outcomes.clone())?;
        let columns = self
            .basis
            .columns
            .iter()
            .map(|c| parse_all::<T>(c))
            .collect::<Result<Vec<_>>>()?;
        let mut basis = Basis::new(scheme, columns)?;
        basis.lambda0 = self.basis.lambda0;
        basis.sources = self.basis.sources.clone();
        if basis.k() != self.k {
            return Err(GomError::InvalidArgument("basis width differs from K".into()));
        }
        let tol = self.config.rank_rel_tol.unwrap_or_else(T::default_tol);
        let mut anchors = if self.anchors.pairs.is_empty() {
            select_anchors(&basis, tol)?
        } else {
            AnchorSet::from_pairs(&basis, self.anchors.pairs.iter().map(|&p| pair_from_doc(p)).collect(), tol)?
        };
        anchors.extra = self.anchors.extra.map(pair_from_doc);
        let lambda1 = self
            .lambda1_transform
            .as_ref()
            .map(|rows| {
                rows.iter()
                    .map(|r| parse_all::<T>(r))
                    .collect::<Result<Vec<_>>>()
                    .map(Matrix::from_rows)
            })
            .transpose()?;
        let mt = self.moments.to_table::<T>()?;
        rebuild(mt, basis, anchors, lambda1, self.diagnostics.clone(), self.config.clone())
    }
}

pub fn to_json_pretty<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
