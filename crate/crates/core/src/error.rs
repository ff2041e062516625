use thiserror::Error;

use crate::indexing::CellIndex;

pub type Result<T, E = GomError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GomError {
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("row {row}: {message}")]
    InvalidRecord { row: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("moment table has no value for cell {0}")]
    MissingMoment(CellIndex),

    #[error("support not identifiable at rank {k}: {detail}")]
    NotIdentifiable { k: usize, detail: String },

    #[error("column not in a scaled copy of the outcome plane: {0}")]
    NotScaledPlane(String),

    #[error("conditioning event has zero estimated probability: {0}")]
    ZeroProbability(CellIndex),

    #[error("cell {cell} not identifiable with current anchors (anchor measurements {anchors:?})")]
    CellNotIdentifiable { cell: CellIndex, anchors: Vec<usize> },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("variance subsystem singular at cell {0}")]
    VarianceSingular(CellIndex),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("model/basis mismatch: {0}")]
    ModelBasisMismatch(String),

    #[error("rejection budget exhausted after {attempts} attempts; try a smaller K")]
    RejectionBudget { attempts: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GomError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GomError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        GomError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage wrappers stripped.
    pub fn root(&self) -> &GomError {
        match self {
            GomError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the identification procedure itself (rank,
    /// completion, normalization), as opposed to bad input.
    pub fn is_identification_failure(&self) -> bool {
        matches!(
            self.root(),
            GomError::NotIdentifiable { .. }
                | GomError::NotScaledPlane(_)
                | GomError::Singular(_)
                | GomError::VarianceSingular(_)
        )
    }
}
