use hienet_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("singular lattice")]
    SingularLattice,
    #[error("image range overflow: need {needed} images along an axis, bound is {bound}")]
    ImageRangeOverflow { needed: usize, bound: usize },
    #[error("collapsed cell")]
    CollapsedCell,
    #[error("not an O(3) element")]
    NotOrthogonal,
    #[error("atomic overlap between atoms {0} and {1}")]
    AtomicOverlap(usize, usize),
    #[error("coincident atoms")]
    CoincidentAtoms,
    #[error("undefined direction")]
    UndefinedDirection,
    #[error("harmonics not equivariant (residual {0:.3e})")]
    HarmonicsNotEquivariant(f64),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("unknown element {0}")]
    UnknownElement(u32),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("training diverged at epoch {epoch} (loss {loss:.3e})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("singular matrix")]
    SingularMatrix,
    #[error("dynamical matrix not Hermitian (deviation {0:.3e})")]
    NonHermitian(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("model/data mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, Error>;
