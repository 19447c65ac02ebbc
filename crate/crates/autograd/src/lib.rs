//! Reverse-mode automatic differentiation on a recorded tape of dense `f64` arrays.
//!
//! Operations are evaluated eagerly and appended to a [`Tape`]. Calling
//! [`Tape::backward`] walks the tape in reverse and records the adjoint of each
//! primitive as ordinary tape operations. The resulting gradients are therefore
//! differentiable again, which is what lets a loss on forces (themselves
//! `-dE/dx`) be differentiated with respect to model weights.
//!
//! ```
//! use hienet_autograd::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(vec![3.0], &[]).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let dy = tape.backward(y, &[x]).unwrap()[0];
//! assert_eq!(tape.item(dy), 6.0);
//! let d2y = tape.backward(dy, &[x]).unwrap()[0];
//! assert_eq!(tape.item(d2y), 2.0);
//! ```

mod backward;
mod coupling;
mod error;
mod ops;
pub mod shape;
mod tape;

pub use coupling::CouplingTerms;
pub use error::{AutogradError, Result};
pub use tape::{Tape, Unary, Var};
