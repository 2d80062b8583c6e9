//! Built-in problems: the two-dimensional toy model, an Ornstein–Uhlenbeck
//! oracle with closed-form answers and the stochastic KdV equation.

mod kdv;
mod model2d;
mod ou;

pub use kdv::{make_kdv, Kdv, KdvConfig};
pub use model2d::{make_model2d, Model2d};
pub use ou::{make_ou, Ou};
