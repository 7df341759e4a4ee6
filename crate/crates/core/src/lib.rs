pub mod blowup;
pub mod driver;
pub mod error;
pub mod feedback;
pub mod grid;
pub mod kernels;
pub mod measure;
pub mod mv;
pub mod particle;
pub mod pde;
pub mod pjc;
pub mod special;

pub use driver::{DriverEnsemble, DriverKind, DriverSpec, RngPolicy};
pub use error::{Error, Result};
pub use feedback::FeedbackFn;
pub use grid::{LossPath, TimeGrid};
pub use measure::Measure1D;

// The guide's snippets run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/measures.md")]
    mod measures {}
    #[doc = include_str!("../../../book/src/jumps.md")]
    mod jumps {}
    #[doc = include_str!("../../../book/src/particles.md")]
    mod particles {}
    #[doc = include_str!("../../../book/src/fixed_point.md")]
    mod fixed_point {}
    #[doc = include_str!("../../../book/src/pde.md")]
    mod pde {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/blowup.md")]
    mod blowup {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
