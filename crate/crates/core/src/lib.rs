pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hdpl;
pub mod params;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/hdpl-layer.md")]
    mod hdpl_layer {}
    #[doc = include_str!("../../../book/src/transformer.md")]
    mod transformer {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
