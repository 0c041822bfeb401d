//! The guide's chapters as doc modules, so `cargo test` runs every snippet.
//! mdbook cannot resolve workspace dependencies when testing, so the book is
//! tested from here instead.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/plant.md")]
pub mod plant {}
#[doc = include_str!("../../../book/src/identification.md")]
pub mod identification {}
#[doc = include_str!("../../../book/src/certification.md")]
pub mod certification {}
#[doc = include_str!("../../../book/src/observer.md")]
pub mod observer {}
#[doc = include_str!("../../../book/src/reference.md")]
pub mod reference {}
#[doc = include_str!("../../../book/src/control.md")]
pub mod control {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
