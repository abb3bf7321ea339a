//! Compiles the code listings of the guide in `book/` as doc-tests.
//!
//! mdbook cannot test listings that depend on workspace crates, so every
//! chapter is included here as the documentation of an empty module and
//! `cargo test --doc` runs its code blocks. One module per chapter keeps
//! failures traceable to their chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/steady_state.md")]
pub mod steady_state {}

#[doc = include_str!("../../../book/src/nmpc.md")]
pub mod nmpc {}

#[doc = include_str!("../../../book/src/pid.md")]
pub mod pid {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}

#[doc = include_str!("../../../book/src/results.md")]
pub mod results {}
