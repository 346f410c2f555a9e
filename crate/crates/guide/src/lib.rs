//! The user guide in `book/`, compiled so that its snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/spaces.md")]
pub mod spaces {}

#[doc = include_str!("../../../book/src/upwind.md")]
pub mod upwind {}

#[doc = include_str!("../../../book/src/physics.md")]
pub mod physics {}

#[doc = include_str!("../../../book/src/scheme.md")]
pub mod scheme {}

#[doc = include_str!("../../../book/src/certificates.md")]
pub mod certificates {}

#[doc = include_str!("../../../book/src/convergence.md")]
pub mod convergence {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
