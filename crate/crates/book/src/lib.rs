//! The guide in `book/` cannot run its listings against this workspace by
//! itself, so each chapter is included here as a module and its code blocks
//! run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/density.md")]
pub mod density {}
#[doc = include_str!("../../../book/src/quantizers.md")]
pub mod quantizers {}
#[doc = include_str!("../../../book/src/coding.md")]
pub mod coding {}
#[doc = include_str!("../../../book/src/adaptation.md")]
pub mod adaptation {}
#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
