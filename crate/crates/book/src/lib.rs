//! Compiles and runs the guide's code listings as doc-tests.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/episodes.md")]
pub mod episodes {}

#[doc = include_str!("../../../book/src/storage.md")]
pub mod storage {}

#[doc = include_str!("../../../book/src/query.md")]
pub mod query {}

#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}

#[doc = include_str!("../../../book/src/capability.md")]
pub mod capability {}

#[doc = include_str!("../../../book/src/stress.md")]
pub mod stress {}

#[doc = include_str!("../../../book/src/reports.md")]
pub mod reports {}

#[doc = include_str!("../../../book/src/bridge.md")]
pub mod bridge {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
