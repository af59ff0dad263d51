//! Quine: LLM agents realized as ordinary POSIX processes.
//!
//! The mission arrives in argv, material on stdin, the deliverable leaves on
//! stdout, diagnostics go to stderr and the outcome is the exit status. The
//! agent delegates with `fork`, renews its context with `exec` and finishes
//! with `exit`; everything else goes through `sh`.
//!
//! The crate is organised the same way the runtime is layered:
//!
//! * [`protocol`]: domain types and context assembly.
//! * [`tools`]: the four tools and their fd/env/lifecycle semantics.
//! * [`guest`]: the stateless oracle (HTTP chat provider or scripted mock).
//! * [`host`]: the reactive loop tying the above together.
//! * [`trace`]: per-session line-delimited event logs.
//! * [`harness`]: offline reproductions of delegation, renewal and pipelines.
//! * [`cli`]: argv/environment parsing for the `quine` executable.

pub mod cli;
pub mod error;
pub mod guest;
pub mod harness;
pub mod host;
pub mod protocol;
pub mod tools;
pub mod trace;

pub use error::{Error, Result};

/// Environment variable names shared by every process in a session tree.
pub mod env_vars {
    pub const PROVIDER: &str = "QUINE_PROVIDER";
    pub const API_BASE: &str = "QUINE_API_BASE";
    pub const API_KEY: &str = "QUINE_API_KEY";
    pub const MODEL: &str = "QUINE_MODEL";
    pub const MAX_TURNS: &str = "QUINE_MAX_TURNS";
    pub const TRACE_DIR: &str = "QUINE_TRACE_DIR";
    pub const MOCK_SCRIPT: &str = "QUINE_MOCK_SCRIPT";
    pub const GENERATION: &str = "QUINE_GENERATION";
    pub const WISDOM_PREFIX: &str = "QUINE_WISDOM_";
    pub const CONTEXT_WINDOW: &str = "QUINE_CONTEXT_WINDOW";
    pub const CONTEXT_THRESHOLD: &str = "QUINE_CONTEXT_THRESHOLD";
    /// Session identity carried across exec; stripped for forked children.
    pub const SESSION_ID: &str = "QUINE_SESSION_ID";
    /// Session id of the forking parent, set only in children.
    pub const PARENT_SESSION: &str = "QUINE_PARENT_SESSION";
}
