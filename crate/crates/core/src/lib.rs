pub mod dogleg;
pub mod driver;
pub mod envs;
pub mod linalg;
pub mod oracle;
pub mod policy;
pub mod quadmodel;
pub mod testfns;
pub mod trustregion;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/dogleg.md")]
    struct Dogleg;
    #[doc = include_str!("../../../book/src/bfgs.md")]
    struct Bfgs;
    #[doc = include_str!("../../../book/src/qntrm.md")]
    struct Qntrm;
    #[doc = include_str!("../../../book/src/policies.md")]
    struct Policies;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
