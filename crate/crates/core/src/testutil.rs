pub use crate::checks::fixtures::*;
