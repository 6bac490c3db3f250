pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub mod norm;
pub(crate) mod reduce;
pub mod sample;
pub(crate) mod shape;
