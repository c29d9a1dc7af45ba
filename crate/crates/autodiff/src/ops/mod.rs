pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod loss;
pub mod norm;
