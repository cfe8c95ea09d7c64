pub mod activation;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod resample;
