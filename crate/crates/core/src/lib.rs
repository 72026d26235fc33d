pub mod data;
pub mod editing;
pub mod grad;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;
