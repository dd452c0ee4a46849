pub mod ads;
pub mod generate;
pub mod heatmap;
pub mod report;
pub mod train;
