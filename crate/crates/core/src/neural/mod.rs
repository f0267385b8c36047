pub mod adam;
pub mod data;
pub mod gradcheck;
pub mod mlp;
pub mod pointreach;
pub mod train;
