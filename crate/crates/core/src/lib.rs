pub mod data;
pub mod dsp;
pub mod experiment;
pub mod lrp;
pub mod models;
pub mod nn;
pub mod room;
pub mod seed;
