pub mod cordic;
pub mod fxp;
pub mod rpe;
pub mod analysis;
pub mod sycore;
pub mod netrun;
