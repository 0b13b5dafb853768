pub mod crop_cmd;
pub mod evaluate;
pub mod extract_contour;
pub mod models;
pub mod oracle_check;
pub mod pipeline;
pub mod restore;
pub mod synth;
pub mod train;
pub mod train_diffusers;
