pub mod annotate;
pub mod curate;
pub mod distill;
pub mod embed;
pub mod frames;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod review;
pub mod storyboard;
pub mod synth;
pub mod video;
