pub mod dif;
pub mod eval;
pub mod features;
pub mod iforest;
pub mod ingest;
pub mod pipeline;
pub mod proxy;
pub mod seed;
pub mod synth;
pub mod tsne;
