pub mod clustering;
pub mod contrast;
pub mod dataset_io;
pub mod encoder;
pub mod evaluation;
pub mod memory;
pub mod numerics;
pub mod pipeline;
pub mod world;
