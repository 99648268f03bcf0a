pub mod backend;
pub mod binio;
pub mod coco;
pub mod imageio;
pub mod loss;
pub mod mask;
pub mod net;
pub mod quant;
pub mod roi;
pub mod synth;
pub mod tensor;
