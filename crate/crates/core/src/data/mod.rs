//! Datasets: a synthetic oriented-texture task, the CIFAR-10 binary format,
//! and flip/crop augmentation.

mod augment;
mod cifar;
mod synth;

pub use augment::{augment, crop_flip, CROP_PADDING};
pub use cifar::{load_cifar10, load_cifar10_file, parse_cifar10, Split, CIFAR_RECORD_BYTES};
pub use synth::{
    read_synth_dataset, synth_generate, synth_generate_stream, write_synth_dataset, SynthSpec,
};

/// One image, channel-planar (`[c][row][col]`), pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub label: usize,
    pub channels: usize,
    pub side: usize,
}

impl Sample {
    #[inline]
    pub fn pixel(&self, c: usize, row: usize, col: usize) -> f64 {
        self.image[(c * self.side + row) * self.side + col]
    }
}
