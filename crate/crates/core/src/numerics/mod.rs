//! Deterministic numerical kernels shared by every other module.

mod fourier;
mod image;
mod noise;
mod radon;

pub use fourier::{dft2, idft2, InverseDft};
pub use image::{Image, KSpace};
pub use noise::{apply_noise, std_dev, NoiseKind, NoiseSpec};
pub use radon::{detector_count, iradon_fbp, radon, Sinogram};
