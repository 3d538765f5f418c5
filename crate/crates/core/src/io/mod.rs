//! File formats: binary netpbm images, CSV spectrograms and JSON model files.

pub mod model_file;
pub mod netpbm;
pub mod spectrogram;

pub use model_file::{
    load_model, save_model, ModelFile, ModelMetadata, ModelPayload, SCHEMA_VERSION,
};
pub use netpbm::{encode_image, load_image, parse_image, save_image, save_mask};
pub use spectrogram::{
    load_spectrogram_csv, read_spectrogram, save_spectrogram_csv, write_spectrogram,
};
