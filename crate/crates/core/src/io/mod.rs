//! Fixtures and serialization: datasets, the reference trainer, the
//! post-training quantizer and the model container.

mod dataset;
mod float_model;
mod model_file;
mod quantize;
mod trainer;

pub use dataset::{gaussian_blobs, load_dataset, load_digits_csv, save_dataset, BlobSpec, Dataset, Sample, Split};
pub use float_model::{FloatLayer, FloatModel};
pub use model_file::{load_model, save_model, ModelFile, FORMAT, FORMAT_VERSION};
pub use quantize::{encode_inputs, quantize, quantized_accuracy, symmetric_scale};
pub use trainer::{train_reference_mlp, BATCH_SIZE, LEARNING_RATE};
