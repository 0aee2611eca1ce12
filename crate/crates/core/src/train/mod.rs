//! Desk-scale supervised training: data, augmentation, loss, optimizer,
//! checkpoints and the epoch loop.

mod augment;
mod checkpoint;
mod config;
mod data;
mod loss;
mod optim;
mod trainer;

pub use augment::{augment, crop_flip, AugmentConfig};
pub use checkpoint::{
    checkpoint_from_records, checkpoint_records, decode_tensors, encode_tensors, load_checkpoint,
    read_tensors, save_checkpoint, write_tensors, Checkpoint, MAGIC, VERSION,
};
pub use config::{DataSource, MaskSchedule, TrainConfig, CONFIG_KEYS};
pub use data::{
    load_cifar_batches, parse_cifar_bytes, synthetic, to_cifar_bytes, write_cifar_file, Dataset,
    Split, CIFAR_CLASSES, IMAGE_BYTES, IMAGE_SIDE, RECORD_BYTES,
};
pub use loss::cross_entropy_label_smoothing;
pub use optim::{adamw_step, cosine_lr, AdamW, OptState};
pub use trainer::{
    batch_tensor, evaluate, load_data, normalize_pixel, predictions, read_metrics, train,
    EpochMetrics, History, CHECKPOINT_FILE, METRICS_FILE, METRICS_HEADER,
};
