//! Modality encoders: a small CNN for images and fully connected blocks over
//! one-hot encoded metadata.

mod image;
mod metadata;
pub mod schema;

pub use image::{ImageEncoder, ImageEncoderConfig};
pub use metadata::{MetadataEncoder, MetadataEncoderConfig};
pub use schema::{one_hot_encode, Column, ColumnKind, MetaRecord, MetaValue, MetadataSchema, MissingPolicy};
