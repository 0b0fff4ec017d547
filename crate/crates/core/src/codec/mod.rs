//! Lossless coding: the range coder, the generic byte compressor used by the
//! baselines, and the archive container.

mod archive;
mod baseline;
mod range;

pub use archive::{model_id, Archive, Mode, ModeHeader, TableSource, UqeStorage, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use baseline::{AdaptiveOrder0, ByteCompressor};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};
