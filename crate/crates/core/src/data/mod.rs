//! Volume container format, dataset manifests, preprocessing and the
//! synthetic phantom generator.

mod manifest;
mod mvol;
mod phantom;
mod record;
mod volume;

pub use manifest::{Dataset, DatasetManifest, ManifestEntry};
pub use mvol::{decode_mvol, encode_mvol, header_len, read_mvol, write_mvol};
pub use phantom::{synthesize_dataset, synthesize_records, PhantomSpec, ABNORMALITY_NAMES, OCTANT_NAMES};
pub use record::{NormalClassPolicy, Split, VolumeRecord};
pub use volume::{normalize_volume, pad_to_multiple, resize_volume, Volume};
