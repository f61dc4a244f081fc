//! Volume ingestion, lesion patch extraction, augmentation and splitting.

mod archive;
mod augment;
mod lesion;
mod loader;
mod manifest;
mod patch;
mod split;
mod volume;

pub use archive::{LesionMeta, PatchArchive, ARCHIVE_MAGIC};
pub use augment::{augment_patch, augment_triplet, AugmentConfig, AugmentParams};
pub use lesion::{centroid, extract_lesions, mask_crop, select_principal_plane, slice_counts, BBox, Label, LesionExtent};
pub use loader::{
    batch_indices, epoch_order, make_batch, mix_seed, stream_batches, triplet_input, Batch, LoaderConfig,
};
pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use patch::{
    crop_pad, extract_patch_triplet, normalize, plane_axes, plane_crop, raw_triplet, raw_triplet_with, resize_bilinear, TripletPlanes, Patch,
    PatchTriplet, DEFAULT_TARGET, STD_GUARD,
};
pub use split::{make_split, split_sizes, SplitItem, SplitManifest, SplitStrategy, MIN_RECORDS};
pub use volume::{load_volume, save_volume, Dtype, Grid, VolumeHeader, VolumeWithMask};
