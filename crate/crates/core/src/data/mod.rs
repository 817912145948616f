//! Image I/O, procedural toy corpus, manifests and splits.

mod image;
mod manifest;
mod toy;

pub use self::image::{
    load_image, save_image, stack_images, tile_grid, unstack_images, ImageTensor,
};
pub use manifest::{
    build_manifest, entry_seed, list_images, split_manifest, DatasetManifest, ManifestEntry,
};
pub use toy::{generate_toy_faces, toy_face};
