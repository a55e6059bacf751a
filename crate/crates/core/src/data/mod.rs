//! Dataset construction: low-coherence dictionaries, the synthetic grouped
//! classification task, certified fixtures for the stability checks, and
//! MNIST ingestion.

mod certified;
mod mnist;
mod packing;
mod synthetic;

pub use certified::{
    banded_dictionary, certified_instance_on, generate_certified_instance, generate_layered_certified_instance,
    CertifiedInstance, CertifiedRequest, LayeredInstance, LayeredRequest,
};
pub use mnist::{
    load_image_set, load_mnist_idx, read_idx_images, read_idx_labels, save_image_set, write_idx_images,
    write_idx_labels, ImageSet, MnistFiles, Standardizer, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, STANDARDIZE_EPS,
};
pub use packing::{build_low_coherence_dictionary, welch_bound, Packing};
pub use synthetic::{
    draw_group_code, generate_labeled_set, generate_synthetic_dataset, load_labeled_set, random_unit_classifier,
    save_labeled_set, LabeledSet, SyntheticDatasets, SyntheticSpec, MANIFEST_HEADER,
};
