//! Analysis instruments: feature variance statistics, gain tables, sphere
//! projections and attention response maps.

mod attention;
mod gain;
mod sphere;
mod variance;

pub use attention::{attention_response_map, save_attention_map, AttentionMap};
pub use gain::{gain_vs_variance_table, write_gain_csv, GainRow};
pub use sphere::{project_to_sphere, SphereProjection, PROJECTION_METHOD};
pub use variance::{
    inter_class_text_variance, inter_class_text_variance_rows, intra_class_visual_variance, VarianceReport,
    FEATURE_SPACE, SCALARIZATION,
};
