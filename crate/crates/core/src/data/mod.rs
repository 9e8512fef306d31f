//! Dataset files: reports, ROI sets (JSONL or binary bundle), ground-truth
//! annotations and detections; plus the synthetic planted-ROI generator.

mod io;
pub mod synth;

pub(crate) use io::ByteReader;
pub use io::{
    load_dataset, read_annotations, read_detections, read_reports, read_roi_bundle, read_roi_sets,
    roi_bundle_bytes, write_annotations, write_atomic, write_detections, write_jsonl,
    write_reports, write_roi_bundle, write_roi_sets_jsonl, Annotation, Dataset, ROI_MAGIC,
    ROI_VERSION,
};
pub use synth::{
    report_text, synth_generate, synth_table, PlantedRoi, SynthConfig, SynthData, FILLER_WORDS,
};
