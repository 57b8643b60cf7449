//! Image datasets, attention recording and the attention-judgement data
//! pipeline (record, scramble half, crop, split).

mod judgement;
mod store;
mod synthetic;

pub use judgement::{
    build_judgement_dataset, crop_to_image_dims, record_attention, scramble, AttentionRecord,
    Judgement, JudgementDataset, RecordSource, ScrambleStrategy, RECORDED_HEADS, TEST_FRACTION,
};
pub use store::{
    decode_ppm, encode_ppm, load_judgement_dataset, load_ppm_dataset, save_judgement_dataset,
    save_ppm_dataset, AttentionManifest, RecordEntry, ATTENTION_FORMAT,
};
pub use synthetic::{
    make_synthetic_dataset, make_synthetic_images, ImageDataset, Split, TaskId, SYNTHETIC_SIZE,
};
