//! Synthetic clip generation, the on-disk clip format, and the data
//! filtering workflow.

mod clip;
mod cuts;
mod filter;
mod pfm;
mod render;
pub mod resize;

pub use clip::{
    clip_dir_name, clip_dirs, load_clip, load_dataset, load_frames, read_json, read_rgb_png, save_clip, write_depth_png16,
    write_json, write_rgb_png, Clip, ClipMeta,
};
pub use cuts::{detect_scene_cuts, frame_differences, rgb_to_hsv, segments, DEFAULT_CUT_THRESHOLD};
pub use filter::{
    filter_clips, linspace_indices, similarity_score, DepthModel, FilterOutcome, FilterThresholds, SegmentReport,
    FRAMES_PER_SEGMENT, SIMILARITY_SIZE,
};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use render::{generate_clip, CameraMotion, SceneConfig};
