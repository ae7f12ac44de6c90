//! Echo-path synthesis and SER/SNR mixing.
//!
//! Waveforms are `f64` at ±1.0 full scale. Everything is a pure function of
//! its inputs and seeds, so a manifest reproduces its dataset exactly.

mod dataset;
mod protocol;
mod signal;
mod source;
mod wav;

pub use dataset::{
    build_mixture, generate_dataset, read_manifest, regenerate, write_manifest, ItemPaths,
    ManifestRecord, MixtureItem, MixtureSpec, MANIFEST_FILE,
};
pub use protocol::{DataConfig, Split, T60_SET, TEST_SER_DB, TRAIN_SER_DB};
pub use signal::{
    add_noise_at_snr, apply_nonlinearity, double_talk_regions, hard_clip, make_echo, mix_at_ser,
    power, region_power, sigmoid_distort, single_talk_regions, synth_rir, to_db, NonlinearMode,
    NonlinearitySpec, RirSource, RirSpec, SigmoidShape, LABEL_WINDOW, SILENCE_DBFS,
};
pub use source::{synth_speech, SourceSpec};
pub use wav::{read_wav, write_wav};
