//! Conditional flow-matching video denoiser with LoRA adaptation.

mod flow;
pub mod layers;
mod lora;
mod net;
mod params;
mod train;

pub use flow::{
    flow_matching_loss, flow_matching_loss_with, flow_path, frame_seed, guided_velocity, heun_integrate, sample,
    sample_per_frame, sample_signal, standard_normal, target_velocity, Adapted, FlowDraw, SampleConfig, TrainingPair,
    VelocityModel,
};
pub use lora::LoraAdapters;
pub use net::{from_signal, reorder_signal, to_signal, Conditioning, Denoiser, DenoiserConfig, INPUT_CHANNELS, MLP_RATIO, VELOCITY_FLOOR};
pub use params::{grad_norm, round_f32, ParamStore, Rmsprop, Tensor};
pub use train::{pretrain_base, steps_for_epochs, train_lora, validation_loss, LossRecord, TrainConfig};
