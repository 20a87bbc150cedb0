//! Library surface of the command-line front end; the binary in `main.rs`
//! parses arguments and forwards to [`commands`].

pub mod commands;
pub mod run_config;

pub use commands::{
    cmd_cam, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, gradcheck_report, CamMode, CamOutputs,
    GenSummary, TrainSummary,
};
pub use run_config::RunConfig;
