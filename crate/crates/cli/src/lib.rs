//! File-level driver for the focus-tunnel pipeline: pose JSON and PNG frame
//! sequences in; tunnel JSONL, zoomed and blended frames, and a metrics
//! report out.

pub mod config;
pub mod io;
pub mod pipeline;

use std::fmt;

pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, PipelineInputs, PipelineSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Input,
    Extract,
    Smooth,
    Zoom,
    Denoise,
    Blend,
    Metrics,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Extract => "extract",
            Stage::Smooth => "smooth",
            Stage::Zoom => "zoom",
            Stage::Denoise => "denoise",
            Stage::Blend => "blend",
            Stage::Metrics => "metrics",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad or missing input data or configuration.
    Input,
    /// A numeric stage failed on otherwise valid input.
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub frame: Option<usize>,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            frame: None,
            message: message.into(),
        }
    }

    pub fn at_frame(mut self, frame: usize) -> Self {
        self.frame = Some(frame);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame {
            Some(i) => write!(f, "{} (frame {i}): {}", self.stage, self.message),
            None => write!(f, "{}: {}", self.stage, self.message),
        }
    }
}
