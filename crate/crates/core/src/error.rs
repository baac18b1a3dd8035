use std::fmt;

/// Which half of a frame pair a codec error belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecStage {
    EncodeColor,
    EncodeDepth,
    DecodeColor,
    DecodeDepth,
    Mask,
}

impl fmt::Display for CodecStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CodecStage::EncodeColor => "encode color",
            CodecStage::EncodeDepth => "encode depth",
            CodecStage::DecodeColor => "decode color",
            CodecStage::DecodeDepth => "decode depth",
            CodecStage::Mask => "mask",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("codec error ({stage}): {message}")]
    Codec { stage: CodecStage, message: String },

    #[error("object not visible: no valid points after masking and depth clipping")]
    ObjectNotVisible,

    #[error("no valid grasp: cutting slab contains no points")]
    NoValidGrasp,

    #[error("object exceeds gripper aperture: extent {extent:.4} m > aperture {aperture:.4} m")]
    ExceedsAperture { extent: f64, aperture: f64 },

    #[error("target not found: no detection of classes {0:?}")]
    TargetNotFound(Vec<String>),

    #[error("timed out after {0:?} waiting for reply")]
    Timeout(std::time::Duration),

    #[error("stale frame: sequence {got} not newer than {last}")]
    Stale { got: u64, last: u64 },

    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error reply: {0}")]
    Remote(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn codec(stage: CodecStage, msg: impl fmt::Display) -> Self {
        Error::Codec {
            stage,
            message: msg.to_string(),
        }
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// True for failures that only affect the current frame; the live loop
    /// skips the frame and keeps going.
    pub fn is_frame_local(&self) -> bool {
        matches!(
            self,
            Error::ObjectNotVisible
                | Error::NoValidGrasp
                | Error::ExceedsAperture { .. }
                | Error::TargetNotFound(_)
                | Error::Codec { .. }
        )
    }
}
