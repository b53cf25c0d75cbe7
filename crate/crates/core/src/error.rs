use std::path::PathBuf;

use thiserror::Error;

use crate::pipeline::config::Stage;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("record {0} has no identity label")]
    MissingIdentity(String),
    #[error("summary mismatch on `{field}`: got {got}, want {want}")]
    SummaryMismatch {
        field: &'static str,
        got: usize,
        want: usize,
    },
    #[error("bad image shape: {0}")]
    BadShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(String),
    #[error("feature map height {0} is odd and cannot be split")]
    OddHeight(usize),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{channels} channels are not divisible by {divisor}")]
    IndivisibleChannels { channels: usize, divisor: usize },
    #[error("mean of the feature pair has zero norm")]
    ZeroMeanFeature,
    #[error("empty image batch")]
    EmptyBatch,
    #[error("discriminator output {0} is outside (0, 1)")]
    DiscriminatorRange(f64),
    #[error("record {image_id} has camera {camera}, but only {num_cameras} cameras exist")]
    UnknownCamera {
        image_id: String,
        camera: usize,
        num_cameras: usize,
    },
    #[error("checkpoint stage is {got:?}, expected {expected:?}")]
    StageMismatch { expected: Stage, got: Stage },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot form {clusters} clusters from {points} points")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("clustering input contains non-finite values")]
    NonFiniteInput,
    #[error("target training set is empty")]
    EmptyTargetSet,
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("ranking has no relevant item")]
    NoRelevant,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("config write error: {0}")]
    ConfigWrite(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
