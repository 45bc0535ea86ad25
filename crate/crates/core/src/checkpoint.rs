//! Model checkpoint file.
//!
//! ```text
//! offset  size  content
//! 0       5     b"DINO1"
//! 5       4     header length L, u32 little-endian
//! 9       L     UTF-8 key=value text: ViT config, DINO config, step
//! 9+L     ...   student tensors, then teacher tensors, f32 little-endian, in
//!               `ViTConfig::tensor_layout` order, each row-major
//! ...     4·K   center vector, f32 little-endian
//! ```

use std::path::Path;

use crate::autodiff::Matrix;
use crate::dino::{DinoConfig, DinoState, FeatureSource};
use crate::error::{Error, Result};
use crate::kv::{self, Record};
use crate::vit::{ViTConfig, ViTParams};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DINO1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub vit: ViTConfig,
    pub dino: DinoConfig,
    pub state: DinoState<f32>,
}

fn header(vit: &ViTConfig, dino: &DinoConfig, step: usize) -> Record {
    Record::new()
        .with("vit.input_size", vit.input_size)
        .with("vit.token_patch", vit.token_patch)
        .with("vit.embed_dim", vit.embed_dim)
        .with("vit.depth", vit.depth)
        .with("vit.heads", vit.heads)
        .with("vit.mlp_ratio", vit.mlp_ratio)
        .with("vit.proto_dim", vit.proto_dim)
        .with("dino.student_temp", dino.student_temp)
        .with("dino.teacher_temp", dino.teacher_temp)
        .with("dino.ema_momentum", dino.ema_momentum)
        .with("dino.ema_schedule", dino.ema_schedule)
        .with("dino.center_momentum", dino.center_momentum)
        .with("dino.centering", dino.centering)
        .with("dino.global_crops", dino.global_crops)
        .with("dino.local_crops", dino.local_crops)
        .with("dino.global_scale_min", dino.global_scale.0)
        .with("dino.global_scale_max", dino.global_scale.1)
        .with("dino.local_scale_min", dino.local_scale.0)
        .with("dino.local_scale_max", dino.local_scale.1)
        .with("dino.flips", dino.flips)
        .with("dino.learning_rate", dino.learning_rate)
        .with("dino.sgd_momentum", dino.sgd_momentum)
        .with("dino.weight_decay", dino.weight_decay)
        .with("dino.grad_clip", dino.grad_clip)
        .with("dino.epochs", dino.epochs)
        .with("dino.batch_size", dino.batch_size)
        .with("dino.seed", dino.seed)
        .with(
            "dino.feature_source",
            match dino.feature_source {
                FeatureSource::Teacher => "teacher",
                FeatureSource::Student => "student",
            },
        )
        .with("step", step)
}

fn parse_header(r: &Record) -> Result<(ViTConfig, DinoConfig, usize)> {
    let vit = ViTConfig {
        input_size: r.parse_field("vit.input_size")?,
        token_patch: r.parse_field("vit.token_patch")?,
        embed_dim: r.parse_field("vit.embed_dim")?,
        depth: r.parse_field("vit.depth")?,
        heads: r.parse_field("vit.heads")?,
        mlp_ratio: r.parse_field("vit.mlp_ratio")?,
        proto_dim: r.parse_field("vit.proto_dim")?,
    };
    let dino = DinoConfig {
        student_temp: r.parse_field("dino.student_temp")?,
        teacher_temp: r.parse_field("dino.teacher_temp")?,
        ema_momentum: r.parse_field("dino.ema_momentum")?,
        ema_schedule: r.parse_field("dino.ema_schedule")?,
        center_momentum: r.parse_field("dino.center_momentum")?,
        centering: r.parse_field("dino.centering")?,
        global_crops: r.parse_field("dino.global_crops")?,
        local_crops: r.parse_field("dino.local_crops")?,
        global_scale: (r.parse_field("dino.global_scale_min")?, r.parse_field("dino.global_scale_max")?),
        local_scale: (r.parse_field("dino.local_scale_min")?, r.parse_field("dino.local_scale_max")?),
        flips: r.parse_field("dino.flips")?,
        learning_rate: r.parse_field("dino.learning_rate")?,
        sgd_momentum: r.parse_field("dino.sgd_momentum")?,
        weight_decay: r.parse_field("dino.weight_decay")?,
        grad_clip: r.parse_field("dino.grad_clip")?,
        epochs: r.parse_field("dino.epochs")?,
        batch_size: r.parse_field("dino.batch_size")?,
        seed: r.parse_field("dino.seed")?,
        feature_source: match r.require("dino.feature_source")? {
            "teacher" => FeatureSource::Teacher,
            "student" => FeatureSource::Student,
            other => return Err(Error::Parse(format!("feature source {other:?}"))),
        },
    };
    Ok((vit, dino, r.parse_field("step")?))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let text = kv::encode_one(&header(&self.vit, &self.dino, self.state.step));
        let floats = 2 * self.vit.param_count() + self.vit.proto_dim;
        let mut out = Vec::with_capacity(9 + text.len() + 4 * floats);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for params in [&self.state.student, &self.state.teacher] {
            for t in params.tensors() {
                t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        self.state.center.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..5] != CHECKPOINT_MAGIC {
            let offset = bytes
                .iter()
                .zip(CHECKPOINT_MAGIC)
                .position(|(a, b)| a != b)
                .unwrap_or(bytes.len().min(5));
            return Err(Error::format(offset as u64, "bad checkpoint magic"));
        }
        if bytes.len() < 9 {
            return Err(Error::format(bytes.len() as u64, "truncated header length"));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let text_end = 9 + len;
        if bytes.len() < text_end {
            return Err(Error::format(bytes.len() as u64, "truncated header text"));
        }
        let text = std::str::from_utf8(&bytes[9..text_end]).map_err(|e| Error::format(9 + e.valid_up_to() as u64, "header is not UTF-8"))?;
        let (vit, dino, step) = parse_header(&kv::decode_one(text)?).map_err(|e| Error::format(9, e.to_string()))?;
        vit.validate().map_err(|e| Error::format(9, e.to_string()))?;

        let mut pos = text_end;
        let mut take = |count: usize| -> Result<Vec<f32>> {
            let end = pos + 4 * count;
            if bytes.len() < end {
                return Err(Error::format(bytes.len() as u64, format!("truncated payload, expected {count} floats at offset {pos}")));
            }
            let v = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            Ok(v)
        };
        let read_params = |take: &mut dyn FnMut(usize) -> Result<Vec<f32>>| -> Result<ViTParams<f32>> {
            let tensors = vit
                .tensor_layout()
                .into_iter()
                .map(|(_, (r, c))| Ok(Matrix::from_vec(r, c, take(r * c)?)))
                .collect::<Result<Vec<_>>>()?;
            ViTParams::from_tensors(&vit, tensors)
        };
        let student = read_params(&mut take)?;
        let teacher = read_params(&mut take)?;
        let center = take(vit.proto_dim)?;
        if pos != bytes.len() {
            return Err(Error::format(pos as u64, "trailing bytes after center"));
        }
        Ok(Self {
            vit,
            dino,
            state: DinoState {
                student,
                teacher,
                center,
                step,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::fsutil::write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
