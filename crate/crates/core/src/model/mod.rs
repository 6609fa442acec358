//! The encoder/decoder/classifier network, its optimizer and checkpoints.

mod layers;
mod net;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{softmax_rows, ParamVisitor, Scalar};
pub use net::{reconstruction_loss, EncoderConfig, EncoderVariant, Forward, LocalGlobalNet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, net: &mut LocalGlobalNet<S>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = S::of(self.learning_rate * c2.sqrt() / c1);
        let eps = S::of(self.eps * c2.sqrt());
        let (b1s, b2s) = (S::of(b1), S::of(b2));
        let (one_b1, one_b2) = (S::of(1.0 - b1), S::of(1.0 - b2));
        let mut idx = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        net.visit_params(&mut |_, values, grads| {
            if first.len() <= idx {
                first.push(vec![S::zero(); values.len()]);
                second.push(vec![S::zero(); values.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1s * m[i] + one_b1 * g;
                v[i] = b2s * v[i] + one_b2 * g * g;
                values[i] -= lr * m[i] / (v[i].sqrt() + eps);
                grads[i] = S::zero();
            }
            idx += 1;
        });
    }
}

const CHECKPOINT_MAGIC: &str = "TSNL-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: EncoderConfig,
    n_features: usize,
    n_classes: usize,
    tensors: Vec<(String, usize)>,
}

/// Writes a checkpoint: a magic line, a JSON header line describing the
/// architecture and tensor table, then every parameter as little-endian f64.
pub fn save_checkpoint<S: Scalar>(
    net: &mut LocalGlobalNet<S>,
    path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    net.visit_params(&mut |name, values, _| {
        tensors.push((name.to_string(), values.len()));
        for v in values.iter() {
            payload.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: net.config.clone(),
        n_features: net.n_features,
        n_classes: net.n_classes,
        tensors,
    };
    let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    let mut file = fs::File::create(path.as_ref()).map_err(io)?;
    writeln!(file, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}").map_err(io)?;
    writeln!(file, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
    file.write_all(&payload).map_err(io)
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<LocalGlobalNet<S>, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let file = fs::File::open(path.as_ref()).map_err(|e| bad(e.to_string()))?;
    let mut reader = BufReader::new(file);
    let mut magic = String::new();
    reader.read_line(&mut magic).map_err(|e| bad(e.to_string()))?;
    if magic.trim_end() != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(bad(format!("unrecognized header `{}`", magic.trim_end())));
    }
    let mut header_line = String::new();
    reader
        .read_line(&mut header_line)
        .map_err(|e| bad(e.to_string()))?;
    let header: CheckpointHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(e.to_string()))?;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| bad(e.to_string()))?;

    let mut rng = crate::rng::rng_from(0, &[]);
    let mut net = LocalGlobalNet::new(header.config, header.n_features, header.n_classes, &mut rng)?;
    let mut expected = Vec::new();
    net.visit_params(&mut |name, values, _| expected.push((name.to_string(), values.len())));
    if expected != header.tensors {
        return Err(bad("tensor table does not match the architecture".into()));
    }
    let total: usize = expected.iter().map(|(_, n)| n).sum();
    if payload.len() != total * 8 {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut chunks = payload.chunks_exact(8);
    net.visit_params(&mut |_, values, _| {
        for v in values.iter_mut() {
            let bytes: [u8; 8] = chunks.next().unwrap().try_into().unwrap();
            *v = S::of(f64::from_le_bytes(bytes));
        }
    });
    Ok(net)
}
