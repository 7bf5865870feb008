//! Learnable parameter slots, the Adam optimizer, and checkpoint I/O.

use crate::error::{DreamError, Result};
use crate::tensor::Tensor2D;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One named learnable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
    pub adam_m: Tensor2D,
    pub adam_v: Tensor2D,
    pub trainable: bool,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, value: Tensor2D, trainable: bool) -> Self {
        let (r, c) = (value.rows, value.cols);
        ParamSlot {
            name: name.into(),
            value,
            grad: Tensor2D::zeros(r, c),
            adam_m: Tensor2D::zeros(r, c),
            adam_v: Tensor2D::zeros(r, c),
            trainable,
        }
    }
}

/// All parameters of a model plus the optimizer step counter.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub slots: Vec<ParamSlot>,
    pub step: u64,
}

impl ParamSet {
    pub fn add(&mut self, slot: ParamSlot) -> usize {
        self.slots.push(slot);
        self.slots.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamSlot> {
        self.slots.iter_mut().find(|s| s.name == name)
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    /// Snapshot of values only, for best-checkpoint tracking.
    pub fn values_snapshot(&self) -> Vec<Tensor2D> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Tensor2D]) {
        assert_eq!(snapshot.len(), self.slots.len());
        for (s, v) in self.slots.iter_mut().zip(snapshot) {
            s.value = v.clone();
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step over all trainable slots. Moments update in
/// place, gradients are zeroed afterwards, and the step counter advances.
/// A non-finite gradient aborts before touching any value.
pub fn adam_step(params: &mut ParamSet, cfg: &AdamConfig) -> Result<()> {
    for s in &params.slots {
        if !s.trainable {
            continue;
        }
        if let Some(idx) = s.grad.first_non_finite() {
            return Err(DreamError::NonFiniteGrad {
                param: s.name.clone(),
                index: idx,
            });
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let b1 = cfg.beta1 as f64;
    let b2 = cfg.beta2 as f64;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for s in &mut params.slots {
        if !s.trainable {
            s.grad.fill(0.0);
            continue;
        }
        for i in 0..s.value.data.len() {
            let g = s.grad.data[i] as f64;
            let m = b1 * s.adam_m.data[i] as f64 + (1.0 - b1) * g;
            let v = b2 * s.adam_v.data[i] as f64 + (1.0 - b2) * g * g;
            s.adam_m.data[i] = m as f32;
            s.adam_v.data[i] = v as f32;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            let update = cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.epsilon as f64);
            s.value.data[i] = (s.value.data[i] as f64 - update) as f32;
        }
        s.grad.fill(0.0);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    step: u64,
    slots: Vec<SlotManifest>,
}

#[derive(Serialize, Deserialize)]
struct SlotManifest {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

/// Write all slots (values + Adam moments + step counter) as `<stem>.bin`
/// with a `<stem>.json` manifest. Round-trips bit-exactly.
pub fn save_checkpoint(params: &ParamSet, stem: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        step: params.step,
        slots: params
            .slots
            .iter()
            .map(|s| SlotManifest {
                name: s.name.clone(),
                rows: s.value.rows,
                cols: s.value.cols,
                trainable: s.trainable,
            })
            .collect(),
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
    for s in &params.slots {
        for t in [&s.value, &s.adam_m, &s.adam_v] {
            for v in &t.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<ParamSet> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
    let expected: usize = manifest.slots.iter().map(|s| s.rows * s.cols * 12).sum();
    if bytes.len() != expected {
        return Err(DreamError::Dimension {
            context: format!("checkpoint {}", stem.display()),
            expected,
            found: bytes.len(),
        });
    }
    let mut offset = 0usize;
    let mut read_tensor = |rows: usize, cols: usize| -> Tensor2D {
        let n = rows * cols;
        let data: Vec<f32> = bytes[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += n * 4;
        Tensor2D { rows, cols, data }
    };
    let mut set = ParamSet {
        slots: Vec::new(),
        step: manifest.step,
    };
    for sm in &manifest.slots {
        let value = read_tensor(sm.rows, sm.cols);
        let adam_m = read_tensor(sm.rows, sm.cols);
        let adam_v = read_tensor(sm.rows, sm.cols);
        set.slots.push(ParamSlot {
            name: sm.name.clone(),
            grad: Tensor2D::zeros(sm.rows, sm.cols),
            value,
            adam_m,
            adam_v,
            trainable: sm.trainable,
        });
    }
    Ok(set)
}
