//! Self-describing checkpoints: model config, domain, every parameter
//! tensor, the training step and the seed.
//!
//! Parameters are stored as f64 payloads regardless of the model dtype
//! (f32 -> f64 -> f32 is exact, so round trips are bit-identical); the
//! original dtype is recorded and enforced on load.

use std::path::Path;

use ndarray::ArrayD;

use super::{DeepOnet, DeepOnetConfig, GraphDeepONet, ModelConfig};
use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, SensorSet};
use crate::nn::Scalar;

#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub model: String,
    pub dtype: String,
    pub step: u64,
    pub seed: u64,
}

/// Read just the header of a checkpoint (model kind, dtype, step, seed).
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let c = Container::load(path)?;
    checkpoint_info(&c)
}

fn checkpoint_info(c: &Container) -> Result<CheckpointInfo> {
    if c.kind != "checkpoint" {
        return Err(Error::schema("kind", format!("expected checkpoint, got {}", c.kind)));
    }
    Ok(CheckpointInfo {
        model: c.attr_str("model")?.to_string(),
        dtype: c.attr_str("dtype")?.to_string(),
        step: c.attr_u64("step")?,
        seed: c.attr_u64("seed")?,
    })
}

fn push_params<F: Scalar>(c: &mut Container, params: &[ArrayD<F>]) {
    for (i, p) in params.iter().enumerate() {
        c.push_array(
            format!("param_{i:04}"),
            p.shape().to_vec(),
            ArrayData::F64(p.iter().map(|v| v.as_f64()).collect()),
        );
    }
}

fn read_params<F: Scalar>(c: &Container, count: usize) -> Result<Vec<ArrayD<F>>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("param_{i:04}");
        let (shape, data) = c.array_f64(&name)?;
        let arr = ArrayD::from_shape_vec(
            ndarray::IxDyn(shape),
            data.iter().map(|&v| F::from_f64(v)).collect(),
        )
        .map_err(|e| Error::schema(name, e.to_string()))?;
        out.push(arr);
    }
    Ok(out)
}

fn expect_dtype<F: Scalar>(info: &CheckpointInfo) -> Result<()> {
    if info.dtype != F::DTYPE {
        return Err(Error::schema(
            "dtype",
            format!("checkpoint holds {} parameters, requested {}", info.dtype, F::DTYPE),
        ));
    }
    Ok(())
}

pub fn save_gdon<F: Scalar>(
    model: &GraphDeepONet<F>,
    step: u64,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut c = Container::new("checkpoint");
    c.set_attr("model", serde_json::json!("graphdon"));
    c.set_attr("dtype", serde_json::json!(F::DTYPE));
    c.set_attr("step", serde_json::json!(step));
    c.set_attr("seed", serde_json::json!(seed));
    c.set_attr("config", serde_json::to_value(&model.config)?);
    c.set_attr("domain", serde_json::to_value(model.domain())?);
    push_params(&mut c, &model.params_flat());
    c.save(path)
}

pub fn load_gdon<F: Scalar>(path: impl AsRef<Path>) -> Result<(GraphDeepONet<F>, CheckpointInfo)> {
    let c = Container::load(path)?;
    let info = checkpoint_info(&c)?;
    if info.model != "graphdon" {
        return Err(Error::schema("model", format!("expected graphdon, got {}", info.model)));
    }
    expect_dtype::<F>(&info)?;
    let config: ModelConfig = serde_json::from_value(c.attr("config")?.clone())
        .map_err(|e| Error::schema("config", e.to_string()))?;
    let domain: DomainSpec = serde_json::from_value(c.attr("domain")?.clone())
        .map_err(|e| Error::schema("domain", e.to_string()))?;
    let mut model = GraphDeepONet::<F>::new(config, &domain, 0)?;
    let n = model.params_flat().len();
    model.set_params_flat(&read_params(&c, n)?)?;
    Ok((model, info))
}

pub fn save_deeponet<F: Scalar>(
    model: &DeepOnet<F>,
    step: u64,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut c = Container::new("checkpoint");
    c.set_attr("model", serde_json::json!("deeponet"));
    c.set_attr("dtype", serde_json::json!(F::DTYPE));
    c.set_attr("step", serde_json::json!(step));
    c.set_attr("seed", serde_json::json!(seed));
    c.set_attr("config", serde_json::to_value(&model.config)?);
    c.set_attr("domain", serde_json::to_value(model.domain())?);
    let pos = model.training_sensors();
    c.push_array(
        "sensors",
        vec![pos.nrows(), pos.ncols()],
        ArrayData::F64(pos.iter().copied().collect()),
    );
    push_params(&mut c, &model.params_flat());
    c.save(path)
}

pub fn load_deeponet<F: Scalar>(path: impl AsRef<Path>) -> Result<(DeepOnet<F>, CheckpointInfo)> {
    let c = Container::load(path)?;
    let info = checkpoint_info(&c)?;
    if info.model != "deeponet" {
        return Err(Error::schema("model", format!("expected deeponet, got {}", info.model)));
    }
    expect_dtype::<F>(&info)?;
    let config: DeepOnetConfig = serde_json::from_value(c.attr("config")?.clone())
        .map_err(|e| Error::schema("config", e.to_string()))?;
    let domain: DomainSpec = serde_json::from_value(c.attr("domain")?.clone())
        .map_err(|e| Error::schema("domain", e.to_string()))?;
    let (shape, data) = c.array_f64("sensors")?;
    let pos = ndarray::Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
        .map_err(|e| Error::schema("sensors", e.to_string()))?;
    let sensors = SensorSet::new(pos, domain)?;
    let mut model = DeepOnet::<F>::new(config, &sensors, 0)?;
    let n = model.params_flat().len();
    model.set_params_flat(&read_params(&c, n)?)?;
    Ok((model, info))
}
