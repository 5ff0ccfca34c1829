//! Named parameter maps, the unit of weight transfer and checkpointing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

use super::arch::EncoderVariant;

/// Ordered map from canonical parameter name to array.
pub type Params<T> = BTreeMap<String, Tensor<T>>;

/// Name suffixes that mark non-trainable batch-norm buffers.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

pub fn is_trainable(name: &str) -> bool {
    !is_buffer(name)
}

/// Provenance tags attached to a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub variant: EncoderVariant,
    pub input_channels: usize,
    /// Stage widths of the TINY encoder, empty for RESNET50.
    #[serde(default)]
    pub stage_widths: Vec<usize>,
    pub stage: String,
    pub epoch: u32,
    pub seed: u64,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub params: Params<f32>,
    pub meta: WeightsMeta,
}

impl NetworkWeights {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Parameters whose name starts with `prefix.`.
    pub fn subset(&self, prefix: &str) -> Params<f32> {
        let p = format!("{prefix}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Count of trainable scalars, optionally restricted to a name prefix.
    pub fn trainable_count(&self, prefix: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| is_trainable(k))
            .filter(|(k, _)| prefix.is_none_or(|p| k.starts_with(&format!("{p}."))))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }

    pub fn to_precision<T: Scalar>(&self) -> Params<T> {
        cast_params(&self.params)
    }
}

pub fn cast_params<A: Scalar, B: Scalar>(p: &Params<A>) -> Params<B> {
    p.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

/// Bitwise equality of two parameter maps restricted to `prefix`.
pub fn params_bit_equal(a: &Params<f32>, b: &Params<f32>, prefix: &str) -> bool {
    let pa: Vec<_> = a.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
    let pb: Vec<_> = b.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|((ka, va), (kb, vb))| {
            ka == kb
                && va.shape() == vb.shape()
                && va.data().iter().zip(vb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
