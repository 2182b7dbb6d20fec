//! JSON network files.
//!
//! `{"input_dim", "head", "normalization": {"shift", "scale"}, "layers": [{"W", "b"}]}`
//! with row-major weights stored as 64-bit decimals.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cast_vec, Head, Layer, Network, Normalization};
use crate::linalg::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Serialize, Deserialize)]
struct NormalizationFile {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    input_dim: usize,
    head: Head,
    normalization: NormalizationFile,
    layers: Vec<LayerFile>,
}

impl<T: Scalar> Network<T> {
    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            input_dim: self.input_dim,
            head: self.head,
            normalization: NormalizationFile {
                shift: cast_vec(&self.normalization.shift),
                scale: cast_vec(&self.normalization.scale),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.weight.cast::<f64>().to_rows(),
                    b: cast_vec(&l.bias),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.iter().enumerate() {
            let w = Matrix::from_rows(&l.w)
                .ok_or_else(|| Error::InvalidNetwork(format!("layer {i}: ragged weight rows")))?;
            // an empty matrix has no columns to check against the previous layer
            if l.w.is_empty() {
                return Err(Error::InvalidNetwork(format!("layer {i}: empty weight")));
            }
            layers.push(Layer::new(w.cast(), cast_vec(&l.b))?);
        }
        Network::new(
            file.input_dim,
            file.head,
            Normalization {
                shift: cast_vec(&file.normalization.shift),
                scale: cast_vec(&file.normalization.scale),
            },
            layers,
        )
    }
}

pub fn save_network<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, net.to_json())?;
    Ok(())
}

pub fn load_network<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    Network::from_json(&fs::read_to_string(path)?)
}
